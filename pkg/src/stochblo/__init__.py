"""Stochastic bi-level optimisation: Langevin-chain hypergradients and baselines."""

from .autodiff import FlatVector, ScalarField, Space
from .hypergrad import (ESTIMATORS, HypergradResult, amigo, es_grad, fd_oracle, fmd, fo_probe,
                        g0, gm_step, hpo_sgld_hypergrad, ift_cg, ift_neumann, make_estimator, rmd,
                        rmd_fo)
from .outer import OuterConfig, RunTrace, optimize, toy_grid_study
from .problems import (BloProblem, make_noisy_synth1d, make_poly_toy, make_quadratic_blo,
                       make_synth1d, make_tiny_mlp_l1)
from .sgld import SgldConfig, run_chain, sgld_step

__version__ = "0.1.0"
