"""Langevin chain over theta for a fixed lambda."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import FlatVector, ScalarField, Space, as_array
from .errors import ConfigError, DivergenceError
from .problems import BloProblem

DIVERGENCE_LIMIT = 1e8


@dataclass(frozen=True)
class SgldConfig:
    epsilon: float
    kappa: float = 1.0
    burn_in: int = 50
    samples: int = 50
    seed: int = 0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")
        if not self.kappa >= 0:
            raise ConfigError(f"kappa must be non-negative, got {self.kappa}")
        if self.burn_in < 0 or self.samples < 1:
            raise ConfigError("need burn_in >= 0 and samples >= 1")

    @property
    def length(self) -> int:
        return self.burn_in + self.samples

    @classmethod
    def from_learning_rate(cls, lr: float, temperature: float, **kw) -> "SgldConfig":
        """Step size whose drift equals a gradient step of size `lr` on L_T."""
        return cls(epsilon=2.0 * lr * temperature, **kw)


def check_iterate(theta: np.ndarray, step: int | None = None) -> None:
    if not np.all(np.isfinite(theta)) or np.max(np.abs(theta), initial=0.0) > DIVERGENCE_LIMIT:
        where = "" if step is None else f" at step {step}"
        raise DivergenceError(f"chain diverged{where}: max|theta| = {np.max(np.abs(theta))}")


def langevin_update(problem: BloProblem, logp: ScalarField, lam: np.ndarray, theta: np.ndarray,
                    epsilon: float, kappa: float, z: np.ndarray) -> np.ndarray:
    """Projected step theta + (eps/2) dlogp/dtheta + sqrt(eps) kappa z for a standard normal z."""
    _, _, drift = ad.value_and_grads(logp, lam, theta)
    new = theta + (0.5 * epsilon) * drift + np.sqrt(epsilon) * (kappa * z)
    return problem.project_theta(new)


def draw_step(problem: BloProblem, rng: np.random.Generator) -> tuple[ScalarField, np.ndarray]:
    """Randomness for one step, in a fixed order: inner noise first, then z."""
    logp = problem.log_density(rng)
    return logp, rng.standard_normal(problem.dim_theta)


def sgld_step(problem: BloProblem, lam, theta, epsilon: float, kappa: float,
              rng: np.random.Generator) -> FlatVector:
    if not epsilon > 0:
        raise ConfigError(f"epsilon must be positive, got {epsilon}")
    lam = as_array(lam, Space.LAMBDA, problem.dim_lambda)
    theta = as_array(theta, Space.THETA, problem.dim_theta)
    logp, z = draw_step(problem, rng)
    new = langevin_update(problem, logp, lam, theta, epsilon, kappa, z)
    check_iterate(new)
    return FlatVector(new, Space.THETA)


@dataclass
class ChainTrace:
    """Chain iterates theta^0..theta^(B+M) and the standard normal draws used.

    With keep="pair" only the last two iterates are retained.
    """

    iterates: list[np.ndarray]
    noise: np.ndarray
    burn_in: int
    samples: int
    final: np.ndarray

    @property
    def sample_iterates(self) -> list[np.ndarray]:
        if len(self.iterates) < self.burn_in + self.samples + 1:
            raise ValueError("trace was recorded pairwise; samples were not kept")
        return self.iterates[self.burn_in + 1:]


def run_chain(problem: BloProblem, lam, cfg: SgldConfig, theta0=None,
              rng: np.random.Generator | None = None, keep: str = "all") -> ChainTrace:
    if keep not in ("all", "pair"):
        raise ConfigError("keep must be 'all' or 'pair'")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    lam = as_array(lam, Space.LAMBDA, problem.dim_lambda)
    if theta0 is None:
        theta = problem.draw_theta0(lam, rng)
    else:
        theta = problem.project_theta(as_array(theta0, Space.THETA, problem.dim_theta).copy())
    iterates = [theta]
    noise = np.empty((cfg.length, problem.dim_theta))
    for m in range(cfg.length):
        logp, noise[m] = draw_step(problem, rng)
        theta = langevin_update(problem, logp, lam, theta, cfg.epsilon, cfg.kappa, noise[m])
        check_iterate(theta, m + 1)
        iterates.append(theta)
        if keep == "pair" and len(iterates) > 2:
            iterates.pop(0)
    return ChainTrace(iterates, noise, cfg.burn_in, cfg.samples, theta)
