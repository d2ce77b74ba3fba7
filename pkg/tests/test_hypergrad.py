import warnings

import numpy as np
import pytest

from stochblo import autodiff as ad
from stochblo.autodiff import ScalarField, Space
from stochblo.errors import ConfigError, DivergenceError, InfeasibleError
from stochblo.hypergrad import (AmigoConfig, CgConfig, EsConfig, InnerConfig, NeumannConfig,
                                UnrollConfig, amigo, conjugate_gradient, es_grad, fd_oracle, fmd,
                                fo_probe, g0, gm_step, hpo_sgld_hypergrad, ift_cg, ift_neumann,
                                make_estimator, rmd, rmd_fo)
from stochblo.problems import (BloProblem, IdentityOfLambda, IndependentFixed,
                               make_linear_quadratic, make_noisy_synth1d, make_quadratic_blo,
                               make_synth1d, make_tiny_mlp_l1)
from stochblo.sgld import SgldConfig

from oracles import dense_unroll, rel_err, synth1d_gd_jacobian


def with_outer(problem: BloProblem, fn) -> BloProblem:
    from dataclasses import replace
    return replace(problem, outer=ScalarField(fn, problem.dim_lambda, problem.dim_theta, "f"))


def zero_inner_identity(dim: int) -> BloProblem:
    f = ScalarField(lambda lam, th: 0.5 * ad.dot(th, th) + ad.sum_(lam * th), dim, dim)
    zero = ScalarField(lambda lam, th: 0.0, dim, dim)
    return BloProblem("no-dynamics", f, zero, 1.0, IdentityOfLambda(), tuple(np.zeros(dim)))


@pytest.fixture(scope="module")
def quad():
    return make_quadratic_blo(5, 3, 10.0, seed=3)


# ---- g0 and the single recursion step

def test_g0_examples():
    assert np.array_equal(g0(make_synth1d(), [0.5], [0.3]).values, [0.0])
    p = zero_inner_identity(2)
    p = with_outer(p, lambda lam, th: 0.5 * ad.dot(th, th))
    out = g0(p, [1.0, 2.0], [1.0, 2.0])
    assert out.space is Space.LAMBDA and out.values.tolist() == [1.0, 2.0]
    p = with_outer(p, lambda lam, th: ad.dot(lam, lam))
    assert g0(p, [1.0, 2.0], [1.0, 2.0]).values.tolist() == [0.0, 0.0]


def test_gm_step_without_epsilon_keeps_g(quad):
    g = np.array([0.1, -0.2, 0.3])
    out = gm_step(quad, [0.1, 0.2, 0.3], np.ones(5), np.zeros(5), g, 0.0)
    assert np.array_equal(out.values, g)


def _dense_gm(H, C, t, tau, lam, prev, curr, g, eps, D):
    """Same recursion with A = -H/tau and B = -C/tau formed as matrices."""
    A = -H / tau                 # d2 log p / dtheta2
    B = -C / tau                 # d2 log p / dlam dtheta, rows indexed by lam
    v = curr - t                 # df/dtheta at theta_curr
    f_tt = np.eye(H.shape[0])
    return g + (curr - prev) @ f_tt @ D + 0.5 * eps * (B @ v + v @ A @ D)


def test_gm_step_matches_dense_formula_independent(quad):
    o = quad.oracle
    rng = np.random.default_rng(0)
    for _ in range(5):
        lam, prev, curr, g = (rng.standard_normal(3), rng.standard_normal(5),
                              rng.standard_normal(5), rng.standard_normal(3))
        got = gm_step(quad, lam, prev, curr, g, 0.03).values
        ref = _dense_gm(o.H, o.C, o.t, 1.0, lam, prev, curr, g, 0.03, np.zeros((5, 3)))
        assert rel_err(got, ref) < 1e-10
        # only the v.B term survives when the start does not depend on lam
        assert rel_err(got - g, 0.015 * (-o.C @ (curr - o.t))) < 1e-10


def test_gm_step_matches_dense_formula_identity():
    p = make_quadratic_blo(4, 4, 10.0, seed=5, temperature=0.5).with_init(IdentityOfLambda())
    o = p.oracle
    rng = np.random.default_rng(1)
    for _ in range(5):
        lam, prev, curr, g = rng.standard_normal((4, 4))
        got = gm_step(p, lam, prev, curr, g, 0.02).values
        ref = _dense_gm(o.H, o.C, o.t, 0.5, lam, prev, curr, g, 0.02, np.eye(4))
        assert rel_err(got, ref) < 1e-10


def test_constant_outer_gives_zero_hypergradient():
    p = with_outer(make_synth1d(1e-3), lambda lam, th: 1.5)
    res = hpo_sgld_hypergrad(p, [0.5], SgldConfig(1e-5, 1.0, 10, 10, seed=1))
    assert np.array_equal(res.h.values, [0.0])


def test_hpo_sgld_counters_and_trace():
    p = make_synth1d()
    cfg = SgldConfig.from_learning_rate(0.005, 1e-6, burn_in=7, samples=5)
    res = hpo_sgld_hypergrad(p, [0.5], cfg, record=True)
    assert len(res.g_trace) == 12
    assert res.counters.inner_steps == 12
    assert 1 <= res.counters.peak_vectors <= 6


def test_hpo_sgld_is_reproducible():
    p = make_noisy_synth1d(0)
    cfg = SgldConfig.from_learning_rate(0.005, 1e-2, burn_in=20, samples=20, seed=3)
    a, b = hpo_sgld_hypergrad(p, [0.6], cfg), hpo_sgld_hypergrad(p, [0.6], cfg)
    assert a.h == b.h and np.array_equal(a.theta, b.theta)


def test_exactness_gap_shrinks_with_epsilon():
    p = make_synth1d(temperature=1.0)
    gaps = []
    for eps in (1e-2, 5e-3, 2.5e-3):
        cfg = SgldConfig(eps, 0.0, 99, 1)
        h = hpo_sgld_hypergrad(p, [0.5], cfg, theta0=[0.2]).h[0]
        exact = fmd(p, [0.5], UnrollConfig(InnerConfig(100, eps / 2)), theta0=[0.2]).h[0]
        gaps.append(abs(h - exact))
    assert gaps[0] / gaps[1] >= 2 and gaps[1] / gaps[2] >= 2


@pytest.mark.parametrize("tau", [1e-2, 1e-5])
def test_noisy_hypergradient_points_down_at_high_lambda(tau):
    p = make_noisy_synth1d(0, tau)
    mk = lambda b, m, s: SgldConfig.from_learning_rate(0.005, tau, burn_in=b, samples=m, seed=s)
    reference = hpo_sgld_hypergrad(p, [0.9], mk(500, 3000, 99)).h[0]
    seeds = [hpo_sgld_hypergrad(p, [0.9], mk(50, 50, s)).h[0] for s in range(10)]
    assert reference > 0
    assert np.mean(seeds) > 0


# ---- IFT family

def test_neumann_zero_terms_formula(quad):
    lam = np.array([0.3, -0.1, 0.2])
    cfg = NeumannConfig(alpha=0.5, series=0, inner=InnerConfig(50, 0.5))
    res = ift_neumann(quad, lam, cfg)
    th = res.theta
    expect = (ad.grad_lambda(quad.outer, lam, th).values
              - 0.5 * ad.mixed_vhp(quad.inner_loss, lam, th,
                                   ad.grad_theta(quad.outer, lam, th)).values)
    assert np.allclose(res.h.values, expect, rtol=1e-14, atol=1e-15)


def test_neumann_long_series_matches_closed_form(quad):
    lam = np.array([0.3, -0.1, 0.2])
    res = ift_neumann(quad, lam, NeumannConfig(0.9, 400, InnerConfig(800, 1.0)))
    assert rel_err(res.h.values, quad.oracle.hypergradient(lam)) < 1e-4


def test_neumann_divergence_is_reported(quad):
    with pytest.raises(DivergenceError):
        ift_neumann(quad, [0.1, 0.1, 0.1], NeumannConfig(5.0, 200, InnerConfig(10, 0.5)))


def test_cg_exact_in_dim_iterations(quad):
    rng = np.random.default_rng(0)
    for _ in range(3):
        lam = rng.standard_normal(3)
        res = ift_cg(quad, lam, CgConfig(0.0, 5, InnerConfig(1500, 1.0)))
        assert rel_err(res.h.values, quad.oracle.hypergradient(lam)) < 1e-8


def test_cg_zero_rhs_returns_direct_gradient(quad):
    p = with_outer(quad, lambda lam, th: ad.dot(lam, lam))
    lam = np.array([0.5, -1.0, 2.0])
    res = ift_cg(p, lam, CgConfig(0.01, 10, InnerConfig(5, 0.1)))
    assert np.array_equal(res.h.values, 2 * lam)


def test_cg_breakdown_warns_and_returns_last_iterate():
    with pytest.warns(RuntimeWarning, match="breakdown"):
        x, used, broke = conjugate_gradient(lambda u: -u, np.ones(3), None, 5)
    assert broke and used == 0 and np.array_equal(x, np.zeros(3))


def test_cg_solves_spd_system():
    rng = np.random.default_rng(2)
    M = rng.standard_normal((6, 6))
    A = M @ M.T + 6 * np.eye(6)
    b = rng.standard_normal(6)
    x, used, broke = conjugate_gradient(lambda u: A @ u, b, None, 6)
    assert not broke and np.allclose(A @ x, b, atol=1e-10)


def test_amigo_first_call_equals_cg(quad):
    lam = np.array([0.2, 0.4, -0.3])
    inner = InnerConfig(200, 0.5)
    res, z = amigo(quad, lam, AmigoConfig("cg", 4, inner=inner))
    ref = ift_cg(quad, lam, CgConfig(0.0, 4, inner))
    assert np.array_equal(res.h.values, ref.h.values)
    assert z.shape == (5,)


@pytest.mark.parametrize("mode", ["cg", "sgd"])
def test_amigo_warm_start_needs_fewer_iterations(mode):
    # big enough that CG does not terminate by dimension count alone
    quad = make_quadratic_blo(30, 3, 100.0, seed=3)
    inner = InnerConfig(4000, 1.0)
    cfg = AmigoConfig(mode, 20000, z_lr=0.9, tol=1e-8, inner=inner)
    lam1 = np.array([0.2, 0.4, -0.3])
    lam2 = lam1 + 0.01
    cold1, z = amigo(quad, lam1, cfg)
    warm, _ = amigo(quad, lam2, cfg, warm_state=z)
    cold2, _ = amigo(quad, lam2, cfg)
    assert warm.counters.aux_iterations < cold2.counters.aux_iterations
    assert rel_err(warm.h.values, quad.oracle.hypergradient(lam2)) < 1e-6
    assert cold1.counters.aux_iterations > 0


def test_amigo_sgd_divergence(quad):
    with pytest.raises(DivergenceError):
        amigo(quad, [1.0, 1.0, 1.0], AmigoConfig("sgd", 5000, z_lr=50.0,
                                                 inner=InnerConfig(10, 0.5)))


# ---- unrolled differentiation

def test_rmd_without_unrolling(quad):
    lam = np.array([0.1, 0.2, 0.3])
    res = rmd(quad, lam, UnrollConfig(InnerConfig(0, 0.1)))
    th0 = np.zeros(5)
    assert np.array_equal(res.h.values, ad.grad_lambda(quad.outer, lam, th0).values)
    assert res.counters.stored_iterates == 1
    p = zero_inner_identity(3)
    lam = np.array([0.5, -0.5, 1.0])
    res = rmd(p, lam, UnrollConfig(InnerConfig(0, 0.1)))
    expect = (ad.grad_lambda(p.outer, lam, lam).values + ad.grad_theta(p.outer, lam, lam).values)
    assert np.allclose(res.h.values, expect)


@pytest.mark.parametrize("steps", [0, 1, 10, 57])
def test_rmd_stores_every_iterate(quad, steps):
    res = rmd(quad, [0.1, 0.1, 0.1], UnrollConfig(InnerConfig(steps, 0.5)))
    assert res.counters.stored_iterates == steps + 1


def test_rmd_long_unroll_matches_closed_form(quad):
    lam = np.array([-0.4, 0.1, 0.7])
    res = rmd(quad, lam, UnrollConfig(InnerConfig(1500, 1.0)))
    assert rel_err(res.h.values, quad.oracle.hypergradient(lam)) < 1e-5


def test_fmd_equals_rmd_on_synth1d():
    p = make_synth1d()
    cfg = UnrollConfig(InnerConfig(100, 0.005))
    a = fmd(p, [0.5], cfg, theta0=[0.3]).h[0]
    b = rmd(p, [0.5], cfg, theta0=[0.3]).h[0]
    assert abs(a - b) <= 1e-10


def test_fmd_matches_hand_unroll_on_synth1d():
    p = make_synth1d()
    res, S = fmd(p, [0.6], UnrollConfig(InnerConfig(100, 0.005)), theta0=[0.3],
                 return_jacobian=True)
    theta, s = synth1d_gd_jacobian(0.6, 0.3, 0.005, 100)
    assert res.theta[0] == pytest.approx(theta, abs=1e-14)
    assert S[0, 0] == pytest.approx(s, rel=1e-12)
    expect = 2 * (0.6 - theta) + (-2 * (0.6 - theta) + 2 * (theta - 0.5)) * s
    assert res.h[0] == pytest.approx(expect, rel=1e-12)


def test_fmd_jacobian_matches_dense_recursion(quad):
    o = quad.oracle
    lam = np.array([0.3, -0.6, 0.9])
    res, S = fmd(quad, lam, UnrollConfig(InnerConfig(40, 0.7)), return_jacobian=True)
    theta, S_ref = dense_unroll(o.H, o.C, lam, np.zeros(5), 0.7, 40)
    assert rel_err(S, S_ref) < 1e-10
    assert rel_err(res.theta, theta) < 1e-12


def test_fmd_size_guard():
    p = make_quadratic_blo(20, 10, 10.0)
    with pytest.raises(InfeasibleError):
        fmd(p, np.zeros(10), UnrollConfig(InnerConfig(1, 0.1), max_entries=199))
    with pytest.raises(InfeasibleError):
        fo_probe(p, np.zeros(10), SgldConfig(1e-3), max_entries=199)
    fmd(p, np.zeros(10), UnrollConfig(InnerConfig(1, 0.1), max_entries=200))
    big = make_quadratic_blo(1001, 1000, 10.0, seed=0)
    with pytest.raises(InfeasibleError, match="1001000"):
        fmd(big, np.zeros(1000), UnrollConfig(InnerConfig(1, 0.1)))


def test_rmd_fo_drops_second_order_terms(quad):
    lam = np.array([0.1, -0.2, 0.3])
    res = rmd_fo(quad, lam, UnrollConfig(InnerConfig(30, 0.5)))
    assert np.array_equal(res.h.values, ad.grad_lambda(quad.outer, lam, res.theta).values)
    p = zero_inner_identity(3)
    lam = np.array([0.5, -0.5, 1.0])
    exact = 3 * lam  # d/dlam [0.5|lam|^2 + lam.lam] along theta = lam
    assert np.allclose(rmd_fo(p, lam, UnrollConfig(InnerConfig(20, 0.1))).h.values, exact)


def test_unrolled_mlp_matches_finite_differences():
    # 50 steps keeps every weight on one side of the L1 kink; longer unrolls let some
    # weights oscillate across zero and the response is no longer differentiable.
    p = make_tiny_mlp_l1(0)
    lam = np.array(p.lambda_init)
    th0 = np.array(p.init_policy.theta)
    inner = InnerConfig(50, 0.1)
    a = fmd(p, lam, UnrollConfig(inner), th0).h.values
    b = rmd(p, lam, UnrollConfig(inner), th0).h.values
    ref = fd_oracle(p, lam, 1e-4, inner, th0).values
    assert rel_err(a, ref) < 1e-3
    assert rel_err(b, ref) < 1e-3


# ---- zeroth order

def test_es_linear_expectation():
    c = np.array([1.5, -2.0, 0.5])
    est = es_grad(lambda x: float(c @ x), np.zeros(3), 0.1, 100_000, np.random.default_rng(0))
    assert np.all(np.abs(est.values - c) <= 0.02 * np.abs(c).max())


def test_es_zero_draw_gives_zero():
    est = es_grad(lambda x: 3.0 + float(x.sum()), [0.2, 0.3], 0.01, 1, None, draws=np.zeros((1, 2)))
    assert np.array_equal(est.values, [0.0, 0.0])


def test_es_config_validation():
    with pytest.raises(ConfigError):
        EsConfig(sigma=0.0)
    with pytest.raises(ConfigError):
        es_grad(lambda x: 0.0, [0.0], 0.1, 0, np.random.default_rng(0))


def test_fd_second_order_accuracy(quad):
    lam = np.array([0.2, -0.1, 0.4])
    inner = InnerConfig(1500, 1.0)
    exact = quad.oracle.hypergradient(lam)
    # the quadratic response is exactly quadratic in lam, so use a cubic outer term
    p = with_outer(quad, lambda l, th: 0.5 * ad.dot(th, th) + ad.sum_(l ** 3))
    exact = ift_cg(p, lam, CgConfig(0.0, 5, inner)).h.values
    errs = [np.linalg.norm(fd_oracle(p, lam, d, inner).values - exact) for d in (0.2, 0.1, 0.05)]
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.05)
    assert errs[1] / errs[2] == pytest.approx(4.0, rel=0.05)


def test_fd_agrees_with_cg_on_synth1d():
    p = make_synth1d()
    inner = InnerConfig(5000, 0.05)
    ref = ift_cg(p, [0.5], CgConfig(0.0, 50, inner), theta0=[0.5]).h[0]
    fd = fd_oracle(p, [0.5], 1e-4, inner, [0.5])[0]
    assert abs(fd - ref) < 1e-4


def test_fd_constant_objective_is_zero(quad):
    p = with_outer(quad, lambda lam, th: 2.0)
    assert np.array_equal(fd_oracle(p, np.ones(3), 1e-3, InnerConfig(5, 0.1)).values,
                          np.zeros(3))


# ---- probe

def test_probe_exact_on_linear_quadratic():
    p = make_linear_quadratic(3, 2, seed=1)
    rec = fo_probe(p, [0.3, -0.2], SgldConfig(0.01, 1.0, 20, 20, seed=0))
    assert rec.rel_error.max() <= 1e-9
    assert np.nanmax(rec.cum_error) <= 1e-9


def test_probe_burn_in_flag_flips_once():
    p = make_synth1d(temperature=1.0)
    rec = fo_probe(p, [0.5], SgldConfig(0.005, 0.0, 13, 7), theta0=[0.2])
    assert rec.is_post_burnin.tolist() == [False] * 13 + [True] * 7
    assert rec.steps[np.argmax(rec.is_post_burnin)] == 14
    assert np.all(np.isnan(rec.cum_error[:13])) and np.all(np.isfinite(rec.cum_error[13:]))


def test_probe_error_shrinks_with_epsilon():
    p = make_synth1d(temperature=1.0)
    medians = []
    for eps in (1e-2, 5e-3, 2.5e-3):
        rec = fo_probe(p, [0.5], SgldConfig(eps, 0.0, 50, 50), theta0=[0.2])
        medians.append(np.median(rec.rel_error[1:]))
    assert medians[0] / medians[1] >= 2 and medians[1] / medians[2] >= 2


def test_probe_matches_fmd_hypergradient():
    p = make_synth1d(temperature=1.0)
    rec = fo_probe(p, [0.5], SgldConfig(0.005, 0.0, 99, 1), theta0=[0.2])
    ref = fmd(p, [0.5], UnrollConfig(InnerConfig(100, 0.0025)), theta0=[0.2]).h[0]
    assert rec.h_exact[0] == pytest.approx(ref, rel=1e-10)
    got = hpo_sgld_hypergrad(p, [0.5], SgldConfig(0.005, 0.0, 99, 1), theta0=[0.2]).h[0]
    assert rec.h_recursion[0] == pytest.approx(got, rel=1e-12)


# ---- cost accounting

def _sgld_products(dim_lambda):
    p = make_quadratic_blo(6, dim_lambda, 10.0, seed=0)
    res = hpo_sgld_hypergrad(p, np.zeros(dim_lambda), SgldConfig(1e-3, 1.0, 10, 10))
    return res.counters


def _fmd_products(dim_lambda):
    p = make_quadratic_blo(6, dim_lambda, 10.0, seed=0)
    return fmd(p, np.zeros(dim_lambda), UnrollConfig(InnerConfig(20, 0.5))).counters


def test_per_step_cost_scaling():
    sg = [_sgld_products(d).products for d in (1, 2, 4, 8)]
    fm = [_fmd_products(d).second_order_sweeps for d in (1, 2, 4, 8)]
    assert len(set(sg)) == 1
    assert fm == [20 * d for d in (1, 2, 4, 8)]


def test_sgld_memory_constant_in_chain_length():
    p = make_quadratic_blo(6, 3, 10.0, seed=0)
    peaks = {hpo_sgld_hypergrad(p, np.zeros(3), SgldConfig(1e-3, 1.0, b, m)).counters.peak_vectors
             for b, m in [(0, 1), (10, 10), (200, 300)]}
    assert len(peaks) == 1 and peaks.pop() <= 6


# ---- registry

def test_estimator_registry():
    est = make_estimator("ift-cg", gamma="0", iters="5")
    assert est.params["gamma"] == 0.0 and est.params["iters"] == 5
    with pytest.raises(ConfigError, match="hpo-sgld"):
        make_estimator("foo")
    with pytest.raises(ConfigError, match="valid"):
        make_estimator("rmd", alpha="1")


def test_hpo_estimator_tau_override():
    est = make_estimator("hpo-sgld", tau="0.01")
    p = est.prepare(make_synth1d())
    assert p.temperature == 0.01
    assert est.config(p).epsilon == pytest.approx(2 * 0.005 * 0.01)


def test_estimators_accept_fixed_start():
    p = make_synth1d().with_init(IndependentFixed((0.4,)))
    estimators = [make_estimator("hpo-sgld", burn_in="5", samples="5")]
    estimators += [make_estimator(name, steps="10") for name in
                   ("ift-neumann", "ift-cg", "amigo-cg", "amigo-sgd", "rmd", "rmd-fo", "fmd",
                    "es", "fd-oracle")]
    for est in estimators:
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            res = est(p, [0.5], None, np.random.default_rng(0))
        assert np.isfinite(res.h.values).all()
