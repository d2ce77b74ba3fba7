"""Hypergradient estimators: the Langevin g_m recursion and the baselines it is compared to."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import FlatVector, ScalarField, Space, as_array
from .errors import ConfigError, DivergenceError, InfeasibleError
from .problems import BloProblem, IdentityOfLambda, InitJacobianContract
from .sgld import SgldConfig, check_iterate, draw_step, langevin_update

DENSE_GUARD = 1_000_000
SERIES_BLOWUP = 1e6


# ---------------------------------------------------------------- results

@dataclass
class Counters:
    inner_steps: int = 0
    aux_iterations: int = 0
    first_order_sweeps: int = 0
    second_order_sweeps: int = 0
    peak_vectors: int = 0
    stored_iterates: int = 0

    @property
    def products(self) -> int:
        return self.first_order_sweeps + self.second_order_sweeps


@dataclass
class HypergradResult:
    h: FlatVector
    theta: np.ndarray
    objective: float
    counters: Counters = field(default_factory=Counters)
    g_trace: list[float] | None = None
    probe_errors: list[float] | None = None


class _Live:
    """Bookkeeping of vectors an algorithm keeps alive at the same time."""

    def __init__(self):
        self.names: set[str] = set()
        self.peak = 0

    def hold(self, *names: str) -> None:
        self.names.update(names)
        self.peak = max(self.peak, len(self.names))

    def drop(self, *names: str) -> None:
        self.names.difference_update(names)


def _finish(counters: Counters, sweep_counter) -> Counters:
    counters.first_order_sweeps = sweep_counter.first
    counters.second_order_sweeps = sweep_counter.second
    return counters


# ---------------------------------------------------------------- inner solver

@dataclass(frozen=True)
class InnerConfig:
    steps: int = 100
    lr: float = 0.005

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("inner steps must be >= 0")
        if not self.lr > 0:
            raise ConfigError("inner lr must be positive")


def _start(problem: BloProblem, lam: np.ndarray, theta0, rng: np.random.Generator) -> np.ndarray:
    if theta0 is None or isinstance(problem.init_policy, IdentityOfLambda):
        return problem.draw_theta0(lam, rng)
    return problem.project_theta(as_array(theta0, Space.THETA, problem.dim_theta).copy())


def _descend(problem: BloProblem, lam: np.ndarray, theta: np.ndarray, cfg: InnerConfig,
             rng, store: bool = False, on_step: Callable | None = None):
    """Projected gradient descent on L_T; optionally keep iterates and resolved fields."""
    traj = [theta] if store else None
    fields = [] if store else None
    for t in range(cfg.steps):
        fld = problem.resolve_inner(rng)
        _, _, g = ad.value_and_grads(fld, lam, theta)
        new = problem.project_theta(theta - cfg.lr * g)
        check_iterate(new, t + 1)
        if on_step is not None:
            on_step(fld, theta)
        theta = new
        if store:
            traj.append(theta)
            fields.append(fld)
    return theta, traj, fields


def inner_solve(problem: BloProblem, lam, cfg: InnerConfig, theta0=None,
                rng: np.random.Generator | None = None) -> FlatVector:
    """Shared inner solver used by every deterministic estimator."""
    rng = np.random.default_rng(0) if rng is None else rng
    lam = as_array(lam, Space.LAMBDA, problem.dim_lambda)
    theta, _, _ = _descend(problem, lam, _start(problem, lam, theta0, rng), cfg, rng)
    return FlatVector(theta, Space.THETA)


# ---------------------------------------------------------------- Langevin recursion

def g0(problem: BloProblem, lam, theta0) -> FlatVector:
    """Initial value of g: zero for independent starts, df/dtheta contracted otherwise."""
    contract = problem.init_contract()
    if contract.is_zero:
        return FlatVector.zeros(problem.dim_lambda, Space.LAMBDA)
    return contract.left_product(ad.grad_theta(problem.outer, lam, theta0))


def _g_update(problem: BloProblem, contract: InitJacobianContract, logp: ScalarField,
              lam: np.ndarray, theta_prev: np.ndarray, theta_curr: np.ndarray,
              g_prev: np.ndarray, epsilon: float):
    """Returns (g_m, f(theta_m), df/dlam(theta_m), df/dtheta(theta_m))."""
    fval, f_lam, v = ad.value_and_grads(problem.outer, lam, theta_curr)
    Av, vB = ad.hvp_and_mixed(logp, lam, theta_prev, v)
    g = g_prev + (0.5 * epsilon) * (vB + contract.left_product_array(Av))
    if not contract.is_zero:
        step = theta_curr - theta_prev
        g = g + contract.left_product_array(
            ad.hvp_theta(problem.outer, lam, theta_prev, step).values)
    return g, fval, f_lam, v


def gm_step(problem: BloProblem, lam, theta_prev, theta_curr, g_prev, epsilon: float,
            logp: ScalarField | None = None) -> FlatVector:
    """One step of the first-order g recursion.

    `logp` is the log-density field used for the chain step from theta_prev;
    it defaults to the noise-free one.
    """
    lam = as_array(lam, Space.LAMBDA, problem.dim_lambda)
    theta_prev = as_array(theta_prev, Space.THETA, problem.dim_theta)
    theta_curr = as_array(theta_curr, Space.THETA, problem.dim_theta)
    g_prev = as_array(g_prev, Space.LAMBDA, problem.dim_lambda)
    logp = problem.log_density(None) if logp is None else logp
    g, *_ = _g_update(problem, problem.init_contract(), logp, lam, theta_prev, theta_curr,
                      g_prev, epsilon)
    return FlatVector(g, Space.LAMBDA)


def hpo_sgld_hypergrad(problem: BloProblem, lam, cfg: SgldConfig, theta0=None,
                       rng: np.random.Generator | None = None,
                       record: bool = False) -> HypergradResult:
    """Monte-Carlo hypergradient of E_p(theta|lam)[f] along one Langevin chain."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    lam = as_array(lam, Space.LAMBDA, problem.dim_lambda)
    contract = problem.init_contract()
    live = _Live()
    counters = Counters()
    g_trace = [] if record else None
    with ad.counting() as sweeps:
        theta = _start(problem, lam, theta0, rng)
        g = g0(problem, lam, theta).to_array()
        h = np.zeros(problem.dim_lambda)
        objective = 0.0
        live.hold("theta", "g", "h")
        for m in range(1, cfg.length + 1):
            logp, z = draw_step(problem, rng)
            theta_prev = theta
            theta = langevin_update(problem, logp, lam, theta_prev, cfg.epsilon, cfg.kappa, z)
            check_iterate(theta, m)
            live.hold("theta_prev", "z", "v")
            g, fval, f_lam, _ = _g_update(problem, contract, logp, lam, theta_prev, theta, g,
                                          cfg.epsilon)
            live.drop("theta_prev", "z", "v")
            if m > cfg.burn_in:
                h += (f_lam + g) / cfg.samples
                objective += fval / cfg.samples
            if record:
                g_trace.append(float(np.linalg.norm(g)))
        counters.inner_steps = cfg.length
    counters.peak_vectors = live.peak
    return HypergradResult(FlatVector(h, Space.LAMBDA), theta, objective,
                           _finish(counters, sweeps), g_trace)


# ---------------------------------------------------------------- IFT family

@dataclass(frozen=True)
class NeumannConfig:
    alpha: float = 0.99
    series: int = 10
    inner: InnerConfig = InnerConfig()


@dataclass(frozen=True)
class CgConfig:
    gamma: float = 0.01
    iterations: int = 10
    inner: InnerConfig = InnerConfig()

    def __post_init__(self):
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")


@dataclass(frozen=True)
class AmigoConfig:
    mode: str = "cg"
    iterations: int = 10
    z_lr: float = 0.005
    tol: float = 0.0
    inner: InnerConfig = InnerConfig()

    def __post_init__(self):
        if self.mode not in ("sgd", "cg"):
            raise ConfigError("amigo mode must be 'sgd' or 'cg'")


def _ift_prologue(problem, lam, inner_cfg, theta0, rng, counters):
    lam = as_array(lam, Space.LAMBDA, problem.dim_lambda)
    theta, _, _ = _descend(problem, lam, _start(problem, lam, theta0, rng), inner_cfg, rng)
    counters.inner_steps = inner_cfg.steps
    fval, f_lam, v = ad.value_and_grads(problem.outer, lam, theta)
    return lam, theta, fval, f_lam, v


def _hvp(problem, lam, theta, rng):
    def matvec(x):
        return ad.hvp_and_mixed(problem.resolve_inner(rng), lam, theta, x)[0]
    return matvec


def _assemble(problem, lam, theta, f_lam, x, rng, scale=1.0) -> np.ndarray:
    """df/dlam - scale * x . d2L_T/dtheta dlam."""
    _, mixed = ad.hvp_and_mixed(problem.resolve_inner(rng), lam, theta, x)
    return f_lam - scale * mixed


def ift_neumann(problem: BloProblem, lam, cfg: NeumannConfig, theta0=None,
                rng: np.random.Generator | None = None) -> HypergradResult:
    rng = np.random.default_rng(0) if rng is None else rng
    counters = Counters()
    with ad.counting() as sweeps:
        lam, theta, fval, f_lam, v = _ift_prologue(problem, lam, cfg.inner, theta0, rng, counters)
        matvec = _hvp(problem, lam, theta, rng)
        base = np.linalg.norm(v)
        p, vk = v.copy(), v
        for k in range(cfg.series):
            vk = vk - cfg.alpha * matvec(vk)
            if np.linalg.norm(vk) > SERIES_BLOWUP * base:
                raise DivergenceError(f"Neumann series diverged at term {k + 1}")
            p = p + vk
        counters.aux_iterations = cfg.series
        h = _assemble(problem, lam, theta, f_lam, p, rng, cfg.alpha)
    return HypergradResult(FlatVector(h, Space.LAMBDA), theta, fval, _finish(counters, sweeps))


def conjugate_gradient(matvec: Callable[[np.ndarray], np.ndarray], b: np.ndarray,
                       x0: np.ndarray | None = None, iterations: int = 10,
                       tol: float = 0.0) -> tuple[np.ndarray, int, bool]:
    """Plain CG. Returns (x, iterations used, breakdown flag)."""
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    r = b - matvec(x) if x0 is not None else b.copy()
    p = r.copy()
    rs = float(r @ r)
    for i in range(iterations):
        if np.sqrt(rs) <= tol:
            return x, i, False
        Ap = matvec(p)
        curv = float(p @ Ap)
        if curv <= 0.0:
            warnings.warn(f"CG breakdown at iteration {i}: non-positive curvature {curv:.3e}",
                          RuntimeWarning, stacklevel=2)
            return x, i, True
        a = rs / curv
        x = x + a * p
        r = r - a * Ap
        rs_new = float(r @ r)
        p = r + (rs_new / rs) * p
        rs = rs_new
    return x, iterations, False


def ift_cg(problem: BloProblem, lam, cfg: CgConfig, theta0=None,
           rng: np.random.Generator | None = None) -> HypergradResult:
    rng = np.random.default_rng(0) if rng is None else rng
    counters = Counters()
    with ad.counting() as sweeps:
        lam, theta, fval, f_lam, v = _ift_prologue(problem, lam, cfg.inner, theta0, rng, counters)
        hv = _hvp(problem, lam, theta, rng)
        x, used, _ = conjugate_gradient(lambda u: hv(u) + cfg.gamma * u, v, None, cfg.iterations)
        counters.aux_iterations = used
        h = _assemble(problem, lam, theta, f_lam, x, rng)
    return HypergradResult(FlatVector(h, Space.LAMBDA), theta, fval, _finish(counters, sweeps))


def amigo(problem: BloProblem, lam, cfg: AmigoConfig, warm_state=None, theta0=None,
          rng: np.random.Generator | None = None) -> tuple[HypergradResult, np.ndarray]:
    """IFT hypergradient whose linear system is solved from the previous call's z."""
    rng = np.random.default_rng(0) if rng is None else rng
    counters = Counters()
    with ad.counting() as sweeps:
        lam, theta, fval, f_lam, v = _ift_prologue(problem, lam, cfg.inner, theta0, rng, counters)
        hv = _hvp(problem, lam, theta, rng)
        z = np.zeros(problem.dim_theta) if warm_state is None else \
            as_array(warm_state, Space.THETA, problem.dim_theta).copy()
        stop = cfg.tol * np.linalg.norm(v)
        if cfg.mode == "cg":
            z, used, _ = conjugate_gradient(hv, v, z, cfg.iterations, stop)
        else:
            used = 0
            start = max(np.linalg.norm(z), np.linalg.norm(v))
            for used in range(cfg.iterations + 1):
                if used == cfg.iterations:
                    break
                r = hv(z) - v
                if np.linalg.norm(r) <= stop:
                    break
                z = z - cfg.z_lr * r
                if not np.all(np.isfinite(z)) or np.linalg.norm(z) > SERIES_BLOWUP * max(start, 1e-300):
                    raise DivergenceError(f"auxiliary iterate diverged at step {used + 1}")
        counters.aux_iterations = used
        h = _assemble(problem, lam, theta, f_lam, z, rng)
    return (HypergradResult(FlatVector(h, Space.LAMBDA), theta, fval, _finish(counters, sweeps)),
            z)


# ---------------------------------------------------------------- unrolled differentiation

@dataclass(frozen=True)
class UnrollConfig:
    inner: InnerConfig = InnerConfig()
    max_entries: int = DENSE_GUARD


def rmd(problem: BloProblem, lam, cfg: UnrollConfig, theta0=None,
        rng: np.random.Generator | None = None) -> HypergradResult:
    """Reverse-mode differentiation through stored gradient-descent iterates."""
    rng = np.random.default_rng(0) if rng is None else rng
    lam = as_array(lam, Space.LAMBDA, problem.dim_lambda)
    gamma = cfg.inner.lr
    counters = Counters()
    with ad.counting() as sweeps:
        start = _start(problem, lam, theta0, rng)
        theta, traj, fields = _descend(problem, lam, start, cfg.inner, rng, store=True)
        counters.inner_steps = cfg.inner.steps
        counters.stored_iterates = len(traj)
        fval, f_lam, alpha = ad.value_and_grads(problem.outer, lam, theta)
        h_acc = np.zeros(problem.dim_lambda)
        for t in range(cfg.inner.steps, 0, -1):
            Ha, aB = ad.hvp_and_mixed(fields[t - 1], lam, traj[t - 1], alpha)
            h_acc -= gamma * aB
            alpha = alpha - gamma * Ha
            if not np.all(np.isfinite(alpha)):
                raise DivergenceError(f"non-finite adjoint at step {t}")
        h = f_lam + h_acc + problem.init_contract().left_product_array(alpha)
    counters.peak_vectors = counters.stored_iterates + 2
    return HypergradResult(FlatVector(h, Space.LAMBDA), theta, fval, _finish(counters, sweeps))


def rmd_fo(problem: BloProblem, lam, cfg: UnrollConfig, theta0=None,
           rng: np.random.Generator | None = None) -> HypergradResult:
    """Unrolled differentiation with every second-order term dropped."""
    rng = np.random.default_rng(0) if rng is None else rng
    lam = as_array(lam, Space.LAMBDA, problem.dim_lambda)
    counters = Counters()
    with ad.counting() as sweeps:
        theta, _, _ = _descend(problem, lam, _start(problem, lam, theta0, rng), cfg.inner, rng)
        counters.inner_steps = cfg.inner.steps
        fval, f_lam, v = ad.value_and_grads(problem.outer, lam, theta)
        h = f_lam + problem.init_contract().left_product_array(v)
    counters.peak_vectors = 2
    return HypergradResult(FlatVector(h, Space.LAMBDA), theta, fval, _finish(counters, sweeps))


def _guard(problem: BloProblem, limit: int) -> None:
    size = problem.dim_theta * problem.dim_lambda
    if size > limit:
        raise InfeasibleError(
            f"dense Jacobian needs {size} entries ({problem.dim_theta} x {problem.dim_lambda}),"
            f" above the guard of {limit}")


def jacobian_columns(fld: ScalarField, lam: np.ndarray, theta: np.ndarray,
                     S: np.ndarray) -> np.ndarray:
    """Columns H S[:, j] + d2phi/dtheta dlam_j, one forward-over-reverse sweep each."""
    out = np.empty_like(S)
    eye = np.eye(lam.size)
    for j in range(lam.size):
        out[:, j] = ad.grad_jvp(fld, lam, theta, eye[j], S[:, j]).dgrad_theta
    return out


def fmd(problem: BloProblem, lam, cfg: UnrollConfig, theta0=None,
        rng: np.random.Generator | None = None, return_jacobian: bool = False):
    """Forward-mode differentiation carrying the dense d theta_t / d lam."""
    _guard(problem, cfg.max_entries)
    rng = np.random.default_rng(0) if rng is None else rng
    lam = as_array(lam, Space.LAMBDA, problem.dim_lambda)
    gamma = cfg.inner.lr
    S = problem.init_contract().dense()
    counters = Counters()

    def advance(fld, theta_prev):
        nonlocal S
        S = S - gamma * jacobian_columns(fld, lam, theta_prev, S)

    with ad.counting() as sweeps:
        start = _start(problem, lam, theta0, rng)
        theta, _, _ = _descend(problem, lam, start, cfg.inner, rng, on_step=advance)
        counters.inner_steps = cfg.inner.steps
        fval, f_lam, v = ad.value_and_grads(problem.outer, lam, theta)
        h = f_lam + v @ S
    counters.peak_vectors = 3 + problem.dim_lambda
    result = HypergradResult(FlatVector(h, Space.LAMBDA), theta, fval, _finish(counters, sweeps))
    return (result, S) if return_jacobian else result


# ---------------------------------------------------------------- zeroth-order

@dataclass(frozen=True)
class EsConfig:
    sigma: float = 0.001
    samples: int = 100
    inner: InnerConfig = InnerConfig()

    def __post_init__(self):
        if not self.sigma > 0 or self.samples < 1:
            raise ConfigError("need sigma > 0 and samples >= 1")


def es_grad(objective: Callable[[np.ndarray], float], lam, sigma: float, n: int,
            rng: np.random.Generator, draws: np.ndarray | None = None) -> FlatVector:
    """(1/sigma) E[z f(lam + sigma z)] estimated with n standard normal draws."""
    if not sigma > 0 or n < 1:
        raise ConfigError("need sigma > 0 and n >= 1")
    lam = as_array(lam, Space.LAMBDA)
    z = rng.standard_normal((n, lam.size)) if draws is None else np.asarray(draws, dtype=float)
    vals = np.array([objective(lam + sigma * zi) for zi in z])
    return FlatVector((vals[:, None] * z).mean(axis=0) / sigma, Space.LAMBDA)


def response_objective(problem: BloProblem, inner: InnerConfig, theta_start: np.ndarray,
                       rng_seed: int | None = None) -> Callable[[np.ndarray], float]:
    """lam -> L_V(lam, theta(lam)) using the closed-form inner optimum when one exists."""
    def objective(lam: np.ndarray) -> float:
        lam = problem.project_lambda(np.asarray(lam, dtype=float))
        if problem.inner_solution is not None:
            theta = problem.project_theta(np.asarray(problem.inner_solution(lam), dtype=float))
        else:
            rng = np.random.default_rng(rng_seed)
            theta, _, _ = _descend(problem, lam, theta_start.copy(), inner, rng)
        return ad.evaluate(problem.outer, lam, theta)
    return objective


def es_hypergrad(problem: BloProblem, lam, cfg: EsConfig, theta0=None,
                 rng: np.random.Generator | None = None) -> HypergradResult:
    rng = np.random.default_rng(0) if rng is None else rng
    lam = as_array(lam, Space.LAMBDA, problem.dim_lambda)
    counters = Counters()
    with ad.counting() as sweeps:
        theta, _, _ = _descend(problem, lam, _start(problem, lam, theta0, rng), cfg.inner, rng)
        counters.inner_steps = cfg.inner.steps
        objective = response_objective(problem, cfg.inner, theta, int(rng.integers(2 ** 31)))
        h = es_grad(objective, lam, cfg.sigma, cfg.samples, rng)
        fval = ad.evaluate(problem.outer, lam, theta)
    return HypergradResult(h, theta, fval, _finish(counters, sweeps))


@dataclass(frozen=True)
class FdConfig:
    delta: float = 1e-4
    inner: InnerConfig = InnerConfig()
    seed: int = 0

    def __post_init__(self):
        if not self.delta > 0:
            raise ConfigError("delta must be positive")


def fd_oracle(problem: BloProblem, lam, delta: float, inner_cfg: InnerConfig, theta0=None,
              seed: int = 0) -> FlatVector:
    """Central differences of lam -> L_V(lam, theta_hat(lam)) with common random numbers."""
    if not delta > 0:
        raise ConfigError("delta must be positive")
    lam = as_array(lam, Space.LAMBDA, problem.dim_lambda)
    start_rng = np.random.default_rng(seed)
    start = _start(problem, lam, theta0, start_rng)

    def response(l: np.ndarray) -> float:
        rng = np.random.default_rng(seed + 1)
        st = problem.draw_theta0(l, rng) if isinstance(problem.init_policy, IdentityOfLambda) \
            else start.copy()
        theta, _, _ = _descend(problem, l, st, inner_cfg, rng)
        return ad.evaluate(problem.outer, l, theta)

    grad = np.empty(problem.dim_lambda)
    for j in range(problem.dim_lambda):
        e = np.zeros(problem.dim_lambda)
        e[j] = delta
        grad[j] = (response(lam + e) - response(lam - e)) / (2.0 * delta)
    return FlatVector(grad, Space.LAMBDA)


def fd_hypergrad(problem: BloProblem, lam, cfg: FdConfig, theta0=None,
                 rng: np.random.Generator | None = None) -> HypergradResult:
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    lam = as_array(lam, Space.LAMBDA, problem.dim_lambda)
    counters = Counters()
    with ad.counting() as sweeps:
        start = _start(problem, lam, theta0, rng)
        h = fd_oracle(problem, lam, cfg.delta, cfg.inner, start, int(rng.integers(2 ** 31)))
        theta, _, _ = _descend(problem, lam, start, cfg.inner, rng)
        counters.inner_steps = cfg.inner.steps * (2 * problem.dim_lambda + 1)
        fval = ad.evaluate(problem.outer, lam, theta)
    return HypergradResult(h, theta, fval, _finish(counters, sweeps))


# ---------------------------------------------------------------- first-order probe

@dataclass
class ProbeRecord:
    """Per-step comparison of the g recursion against dense Jacobian tracking."""

    rel_error: np.ndarray
    cum_error: np.ndarray
    is_post_burnin: np.ndarray
    h_recursion: np.ndarray
    h_exact: np.ndarray

    @property
    def steps(self) -> np.ndarray:
        return np.arange(1, self.rel_error.size + 1)

    @property
    def pre_burnin_max(self) -> float:
        pre = self.rel_error[~self.is_post_burnin]
        return float(pre.max()) if pre.size else 0.0

    @property
    def post_burnin_cum_max(self) -> float:
        post = self.cum_error[self.is_post_burnin]
        return float(post.max()) if post.size else 0.0


def _rel(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), 1e-12))


def fo_probe(problem: BloProblem, lam, cfg: SgldConfig, theta0=None,
             rng: np.random.Generator | None = None,
             max_entries: int = DENSE_GUARD) -> ProbeRecord:
    """Runs the chain once, tracking g_m and the exact S_m = d theta_m / d lam side by side.

    Step m compares df/dtheta(theta_m) . S_{m-1} with the recursion's stand-in
    g_{m-1} + (theta_m - theta_{m-1}) . d2f/dtheta2 . S_0. After burn-in it also
    compares the running sample averages of df/dlam + g_m and df/dlam + df/dtheta . S_m.
    """
    _guard(problem, max_entries)
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    lam = as_array(lam, Space.LAMBDA, problem.dim_lambda)
    contract = problem.init_contract()
    theta = _start(problem, lam, theta0, rng)
    S = contract.dense()
    g = g0(problem, lam, theta).to_array()
    h_rec = np.zeros(problem.dim_lambda)
    h_ex = np.zeros(problem.dim_lambda)
    rel, cum, post = [], [], []
    for m in range(1, cfg.length + 1):
        logp, z = draw_step(problem, rng)
        theta_prev = theta
        theta = langevin_update(problem, logp, lam, theta_prev, cfg.epsilon, cfg.kappa, z)
        check_iterate(theta, m)
        _, _, v = ad.value_and_grads(problem.outer, lam, theta)
        approx = g.copy()
        if not contract.is_zero:
            approx += contract.left_product_array(
                ad.hvp_theta(problem.outer, lam, theta_prev, theta - theta_prev).values)
        rel.append(_rel(v @ S, approx))
        S = S + (0.5 * cfg.epsilon) * jacobian_columns(logp, lam, theta_prev, S)
        g, _, f_lam, v = _g_update(problem, contract, logp, lam, theta_prev, theta, g, cfg.epsilon)
        after = m > cfg.burn_in
        post.append(after)
        if after:
            k = m - cfg.burn_in
            h_rec += (f_lam + g - h_rec) / k
            h_ex += (f_lam + v @ S - h_ex) / k
            cum.append(_rel(h_ex, h_rec))
        else:
            cum.append(np.nan)
    return ProbeRecord(np.array(rel), np.array(cum), np.array(post), h_rec, h_ex)


# ---------------------------------------------------------------- registry

class Estimator:
    """A named hypergradient method bound to its settings.

    Instances may carry state between calls (AmIGO's z); call reset() before
    reusing one for a new run.
    """

    name = "base"
    keys: dict[str, Callable] = {}
    defaults: dict = {}

    def __init__(self, **params):
        unknown = set(params) - set(self.keys)
        if unknown:
            raise ConfigError(f"unknown keys {sorted(unknown)} for {self.name}; "
                              f"valid: {sorted(self.keys)}")
        merged = dict(self.defaults)
        merged.update({k: self.keys[k](v) for k, v in params.items()})
        self.params = merged
        self.reset()

    def reset(self) -> None:
        pass

    def prepare(self, problem: BloProblem) -> BloProblem:
        return problem

    def options(self) -> str:
        return " ".join(f"{k}={self.params[k]}" for k in sorted(self.params))

    def _inner(self) -> InnerConfig:
        return InnerConfig(int(self.params["steps"]), float(self.params["lr"]))

    def __call__(self, problem: BloProblem, lam, theta0, rng) -> HypergradResult:
        raise NotImplementedError


_INNER_KEYS = {"steps": int, "lr": float}
_INNER_DEFAULTS = {"steps": 100, "lr": 0.005}


class HpoSgld(Estimator):
    name = "hpo-sgld"
    keys = {"lr": float, "eps": float, "kappa": float, "burn_in": int, "samples": int,
            "tau": float}
    defaults = {"lr": 0.005, "kappa": 1.0, "burn_in": 50, "samples": 50}

    def prepare(self, problem):
        tau = self.params.get("tau")
        return problem if tau is None else problem.with_temperature(tau)

    def config(self, problem: BloProblem) -> SgldConfig:
        eps = self.params.get("eps")
        if eps is None:
            eps = 2.0 * self.params["lr"] * problem.temperature
        return SgldConfig(eps, self.params["kappa"], self.params["burn_in"],
                          self.params["samples"])

    def __call__(self, problem, lam, theta0, rng):
        return hpo_sgld_hypergrad(problem, lam, self.config(problem), theta0, rng)


class IftNeumann(Estimator):
    name = "ift-neumann"
    keys = {"alpha": float, "series": int, **_INNER_KEYS}
    defaults = {"alpha": 0.99, "series": 10, **_INNER_DEFAULTS}

    def __call__(self, problem, lam, theta0, rng):
        cfg = NeumannConfig(self.params["alpha"], self.params["series"], self._inner())
        return ift_neumann(problem, lam, cfg, theta0, rng)


class IftCg(Estimator):
    name = "ift-cg"
    keys = {"gamma": float, "iters": int, **_INNER_KEYS}
    defaults = {"gamma": 0.01, "iters": 10, **_INNER_DEFAULTS}

    def __call__(self, problem, lam, theta0, rng):
        cfg = CgConfig(self.params["gamma"], self.params["iters"], self._inner())
        return ift_cg(problem, lam, cfg, theta0, rng)


class Amigo(Estimator):
    mode = "cg"
    keys = {"iters": int, "z_lr": float, "tol": float, **_INNER_KEYS}
    defaults = {"iters": 10, "tol": 0.0, **_INNER_DEFAULTS}

    def reset(self):
        self.state = None

    def __call__(self, problem, lam, theta0, rng):
        z_lr = self.params.get("z_lr", self.params["lr"])
        cfg = AmigoConfig(self.mode, self.params["iters"], z_lr, self.params["tol"],
                          self._inner())
        result, self.state = amigo(problem, lam, cfg, self.state, theta0, rng)
        return result


class AmigoCg(Amigo):
    name, mode = "amigo-cg", "cg"


class AmigoSgd(Amigo):
    name, mode = "amigo-sgd", "sgd"


class Rmd(Estimator):
    name = "rmd"
    keys = dict(_INNER_KEYS)
    defaults = dict(_INNER_DEFAULTS)
    method = staticmethod(rmd)

    def __call__(self, problem, lam, theta0, rng):
        return self.method(problem, lam, UnrollConfig(self._inner()), theta0, rng)


class RmdFo(Rmd):
    name = "rmd-fo"
    method = staticmethod(rmd_fo)


class Fmd(Rmd):
    name = "fmd"
    keys = {**_INNER_KEYS, "max_entries": int}
    defaults = {**_INNER_DEFAULTS, "max_entries": DENSE_GUARD}

    def __call__(self, problem, lam, theta0, rng):
        cfg = UnrollConfig(self._inner(), self.params["max_entries"])
        return fmd(problem, lam, cfg, theta0, rng)


class Es(Estimator):
    name = "es"
    keys = {"sigma": float, "samples": int, **_INNER_KEYS}
    defaults = {"sigma": 0.001, "samples": 100, **_INNER_DEFAULTS}

    def __call__(self, problem, lam, theta0, rng):
        cfg = EsConfig(self.params["sigma"], self.params["samples"], self._inner())
        return es_hypergrad(problem, lam, cfg, theta0, rng)


class FdOracle(Estimator):
    name = "fd-oracle"
    keys = {"delta": float, **_INNER_KEYS}
    defaults = {"delta": 1e-4, **_INNER_DEFAULTS}

    def __call__(self, problem, lam, theta0, rng):
        return fd_hypergrad(problem, lam, FdConfig(self.params["delta"], self._inner()),
                            theta0, rng)


ESTIMATORS: dict[str, type[Estimator]] = {
    cls.name: cls for cls in (HpoSgld, IftNeumann, IftCg, AmigoSgd, AmigoCg, Rmd, RmdFo, Fmd,
                              Es, FdOracle)
}


def make_estimator(name: str, **params) -> Estimator:
    if name not in ESTIMATORS:
        raise ConfigError(f"unknown estimator {name!r}; valid: {', '.join(ESTIMATORS)}")
    return ESTIMATORS[name](**params)

