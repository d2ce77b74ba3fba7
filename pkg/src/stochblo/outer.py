"""Outer gradient descent on lambda and the tabular toy study."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autodiff import Space, as_array
from .errors import ConfigError
from .hypergrad import Estimator, InnerConfig, inner_solve
from .problems import BloProblem, TabularToySpec


@dataclass(frozen=True)
class OuterConfig:
    eta: float = 0.005
    iterations: int = 200
    lambda_init: tuple[float, ...] | None = None
    seeds: tuple[int, ...] = (0,)
    stop_rel_error: float | None = None
    stop_hnorm: float | None = None
    warm_start: bool = True
    timing: bool = False

    def __post_init__(self):
        if not self.eta > 0:
            raise ConfigError(f"outer step eta must be positive, got {self.eta}")
        if self.iterations < 1:
            raise ConfigError(f"need at least one outer iteration, got {self.iterations}")
        if len(self.seeds) < 1:
            raise ConfigError("seed list must not be empty")


@dataclass
class TraceRow:
    k: int
    lam: np.ndarray
    objective: float
    hnorm: float
    theta_norm: float
    wall_ms: float | None
    mem_vecs: int
    inner_steps: int


@dataclass
class RunTrace:
    seed: int
    rows: list[TraceRow] = field(default_factory=list)
    lam_final: np.ndarray | None = None
    theta_final: np.ndarray | None = None
    lam_error: float | None = None
    theta_error: float | None = None
    converged_at: int | None = None
    total_inner_steps: int = 0
    total_aux_iterations: int = 0
    failure: str | None = None

    @property
    def lambdas(self) -> np.ndarray:
        return np.array([r.lam for r in self.rows])


def _distance(a: np.ndarray, b) -> float:
    b = np.asarray(b, dtype=float).reshape(-1)
    return float(np.linalg.norm(a - b)) if a.size > 1 else float(abs(a[0] - b[0]))


def final_theta(problem: BloProblem, lam: np.ndarray, theta_hint: np.ndarray | None,
                inner: InnerConfig | None = None) -> np.ndarray:
    """theta reported for a final lambda: closed form when known, else a noise-free solve."""
    if problem.inner_solution is not None:
        return problem.project_theta(np.asarray(problem.inner_solution(lam), dtype=float))
    inner = inner or InnerConfig(1000, 0.005)
    clean = problem.without_noise()
    return inner_solve(clean, lam, inner, theta_hint, np.random.default_rng(0)).to_array()


def optimize(problem: BloProblem, estimator: Estimator, cfg: OuterConfig,
             seed: int | None = None) -> RunTrace:
    """Projected gradient descent lam <- proj(lam - eta h) for one seed.

    The estimator's final inner iterate seeds the next call when warm_start
    is on. An estimator failure stops the loop and is stored on the trace.
    """
    seed = cfg.seeds[0] if seed is None else int(seed)
    estimator.reset()
    problem = estimator.prepare(problem)
    rng = np.random.default_rng(seed)
    lam0 = problem.lambda_init if cfg.lambda_init is None else cfg.lambda_init
    lam = problem.project_lambda(as_array(lam0, Space.LAMBDA, problem.dim_lambda).copy())
    lam_star = None
    if problem.known_solution is not None:
        lam_star = np.asarray(problem.known_solution[0], dtype=float)
    trace = RunTrace(seed)
    theta = None
    for k in range(1, cfg.iterations + 1):
        t0 = time.perf_counter()
        try:
            res = estimator(problem, lam, theta if cfg.warm_start else None, rng)
        except ArithmeticError as exc:
            trace.failure = f"iteration {k}: {exc}"
            break
        h = res.h.values
        lam = problem.project_lambda(lam - cfg.eta * h)
        theta = res.theta
        wall = (time.perf_counter() - t0) * 1e3 if cfg.timing else None
        trace.total_inner_steps += res.counters.inner_steps
        trace.total_aux_iterations += res.counters.aux_iterations
        trace.rows.append(TraceRow(k, lam.copy(), float(res.objective), float(np.linalg.norm(h)),
                                   float(np.linalg.norm(theta)), wall,
                                   res.counters.peak_vectors, res.counters.inner_steps))
        if cfg.stop_rel_error is not None and lam_star is not None:
            rel = np.linalg.norm(lam - lam_star) / max(np.linalg.norm(lam_star), 1e-300)
            if rel < cfg.stop_rel_error:
                trace.converged_at = k
                break
        if cfg.stop_hnorm is not None and np.linalg.norm(h) < cfg.stop_hnorm:
            trace.converged_at = k
            break
    trace.lam_final = lam
    trace.theta_final = final_theta(problem, lam, theta)
    if problem.known_solution is not None:
        trace.lam_error = _distance(lam, problem.known_solution[0])
        trace.theta_error = _distance(trace.theta_final, problem.known_solution[1])
    return trace


def optimize_seeds(problem: BloProblem, estimator: Estimator, cfg: OuterConfig) -> list[RunTrace]:
    return [optimize(problem, estimator, cfg, s) for s in cfg.seeds]


def estimate_outer_lipschitz(hypergrad: Callable[[np.ndarray], np.ndarray], lam,
                             iterations: int = 50, delta: float = 1e-4, seed: int = 0) -> float:
    """Largest outer-Hessian eigenvalue by power iteration on central differences of h."""
    lam = np.asarray(lam, dtype=float).reshape(-1)
    v = np.random.default_rng(seed).standard_normal(lam.size)
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(iterations):
        hv = (hypergrad(lam + delta * v) - hypergrad(lam - delta * v)) / (2.0 * delta)
        est = float(np.linalg.norm(hv))
        if est == 0.0:
            return 0.0
        v = hv / est
    return est


def loglog_slope(values, start: int | None = None) -> float:
    """Least-squares slope of log(values[k-1]) against log(k) for k >= start.

    `start` defaults to the beginning of the final decade, len(values) // 10.
    """
    values = np.asarray(values, dtype=float)
    n = values.size
    start = max(1, n // 10) if start is None else start
    k = np.arange(start, n + 1)
    v = values[start - 1:]
    keep = v > 0
    if keep.sum() < 2:
        raise ValueError("need at least two positive values to fit a slope")
    return float(np.polyfit(np.log(k[keep]), np.log(v[keep]), 1)[0])


# ---------------------------------------------------------------- toy study

@dataclass
class ToyStudyReport:
    runs: int
    optimal_row: int
    so_pick: int
    so_successes: int
    det_picks: list[int]
    det_successes: int
    det_success_probability: float


def first_argmin(values: np.ndarray) -> int:
    """Index of the minimum, lowest index on ties."""
    return int(np.flatnonzero(values == values.min())[0])


def deterministic_success_probability(table: np.ndarray, target: int) -> float:
    """P(row `target` wins) when each row reveals one uniformly random column.

    Ties go to the lowest row index, so earlier rows must be strictly worse
    and later rows no better.
    """
    table = np.asarray(table, dtype=float)
    n_rows, n_cols = table.shape
    total = 0.0
    for x in table[target]:
        p = 1.0
        for i in range(n_rows):
            if i == target:
                continue
            beats = table[i] > x if i < target else table[i] >= x
            p *= beats.mean()
        total += p / n_cols
    return float(total)


def toy_grid_study(spec: TabularToySpec, runs: int = 20, seed: int = 0) -> ToyStudyReport:
    """Random-column (deterministic BLO) versus row-average (stochastic) selection of lambda."""
    rng = np.random.default_rng(seed)
    table = spec.val_loss
    target = spec.optimal_row
    so_pick = first_argmin(table.mean(axis=1))
    picks = []
    rows = np.arange(table.shape[0])
    for _ in range(runs):
        cols = rng.integers(0, table.shape[1], size=table.shape[0])
        picks.append(first_argmin(table[rows, cols]))
    return ToyStudyReport(
        runs=runs,
        optimal_row=target,
        so_pick=so_pick,
        so_successes=runs if so_pick == target else 0,
        det_picks=picks,
        det_successes=sum(p == target for p in picks),
        det_success_probability=deterministic_success_probability(table, target),
    )
