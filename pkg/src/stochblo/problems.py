"""Bi-level problem definitions and the concrete desk-scale instances."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import FlatVector, ScalarField, Space, as_array
from .errors import ConfigError, DimensionError

Box = tuple[float, float]


# ---------------------------------------------------------------- init policies

@dataclass(frozen=True)
class InitJacobianContract:
    """Left products v^T (d theta0 / d lam) for the chain's starting point."""

    kind: str  # "zero" or "identity"
    dim_theta: int
    dim_lambda: int

    @property
    def is_zero(self) -> bool:
        return self.kind == "zero"

    def left_product_array(self, v: np.ndarray) -> np.ndarray:
        if self.kind == "zero":
            return np.zeros(self.dim_lambda)
        return np.array(v, dtype=float)

    def left_product(self, v) -> FlatVector:
        v = as_array(v, Space.THETA, self.dim_theta)
        return FlatVector(self.left_product_array(v), Space.LAMBDA)

    def dense(self) -> np.ndarray:
        if self.kind == "zero":
            return np.zeros((self.dim_theta, self.dim_lambda))
        return np.eye(self.dim_theta)


@dataclass(frozen=True)
class IndependentFixed:
    theta: tuple[float, ...]

    def draw(self, lam: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return np.array(self.theta, dtype=float)


@dataclass(frozen=True)
class IndependentRandom:
    """Uniform draw from a box, from a dedicated seed or from the caller's stream."""

    low: float
    high: float
    seed: int | None = None

    def draw(self, lam: np.ndarray, rng: np.random.Generator, dim: int = 1) -> np.ndarray:
        src = np.random.default_rng(self.seed) if self.seed is not None else rng
        return src.uniform(self.low, self.high, size=dim)


@dataclass(frozen=True)
class IdentityOfLambda:
    def draw(self, lam: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return np.array(lam, dtype=float)


InitPolicy = IndependentFixed | IndependentRandom | IdentityOfLambda


# ---------------------------------------------------------------- problem

@dataclass(frozen=True)
class BloProblem:
    name: str
    outer: ScalarField
    inner_loss: ScalarField
    temperature: float
    init_policy: InitPolicy
    lambda_init: tuple[float, ...]
    noise_hook: Callable[[np.random.Generator], ScalarField] | None = None
    theta_box: Box | None = None
    lambda_box: Box | None = None
    known_solution: tuple[tuple[float, ...], tuple[float, ...]] | None = None
    inner_solution: Callable[[np.ndarray], np.ndarray] | None = None
    oracle: object | None = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.outer.dim_theta != self.inner_loss.dim_theta or \
                self.outer.dim_lambda != self.inner_loss.dim_lambda:
            raise DimensionError("outer and inner fields disagree on dimensions")
        if isinstance(self.init_policy, IdentityOfLambda) and self.dim_theta != self.dim_lambda:
            raise DimensionError("identity initialisation needs dim(theta) == dim(lambda)")
        if len(self.lambda_init) != self.dim_lambda:
            raise DimensionError("lambda_init has the wrong size")

    @property
    def dim_theta(self) -> int:
        return self.inner_loss.dim_theta

    @property
    def dim_lambda(self) -> int:
        return self.inner_loss.dim_lambda

    @property
    def energy(self) -> ScalarField:
        """E = L_T / tau."""
        return self.inner_loss.scaled(1.0 / self.temperature, f"{self.inner_loss.name}/tau")

    def resolve_inner(self, rng: np.random.Generator | None) -> ScalarField:
        """Inner loss with any stochasticity frozen for one derivative call."""
        if self.noise_hook is None or rng is None:
            return self.inner_loss
        return self.noise_hook(rng)

    def log_density(self, rng: np.random.Generator | None) -> ScalarField:
        """log p(theta | lam) up to the lambda-dependent normaliser, i.e. -E."""
        return self.resolve_inner(rng).scaled(-1.0 / self.temperature, "logp")

    def noise_stream(self) -> np.random.Generator:
        """Default generator for the noise hook, seeded from the problem's own seed."""
        return np.random.default_rng(self.info.get("seed", 0))

    def without_noise(self) -> "BloProblem":
        return _replace(self, noise_hook=None)

    def with_temperature(self, tau: float) -> "BloProblem":
        return _replace(self, temperature=float(tau))

    def with_init(self, policy: InitPolicy) -> "BloProblem":
        return _replace(self, init_policy=policy)

    def init_contract(self) -> InitJacobianContract:
        kind = "identity" if isinstance(self.init_policy, IdentityOfLambda) else "zero"
        return InitJacobianContract(kind, self.dim_theta, self.dim_lambda)

    def draw_theta0(self, lam: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        pol = self.init_policy
        if isinstance(pol, IndependentRandom):
            theta = pol.draw(lam, rng, self.dim_theta)
        else:
            theta = pol.draw(lam, rng)
        if theta.size != self.dim_theta:
            raise DimensionError("initial theta has the wrong size")
        return self.project_theta(theta)

    def project_theta(self, theta: np.ndarray) -> np.ndarray:
        if self.theta_box is None:
            return theta
        return np.clip(theta, *self.theta_box)

    def project_lambda(self, lam: np.ndarray) -> np.ndarray:
        if self.lambda_box is None:
            return lam
        return np.clip(lam, *self.lambda_box)


def _replace(problem: BloProblem, **changes) -> BloProblem:
    return replace(problem, **changes)


def inner_logp_grad(problem: BloProblem, lam, theta, rng=None) -> FlatVector:
    """-(1/tau) dL_T/dtheta with the noise hook resolved from `rng`."""
    g = ad.grad_theta(problem.resolve_inner(rng), lam, theta)
    return FlatVector(g.values * (-1.0 / problem.temperature), Space.THETA)


# ---------------------------------------------------------------- synthetic 1-D

SYNTH1D_SOLUTION = ((0.7487,), (0.6629,))


def _synth1d_outer(lam, theta):
    return ad.sum_((lam - theta) ** 2 + (theta - 0.5) ** 2)


def _synth1d_inner(c3: float = 1.0 / 3.0, c1: float = 0.0):
    def fn(lam, theta):
        return ad.sum_(c3 * theta ** 3 - ((1.0 + c1) - lam ** 2) * theta)
    return fn


def synth1d_theta_star(lam) -> np.ndarray:
    lam = np.asarray(lam, dtype=float).reshape(-1)
    return np.sqrt(np.clip(1.0 - lam ** 2, 0.0, None))


def make_synth1d(temperature: float = 1e-6) -> BloProblem:
    return BloProblem(
        name="synth1d",
        outer=ScalarField(_synth1d_outer, 1, 1, "L_V"),
        inner_loss=ScalarField(_synth1d_inner(), 1, 1, "L_T"),
        temperature=temperature,
        init_policy=IndependentRandom(0.0, 1.0),
        lambda_init=(0.5,),
        theta_box=(0.0, 1.0),
        lambda_box=(0.0, 1.0),
        known_solution=SYNTH1D_SOLUTION,
        inner_solution=synth1d_theta_star,
    )


NOISE_HALF_WIDTH = 0.3


def synth1d_noise(rng: np.random.Generator) -> tuple[float, float]:
    e1, e2 = rng.uniform(-NOISE_HALF_WIDTH, NOISE_HALF_WIDTH, size=2)
    return float(e1), float(e2)


def make_noisy_synth1d(seed: int = 0, temperature: float = 1e-2) -> BloProblem:
    """Synth1D whose cubic and linear coefficients are jittered at every inner call.

    `seed` fixes the default stream used when a caller does not pass its own rng.
    """

    def hook(rng: np.random.Generator) -> ScalarField:
        e1, e2 = synth1d_noise(rng)
        return ScalarField(_synth1d_inner(1.0 / 3.0 + e1, e2), 1, 1, "L_T~")

    base = make_synth1d(temperature)
    return _replace(base, name="noisy-synth1d", noise_hook=hook, info={"seed": int(seed)})


# ---------------------------------------------------------------- polynomial toy

POLY_TRAIN = ((-0.75, -0.375), (0.75, -0.675))
POLY_VAL = ((-0.5, -0.3), (0.5, -0.5))


def _poly_loss(points):
    xs = np.array([p[0] for p in points])
    ys = np.array([p[1] for p in points])
    design = np.stack([np.ones_like(xs), xs, xs ** 2], axis=1)  # theta0, theta1, theta2

    def fn(lam, theta):
        resid = lam * (xs ** 3) + ad.matmul(design, theta) - ys
        return ad.sum_(resid * resid)
    return fn


def poly_inner_optimum(lam: float, theta2: float) -> np.ndarray:
    """(theta0, theta1, theta2) interpolating both training points exactly."""
    (x1, y1), (x2, y2) = POLY_TRAIN
    a = np.array([[1.0, x1], [1.0, x2]])
    rhs = np.array([y1 - lam * x1 ** 3 - theta2 * x1 ** 2,
                    y2 - lam * x2 ** 3 - theta2 * x2 ** 2])
    t0, t1 = np.linalg.solve(a, rhs)
    return np.array([t0, t1, theta2])


@dataclass(frozen=True)
class TabularToySpec:
    """Enumerated inner optima: thetas[i, j] is the j-th optimum for lambdas[i]."""

    lambdas: np.ndarray
    free_values: np.ndarray
    thetas: np.ndarray
    val_loss: np.ndarray
    train_loss: np.ndarray

    @classmethod
    def build(cls, lambdas, free_values, outer: ScalarField, inner: ScalarField):
        lambdas = np.asarray(lambdas, dtype=float)
        free_values = np.asarray(free_values, dtype=float)
        thetas = np.array([[poly_inner_optimum(l, f) for f in free_values] for l in lambdas])
        val = np.array([[ad.evaluate(outer, [l], th) for th in row]
                        for l, row in zip(lambdas, thetas)])
        train = np.array([[ad.evaluate(inner, [l], th) for th in row]
                          for l, row in zip(lambdas, thetas)])
        return cls(lambdas, free_values, thetas, val, train)

    @property
    def row_mean(self) -> np.ndarray:
        return self.val_loss.mean(axis=1)

    @property
    def optimal_row(self) -> int:
        return int(np.argmin(np.abs(self.lambdas)))


def make_poly_toy(n_lambda: int = 21, n_free: int = 11) -> tuple[BloProblem, TabularToySpec]:
    outer = ScalarField(_poly_loss(POLY_VAL), 1, 3, "L_V")
    inner = ScalarField(_poly_loss(POLY_TRAIN), 1, 3, "L_T")
    problem = BloProblem(
        name="poly-toy",
        outer=outer,
        inner_loss=inner,
        temperature=1.0,
        init_policy=IndependentRandom(-1.0, 1.0),
        lambda_init=(0.5,),
        theta_box=(-1.0, 1.0),
        lambda_box=(-1.0, 1.0),
        known_solution=((0.0,), (-0.3, -0.2, -0.4)),
    )
    spec = TabularToySpec.build(np.linspace(-1.0, 1.0, n_lambda),
                                np.linspace(-1.0, 1.0, n_free), outer, inner)
    return problem, spec


# ---------------------------------------------------------------- quadratic

@dataclass(frozen=True)
class QuadraticOracle:
    """Dense closed-form quantities of the quadratic problem."""

    H: np.ndarray
    C: np.ndarray
    t: np.ndarray
    s: np.ndarray

    @property
    def jacobian(self) -> np.ndarray:
        """d theta*/d lam = -H^{-1} C^T."""
        return -np.linalg.solve(self.H, self.C.T)

    def theta_star(self, lam) -> np.ndarray:
        return self.jacobian @ np.asarray(lam, dtype=float).reshape(-1)

    def outer_value(self, lam) -> float:
        lam = np.asarray(lam, dtype=float).reshape(-1)
        r = self.theta_star(lam) - self.t
        return 0.5 * float(r @ r) + 0.5 * float((lam - self.s) @ (lam - self.s))

    def hypergradient(self, lam) -> np.ndarray:
        lam = np.asarray(lam, dtype=float).reshape(-1)
        return (lam - self.s) + self.jacobian.T @ (self.theta_star(lam) - self.t)

    @property
    def lambda_star(self) -> np.ndarray:
        J = self.jacobian
        return np.linalg.solve(np.eye(J.shape[1]) + J.T @ J, self.s + J.T @ self.t)

    @property
    def outer_hessian(self) -> np.ndarray:
        J = self.jacobian
        return np.eye(J.shape[1]) + J.T @ J


def quadratic_hessian(dim: int, condition_number: float, rng: np.random.Generator) -> np.ndarray:
    """SPD matrix with geometric spectrum on [1/condition_number, 1]."""
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    q = q * np.sign(np.diag(r))
    eig = np.geomspace(1.0 / condition_number, 1.0, dim) if dim > 1 else np.ones(1)
    h = (q * eig) @ q.T
    return 0.5 * (h + h.T)


def make_quadratic_blo(dim_theta: int = 5, dim_lambda: int = 3, condition_number: float = 10.0,
                       seed: int = 0, realizable: bool = False,
                       temperature: float = 1.0) -> BloProblem:
    """Convex quadratic pair L_T = 0.5 th'H th + lam'C th, L_V = 0.5|th-t|^2 + 0.5|lam-s|^2.

    C = (H P)^T with a random P, so theta*(lam) = -P lam keeps unit-scale
    sensitivity at every conditioning. With `realizable` the target t equals
    theta*(s) and the outer optimum is lam* = s.
    """
    if not condition_number >= 1:
        raise ConfigError(f"condition_number must be >= 1, got {condition_number}")
    rng = np.random.default_rng(seed)
    H = quadratic_hessian(dim_theta, float(condition_number), rng)
    P = rng.standard_normal((dim_theta, dim_lambda)) / np.sqrt(dim_theta)
    C = (H @ P).T
    s = rng.standard_normal(dim_lambda)
    t = -P @ s if realizable else rng.standard_normal(dim_theta)
    oracle = QuadraticOracle(H, C, t, s)

    def inner(lam, theta):
        return 0.5 * (theta @ ad.matmul(H, theta)) + lam @ ad.matmul(C, theta)

    def outer(lam, theta):
        d1, d2 = theta - t, lam - s
        return 0.5 * (d1 @ d1) + 0.5 * (d2 @ d2)

    lam_star = oracle.lambda_star
    return BloProblem(
        name="quadratic",
        outer=ScalarField(outer, dim_lambda, dim_theta, "L_V"),
        inner_loss=ScalarField(inner, dim_lambda, dim_theta, "L_T"),
        temperature=temperature,
        init_policy=IndependentFixed(tuple(np.zeros(dim_theta))),
        lambda_init=tuple(np.zeros(dim_lambda)),
        known_solution=(tuple(lam_star), tuple(oracle.theta_star(lam_star))),
        inner_solution=oracle.theta_star,
        oracle=oracle,
        info={"condition_number": float(condition_number), "seed": int(seed)},
    )


def make_linear_quadratic(dim_theta: int = 3, dim_lambda: int = 2, seed: int = 0,
                          temperature: float = 1.0) -> BloProblem:
    """f = c'theta + 0.5|lam - s|^2 with a bilinear inner loss lam'C theta + b'theta.

    The inner Hessian is zero and the mixed block is constant, which is the
    setting where the first-order g recursion has no truncation error.
    """
    rng = np.random.default_rng(seed)
    C = rng.standard_normal((dim_lambda, dim_theta))
    b = rng.standard_normal(dim_theta)
    c = rng.standard_normal(dim_theta)
    s = rng.standard_normal(dim_lambda)

    def inner(lam, theta):
        return lam @ ad.matmul(C, theta) + ad.sum_(b * theta)

    def outer(lam, theta):
        d = lam - s
        return ad.sum_(c * theta) + 0.5 * (d @ d)

    return BloProblem(
        name="linear-quadratic",
        outer=ScalarField(outer, dim_lambda, dim_theta, "L_V"),
        inner_loss=ScalarField(inner, dim_lambda, dim_theta, "L_T"),
        temperature=temperature,
        init_policy=IndependentFixed(tuple(np.zeros(dim_theta))),
        lambda_init=tuple(np.zeros(dim_lambda)),
        info={"seed": int(seed)},
    )


# ---------------------------------------------------------------- tiny MLP with L1

MLP_SIZES = (2, 8, 2)


def mlp_param_count(sizes=MLP_SIZES) -> int:
    return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


def make_blobs(n: int, rng: np.random.Generator, spread: float = 1.0):
    labels = np.arange(n) % 2
    centers = np.array([[-0.75, -0.75], [0.75, 0.75]])
    x = centers[labels] + spread * rng.standard_normal((n, 2))
    return x, labels


def _mlp_loss(x: np.ndarray, labels: np.ndarray, sizes=MLP_SIZES):
    onehot = np.eye(sizes[-1])[labels]
    n = x.shape[0]

    def forward(theta):
        h, off = x, 0
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            w = ad.reshape(theta[off:off + a * b], (a, b))
            off += a * b
            bias = theta[off:off + b]
            off += b
            h = ad.matmul(h, w) + bias
            if i < len(sizes) - 2:
                h = ad.tanh(h)
        return h

    def ce(theta):
        logits = forward(theta)
        lse = ad.logsumexp(logits, axis=1)
        picked = ad.sum_(logits * onehot, axis=1)
        return ad.sum_(lse - picked) * (1.0 / n)
    return ce


def make_tiny_mlp_l1(seed: int = 0, n_train: int = 64, n_val: int = 64,
                     temperature: float = 1e-3, lambda0: float = -6.0) -> BloProblem:
    """Per-weight L1 penalties softplus(lam_j)|theta_j| on a 2-8-2 tanh network."""
    rng = np.random.default_rng(seed)
    x_tr, y_tr = make_blobs(n_train, rng)
    x_va, y_va = make_blobs(n_val, rng)
    dim = mlp_param_count()
    ce_train, ce_val = _mlp_loss(x_tr, y_tr), _mlp_loss(x_va, y_va)

    def inner(lam, theta):
        return ce_train(theta) + ad.sum_(ad.softplus(lam) * ad.abs_(theta))

    def outer(lam, theta):
        return ce_val(theta)

    theta0 = 0.5 * rng.standard_normal(dim)
    return BloProblem(
        name="tiny-mlp-l1",
        outer=ScalarField(outer, dim, dim, "L_V"),
        inner_loss=ScalarField(inner, dim, dim, "L_T"),
        temperature=temperature,
        init_policy=IndependentFixed(tuple(theta0)),
        lambda_init=tuple(np.full(dim, lambda0)),
        info={"seed": int(seed), "x_train": x_tr, "y_train": y_tr},
    )


# ---------------------------------------------------------------- registry

def _kw(params: dict, allowed: dict) -> dict:
    unknown = set(params) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown problem keys {sorted(unknown)}; valid: {sorted(allowed)}")
    return {k: allowed[k](v) for k, v in params.items()}


PROBLEM_KEYS = {
    "synth1d": {"tau": float},
    "noisy-synth1d": {"tau": float, "seed": int},
    "poly-toy": {},
    "quadratic": {"dim_theta": int, "dim_lambda": int, "cond": float, "seed": int,
                  "realizable": lambda v: str(v).lower() in ("1", "true", "yes"), "tau": float},
    "tiny-mlp-l1": {"seed": int, "tau": float, "lambda0": float},
    "linear-quadratic": {"dim_theta": int, "dim_lambda": int, "seed": int, "tau": float},
}


def build_problem(name: str, params: dict | None = None) -> BloProblem:
    """Construct a problem from its registry name and string-valued parameters."""
    params = dict(params or {})
    if name not in PROBLEM_KEYS:
        raise ConfigError(f"unknown problem {name!r}; valid: {sorted(PROBLEM_KEYS)}")
    kw = _kw(params, PROBLEM_KEYS[name])
    tau = kw.pop("tau", None)
    if name == "synth1d":
        return make_synth1d(**({} if tau is None else {"temperature": tau}))
    if name == "noisy-synth1d":
        return make_noisy_synth1d(kw.get("seed", 0), **({} if tau is None else {"temperature": tau}))
    if name == "poly-toy":
        return make_poly_toy()[0]
    if name == "quadratic":
        rename = {"cond": "condition_number"}
        kw = {rename.get(k, k): v for k, v in kw.items()}
        if tau is not None:
            kw["temperature"] = tau
        return make_quadratic_blo(**kw)
    if tau is not None:
        kw["temperature"] = tau
    if name == "linear-quadratic":
        return make_linear_quadratic(**kw)
    return make_tiny_mlp_l1(**kw)
