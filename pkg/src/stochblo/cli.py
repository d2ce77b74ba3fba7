"""Command-line front end: run, compare, fo-error, quadratic, toy-grid."""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import BloError, ConfigError
from .hypergrad import ESTIMATORS, make_estimator, fo_probe
from .outer import OuterConfig, RunTrace, optimize, toy_grid_study
from .problems import build_problem, make_poly_toy
from .sgld import SgldConfig

SCHEMA = "stochblo-csv/1"
RECIPE_SUFFIX = ".cfg"


# ---------------------------------------------------------------- config files

def parse_kv_text(text: str, origin: str = "<config>") -> dict[str, str]:
    """Flat `key = value` lines; '#' starts a comment; later keys win."""
    out: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{n}: expected key = value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{origin}:{n}: empty key")
        out[key] = value
    return out


def recipe_names() -> list[str]:
    base = resources.files("stochblo") / "recipes"
    return sorted(p.name[:-len(RECIPE_SUFFIX)] for p in base.iterdir()
                  if p.name.endswith(RECIPE_SUFFIX))


def load_config(ref: str | None) -> dict[str, str]:
    """Read a config file, or a shipped recipe when `ref` names one."""
    if ref is None:
        return {}
    path = Path(ref)
    if path.is_file():
        return parse_kv_text(path.read_text(), str(path))
    recipe = resources.files("stochblo") / "recipes" / f"{ref}{RECIPE_SUFFIX}"
    if recipe.is_file():
        return parse_kv_text(recipe.read_text(), f"recipe {ref}")
    raise ConfigError(f"no config file or recipe named {ref!r}; recipes: {', '.join(recipe_names())}")


def parse_tokens(tokens: list[str], origin: str) -> dict[str, str]:
    out = {}
    for tok in tokens:
        if "=" not in tok:
            raise ConfigError(f"{origin}: expected key=value, got {tok!r}")
        k, v = tok.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def parse_list(value: str, kind=float) -> list:
    items = [s for s in value.replace(",", " ").split() if s]
    try:
        return [kind(s) for s in items]
    except ValueError as exc:
        raise ConfigError(f"bad list {value!r}: {exc}") from None


def _bool(v: str) -> bool:
    return str(v).strip().lower() in ("1", "true", "yes", "on")


@dataclass
class Entry:
    label: str
    estimator: str
    params: dict[str, str]


@dataclass
class ExperimentConfig:
    problem: str = "synth1d"
    problem_params: dict[str, str] = field(default_factory=dict)
    estimator: str = "hpo-sgld"
    estimator_params: dict[str, str] = field(default_factory=dict)
    entries: list[Entry] = field(default_factory=list)
    outer: dict[str, str] = field(default_factory=dict)
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    extra: dict[str, str] = field(default_factory=dict)

    OUTER_KEYS = {"eta", "iterations", "lambda_init", "warm_start", "stop_rel_error",
                  "stop_hnorm"}

    @classmethod
    def from_mapping(cls, kv: dict[str, str], extra_keys: set[str]) -> "ExperimentConfig":
        cfg = cls()
        for key, value in kv.items():
            head, _, rest = key.partition(".")
            if key == "problem":
                cfg.problem = value
            elif key == "estimator":
                cfg.estimator = value
            elif key == "seeds":
                cfg.seeds = parse_list(value, int)
            elif head == "problem" and rest:
                cfg.problem_params[rest] = value
            elif head == "estimator" and rest:
                cfg.estimator_params[rest] = value
            elif head == "outer" and rest:
                if rest not in cls.OUTER_KEYS:
                    raise ConfigError(f"unknown outer key {rest!r}; valid: {sorted(cls.OUTER_KEYS)}")
                cfg.outer[rest] = value
            elif head == "entry" and rest:
                parts = value.split()
                if not parts:
                    raise ConfigError(f"entry {rest!r} names no estimator")
                cfg.entries.append(Entry(rest, parts[0], parse_tokens(parts[1:], f"entry {rest}")))
            elif key in extra_keys:
                cfg.extra[key] = value
            else:
                valid = ["problem", "problem.*", "estimator", "estimator.*", "outer.*", "seeds",
                         "entry.*", *sorted(extra_keys)]
                raise ConfigError(f"unknown config key {key!r}; valid: {', '.join(valid)}")
        if not cfg.seeds:
            raise ConfigError("seeds must not be empty")
        return cfg

    def outer_config(self, defaults: dict | None = None) -> OuterConfig:
        kv = dict(defaults or {})
        kv.update(self.outer)
        kw = {}
        conv = {"eta": float, "iterations": int, "stop_rel_error": float, "stop_hnorm": float,
                "warm_start": _bool, "lambda_init": lambda v: tuple(parse_list(v))}
        for k, v in kv.items():
            try:
                kw[k] = conv[k](v)
            except ValueError as exc:
                raise ConfigError(f"outer.{k}: {exc}") from None
        return OuterConfig(seeds=tuple(self.seeds), **kw)


def _config_from_args(args, extra_keys: set[str] = frozenset()) -> ExperimentConfig:
    kv = load_config(args.config)
    if getattr(args, "problem", None):
        kv["problem"] = args.problem
    if getattr(args, "estimator", None):
        kv["estimator"] = args.estimator
    kv.update(parse_tokens(args.set or [], "--set"))
    if args.seeds:
        kv["seeds"] = args.seeds
    if args.seed is not None:
        kv["seeds"] = str(args.seed)
    return ExperimentConfig.from_mapping(kv, set(extra_keys))


def _estimator(name: str, params: dict[str, str]):
    if name not in ESTIMATORS:
        raise ConfigError(f"unknown estimator {name!r}; valid: {', '.join(ESTIMATORS)}")
    try:
        return make_estimator(name, **params)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{name}: {exc}") from None


# ---------------------------------------------------------------- csv helpers

def fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return "nan" if np.isnan(x) else repr(float(x))
    return str(x)


def write_csv(path: Path, kind: str, header: list[str], rows: list[list]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema: {SCHEMA} {kind}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(x) for x in row])


def read_csv(path: Path) -> tuple[list[str], list[dict[str, str]]]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    return reader.fieldnames, list(reader)


def trace_rows(trace: RunTrace, dim: int):
    header = ["k", *[f"lambda_{i}" for i in range(dim)], "objective", "hnorm", "theta_norm",
              "wall_ms", "mem_vecs"]
    rows = [[r.k, *r.lam, r.objective, r.hnorm, r.theta_norm, r.wall_ms, r.mem_vecs]
            for r in trace.rows]
    return header, rows


SUMMARY_HEADER = ["method", "options", "seeds", "lambda_error_mean", "lambda_error_std",
                  "theta_error_mean", "theta_error_std", "lambda_final_mean", "failures"]


def summarize(label: str, options: str, traces: list[RunTrace]) -> list:
    lam_err = [t.lam_error for t in traces if t.lam_error is not None]
    th_err = [t.theta_error for t in traces if t.theta_error is not None]

    def mean(x):
        return float(np.mean(x)) if x else None

    def std(x):
        return float(np.std(x, ddof=1)) if len(x) >= 2 else None

    lam_mean = float(np.mean([np.mean(t.lam_final) for t in traces]))
    return [label, options, len(traces), mean(lam_err), std(lam_err), mean(th_err), std(th_err),
            lam_mean, sum(t.failure is not None for t in traces)]


def format_table(header: list[str], rows: list[list]) -> str:
    def cell(x):
        if isinstance(x, float):
            return f"{x:.4f}"
        return "" if x is None else str(x)
    cells = [header] + [[cell(x) for x in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells)


# ---------------------------------------------------------------- commands

def _run_entry(cfg: ExperimentConfig, name: str, params: dict, out: Path | None, tag: str,
               timing: bool) -> list[RunTrace]:
    problem = build_problem(cfg.problem, cfg.problem_params)
    est = _estimator(name, params)
    outer = cfg.outer_config()
    if timing:
        outer = OuterConfig(**{**outer.__dict__, "timing": True})
    traces = []
    for seed in cfg.seeds:
        tr = optimize(problem, est, outer, seed)
        traces.append(tr)
        if out is not None:
            header, rows = trace_rows(tr, problem.dim_lambda)
            write_csv(out / f"trace_{tag}seed{seed}.csv", "trace", header, rows)
        if tr.failure:
            print(f"[{name} seed {seed}] stopped early: {tr.failure}", file=sys.stderr)
    return traces


def cmd_run(args) -> int:
    cfg = _config_from_args(args)
    out = Path(args.out)
    traces = _run_entry(cfg, cfg.estimator, cfg.estimator_params, out, "", args.timing)
    est = _estimator(cfg.estimator, cfg.estimator_params)
    row = summarize(cfg.estimator, est.options(), traces)
    write_csv(out / "summary.csv", "summary", SUMMARY_HEADER, [row])
    print(format_table(SUMMARY_HEADER, [row]))
    if args.probe:
        _probe_at(cfg, traces[0], out)
    return 1 if any(t.failure for t in traces) else 0


def _probe_at(cfg: ExperimentConfig, trace: RunTrace, out: Path) -> None:
    problem = build_problem(cfg.problem, cfg.problem_params)
    est = _estimator("hpo-sgld", {k: v for k, v in cfg.estimator_params.items()
                                  if k in ESTIMATORS["hpo-sgld"].keys}
                     if cfg.estimator == "hpo-sgld" else {})
    problem = est.prepare(problem)
    rec = fo_probe(problem, trace.lam_final, est.config(problem), rng=np.random.default_rng(trace.seed))
    _write_probe(out / "probe.csv", rec)


def _write_probe(path: Path, rec) -> None:
    rows = [[int(m), e, c, p] for m, e, c, p in
            zip(rec.steps, rec.rel_error, rec.cum_error, rec.is_post_burnin)]
    write_csv(path, "fo-probe", ["step", "rel_error", "cum_error", "is_post_burnin"], rows)


def cmd_compare(args) -> int:
    cfg = _config_from_args(args)
    if len(cfg.entries) < 2:
        raise ConfigError("compare needs at least two entry.<label> = <estimator> ... lines")
    out = Path(args.out)
    rows, failed = [], False
    for i, entry in enumerate(cfg.entries):
        traces = _run_entry(cfg, entry.estimator, entry.params, out, f"{i:02d}_", args.timing)
        est = _estimator(entry.estimator, entry.params)
        rows.append(summarize(entry.label, f"{entry.estimator} {est.options()}", traces))
        failed |= any(t.failure for t in traces)
    write_csv(out / "compare.csv", "compare", SUMMARY_HEADER, rows)
    table = format_table(SUMMARY_HEADER, rows)
    (out / "compare.txt").write_text(table + "\n")
    print(table)
    return 1 if failed else 0


FO_KEYS = {"eps", "kappa", "burn_in", "samples", "lambda", "theta0", "tau"}


def cmd_fo_error(args) -> int:
    cfg = _config_from_args(args, FO_KEYS)
    ex = {"eps": "0.01,0.005,0.0025", "kappa": "0", "burn_in": "50", "samples": "50",
          "lambda": "0.5", "theta0": "0.2", "tau": "1"}
    ex.update(cfg.extra)
    params = dict(cfg.problem_params)
    if cfg.problem in ("synth1d", "noisy-synth1d"):
        params.setdefault("tau", ex["tau"])
    problem = build_problem(cfg.problem, params)
    lam = parse_list(ex["lambda"])
    if len(lam) == 1 and problem.dim_lambda > 1:
        lam = lam * problem.dim_lambda
    theta0 = None if ex["theta0"].lower() == "policy" else parse_list(ex["theta0"])
    if theta0 is not None and len(theta0) == 1 and problem.dim_theta > 1:
        theta0 = theta0 * problem.dim_theta
    out = Path(args.out)
    medians, lines = [], []
    seed = cfg.seeds[0]
    for eps in parse_list(ex["eps"]):
        sg = SgldConfig(eps, float(ex["kappa"]), int(ex["burn_in"]), int(ex["samples"]), seed)
        rec = fo_probe(problem, lam, sg, theta0)
        _write_probe(out / f"fo_probe_eps{eps:g}.csv", rec)
        medians.append(float(np.median(rec.rel_error)))
        lines.append(f"eps={eps:g} median_rel={medians[-1]:.4g} max_rel={rec.rel_error.max():.4g} "
                     f"pre_burnin_max={rec.pre_burnin_max:.4g} "
                     f"post_burnin_cum_max={rec.post_burnin_cum_max:.4g}")
    print("\n".join(lines))
    for a, b in zip(medians, medians[1:]):
        print(f"shrinkage factor {a / b if b > 0 else float('inf'):.3f}")
    return 0


QUAD_KEYS = {"conditions", "tol", "cap"}


def quadratic_study(cfg: ExperimentConfig):
    ex = {"conditions": "10,1000", "tol": "1e-5", "cap": "200000"}
    ex.update(cfg.extra)
    cap = int(ex["cap"])
    pp = {"dim_theta": "10", "dim_lambda": "5", "seed": "0", "realizable": "true", "tau": "1"}
    pp.update(cfg.problem_params)
    outer = cfg.outer_config({"eta": "0.1", "iterations": "2000"})
    outer = OuterConfig(**{**outer.__dict__, "stop_rel_error": float(ex["tol"])})
    entries = cfg.entries or [Entry(n, n, {}) for n in
                              ("hpo-sgld", "ift-neumann", "ift-cg", "amigo-cg", "amigo-sgd", "rmd")]
    rows = []
    for cond in parse_list(ex["conditions"]):
        problem = build_problem("quadratic", {**pp, "cond": str(cond)})
        for e in entries:
            tr = optimize(problem, _estimator(e.estimator, e.params), outer, cfg.seeds[0])
            done = tr.converged_at is not None and tr.total_inner_steps <= cap
            total = tr.total_inner_steps
            rows.append([e.label, cond, total if done else None, done, len(tr.rows),
                         tr.total_aux_iterations, f">{cap // 1000}K" if not done else f"{total / 1000:g}K"])
    return rows


QUAD_HEADER = ["method", "condition", "total_iterations", "converged", "outer_iterations",
               "aux_iterations", "display"]


def cmd_quadratic(args) -> int:
    cfg = _config_from_args(args, QUAD_KEYS)
    rows = quadratic_study(cfg)
    out = Path(args.out)
    write_csv(out / "quadratic.csv", "quadratic", QUAD_HEADER, rows)
    print(format_table(QUAD_HEADER, rows))
    return 0


TOY_KEYS = {"runs"}


def cmd_toy_grid(args) -> int:
    cfg = _config_from_args(args, TOY_KEYS)
    runs = int(cfg.extra.get("runs", "20"))
    _, spec = make_poly_toy()
    report = toy_grid_study(spec, runs, cfg.seeds[0])
    out = Path(args.out)
    header = ["lambda", *[f"theta2={v:g}" for v in spec.free_values], "row_mean"]
    rows = [[l, *vals, m] for l, vals, m in zip(spec.lambdas, spec.val_loss, spec.row_mean)]
    write_csv(out / "toy_table.csv", "toy-table", header, rows)
    write_csv(out / "toy_runs.csv", "toy-runs", ["run", "det_pick_lambda", "so_pick_lambda"],
              [[i, spec.lambdas[p], spec.lambdas[report.so_pick]]
               for i, p in enumerate(report.det_picks)])
    counts = np.bincount(report.det_picks, minlength=spec.lambdas.size)
    print(f"stochastic (row-average) success: {report.so_successes}/{runs}")
    print(f"deterministic (random column) success: {report.det_successes}/{runs}")
    print(f"exact per-run deterministic success probability: {report.det_success_probability:.4f}")
    print("deterministic picks by lambda: " + ", ".join(
        f"{spec.lambdas[i]:g}:{c}" for i, c in enumerate(counts) if c))
    return 0


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stochblo", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_names=True):
        p.add_argument("--config", help="config file or shipped recipe name")
        if with_names:
            p.add_argument("--problem", help="problem name")
            p.add_argument("--estimator", help="estimator name")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--seed", type=int, help="single seed (overrides --seeds)")
        p.add_argument("--seeds", help="comma separated seed list")
        p.add_argument("--out", default="results", help="output directory")
        p.add_argument("--probe", action="store_true", help="also write a first-order probe CSV")
        p.add_argument("--timing", action="store_true", help="fill the wall_ms column")

    commands = (
        ("run", cmd_run, True, "outer optimisation for one estimator over a seed list"),
        ("compare", cmd_compare, True, "several estimators on one problem, one summary row each"),
        ("fo-error", cmd_fo_error, True, "first-order recursion probe over a step-size sweep"),
        ("quadratic", cmd_quadratic, False, "iterations to tolerance on the quadratic problem"),
        ("toy-grid", cmd_toy_grid, False, "random-column vs row-average study on the cubic toy"),
    )
    for name, fn, names, text in commands:
        p = sub.add_parser(name, help=text)
        common(p, names)
        p.set_defaults(func=fn)
    sub.add_parser("recipes", help="list shipped recipes").set_defaults(
        func=lambda a: print("\n".join(recipe_names())) or 0)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return int(args.func(args) or 0)
    except ConfigError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (ArithmeticError, BloError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
