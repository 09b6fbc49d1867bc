"""Command-line interface: ``aapcd {solve,bench,simulate,check}``.

Exit codes: 0 success, 1 configuration or input error, 2 divergence,
3 descent violations found by ``check``.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import math
import sys
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import delays as _delays
from . import diagnostics
from .baselines import BaselineConfig, run_ascd, run_dspg
from .delays import DelaySchedule, EpsilonSpec
from .errors import ConfigError, DivergenceError, InsufficientDataError
from .model import (Dataset, ProblemSpec, Regularizer, load_libsvm, make_classification,
                    make_regression)
from .solver import SolverConfig, run_deterministic, run_stochastic
from .trace import read_trace, write_trace

log = logging.getLogger("aapcd")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_VIOLATIONS = 0, 1, 2, 3

DEFAULTS = {
    "dataset": None,
    "synthetic": "classification",
    "n": 200,
    "m": 50,
    "density": 1.0,
    "data_seed": 0,
    "loss": "logistic",
    "reg": "capped_l1",
    "lam": 1e-4,
    "theta_cap": 1e-5,
    "group_size": 1,
    "lipschitz": None,
    "eta": "auto",
    "beta": 0.8,
    "beta_neg": -0.08,
    "t1": None,
    "t1_frac": None,
    "tau": 4,
    "schedule": "bounded",
    "schedule_file": None,
    "exponent": 5.0,
    "truncation": _delays.DEFAULT_TRUNCATION,
    "rho": None,
    "eps_truncate": None,
    "regime": "bounded",
    "variant": "stochastic",
    "mode": "simulated",
    "workers": 1,
    "iters": 1000,
    "seed": 0,
    "safety": 0.95,
    "read_policy": "consistent",
    "residual_every": 0,
    "strict": False,
    "methods": "aapcd,ascd,dspg",
    "neg_momentum": "on",
    "ascd_eta": None,
    "dspg_eta": None,
    "batch_size": 200,
}


# ---------------------------------------------------------------------------
# manifest


@dataclass
class RunManifest:
    """Everything needed to rebuild a run: resolved settings, dataset hash, seeds."""

    command: str
    settings: dict
    problem: dict
    solver: dict
    schedule: dict
    dataset_sha256: str
    tool_version: str = __version__
    created: str = field(default_factory=lambda: _dt.datetime.now(_dt.timezone.utc).isoformat())
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        return cls(**json.loads(text))

    def save(self, path):
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "RunManifest":
        return cls.from_json(Path(path).read_text())


def manifest_path_for(path) -> Path:
    return Path(str(path) + ".manifest.json")


# ---------------------------------------------------------------------------
# argument handling


def _add_problem_args(p):
    g = p.add_argument_group("problem")
    g.add_argument("--config", help="JSON file with default settings (flags win)")
    g.add_argument("--dataset", help="libsvm text file")
    g.add_argument("--synthetic", choices=["classification", "regression"])
    g.add_argument("--n", type=int, help="synthetic sample count")
    g.add_argument("--m", type=int, help="synthetic feature count")
    g.add_argument("--density", type=float)
    g.add_argument("--data-seed", type=int)
    g.add_argument("--loss", choices=["logistic", "sigmoid", "quadratic"])
    g.add_argument("--reg", choices=["none", "l1", "capped_l1", "block_norm"])
    g.add_argument("--lambda", dest="lam", type=float)
    g.add_argument("--theta-cap", type=float)
    g.add_argument("--group-size", type=int)
    g.add_argument("--lipschitz", type=float, help="override the estimated constant")


def _add_schedule_args(p):
    g = p.add_argument_group("delays")
    g.add_argument("--schedule", choices=["bounded", "power_law", "scripted", "epsilon", "measured"])
    g.add_argument("--schedule-file", help="scripted delays, one integer per line")
    g.add_argument("--tau", type=int, help="delay bound")
    g.add_argument("--exponent", type=float, help="power-law exponent")
    g.add_argument("--truncation", type=int)
    g.add_argument("--rho", type=float, help="epsilon_i = rho^i")
    g.add_argument("--eps-truncate", type=int, help="zero epsilon from this index on")
    g.add_argument("--seed", type=int)


def _add_solver_args(p):
    g = p.add_argument_group("solver")
    g.add_argument("--eta", help="stepsize or 'auto'")
    g.add_argument("--beta", type=float)
    g.add_argument("--beta-neg", type=float)
    g.add_argument("--t1", type=int)
    g.add_argument("--t1-frac", type=float, help="T1 = floor(frac * tau)")
    g.add_argument("--regime", choices=["bounded", "stochastic_unbounded", "deterministic_unbounded"])
    g.add_argument("--variant", choices=["stochastic", "deterministic"])
    g.add_argument("--mode", choices=["simulated", "real"])
    g.add_argument("--workers", type=int)
    g.add_argument("--iters", type=int)
    g.add_argument("--safety", type=float)
    g.add_argument("--read-policy", choices=["consistent", "inconsistent"])
    g.add_argument("--residual-every", type=int)
    g.add_argument("--strict", action="store_const", const=True,
                   help="refuse settings outside the theoretical bounds")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aapcd", argument_default=argparse.SUPPRESS,
                                     description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"aapcd {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", argument_default=argparse.SUPPRESS, help="run the solver")
    _add_problem_args(p)
    _add_schedule_args(p)
    _add_solver_args(p)
    p.add_argument("--trace", help="trace CSV output path")
    p.add_argument("--manifest", help="manifest output path (default: next to the trace)")
    p.add_argument("--replay", help="rerun the settings recorded in a manifest")

    p = sub.add_parser("bench", argument_default=argparse.SUPPRESS,
                       help="compare the solver with the baselines")
    _add_problem_args(p)
    _add_schedule_args(p)
    _add_solver_args(p)
    p.add_argument("--methods", help="comma-separated subset of aapcd,ascd,dspg")
    p.add_argument("--neg-momentum", choices=["on", "off", "both"])
    p.add_argument("--ascd-eta", type=float)
    p.add_argument("--dspg-eta", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--out", help="comparison CSV path (default stdout)")

    p = sub.add_parser("simulate", argument_default=argparse.SUPPRESS,
                       help="generate a delay schedule and series tables")
    _add_schedule_args(p)
    p.add_argument("--config", help="JSON file with default settings (flags win)")
    p.add_argument("--iters", type=int)
    p.add_argument("--table-size", type=int, default=64)
    p.add_argument("--out", help="delays output (one integer per line)")
    p.add_argument("--tables", help="series tables CSV output")

    p = sub.add_parser("check", argument_default=argparse.SUPPRESS,
                       help="replay a trace through the diagnostics")
    p.add_argument("--trace", help="trace CSV written by solve")
    p.add_argument("--manifest", help="manifest of the trace (default: next to it)")
    p.add_argument("--series", help="residual series file (one value per line) for a rate fit")
    p.add_argument("--theta", type=float, help="KL exponent hypothesis for the rate fit")
    p.add_argument("--window", type=float, default=0.8,
                   help="fraction of the series used by the rate fit")
    p.add_argument("--f-star", type=float, help="reference optimum for the residuals")
    p.add_argument("--tol", type=float, help="descent tolerance (default 1e-12 |G0|)")
    p.add_argument("--report", help="JSON-lines report path (default stdout)")
    return parser


def resolve_settings(args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    settings = dict(DEFAULTS)
    given = vars(args)
    if given.get("config"):
        try:
            from_file = json.loads(Path(given["config"]).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
        unknown = set(from_file) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        settings.update(from_file)
    settings.update({k: v for k, v in given.items() if k in DEFAULTS})
    if settings["dataset"] is not None:
        settings["synthetic"] = None
    return settings


# ---------------------------------------------------------------------------
# builders


def build_problem(s: dict):
    if s["dataset"]:
        try:
            ds = load_libsvm(s["dataset"])
        except OSError as exc:
            raise ConfigError(f"cannot read dataset: {exc}") from exc
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    elif s["synthetic"] == "regression":
        ds = make_regression(s["n"], s["m"], seed=s["data_seed"])
    else:
        ds = make_classification(s["n"], s["m"], density=s["density"], seed=s["data_seed"])
    reg = Regularizer(s["reg"], lam=s["lam"] if s["reg"] != "none" else 0.0,
                      theta_cap=s["theta_cap"] if s["reg"] == "capped_l1" else 0.0,
                      group_size=s["group_size"] if s["reg"] == "block_norm" else 1)
    problem = ProblemSpec(s["loss"], reg, ds, s["lipschitz"])
    return problem


def build_schedule(s: dict) -> DelaySchedule:
    kind = s["schedule"]
    if kind == "bounded":
        return DelaySchedule.bounded(s["tau"], seed=s["seed"])
    if kind == "power_law":
        return DelaySchedule.power_law(s["exponent"], s["truncation"], seed=s["seed"])
    if kind == "scripted":
        if not s["schedule_file"]:
            raise ConfigError("scripted schedules need --schedule-file")
        try:
            return _delays.load_schedule(s["schedule_file"])
        except OSError as exc:
            raise ConfigError(f"cannot read schedule: {exc}") from exc
    if kind == "epsilon":
        return DelaySchedule.epsilon_sequence(_epsilon(s) or EpsilonSpec(rho=1.0, truncate=max(s["tau"], 1)),
                                              s["tau"])
    return DelaySchedule.measured()


def _epsilon(s: dict):
    if s["rho"] is None and s["eps_truncate"] is None:
        return None
    return EpsilonSpec(rho=1.0 if s["rho"] is None else s["rho"], truncate=s["eps_truncate"])


def _t1(s: dict, schedule: DelaySchedule):
    if s["t1"] is not None:
        return s["t1"]
    if s["t1_frac"] is not None:
        tau = schedule.bound if schedule.bound is not None else s["tau"]
        return int(math.floor(s["t1_frac"] * tau))
    return None


def build_config(s: dict, schedule: DelaySchedule, **overrides) -> SolverConfig:
    eta = s["eta"]
    if eta != "auto":
        try:
            eta = float(eta)
        except (TypeError, ValueError):
            raise ConfigError(f"--eta must be a number or 'auto', got {eta!r}") from None
    kwargs = dict(eta=eta, beta=s["beta"], beta_neg=s["beta_neg"], T1=_t1(s, schedule),
                  iters=s["iters"], seed=s["seed"], regime=s["regime"], safety=s["safety"],
                  read_policy=s["read_policy"], epsilon=_epsilon(s), strict=bool(s["strict"]),
                  residual_every=s["residual_every"], workers=s["workers"], mode=s["mode"])
    kwargs.update(overrides)
    return SolverConfig(**kwargs)


def _run(problem, config, schedule, variant):
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        if variant == "deterministic":
            result = run_deterministic(problem, config, schedule)
        else:
            result = run_stochastic(problem, config, schedule)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    return result


def _problem_dict(problem: ProblemSpec, s: dict) -> dict:
    reg = problem.regularizer
    return {"loss": problem.loss, "regularizer": asdict(reg), "shape": list(problem.dataset.shape),
            "lipschitz": problem.L,
            "source": s["dataset"] if s["dataset"] else f"synthetic:{s['synthetic']}"}


# ---------------------------------------------------------------------------
# commands


def cmd_solve(args) -> int:
    given = vars(args)
    if given.get("replay"):
        try:
            manifest = RunManifest.load(given["replay"])
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise ConfigError(f"cannot read manifest: {exc}") from exc
        s = dict(DEFAULTS)
        s.update(manifest.settings)
    else:
        manifest = None
        s = resolve_settings(args)
    problem = build_problem(s)
    if manifest is not None and manifest.dataset_sha256 != problem.dataset.content_hash():
        raise ConfigError("dataset content differs from the manifest's hash")
    schedule = build_schedule(s)
    config = build_config(s, schedule)
    try:
        result = _run(problem, config, schedule, s["variant"])
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        if exc.result is not None and given.get("trace"):
            write_trace(exc.result.trace, given["trace"])
        return EXIT_DIVERGED
    manifest = RunManifest("solve", s, _problem_dict(problem, s), result.config.to_dict(),
                           schedule.to_dict(), problem.dataset.content_hash())
    trace_path = given.get("trace")
    if trace_path:
        write_trace(result.trace, trace_path)
        manifest.extra["trace_sha256"] = result.trace.digest()
        manifest.save(given.get("manifest") or manifest_path_for(trace_path))
    elif given.get("manifest"):
        manifest.save(given["manifest"])
    print(f"F(y^0) = {result.trace.F0!r}")
    print(f"final F = {result.F!r}")
    print(f"iterations = {len(result.trace)}")
    print(f"eta = {result.config.eta!r}  T1 = {result.config.T1}")
    res = result.residual
    top = float(result.residuals[-1, 2]) if len(result.residuals) else math.nan
    print(f"max stationarity residual = {top!r}")
    print(f"stationarity residual norm = {res!r}")
    if trace_path:
        print(f"trace sha256 = {result.trace.digest()}")
    return EXIT_OK


def cmd_bench(args) -> int:
    s = resolve_settings(args)
    problem = build_problem(s)
    methods = [m.strip() for m in s["methods"].split(",") if m.strip()]
    bad = set(methods) - {"aapcd", "ascd", "dspg"}
    if bad or not methods:
        raise ConfigError(f"unknown methods {sorted(bad)}")
    series = {}
    for method in methods:
        schedule = build_schedule(s)
        if method == "aapcd":
            variants = {"on": [("aapcd", s["beta_neg"])], "off": [("aapcd", 0.0)],
                        "both": [("aapcd", s["beta_neg"]), ("aapcd_no_neg", 0.0)]}[s["neg_momentum"]]
            for name, bneg in variants:
                cfg = build_config(s, schedule, beta_neg=bneg)
                schedule.reset()
                series[name] = _run(problem, cfg, schedule, s["variant"])
        elif method == "ascd":
            cfg = build_config(s, schedule, beta=0.0, beta_neg=0.0)
            if s["ascd_eta"] is not None:
                cfg.eta = s["ascd_eta"]
            series["ascd"] = _run(problem, cfg, schedule, s["variant"])
        else:
            eta = s["dspg_eta"]
            if eta is None:
                eta = 1.0 / problem.L
            cfg = BaselineConfig("dspg", eta=eta, batch_size=s["batch_size"], iters=s["iters"],
                                 seed=s["seed"])
            series["dspg"] = run_dspg(problem, cfg)
    out_path = vars(args).get("out")
    out = open(out_path, "w", newline="") if out_path else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        names = list(series)
        header = ["iteration"]
        for name in names:
            header += [f"{name}_wallclock_ns", f"{name}_F"]
        w.writerow(header)
        w.writerow([0] + sum([[0, repr(series[n].trace.F0)] for n in names], []))
        for i in range(s["iters"]):
            row = [i + 1]
            for name in names:
                t = series[name].trace
                row += [int(t.wallclock_ns[i]), repr(float(t.F[i]))] if i < len(t) else ["", ""]
            w.writerow(row)
    finally:
        if out is not sys.stdout:
            out.close()
    for name in series:
        print(f"{name}: final F = {series[name].F!r}", file=sys.stderr)
    return EXIT_OK


def cmd_simulate(args) -> int:
    s = resolve_settings(args)
    given = vars(args)
    schedule = build_schedule(s)
    n = s["iters"]
    d = schedule.generate(n) if schedule.mode != "measured" else np.zeros(0, np.int64)
    out = given.get("out")
    if out:
        Path(out).write_text("".join(f"{int(v)}\n" for v in d))
    size = given.get("table_size", 64)
    summary = {"type": "schedule", "mode": schedule.mode, "count": int(len(d)),
               "mean_delay": float(d.mean()) if len(d) else None,
               "max_delay": int(d.max()) if len(d) else None}
    rows = {}
    if schedule.mode == "power_law":
        tables = _delays.c_table(schedule.pmf, size)
        rows["c"] = tables.c
        summary["c0"] = float(tables.c[0])
    eps = _epsilon(s) or schedule.epsilon
    if eps is not None:
        tables = _delays.mu_delta_tables(eps, size)
        rows["delta"], rows["mu"], rows["eps"] = tables.delta, tables.mu, tables.eps
    if given.get("tables") and rows:
        with open(given["tables"], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["k"] + list(rows))
            for k in range(size + 1):
                w.writerow([k] + [repr(float(rows[c][k])) if k < len(rows[c]) else "" for c in rows])
    print(json.dumps(summary))
    return EXIT_OK


def _emit(lines, path):
    text = "".join(json.dumps(obj) + "\n" for obj in lines)
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_check(args) -> int:
    given = vars(args)
    lines = []
    status = EXIT_OK
    theta = given.get("theta")
    if given.get("series"):
        try:
            r = np.loadtxt(given["series"], dtype=float, ndmin=1)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read series: {exc}") from exc
        fit = diagnostics.fit_rate(r, theta if theta is not None else 0.5, window=None)
        lines.append({"type": "rate_fit", **fit.to_dict()})
        print(f"rate fit: {fit.kind} rate {fit.rate:.6g} (R^2 = {fit.r_squared:.6f})")
    if given.get("trace"):
        try:
            trace = read_trace(given["trace"])
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read trace: {exc}") from exc
        mpath = given.get("manifest") or manifest_path_for(given["trace"])
        try:
            manifest = RunManifest.load(mpath)
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise ConfigError(f"cannot read manifest {mpath}: {exc}") from exc
        config = SolverConfig.from_dict(manifest.solver)
        schedule = DelaySchedule.from_dict(manifest.schedule)
        L = manifest.problem["lipschitz"]
        spec = diagnostics.lyapunov_spec_for(L, config, schedule)
        report = diagnostics.descent_check(trace, spec, config.eta, tol=given.get("tol"))
        branch_ok = bool(np.all(trace.F == np.minimum(trace.F_x, trace.F_v))) \
            if not np.any(np.isnan(trace.F_x)) else None
        lines.append({"type": "descent", "records": report.checked, "tol": report.tol,
                      "violations": report.count, "summary": report.summary(),
                      "acceptance_invariant": branch_ok})
        for k, kind, amount in report.violations:
            lines.append({"type": "violation", "k": k, "kind": kind, "amount": amount})
        print(report.summary())
        if report.count or branch_ok is False:
            status = EXIT_VIOLATIONS
        if theta is not None and len(trace):
            r = diagnostics.residual_series(trace, given.get("f_star"))
            try:
                fit = diagnostics.fit_rate(r, theta, window=given.get("window", 0.8))
                lines.append({"type": "rate_fit", **fit.to_dict()})
            except InsufficientDataError as exc:
                lines.append({"type": "rate_fit", "error": str(exc)})
    if not lines:
        raise ConfigError("check needs --trace or --series")
    _emit(lines, given.get("report"))
    return status


COMMANDS = {"solve": cmd_solve, "bench": cmd_bench, "simulate": cmd_simulate, "check": cmd_check}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
