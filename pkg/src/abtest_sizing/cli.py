"""Command-line interface: ``absize {size,mod,allocate,ingest,simulate}``.

Reports are JSON by default and embed the fully resolved configuration
(including the seed) so ``absize --config report.json`` reproduces a run.
Exit codes: 0 success, 2 usage, 3 infeasible design, 4 data/validation.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import secrets
import sys
from dataclasses import asdict
from typing import Any, Sequence

from . import clustered, ingest, simulation, sizing
from .errors import (
    DataValidationError,
    DomainError,
    InfeasibleDesignError,
    InsufficientDataError,
    ShapeError,
)
from .stats_core import sample_mean_var


SCHEMA_VERSION = 1
SEED_ENV = "ABSIZE_SEED"
EXIT_OK, EXIT_USAGE, EXIT_INFEASIBLE, EXIT_DATA = 0, 2, 3, 4

# Settings that never change results and so stay out of the embedded config.
_RUNTIME_KEYS = {"config", "format", "threads", "verbose", "output", "histogram_out",
                 "_seed_origin"}


class UsageError(Exception):
    pass


def _design(args) -> sizing.DesignParams:
    return sizing.DesignParams(alpha=args.alpha, power=args.power, sides=args.sides)


def _add_design(p: argparse.ArgumentParser) -> None:
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--power", type=float, default=0.8)
    p.add_argument("--sides", choices=("one", "two"), default="two")


def _add_global(p: argparse.ArgumentParser, default: bool) -> None:
    # subcommand copies default to SUPPRESS so they never clobber top-level values
    d = (lambda v: v) if default else (lambda v: argparse.SUPPRESS)
    p.add_argument("--config", default=d(None),
                   help="JSON file of option values (or a previous report)")
    p.add_argument("--format", choices=("json", "text", "csv"), default=d("json"))
    p.add_argument("-v", "--verbose", action="store_true", default=d(False))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="absize", description=__doc__.splitlines()[0])
    _add_global(parser, default=True)
    # the same options are accepted after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    _add_global(common, default=False)
    sub = parser.add_subparsers(dest="command")
    _add_parser = sub.add_parser

    def add_parser(name, **kw):
        return _add_parser(name, parents=[common], **kw)

    sub.add_parser = add_parser
    parser.subcommands = sub.choices

    p = sub.add_parser("size", help="sample size for i.i.d. or clustered designs")
    kind = p.add_mutually_exclusive_group()
    kind.add_argument("--iid", dest="design_kind", action="store_const", const="iid")
    kind.add_argument("--clustered", dest="design_kind", action="store_const", const="clustered")
    outcome = p.add_mutually_exclusive_group()
    outcome.add_argument("--binary", dest="outcome", action="store_const", const="binary")
    outcome.add_argument("--continuous", dest="outcome", action="store_const", const="continuous")
    p.add_argument("--delta", type=float, help="absolute lift to detect")
    p.add_argument("--rel-lift", type=float, help="relative lift to detect")
    p.add_argument("--p", type=float, help="baseline rate (i.i.d. binary)")
    p.add_argument("--sigma2", type=float, help="outcome variance (i.i.d. continuous)")
    p.add_argument("--mu-x", type=float, help="baseline mean for relative lift")
    p.add_argument("--input", help="session CSV: user_id,session_id,metric")
    p.add_argument("--aggregates", help="user aggregate CSV: user_id,n_sessions,metric_sum")
    p.add_argument("--h", type=float, help="precomputed h")
    p.add_argument("--h-from", help="previous clustered size report supplying h")
    p.add_argument("--h-window-days", type=int, help="window length the supplied h was estimated on")
    p.add_argument("--window-days", type=int, help="planned experiment duration in days")
    p.add_argument("--allow-window-mismatch", action="store_true")
    p.add_argument("--available-users", type=int, help="unique users seen in the window")
    p.add_argument("--compare-standard", action="store_true",
                   help="also report the i.i.d. session count that ignores clustering")
    _add_design(p)

    p = sub.add_parser("mod", help="minimum observed difference <-> average treatment effect")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--ate", type=float)
    g.add_argument("--mod", type=float)
    _add_design(p)

    p = sub.add_parser("allocate", help="unbalanced treatment share trade-offs")
    p.add_argument("--f", type=float, help="treatment share of traffic, in (0, 0.5]")
    p.add_argument("--delta", type=float)
    p.add_argument("--sigma2", type=float)
    _add_design(p)

    p = sub.add_parser("ingest", help="aggregate session logs to user level")
    p.add_argument("--input", help="session CSV")
    p.add_argument("--mode", choices=("binary", "continuous"), default="binary")
    p.add_argument("--output", help="write user aggregates CSV here")

    p = sub.add_parser("simulate", help="Monte Carlo verification suites")
    p.add_argument("--suite", default="clustered",
                   choices=("clustered", "undersized", "relative", "absolute-sized", "mod",
                            "mod-grid"))
    p.add_argument("--case", choices=sorted(simulation.CASES), default="I")
    p.add_argument("--k", type=int, help="users per arm (clustered suite)")
    p.add_argument("--k-source", choices=("population", "historical"), default="population",
                   help="derive k from the case's exact h or from a seeded historical pass")
    p.add_argument("--analysis", choices=("delta", "naive"), default="delta")
    p.add_argument("--p", type=float, default=0.6)
    p.add_argument("--rel-lift", type=float, default=0.1)
    p.add_argument("--ate", type=float, default=0.05)
    p.add_argument("--mean-mode", choices=("sample", "true_mean", "large_sample"),
                   default="sample")
    p.add_argument("--reps", type=int, default=simulation.DEFAULT_REPS)
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--histogram-out", help="write (observed_lift, significant) CSV (mod suite)")
    _add_design(p)
    return parser


def _load_config(path: str) -> dict[str, Any]:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise DataValidationError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise DataValidationError(f"config {path} is not valid JSON: {exc}") from None
    if isinstance(data, dict) and isinstance(data.get("config"), dict):
        data = data["config"]
    if not isinstance(data, dict):
        raise DataValidationError(f"config {path} must hold a JSON object")
    return data


def parse_args(argv: Sequence[str]) -> argparse.Namespace:
    parser = build_parser()
    pre, _ = parser.parse_known_args(argv)
    argv = list(argv)
    if pre.config:
        cfg = _load_config(pre.config)
        command = pre.command or cfg.get("command")
        if command is None:
            parser.error("config does not name a command")
        if command not in parser.subcommands:
            parser.error(f"config names unknown command {command!r}")
        subparser = parser.subcommands[command]
        known = {a.dest for a in subparser._actions}
        subparser.set_defaults(**{k: v for k, v in cfg.items() if k in known})
        if pre.command is None:
            # global options must precede the subcommand
            argv = argv + [command]
    args = parser.parse_args(argv)
    if args.command is None:
        parser.error("a subcommand is required")
    return args


def resolved_config(args: argparse.Namespace) -> dict[str, Any]:
    return {k: v for k, v in sorted(vars(args).items()) if k not in _RUNTIME_KEYS}


def _need(args, *names: str) -> None:
    missing = [n for n in names if getattr(args, n) is None]
    if missing:
        flags = ", ".join("--" + n.replace("_", "-") for n in missing)
        raise UsageError(f"{args.command} requires {flags}")


def _one_lift(args) -> tuple[str, float]:
    if (args.delta is None) == (args.rel_lift is None):
        raise UsageError("give exactly one of --delta or --rel-lift")
    return ("absolute", args.delta) if args.delta is not None else ("relative", args.rel_lift)


def cmd_size(args) -> dict[str, Any]:
    design = _design(args)
    lift_kind, lift = _one_lift(args)
    if args.design_kind is None:
        raise UsageError("choose --iid or --clustered")
    if args.design_kind == "iid":
        for flag in ("input", "aggregates", "h", "h_from"):
            if getattr(args, flag) is not None:
                raise UsageError(f"--{flag.replace('_', '-')} only applies to --clustered")
        return _size_iid(args, design, lift_kind, lift)
    return _size_clustered(args, design, lift_kind, lift)


def _size_iid(args, design, lift_kind, lift) -> dict[str, Any]:
    if args.outcome is None:
        raise UsageError("choose --binary or --continuous")
    if args.outcome == "binary":
        _need(args, "p")
        if lift_kind == "absolute":
            res = sizing.size_iid_binary(args.p, lift, design)
        else:
            res = sizing.size_relative_iid(args.p, lift, binary=True, design=design)
    else:
        _need(args, "sigma2")
        if lift_kind == "absolute":
            res = sizing.size_iid_continuous(args.sigma2, lift, design)
        else:
            _need(args, "mu_x")
            res = sizing.size_relative_iid(args.mu_x, lift, sigma2=args.sigma2, design=design)
    out = {"sizing": res.to_dict()}
    if args.outcome == "continuous" and lift_kind == "absolute":
        out["rule_of_thumb_16"] = 16 * args.sigma2 / lift**2
    if lift_kind == "relative":
        out["rel_abs_ratio"] = sizing.rel_abs_ratio(lift)
    return out


def _size_clustered(args, design, lift_kind, lift) -> dict[str, Any]:
    sources = [n for n in ("input", "aggregates", "h", "h_from") if getattr(args, n) is not None]
    if len(sources) != 1:
        raise UsageError("clustered sizing needs exactly one of --input, --aggregates, --h, --h-from")
    out: dict[str, Any] = {}
    moments = None
    users = None
    session_var = None
    h_window = args.h_window_days
    if args.input or args.aggregates:
        if args.input:
            mode = "binary" if args.outcome == "binary" else "continuous"
            records = ingest.read_sessions(args.input, mode)
            aggs = ingest.aggregate(records)
            if len(records) >= 2:
                session_var = sample_mean_var([r.metric for r in records]).variance
        else:
            aggs = ingest.read_aggregates(args.aggregates)
        moments = clustered.cluster_moments(aggs)
        hv = clustered.compute_h(moments).h
        users = len(aggs)
        out["moments"] = asdict(moments)
        out["metric_ratio"] = clustered.metric_ratio(aggs)
        if h_window is None:
            h_window = args.window_days
    elif args.h_from:
        prev = _read_report(args.h_from)
        try:
            hv = prev["result"]["h"]
        except (KeyError, TypeError):
            raise DataValidationError(f"{args.h_from} is not a clustered size report") from None
        h_window = prev["result"].get("window_days")
    else:
        hv = args.h
    if (h_window is not None and args.window_days is not None and h_window != args.window_days
            and not args.allow_window_mismatch):
        raise InfeasibleDesignError(
            f"h was estimated on a {h_window}-day window but the experiment runs "
            f"{args.window_days} days; h is not scale free (use --allow-window-mismatch to override)"
        )
    window = args.window_days if args.window_days is not None else h_window
    out["h"] = hv
    out["window_days"] = window
    if lift_kind == "absolute":
        res = clustered.size_clustered(hv, lift, design, window_days=window)
        p_x = out.get("metric_ratio")
    else:
        baseline = args.mu_x if args.mu_x is not None else out.get("metric_ratio")
        if baseline is None:
            raise UsageError("relative clustered sizing needs --mu-x or session data")
        if args.outcome == "binary" and not 0 < (1 + lift) * baseline < 1:
            raise InfeasibleDesignError("implied treatment rate lies outside (0, 1)")
        res = clustered.size_clustered_relative(hv, baseline, lift, design, window_days=window)
        p_x = baseline
    out["sizing"] = res.to_dict()
    if moments is not None:
        out["expected_sessions_per_arm"] = res.n_per_arm * moments.mu_N
    if args.compare_standard:
        out["standard_iid"] = _compare_standard(args, design, lift_kind, lift, p_x, session_var)
    available = args.available_users
    if available is None and window is not None:
        available = users
    if available is not None:
        plan = ingest.traffic_plan(res.n_per_arm, available, window)
        out["traffic_plan"] = asdict(plan)
    return out


def _read_report(path: str) -> dict[str, Any]:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataValidationError(f"cannot read report {path}: {exc}") from None


def _compare_standard(args, design, lift_kind, lift, p_x, session_var) -> dict[str, Any]:
    if args.outcome == "binary":
        if p_x is None:
            raise UsageError("--compare-standard needs session data or --mu-x")
        if lift_kind == "absolute":
            res = sizing.size_iid_binary(p_x, lift, design)
        else:
            res = sizing.size_relative_iid(p_x, lift, binary=True, design=design)
    else:
        if session_var is None:
            raise UsageError("--compare-standard for continuous metrics needs --input sessions")
        if lift_kind == "absolute":
            res = sizing.size_iid_continuous(session_var, lift, design)
        else:
            res = sizing.size_relative_iid(p_x, lift, sigma2=session_var, design=design)
    return {"sessions_per_arm": res.n_per_arm, "note":
            "ignores within-user correlation; the design would be under-powered"}


def cmd_mod(args) -> dict[str, Any]:
    design = _design(args)
    if args.ate is None and args.mod is None:
        raise UsageError("give --ate or --mod")
    ratio = sizing.mod_ratio(design)
    if args.ate is not None:
        return {"ate": args.ate, "mod": sizing.mod_from_ate(args.ate, design), "ratio": ratio}
    return {"mod": args.mod, "ate": sizing.ate_from_mod(args.mod, design), "ratio": ratio}


def cmd_allocate(args) -> dict[str, Any]:
    _need(args, "f", "delta", "sigma2")
    design = _design(args)
    res = sizing.allocate_unbalanced(args.f, args.delta, args.sigma2, design)
    balanced = sizing.size_iid_continuous(args.sigma2, args.delta, design)
    out = res.to_dict()
    out["balanced_n_per_arm"] = balanced.n_per_arm
    out["duration_change"] = res.duration_ratio_vs_balanced - 1.0
    out["total_change"] = res.total_ratio_vs_balanced - 1.0
    return out


def cmd_ingest(args) -> dict[str, Any]:
    _need(args, "input")
    agg = ingest.Aggregator().update(ingest.iter_sessions(args.input, args.mode))
    aggs = agg.results()
    if args.output:
        ingest.write_aggregates(args.output, aggs)
    out: dict[str, Any] = {"rows": agg.rows, "users": len(aggs), "duplicates": agg.duplicates}
    if len(aggs) >= 2:
        m = clustered.cluster_moments(aggs)
        out["moments"] = asdict(m)
        out["metric_ratio"] = clustered.metric_ratio(aggs)
        out["h"] = clustered.compute_h(m).h
    if args.output:
        out["output"] = args.output
    return out


def _resolve_seed(args) -> int:
    """Fill in the seed from --seed, $ABSIZE_SEED or fresh entropy, and always report it."""
    if getattr(args, "_seed_origin", None) is not None:
        return args.seed
    origin = "--seed"
    if args.seed is None:
        env = os.environ.get(SEED_ENV)
        if env:
            try:
                args.seed = int(env)
            except ValueError:
                raise UsageError(f"${SEED_ENV} must be an integer, got {env!r}") from None
            origin = f"${SEED_ENV}"
        else:
            args.seed = secrets.randbits(64)
            origin = "random"
    args._seed_origin = origin
    print(f"absize: using seed {args.seed} ({origin})", file=sys.stderr)
    return args.seed


def _case_k(args, case, design) -> tuple[int, float]:
    """Users per arm and mean sessions per user for a case."""
    if args.k_source == "historical":
        plan = simulation.plan_case(case, args.seed, design)
        k, mu_n = plan.k, plan.mu_N
    else:
        k = clustered.size_clustered(simulation.population_h(case), case.delta, design).n_per_arm
        mu_n = simulation.truncated_poisson_moments(case.lam)[0]
    return (args.k if args.k is not None else k), mu_n


def cmd_simulate(args) -> dict[str, Any]:
    seed = _resolve_seed(args)
    design = _design(args)
    kw = {"master_seed": seed, "threads": args.threads, "design": design}
    suite = args.suite
    if suite in ("clustered", "undersized"):
        case = simulation.CASES[args.case]
        k, mu_n = _case_k(args, case, design)
        if suite == "clustered":
            rep = simulation.run_clustered_suite(case, k, args.reps, analysis=args.analysis, **kw)
            return {"report": rep.to_dict()}
        n_iid = sizing.size_iid_binary(case.p_x, case.delta, design).n_per_arm
        first, second = simulation.run_undersized_scenarios(case, n_iid, k, mu_n, args.reps, **kw)
        return {"n_iid": n_iid, "scenario_i": first.to_dict(), "scenario_ii": second.to_dict()}
    if suite == "relative":
        rep = simulation.run_relative_iid_suite(args.p, args.rel_lift, args.reps,
                                                mean_mode=args.mean_mode, **kw)
        return {"report": rep.to_dict()}
    if suite == "absolute-sized":
        rep = simulation.run_absolute_sized_relative_suite(args.p, args.rel_lift, args.reps, **kw)
        return {"report": rep.to_dict()}
    if suite == "mod":
        hist = simulation.run_mod_experiment(args.p, args.ate, args.reps, **kw)
        if args.histogram_out:
            with open(args.histogram_out, "w", newline="", encoding="utf-8") as fh:
                write_histogram(fh, hist)
        return {"mod": hist.summary(), "_histogram": hist}
    hists = simulation.run_mod_grid(args.reps, **kw)
    return {"grid": [h.summary() for h in hists]}


def write_histogram(fh, hist: simulation.ModHistogram) -> None:
    w = csv.writer(fh)
    w.writerow(["observed_lift", "significant"])
    for lift, sig in hist.observed_lifts:
        w.writerow([repr(lift), "true" if sig else "false"])


COMMANDS = {
    "size": cmd_size,
    "mod": cmd_mod,
    "allocate": cmd_allocate,
    "ingest": cmd_ingest,
    "simulate": cmd_simulate,
}


def _flatten(d: dict[str, Any], prefix: str = "") -> dict[str, Any]:
    flat: dict[str, Any] = {}
    for key, value in d.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, name + "."))
        elif isinstance(value, list):
            flat[name] = json.dumps(value)
        else:
            flat[name] = value
    return flat


def render(report: dict[str, Any], fmt: str, histogram=None) -> str:
    if fmt == "json":
        return json.dumps(report, indent=2, sort_keys=True) + "\n"
    if fmt == "csv" and histogram is not None:
        buf = io.StringIO()
        write_histogram(buf, histogram)
        return buf.getvalue()
    flat = _flatten(report["result"])
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(flat.keys())
        w.writerow(flat.values())
        return buf.getvalue()
    width = max(map(len, flat), default=0)
    return "".join(f"{k:<{width}}  {v}\n" for k, v in flat.items())


def main(argv: Sequence[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except DataValidationError as exc:
        print(f"absize: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.command == "simulate":
            # resolved before the config is captured so the report embeds it
            _resolve_seed(args)
        result = COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"absize {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InfeasibleDesignError, DomainError) as exc:
        print(f"absize {args.command}: infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (DataValidationError, InsufficientDataError, ShapeError, OSError) as exc:
        print(f"absize {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    histogram = result.pop("_histogram", None)
    report = {"schema_version": SCHEMA_VERSION, "command": args.command,
              "config": resolved_config(args), "result": result}
    sys.stdout.write(render(report, args.format, histogram))
    plan = result.get("traffic_plan")
    if plan is not None and not plan["feasible"]:
        print(f"absize size: infeasible: {plan['advice']}", file=sys.stderr)
        return EXIT_INFEASIBLE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
