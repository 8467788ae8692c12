"""Command-line front end: solve, baseline, validate, simulate, compare.

Exit codes: 0 ok, 1 usage or input error, 2 solver did not converge,
3 a validated property failed.  Numbers are written with 12 significant
digits.  Flags override values from --config, which override defaults.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import MECHANISMS, BaselineError, run_baseline
from .distributed import SCHEDULES, DistributedConfig, solve_distributed
from .fairness import PROPERTIES, deviation_summary, validate
from .harness import (
    Mechanism,
    SimConfig,
    SyntheticConfig,
    TraceError,
    generate_synthetic_trace,
    parse_trace,
    random_placement,
    run_simulation,
    two_class_servers,
)
from .model import ClusterError, allocation_from_csv, allocation_to_csv, fmt, load_cluster, utilization
from .psmfa import SolverConfig, solve_psmfa
from .utility import ServerUtility, UtilityDomainError, UtilityParams, load_params

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_NONCONVERGED, EXIT_PROPERTY = 0, 1, 2, 3


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    inputs: dict[str, str | None]
    mechanism: dict
    seed: int | None
    output: str | None
    version: str = __version__
    argv: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _round(v):
    """Recursively fix floats at 12 significant digits; NaN/inf become null."""
    if isinstance(v, dict):
        return {str(k): _round(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_round(x) for x in v]
    if isinstance(v, (np.floating, float)):
        f = float(v)
        return float(fmt(f)) if math.isfinite(f) else None
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.ndarray):
        return _round(v.tolist())
    return v


def _dumps(doc) -> str:
    return json.dumps(_round(doc), indent=2, sort_keys=True) + "\n"


def _emit(out: str | None, files: dict[str, str], manifest: RunManifest, primary: str) -> None:
    """Write every file plus manifest.json into out, or the primary file to stdout."""
    if out is None:
        sys.stdout.write(files[primary])
        return
    d = Path(out)
    d.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        (d / name).write_text(text)
    (d / "manifest.json").write_text(_dumps(manifest.to_dict()))


def _manifest(args, inputs: dict, mechanism: dict, seed=None) -> RunManifest:
    return RunManifest(args.command, inputs, mechanism, seed, args.out, argv=list(args.argv))


def _params(cluster, args) -> UtilityParams:
    if getattr(args, "params", None):
        return load_params(cluster, args.params)
    alpha = args.alpha
    if len(alpha) not in (1, cluster.n_servers):
        raise UsageError(f"--alpha takes 1 or {cluster.n_servers} values")
    alphas = np.broadcast_to(np.asarray(alpha, dtype=float), (cluster.n_servers,))
    return UtilityParams(tuple(ServerUtility(float(a), args.A, args.B) for a in alphas))


# ---------------------------------------------------------------------------
# commands


def cmd_solve(args) -> int:
    cluster = load_cluster(args.cluster)
    params = _params(cluster, args)
    if args.method == "psmfa":
        config = SolverConfig(max_iters=args.max_iters, merit_tol=args.merit_tol, time_limit=args.time_limit)
        res = solve_psmfa(cluster, params, config)
        doc = res.to_dict(cluster)
        extra = {}
    else:
        config = DistributedConfig(
            barrier_epsilon=args.epsilon,
            schedule=args.schedule,
            seed=args.seed,
            max_rounds=args.max_rounds,
            time_limit=args.time_limit,
        )
        res = solve_distributed(cluster, params, config)
        doc = res.to_dict(cluster)
        doc["residual_history"] = res.residual_history
        doc["rounds"] = res.rounds
        extra = {"residuals.csv": res.residual_csv()}
    doc.pop("elapsed_seconds", None)
    files = {"allocation.csv": allocation_to_csv(cluster, res.allocation), "result.json": _dumps(doc), **extra}
    manifest = _manifest(
        args,
        {"cluster": args.cluster, "params": args.params},
        {"method": args.method, "params": params.to_dict(cluster)},
        args.seed if args.method == "distributed" else None,
    )
    _emit(args.out, files, manifest, "allocation.csv")
    print(f"{args.method}: {res.status} after {res.iterations} iterations", file=sys.stderr)
    return EXIT_OK if res.converged else EXIT_NONCONVERGED


def cmd_baseline(args) -> int:
    if args.mechanism is None:
        raise UsageError(f"--mechanism is required (one of {', '.join(MECHANISMS)})")
    cluster = load_cluster(args.cluster)
    alloc = run_baseline(cluster, args.mechanism, args.mode)
    files = {"allocation.csv": allocation_to_csv(cluster, alloc)}
    manifest = _manifest(args, {"cluster": args.cluster}, {"mechanism": args.mechanism, "mode": args.mode})
    _emit(args.out, files, manifest, "allocation.csv")
    return EXIT_OK


def cmd_validate(args) -> int:
    props = [p.strip() for p in args.properties.split(",") if p.strip()]
    unknown = [p for p in props if p not in PROPERTIES]
    if unknown or not props:
        raise UsageError(f"unknown properties {unknown}; choose from {','.join(PROPERTIES)}")
    cluster = load_cluster(args.cluster)
    alloc = allocation_from_csv(cluster, Path(args.allocation).read_text(), args.mode)
    params = _params(cluster, args) if "vi" in props else None
    reports = validate(cluster, alloc, props, params, args.tol)
    doc = {"reports": [r.to_dict() for r in reports], "all_pass": all(r.verdict is not False for r in reports)}
    manifest = _manifest(args, {"cluster": args.cluster, "allocation": args.allocation}, {"properties": props})
    _emit(args.out, {"report.json": _dumps(doc)}, manifest, "report.json")
    for r in reports:
        verdict = {True: "pass", False: "FAIL", None: "n/a"}[r.verdict]
        print(f"{r.name}: {verdict}", file=sys.stderr)
    return EXIT_OK if doc["all_pass"] else EXIT_PROPERTY


def _synthetic_config(args) -> SyntheticConfig:
    doc = {}
    if args.synthetic:
        doc = json.loads(Path(args.synthetic).read_text())
    known = {f.name for f in fields(SyntheticConfig)}
    bad = set(doc) - known
    if bad:
        raise UsageError(f"unknown synthetic config keys {sorted(bad)}")
    if "quanta_range" in doc:
        doc["quanta_range"] = tuple(doc["quanta_range"])
    return SyntheticConfig(**doc)


def cmd_simulate(args) -> int:
    if args.trace and args.synthetic is not None:
        raise UsageError("give either --trace or --synthetic, not both")
    servers = list(load_cluster(args.cluster).servers) if args.cluster else two_class_servers()
    resources = ("cpu", "ram")
    if args.cluster:
        resources = tuple(load_cluster(args.cluster).resources)
    if args.trace:
        with open(args.trace) as fh:
            records = parse_trace(fh, len(resources))
    else:
        cfg = _synthetic_config(args)
        if cfg.n_resources != len(resources):
            raise UsageError(f"synthetic n_resources={cfg.n_resources} but cluster has {len(resources)} resources")
        records = generate_synthetic_trace(cfg, args.seed)
    placement = None
    if args.placement is not None:
        users = sorted({r.user for r in records})
        placement = random_placement(users, [s.id for s in servers], args.seed, args.placement)
    mechs = []
    for text in args.mechanism:
        if text == "apf":
            mechs += [Mechanism.parse("apf", a) for a in args.alpha]
        else:
            mechs.append(Mechanism.parse(text))
    summaries = []
    status = EXIT_OK
    for mech in mechs:
        report = run_simulation(servers, records, mech, config=SimConfig(resources=resources), placement=placement)
        manifest = _manifest(
            args,
            {"cluster": args.cluster, "trace": args.trace, "synthetic": args.synthetic},
            {"mechanism": mech.label, "placement": args.placement},
            args.seed,
        )
        if args.out is not None:
            sub = Path(args.out) / mech.label.replace(":", "_") if len(mechs) > 1 else Path(args.out)
            report.write(sub, _round(manifest.to_dict()))
        summary = report.summary()
        summaries.append(summary)
        if summary["flagged_epochs"]:
            status = EXIT_NONCONVERGED
    rows = ["mechanism,mean_utilization,mean_deviation,flagged_epochs"]
    for s in summaries:
        rows.append(f"{s['mechanism']},{fmt(s['mean_utilization'])},{fmt(s['mean_deviation'])},{len(s['flagged_epochs'])}")
    sys.stdout.write("\n".join(rows) + "\n")
    if len(summaries) > 1:
        for a, b in zip(summaries, summaries[1:]):
            ok_u = a["mean_utilization"] >= b["mean_utilization"] - args.slack
            ok_d = a["mean_deviation"] <= b["mean_deviation"] + args.slack
            print(
                f"utilization {a['mechanism']} >= {b['mechanism']}: {'yes' if ok_u else 'no'}; "
                f"deviation {a['mechanism']} <= {b['mechanism']}: {'yes' if ok_d else 'no'}",
                file=sys.stderr,
            )
    return status


def cmd_compare(args) -> int:
    if not args.mechanisms:
        raise UsageError("give at least one mechanism")
    cluster = load_cluster(args.cluster)
    mechs = [Mechanism.parse(m) for m in args.mechanisms]
    columns = {}
    status = EXIT_OK
    for mech in mechs:
        if mech.name == "apf":
            res = solve_psmfa(cluster, UtilityParams.alpha_fair(cluster, mech.alpha))
            alloc = res.allocation
            if not res.converged:
                status = EXIT_NONCONVERGED
        else:
            alloc = run_baseline(cluster, mech.name)
        per, agg = utilization(cluster, alloc)
        col = {f"tasks:{u}": t for u, t in zip(cluster.user_ids, alloc.totals)}
        col.update({f"utilization:{r}": v for r, v in zip(cluster.resources, agg)})
        col["deviation:average"] = deviation_summary(cluster, alloc)["average"]
        columns[mech.label] = col
    metrics = list(next(iter(columns.values())))
    rows = [",".join(["metric", *columns])]
    for m in metrics:
        rows.append(",".join([m, *(fmt(c[m]) for c in columns.values())]))
    manifest = _manifest(args, {"cluster": args.cluster}, {"mechanisms": [m.label for m in mechs]})
    _emit(args.out, {"compare.csv": "\n".join(rows) + "\n"}, manifest, "compare.csv")
    return status


# ---------------------------------------------------------------------------
# parser


def _add_params(p):
    p.add_argument("--params", help="utility parameters JSON (default/per_server alpha, A, B)")
    p.add_argument("--alpha", type=float, nargs="+", default=[1.0], help="alpha, one value or one per server")
    p.add_argument("--A", type=float, default=1.0, help="extended utility coefficient A")
    p.add_argument("--B", type=float, default=0.0, help="extended utility coefficient B")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vdsfair", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("--config", help="JSON file of flag defaults (keys are flag names with underscores)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="alpha-fair allocation by PS-MFA or the distributed heuristic")
    p.add_argument("cluster")
    _add_params(p)
    p.add_argument("--method", choices=("psmfa", "distributed"), default="psmfa")
    p.add_argument("--max-iters", type=int, default=100_000)
    p.add_argument("--merit-tol", type=float, default=1e-10)
    p.add_argument("--epsilon", type=float, default=1e-2, help="barrier epsilon (distributed)")
    p.add_argument("--schedule", choices=SCHEDULES, default="sync", help="server order (distributed)")
    p.add_argument("--max-rounds", type=int, default=200_000, help="round limit (distributed)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--time-limit", type=float, default=None, help="seconds")
    p.add_argument("--out", help="output directory (default: allocation CSV to stdout)")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("baseline", help="PS-DSF, DRFH, TSF or uniform allocation")
    p.add_argument("cluster")
    # not required=True so that --config can supply it
    p.add_argument("--mechanism", choices=MECHANISMS)
    p.add_argument("--mode", choices=("divisible", "time-shared"), default="divisible")
    p.add_argument("--out")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("validate", help="check fairness properties of an allocation CSV")
    p.add_argument("cluster")
    p.add_argument("allocation")
    p.add_argument("--properties", default=",".join(PROPERTIES), help=f"comma list from {','.join(PROPERTIES)}")
    p.add_argument("--mode", choices=("divisible", "time-shared"), default="divisible")
    p.add_argument("--tol", type=float, default=1e-6)
    _add_params(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("simulate", help="epoch simulation over a trace")
    p.add_argument("--cluster", help="cluster JSON whose servers are used (default: two-class cluster)")
    p.add_argument("--trace", help="CSV with header epoch,user,<resources>")
    p.add_argument("--synthetic", nargs="?", const="", default=None, help="synthetic workload, optional JSON config")
    p.add_argument("--mechanism", nargs="+", default=["apf"], help="apf, apf:<alpha>, psdsf, drfh, tsf, uniform")
    p.add_argument("--alpha", type=float, nargs="+", default=[1.0], help="alphas for plain 'apf' (inf = PS-DSF)")
    p.add_argument("--placement", type=float, default=None, help="eligibility probability for random placement")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--slack", type=float, default=1e-3)
    p.add_argument("--out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("compare", help="side-by-side totals, utilization and deviation")
    p.add_argument("cluster")
    p.add_argument("mechanisms", nargs="*", help="apf:<alpha>, psdsf, drfh, tsf, uniform")
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)
    return parser


def _parse(parser: argparse.ArgumentParser, argv: list[str]):
    args = parser.parse_args(argv)
    if args.config:
        doc = json.loads(Path(args.config).read_text())
        if not isinstance(doc, dict):
            raise UsageError("--config must hold a JSON object")
        subparser = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in subparser._actions}
        bad = set(doc) - known
        if bad:
            raise UsageError(f"unknown config keys for {args.command}: {sorted(bad)}")
        subparser.set_defaults(**doc)
        args = parser.parse_args(argv)
    args.argv = argv
    return args


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _parse(parser, argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    except (UsageError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, OSError, ClusterError, TraceError, ValueError, UtilityDomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except BaselineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED


if __name__ == "__main__":
    sys.exit(main())
