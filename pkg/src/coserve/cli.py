"""Operator command line.

Subcommands:

* ``profile``  - fit endpoint models from recorded traces
* ``plan``     - compute and audit a dispatch policy
* ``simulate`` - budget-sweep simulation with bootstrapped server TTFTs
* ``replay``   - same, consuming recorded server TTFTs from the trace
* ``serve``    - run the streaming gateway
* ``report``   - re-emit plot-ready long-format CSV from a report JSON

Exit codes: 0 ok, 1 usage, 2 data error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import cost as costmod
from .cost import BudgetSpec, Constrained, CostRates, rates_from_configs
from .dispatch import LengthDist, PolicyError, classify, plan, policy_audit_dict
from .gateway import GatewayConfig, GatewayConfigError, create_app
from .migration import MigrationError
from .profiles import (
    ProfileError,
    ProfileSnapshot,
    ServerTtftEcdf,
    ecdf_quantile,
    fit_device_linear,
    pearson,
)
from .sim import (
    ALL_BASELINES,
    EndpointModel,
    ExperimentReport,
    MigrationConfig,
    SimError,
    run_experiment,
)
from .workload import WorkloadError, load_trace

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_RUNTIME = 3

_DATA_ERRORS = (
    WorkloadError,
    ProfileError,
    PolicyError,
    SimError,
    MigrationError,
    GatewayConfigError,
    FileNotFoundError,
    KeyError,
    json.JSONDecodeError,
    ValueError,
)


class _Parser(argparse.ArgumentParser):
    """argparse with the documented usage exit code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _parse_grid(spec: str) -> list[float]:
    if ":" in spec:
        lo, hi, step = (float(x) for x in spec.split(":"))
        if step <= 0 or hi < lo:
            raise ValueError(f"bad grid spec {spec!r}")
        n = int(round((hi - lo) / step))
        return [round(lo + i * step, 10) for i in range(n + 1)]
    grid = [float(x) for x in spec.split(",") if x]
    if not grid:
        raise ValueError("empty budget grid")
    return grid


def _load_cost_config(path: str) -> tuple[CostRates, str]:
    """Read a cost config file; returns (rates, constrained-kind-or-auto)."""
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    constrained = raw.get("constrained", "auto")
    if constrained not in ("auto", "device", "server"):
        raise ValueError(f"constrained must be auto|device|server, got {constrained!r}")
    if "rates" in raw:
        return CostRates.from_dict(raw["rates"]), constrained
    lam = raw.get("lambda_per_mflop")
    if lam is None:
        lam = (costmod.DEFAULT_LAMBDA_SERVER_CONSTRAINED if constrained == "server"
               else costmod.DEFAULT_LAMBDA_DEVICE_CONSTRAINED)
    # Pricing: an inline {"model", "input_per_mtok", "output_per_mtok"} entry
    # or the name of a bundled one.
    pricing = raw.get("pricing", raw.get("pricing_model", "GPT-4o-mini"))
    rates = rates_from_configs(
        pricing,
        raw.get("arch", "bloom-1.1b"),
        float(lam),
        context_len=int(raw.get("context_len", costmod.DEFAULT_GENERATION_CAP)),
    )
    return rates, constrained


def _resolve_kind(rates: CostRates, constrained: str) -> Constrained:
    if constrained == "auto":
        return classify(rates)
    return Constrained(constrained)


def cmd_profile(args) -> int:
    if not args.device_trace and not args.server_trace:
        raise ProfileError("need --device-trace and/or --server-trace")
    device_model = None
    decode_rate = args.decode_rate
    server_samples: list[float] = []
    tbt_samples: list[float] = []

    if args.device_trace:
        trace = load_trace(args.device_trace)
        pairs = [(r.prompt_len, r.ttft_s) for r in trace if r.ttft_s is not None]
        if len(pairs) < 2:
            raise ProfileError(f"{args.device_trace}: needs >= 2 rows with ttft_s")
        device_model = fit_device_linear(pairs)
        coef = pearson([p[0] for p in pairs], [p[1] for p in pairs])
        print(f"device fit: ttft = {device_model.k:.6g} * len + {device_model.c:.6g}  "
              f"(pearson {coef:.4f}, n={len(pairs)})")

    if args.server_trace:
        trace = load_trace(args.server_trace)
        server_samples = [r.ttft_s for r in trace if r.ttft_s is not None]
        if not server_samples:
            raise ProfileError(f"{args.server_trace}: no ttft_s fields found")
        for r in trace:
            if r.tbt_s:
                tbt_samples.extend(r.tbt_s)
        ecdf = ServerTtftEcdf(np.asarray(server_samples))
        print(f"server ttft: n={ecdf.n}  "
              f"P50={ecdf_quantile(ecdf, 0.50):.4g}s  "
              f"P95={ecdf_quantile(ecdf, 0.95):.4g}s  "
              f"P99={ecdf_quantile(ecdf, 0.99):.4g}s")

    if args.out:
        if device_model is None or not server_samples:
            raise ProfileError("writing a profile snapshot needs both --device-trace and --server-trace")
        snapshot = ProfileSnapshot(
            device_ttft=device_model,
            device_decode_rate=decode_rate,
            server_ecdf=ServerTtftEcdf(np.asarray(server_samples)),
            server_tbt_samples=tuple(tbt_samples) or (args.server_tbt,),
        )
        snapshot.save(args.out)
        print(f"wrote {args.out}")
    return EXIT_OK


def cmd_plan(args) -> int:
    profile = ProfileSnapshot.load(args.profile)
    rates, constrained = _load_cost_config(args.cost)
    kind = _resolve_kind(rates, constrained)
    trace = load_trace(args.trace)
    dist = LengthDist.from_samples(trace.prompt_lens())
    budget = BudgetSpec(b=args.b, alpha=args.alpha, constrained=kind)
    policy = plan(dist, profile.server_ecdf, budget)
    audit = policy_audit_dict(policy, budget)
    out = Path(args.out)
    out.write_text(json.dumps(audit, indent=2) + "\n", encoding="utf-8")
    if kind is Constrained.SERVER:
        print(f"server-constrained plan: l_th={audit['l_th']}")
    else:
        print(f"device-constrained plan: w_tail={audit['w_tail']:.4g}s "
              f"l_th={audit['l_th']} entries={len(audit['table'])}")
    print(f"wrote {out}")
    return EXIT_OK


def _run_sim(args, mode: str) -> int:
    trace = load_trace(args.trace, gen_cap=args.gen_cap)
    profile = ProfileSnapshot.load(args.profile)
    rates, constrained = _load_cost_config(args.cost)
    kind = _resolve_kind(rates, constrained)
    models = EndpointModel.from_profile(profile, mode=mode)
    grid = _parse_grid(args.grid)
    baselines = tuple(b for b in args.baselines.split(",") if b) if args.baselines else ALL_BASELINES
    mig = MigrationConfig(enabled=not args.no_migration,
                          r_c=None if args.r_c == 0 else args.r_c)
    report = run_experiment(
        trace, models, rates, grid, kind,
        baselines=baselines, seed=args.seed, n_seeds=args.seeds, mig=mig, alpha=args.alpha,
        workers=args.workers,
    )
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "report.json").write_text(report.to_json(), encoding="utf-8")
    (outdir / "report.csv").write_text(report.to_csv(), encoding="utf-8")
    (outdir / "report_long.csv").write_text(report.to_csv_long(), encoding="utf-8")
    print(f"{len(report.rows)} rows over grid={grid} kind={kind.value} -> {outdir}")
    for row in report.rows:
        print(f"  b={row['b']:<5g} {row['method']:<14} mean_ttft={row['mean_ttft_s']:.4g}s "
              f"p99_ttft={row['p99_ttft_s']:.4g}s cost=${row['total_cost_usd']:.4g}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    return _run_sim(args, "bootstrap")


def cmd_replay(args) -> int:
    return _run_sim(args, "replay")


def cmd_serve(args) -> int:
    config = GatewayConfig.from_file(args.config)
    if args.mock and not config.mock:
        raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        raw["mock"] = True
        config = GatewayConfig.from_dict(raw)
    app = create_app(config)
    import uvicorn

    try:
        uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    except OSError as exc:
        print(f"bind failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_report(args) -> int:
    raw = json.loads(Path(args.report).read_text(encoding="utf-8"))
    report = ExperimentReport(meta=raw["meta"], rows=raw["rows"])
    Path(args.out).write_text(report.to_csv_long(), encoding="utf-8")
    print(f"wrote {args.out}")
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="coserve", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("profile", help="fit endpoint models from recorded traces")
    p.add_argument("--device-trace", help="JSONL trace with device (prompt_len, ttft_s) rows")
    p.add_argument("--server-trace", help="JSONL trace with server ttft_s rows")
    p.add_argument("--decode-rate", type=float, default=13.93,
                   help="device decode rate, tokens/s")
    p.add_argument("--server-tbt", type=float, default=0.05,
                   help="fallback server inter-token interval, seconds")
    p.add_argument("--out", help="profile snapshot JSON path")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("plan", help="compute a dispatch policy and write its audit JSON")
    p.add_argument("--trace", required=True, help="trace supplying the prompt-length distribution")
    p.add_argument("--profile", required=True)
    p.add_argument("--cost", required=True, help="cost config JSON")
    p.add_argument("--b", type=float, required=True)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plan)

    for name, helptext in (("simulate", "budget sweep with bootstrapped server TTFTs"),
                           ("replay", "budget sweep replaying recorded server TTFTs")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--trace", required=True)
        p.add_argument("--profile", required=True)
        p.add_argument("--cost", required=True)
        p.add_argument("--grid", default="0.1:0.9:0.1", help='"lo:hi:step" or comma list')
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--seeds", type=int, default=10, help="runs averaged per budget point")
        p.add_argument("--baselines", default=",".join(ALL_BASELINES))
        p.add_argument("--no-migration", action="store_true")
        p.add_argument("--r-c", type=float, default=4.0, help="paced delivery rate (0 disables)")
        p.add_argument("--alpha", type=float, default=0.05)
        p.add_argument("--gen-cap", type=int, default=None)
        p.add_argument("--workers", type=int, default=1,
                       help="process pool size for (budget, seed) cells")
        p.add_argument("--out", required=True, help="output directory")
        p.set_defaults(func=cmd_simulate if name == "simulate" else cmd_replay)

    p = sub.add_parser("serve", help="run the streaming gateway")
    p.add_argument("--config", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8800)
    p.add_argument("--mock", action="store_true", help="use in-process mock upstreams")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("report", help="emit long-format CSV from a report JSON")
    p.add_argument("--report", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except _DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
