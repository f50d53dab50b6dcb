"""Deterministic discrete-event simulator.

Replays a trace through a dispatch policy: both endpoints race to the first
token, the loser is canceled (its partially-done work is still billed),
decode optionally migrates to the cheaper endpoint behind a smoothing
buffer, and delivery is paced at the consumer rate.  Server TTFTs come
either from recorded trace timings (replay) or from i.i.d. resampling of
the profiled distribution (bootstrap); all randomness is drawn up front per
seed, so identical inputs produce byte-identical reports and every method
at a given seed sees the same samples.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .cost import Constrained, CostRates, unified_request_cost
from .dispatch import (
    DispatchDecision,
    LengthDist,
    decide,
    plan_device_constrained,
    plan_server_constrained,
)
from .migration import MigrationParams, migration_gain, schedule_handoff, should_migrate
from .profiles import DeviceTtftModel, ProfileSnapshot, ServerTtftEcdf, ecdf_quantile
from .workload import Request, Trace

__all__ = [
    "SimError",
    "DeviceModel",
    "ServerModel",
    "EndpointModel",
    "MigrationConfig",
    "RequestSamples",
    "CostLedger",
    "TokenTimeline",
    "RequestOutcome",
    "ExperimentReport",
    "ALL_BASELINES",
    "draw_samples",
    "simulate_request",
    "simulate_trace",
    "baseline_stoch",
    "metrics",
    "pooled_quantile",
    "rank_quantile",
    "run_experiment",
]

ALL_BASELINES = ("stoch", "server_only", "device_only", "coserve_nomig")


class SimError(ValueError):
    """Raised on inconsistent simulator configuration."""


@dataclass(frozen=True)
class DeviceModel:
    ttft: DeviceTtftModel
    decode_rate: float  # tokens/s

    def __post_init__(self):
        if not self.decode_rate > 0:
            raise SimError("device decode rate must be > 0")


@dataclass(frozen=True, eq=False)
class ServerModel:
    ecdf: ServerTtftEcdf
    tbt_samples: np.ndarray
    mode: str = "bootstrap"  # or "replay"

    def __post_init__(self):
        arr = np.asarray(self.tbt_samples, dtype=float)
        if arr.size == 0 or np.any(arr <= 0):
            raise SimError("server TBT samples must be non-empty and positive")
        if self.mode not in ("bootstrap", "replay"):
            raise SimError(f"unknown server sampling mode {self.mode!r}")
        arr.setflags(write=False)
        object.__setattr__(self, "tbt_samples", arr)


@dataclass(frozen=True)
class EndpointModel:
    device: DeviceModel
    server: ServerModel

    @classmethod
    def from_profile(cls, snapshot: ProfileSnapshot, mode: str = "bootstrap") -> "EndpointModel":
        return cls(
            device=DeviceModel(ttft=snapshot.device_ttft, decode_rate=snapshot.device_decode_rate),
            server=ServerModel(
                ecdf=snapshot.server_ecdf,
                tbt_samples=np.asarray(snapshot.server_tbt_samples, dtype=float),
                mode=mode,
            ),
        )


@dataclass(frozen=True)
class MigrationConfig:
    """Migration and pacing knobs for the simulator.

    ``r_c`` is the paced consumption rate (None disables pacing and, with
    it, buffered migration).  ``server_ttft_quantile`` sets the conservative
    estimate used for server-target migration overhead.  ``allowed_target``
    restricts the handoff direction ("auto" permits either, guarded by the
    cost comparison).
    """

    enabled: bool = True
    r_c: float | None = 4.0
    server_ttft_quantile: float = 0.9
    allowed_target: str = "auto"  # "auto" | "device" | "server"

    def __post_init__(self):
        if self.r_c is not None and not self.r_c > 0:
            raise SimError("r_c must be > 0 or None")
        if not 0.0 <= self.server_ttft_quantile <= 1.0:
            raise SimError("server_ttft_quantile must be in [0, 1]")
        if self.allowed_target not in ("auto", "device", "server"):
            raise SimError(f"bad allowed_target {self.allowed_target!r}")


NO_MIGRATION = MigrationConfig(enabled=False, r_c=4.0)


@dataclass(frozen=True, eq=False)
class RequestSamples:
    """Per-request randomness drawn once per seed and shared by all methods."""

    server_ttft_s: np.ndarray
    server_tbt_s: np.ndarray
    mig_server_ttft_s: np.ndarray
    stoch_u: np.ndarray


def draw_samples(models: EndpointModel, trace: Trace, rng: np.random.Generator) -> RequestSamples:
    """Draw the per-request sample vectors for one simulation run."""
    n = len(trace)
    srv = models.server
    if srv.mode == "replay":
        ttfts = np.empty(n)
        for i, req in enumerate(trace):
            if req.ttft_s is None:
                raise SimError(f"replay mode needs ttft_s on every request (missing on {req.id!r})")
            ttfts[i] = req.ttft_s
    else:
        ttfts = rng.choice(srv.ecdf.samples, size=n, replace=True)
    return RequestSamples(
        server_ttft_s=ttfts,
        server_tbt_s=rng.choice(srv.tbt_samples, size=n, replace=True),
        mig_server_ttft_s=rng.choice(srv.ecdf.samples, size=n, replace=True),
        stoch_u=rng.random(n),
    )


@dataclass
class CostLedger:
    """Per-endpoint usage for one request.

    ``*_flops`` are billed work (partial on cancellation); the
    ``*_toks_charged`` counters charge whole prompts whenever an endpoint
    started prefill, which is what the budget audits count.
    """

    server_prefill_toks: float = 0.0
    server_decode_toks: float = 0.0
    device_prefill_flops: float = 0.0
    device_decode_flops: float = 0.0
    device_prefill_toks_charged: int = 0
    server_prefill_toks_charged: int = 0


@dataclass(eq=False)
class TokenTimeline:
    """Delivery timestamps for one request's tokens.

    Uniform-gap streams are stored compactly; migrated streams carry
    explicit times.  ``producers`` is a single endpoint name or a per-token
    tuple; ``migration_index`` is the first target-produced token.
    """

    first_s: float
    n: int
    uniform_gap_s: float | None = None
    times_s: np.ndarray | None = None
    producers: str | tuple[str, ...] = "device"
    migration_index: int | None = None

    def times(self) -> np.ndarray:
        if self.times_s is not None:
            return self.times_s
        return self.first_s + np.arange(self.n) * (self.uniform_gap_s or 0.0)

    def gap_summary(self):
        """Inter-token gaps as (value, count) for uniform streams or an array."""
        if self.times_s is not None:
            return np.diff(self.times_s)
        return (self.uniform_gap_s or 0.0, max(0, self.n - 1))


@dataclass(eq=False)
class RequestOutcome:
    request_id: str
    ttft_s: float
    winner: str
    migrated: bool
    delayed_tokens: int
    unified_cost: float
    ledger: CostLedger
    timeline: TokenTimeline
    prompt_len: int
    device_started: bool


def _decode_gap(endpoint: str, models: EndpointModel, server_tbt_s: float) -> float:
    return server_tbt_s if endpoint == "server" else 1.0 / models.device.decode_rate


def simulate_request(
    req: Request,
    decision: DispatchDecision,
    models: EndpointModel,
    rates: CostRates,
    mig: MigrationConfig,
    server_ttft_s: float,
    server_tbt_s: float,
    mig_server_ttft_s: float | None = None,
) -> RequestOutcome:
    """Simulate one request end to end.

    Both endpoints race: the device's first token lands at
    arrival + delay + k*l + c, the server's at arrival + sampled TTFT
    (infinity when not issued).  Ties go to the device.  The loser is
    canceled at the winner's first token; a canceled server still bills its
    full prompt, a canceled device bills prefill work proportional to the
    fraction completed.  Decode bills to whichever endpoint produced each
    token, switching at the migration barrier when a handoff fires.
    """
    t0 = req.arrival_s
    l = req.prompt_len
    n_out = req.output_len
    dev_prefill_dur = models.device.ttft.predict(l)
    delay = decision.device_start_delay_s

    device_first = math.inf if math.isinf(delay) else t0 + delay + dev_prefill_dur
    server_first = t0 + server_ttft_s if decision.server_issue else math.inf
    winner = "device" if device_first <= server_first else "server"
    first = device_first if winner == "device" else server_first
    ttft = first - t0

    ledger = CostLedger()
    if decision.server_issue:
        ledger.server_prefill_toks = float(l)
        ledger.server_prefill_toks_charged = l
    # The device starts prefill only if the server has not delivered by the
    # wait deadline (strictly after it, matching the charge rule).
    device_started = (not math.isinf(delay)) and server_first > t0 + delay
    if device_started:
        ledger.device_prefill_toks_charged = l
        full = rates.device_prefill_flops * l
        if winner == "device":
            ledger.device_prefill_flops = full
        else:
            frac = (server_first - (t0 + delay)) / dev_prefill_dur
            ledger.device_prefill_flops = full * min(1.0, max(0.0, frac))

    win_gap = _decode_gap(winner, models, server_tbt_s)

    migrated = False
    delayed = 0
    stop = n_out - 1  # last winner-produced token index
    target = None
    timeline: TokenTimeline | None = None

    if mig.enabled and mig.r_c is not None and n_out > 1:
        target = "server" if winner == "device" else "device"
        if mig.allowed_target in ("auto", target):
            c_win = rates.server_decode if winner == "server" else rates.device_decode_usd()
            c_tgt = rates.server_decode if target == "server" else rates.device_decode_usd()
            if c_win > c_tgt:
                r_src = 1.0 / win_gap
                r_tgt = 1.0 / _decode_gap(target, models, server_tbt_s)
                if target == "device":
                    t_est = models.device.ttft.predict(l + 1)
                else:
                    t_est = ecdf_quantile(models.server.ecdf, mig.server_ttft_quantile)
                params = MigrationParams(
                    r_c=mig.r_c, r_g_source=r_src, r_g_target=r_tgt, t_m_estimate_s=t_est,
                    delta_decode_cost=c_win - c_tgt,
                )
                proj, _ = schedule_handoff(params, n_out, first_token_s=first)
                if proj.migrated:
                    suffix = n_out - 1 - proj.source_stop_token
                    prefix_ctx = l + proj.source_stop_token + 1
                    if target == "server":
                        overhead = rates.server_prefill * prefix_ctx
                    else:
                        overhead = rates.device_prefill_flops * prefix_ctx * rates.lambda_per_mflop / 1e6
                    gain = migration_gain(c_win - c_tgt, suffix)
                    if should_migrate(gain, overhead):
                        if target == "server":
                            t_act = mig_server_ttft_s if mig_server_ttft_s is not None else t_est
                        else:
                            t_act = models.device.ttft.predict(prefix_ctx)
                        plan, tl = schedule_handoff(
                            params, n_out, first_token_s=first, t_m_actual_s=t_act
                        )
                        if plan.migrated:
                            migrated = True
                            stop = plan.source_stop_token
                            delayed = plan.delayed_tokens
                            timeline = TokenTimeline(
                                first_s=first,
                                n=n_out,
                                times_s=tl.delivered_s,
                                producers=tuple(
                                    winner if p == "source" else target for p in tl.producers
                                ),
                                migration_index=stop + 1,
                            )

    # Decode billing: each token bills to its producer; the winner's first
    # token is prefill output, so device decode work starts at token 1.
    n_win = stop + 1
    n_tgt = n_out - n_win
    if winner == "server":
        ledger.server_decode_toks += n_win
    else:
        ledger.device_decode_flops += (n_win - 1) * rates.device_decode_flops
    if migrated:
        prefix_ctx = l + n_win
        if target == "server":
            ledger.server_prefill_toks += prefix_ctx
            ledger.server_prefill_toks_charged += prefix_ctx
            ledger.server_decode_toks += n_tgt
        else:
            ledger.device_prefill_flops += rates.device_prefill_flops * prefix_ctx
            ledger.device_prefill_toks_charged += prefix_ctx
            ledger.device_decode_flops += rates.device_decode_flops * n_tgt

    if timeline is None:
        gap = win_gap if mig.r_c is None else max(win_gap, 1.0 / mig.r_c)
        timeline = TokenTimeline(first_s=first, n=n_out, uniform_gap_s=gap, producers=winner)

    cost = unified_request_cost(
        rates,
        ledger.server_prefill_toks,
        ledger.server_decode_toks,
        ledger.device_prefill_flops,
        ledger.device_decode_flops,
    )
    return RequestOutcome(
        request_id=req.id,
        ttft_s=ttft,
        winner=winner,
        migrated=migrated,
        delayed_tokens=delayed,
        unified_cost=cost,
        ledger=ledger,
        timeline=timeline,
        prompt_len=l,
        device_started=device_started,
    )


def _method_decision(method: str, policy, kind: Constrained, b: float, u: float,
                     prompt_len: int) -> DispatchDecision:
    if method in ("coserve", "coserve_nomig"):
        return decide(policy, prompt_len)
    if method == "server_only":
        return DispatchDecision(device_start_delay_s=math.inf, server_issue=True)
    if method == "device_only":
        return DispatchDecision(device_start_delay_s=0.0, server_issue=False)
    if method == "stoch":
        if kind is Constrained.SERVER:
            # Concurrent with probability b, else device-only.
            if u < b:
                return DispatchDecision(device_start_delay_s=0.0, server_issue=True)
            return DispatchDecision(device_start_delay_s=0.0, server_issue=False)
        # Device-constrained: server always; device joins with probability b.
        if u < b:
            return DispatchDecision(device_start_delay_s=0.0, server_issue=True)
        return DispatchDecision(device_start_delay_s=math.inf, server_issue=True)
    raise SimError(f"unknown method {method!r}")


def simulate_trace(
    trace: Trace,
    models: EndpointModel,
    rates: CostRates,
    mig: MigrationConfig,
    samples: RequestSamples,
    method: str,
    policy=None,
    kind: Constrained = Constrained.DEVICE,
    b: float = 0.5,
) -> list[RequestOutcome]:
    """Simulate every request of a trace under one method."""
    run_mig = mig if method == "coserve" else MigrationConfig(
        enabled=False, r_c=mig.r_c, server_ttft_quantile=mig.server_ttft_quantile
    )
    outcomes = []
    for i, req in enumerate(trace):
        decision = _method_decision(method, policy, kind, b, float(samples.stoch_u[i]), req.prompt_len)
        outcomes.append(
            simulate_request(
                req, decision, models, rates, run_mig,
                server_ttft_s=float(samples.server_ttft_s[i]),
                server_tbt_s=float(samples.server_tbt_s[i]),
                mig_server_ttft_s=float(samples.mig_server_ttft_s[i]),
            )
        )
    return outcomes


def rank_quantile(values, q: float) -> float:
    """Rank-based quantile: smallest value whose rank fraction reaches q."""
    arr = np.sort(np.asarray(values, dtype=float))
    if arr.size == 0:
        raise SimError("quantile of empty data")
    rank = max(1, math.ceil(q * arr.size - 1e-9))
    return float(arr[min(rank, arr.size) - 1])


def pooled_quantile(values: np.ndarray, weights: np.ndarray, q: float) -> float:
    """Rank-based quantile of a weighted multiset (integer weights)."""
    if values.size == 0:
        raise SimError("quantile of empty data")
    order = np.argsort(values, kind="stable")
    v = values[order]
    w = weights[order]
    cum = np.cumsum(w)
    total = cum[-1]
    if total <= 0:
        raise SimError("quantile of empty data")
    rank = max(1, math.ceil(q * total - 1e-9))
    idx = int(np.searchsorted(cum, rank))
    return float(v[min(idx, v.size - 1)])


def metrics(outcomes: Sequence[RequestOutcome]) -> dict:
    """Aggregate quality-of-experience and cost metrics over outcomes.

    TBT is pooled over every inter-token gap of every request; a second
    figure pools migrated requests only.  Delayed-token stats cover migrated
    requests only and are NaN when nothing migrated.
    """
    if not outcomes:
        raise SimError("metrics over empty outcome list")
    ttfts = np.array([o.ttft_s for o in outcomes])

    gap_vals: list[float] = []
    gap_wts: list[int] = []
    mig_gap_arrays: list[np.ndarray] = []
    gap_arrays: list[np.ndarray] = []
    for o in outcomes:
        g = o.timeline.gap_summary()
        if isinstance(g, tuple):
            if g[1] > 0:
                gap_vals.append(g[0])
                gap_wts.append(g[1])
        else:
            gap_arrays.append(g)
            if o.migrated:
                mig_gap_arrays.append(g)

    values = np.array(gap_vals, dtype=float)
    weights = np.array(gap_wts, dtype=np.int64)
    if gap_arrays:
        extra = np.concatenate(gap_arrays)
        values = np.concatenate([values, extra])
        weights = np.concatenate([weights, np.ones(extra.size, dtype=np.int64)])
    p99_tbt = pooled_quantile(values, weights, 0.99) if values.size else math.nan

    migrated = [o for o in outcomes if o.migrated]
    if migrated:
        delayed = np.array([o.delayed_tokens for o in migrated], dtype=float)
        delayed_mean = float(delayed.mean())
        delayed_p99 = rank_quantile(delayed, 0.99)
        mig_gaps = np.concatenate(mig_gap_arrays) if mig_gap_arrays else np.array([])
        p99_tbt_mig = rank_quantile(mig_gaps, 0.99) if mig_gaps.size else math.nan
    else:
        delayed_mean = math.nan
        delayed_p99 = math.nan
        p99_tbt_mig = math.nan

    prompt_total = sum(o.prompt_len for o in outcomes)
    server_charged = sum(o.ledger.server_prefill_toks_charged for o in outcomes)
    device_charged = sum(o.ledger.device_prefill_toks_charged for o in outcomes)
    return {
        "mean_ttft_s": float(ttfts.mean()),
        "p99_ttft_s": rank_quantile(ttfts, 0.99),
        "p99_tbt_s": p99_tbt,
        "p99_tbt_migrated_s": p99_tbt_mig,
        "delayed_mean": delayed_mean,
        "delayed_p99": delayed_p99,
        "migrated_count": float(len(migrated)),
        "total_cost_usd": float(sum(o.unified_cost for o in outcomes)),
        "server_prefill_token_share": server_charged / prompt_total,
        "device_prefill_token_share": device_charged / prompt_total,
    }


METRIC_NAMES = (
    "mean_ttft_s",
    "p99_ttft_s",
    "p99_tbt_s",
    "p99_tbt_migrated_s",
    "delayed_mean",
    "delayed_p99",
    "migrated_count",
    "total_cost_usd",
    "server_prefill_token_share",
    "device_prefill_token_share",
)


def baseline_stoch(
    trace: Trace,
    models: EndpointModel,
    rates: CostRates,
    b: float,
    kind: Constrained,
    seed: int,
    mig: MigrationConfig = NO_MIGRATION,
) -> dict:
    """Metrics for the stochastic-routing baseline at one budget point."""
    samples = draw_samples(models, trace, np.random.default_rng(seed))
    outcomes = simulate_trace(trace, models, rates, mig, samples, "stoch", kind=kind, b=b)
    return metrics(outcomes)


@dataclass(eq=False)
class ExperimentReport:
    """Per-(budget, method) metric table plus run metadata."""

    meta: dict
    rows: list[dict] = field(default_factory=list)

    def long_rows(self) -> list[dict]:
        out = []
        for row in self.rows:
            for name in METRIC_NAMES:
                out.append({"method": row["method"], "b": row["b"], "metric": name,
                            "value": row[name]})
        return out

    def to_json(self) -> str:
        return json.dumps({"meta": self.meta, "rows": self.rows}, indent=2, sort_keys=True,
                          allow_nan=True) + "\n"

    def to_csv(self) -> str:
        header = ["method", "b", *METRIC_NAMES]
        lines = [",".join(header)]
        for row in self.rows:
            cells = [row["method"], _fmt(row["b"])]
            cells += [_fmt(row[name]) for name in METRIC_NAMES]
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"

    def to_csv_long(self) -> str:
        lines = ["method,b,metric,value"]
        for row in self.long_rows():
            lines.append(f"{row['method']},{_fmt(row['b'])},{row['metric']},{_fmt(row['value'])}")
        return "\n".join(lines) + "\n"

    def get(self, method: str, b: float, metric: str) -> float:
        for row in self.rows:
            if row["method"] == method and abs(row["b"] - b) < 1e-12:
                return row[metric]
        raise KeyError(f"no row for method={method!r} b={b}")


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "nan"
    return f"{v:.10g}"


def _run_cell(payload) -> dict[str, dict]:
    """One (budget, seed) cell: every method simulated on shared samples."""
    trace, models, rates, mig, methods, policy, kind, b, cell_seed = payload
    samples = draw_samples(models, trace, np.random.default_rng(cell_seed))
    out = {}
    for method in methods:
        outcomes = simulate_trace(trace, models, rates, mig, samples, method,
                                  policy=policy, kind=kind, b=b)
        out[method] = metrics(outcomes)
    return out


def run_experiment(
    trace: Trace,
    models: EndpointModel,
    rates: CostRates,
    grid: Iterable[float],
    kind: Constrained,
    baselines: Sequence[str] = ALL_BASELINES,
    seed: int = 0,
    n_seeds: int = 10,
    mig: MigrationConfig = MigrationConfig(),
    alpha: float = 0.05,
    workers: int = 1,
) -> ExperimentReport:
    """Sweep budget points, averaging each metric over ``n_seeds`` runs.

    For every budget the policy is recomputed from the trace's length
    distribution; per seed, one shared sample draw feeds every method so
    comparisons are paired.  Seeds are ``seed + 0 .. n_seeds - 1``.

    The (budget, seed) cells are independent; with ``workers > 1`` they run
    in a process pool and are merged in submission order, so the report is
    byte-identical however many workers run it.
    """
    grid = [float(b) for b in grid]
    for b in grid:
        if not 0.0 <= b <= 1.0:
            raise SimError(f"budget point {b} outside [0, 1]")
    unknown = set(baselines) - set(ALL_BASELINES)
    if unknown:
        raise SimError(f"unknown baselines: {sorted(unknown)}")
    methods = ["coserve", *[m for m in ALL_BASELINES if m in baselines]]

    if mig.allowed_target == "auto":
        # Handoffs must never spend the constrained endpoint's budget: under
        # a server budget decode moves server->device, and vice versa.
        mig = MigrationConfig(
            enabled=mig.enabled, r_c=mig.r_c,
            server_ttft_quantile=mig.server_ttft_quantile,
            allowed_target="device" if kind is Constrained.SERVER else "server",
        )

    dist = LengthDist.from_samples(trace.prompt_lens())
    policies = {}
    for b in grid:
        if kind is Constrained.SERVER:
            policies[b] = plan_server_constrained(dist, b)
        else:
            policies[b] = plan_device_constrained(dist, models.server.ecdf, b, alpha)

    cells = [
        (trace, models, rates, mig, methods, policies[b], kind, b, seed + i)
        for b in grid
        for i in range(n_seeds)
    ]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            cell_results = list(pool.map(_run_cell, cells))
    else:
        cell_results = [_run_cell(c) for c in cells]

    acc: dict[tuple[float, str], dict[str, list[float]]] = {
        (b, m): {name: [] for name in METRIC_NAMES} for b in grid for m in methods
    }
    for (args, result) in zip(cells, cell_results):
        b = args[7]
        for method in methods:
            for name in METRIC_NAMES:
                acc[(b, method)][name].append(result[method][name])

    rows = []
    for b in grid:
        for method in methods:
            row: dict = {"method": method, "b": b}
            for name in METRIC_NAMES:
                vals = [v for v in acc[(b, method)][name] if not math.isnan(v)]
                row[name] = float(np.mean(vals)) if vals else math.nan
            rows.append(row)
    meta = {
        "seed": seed,
        "n_seeds": n_seeds,
        "grid": grid,
        "constrained": kind.value,
        "methods": methods,
        "n_requests": len(trace),
        "server_mode": models.server.mode,
        "migration_enabled": mig.enabled,
        "alpha": alpha,
    }
    return ExperimentReport(meta=meta, rows=rows)
