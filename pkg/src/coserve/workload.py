"""Trace ingestion and synthetic workload generation.

A trace is an ordered list of streaming-inference requests: arrival time,
prompt length, and target output length.  Traces are loaded from JSONL files
(one request per line) or generated synthetically from a fitted log-normal
prompt-length distribution with exponential inter-arrival times.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "WorkloadError",
    "TraceError",
    "DegenerateSpecError",
    "Request",
    "TraceMeta",
    "Trace",
    "LogNormalSpec",
    "load_trace",
    "save_trace",
    "fit_lognormal",
    "gen_synthetic",
]


class WorkloadError(ValueError):
    """Base error for trace and workload-spec problems."""


class TraceError(WorkloadError):
    """A trace file could not be parsed or violates a trace invariant."""


class DegenerateSpecError(WorkloadError):
    """A fitted or supplied distribution spec is degenerate (e.g. zero spread)."""


@dataclass(frozen=True)
class Request:
    """One streaming inference job.

    ``ttft_s`` and ``tbt_s`` optionally carry measured server timings so a
    recorded trace can be replayed instead of resampled.
    """

    id: str
    arrival_s: float
    prompt_len: int
    output_len: int
    ttft_s: float | None = None
    tbt_s: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.arrival_s < 0:
            raise TraceError(f"request {self.id!r}: arrival_s must be >= 0")
        if self.prompt_len < 1:
            raise TraceError(f"request {self.id!r}: prompt_len must be >= 1")
        if self.output_len < 1:
            raise TraceError(f"request {self.id!r}: output_len must be >= 1")


@dataclass(frozen=True)
class TraceMeta:
    source: str = "unknown"
    gen_cap: int | None = None


@dataclass(frozen=True)
class Trace:
    requests: tuple[Request, ...]
    meta: TraceMeta = field(default_factory=TraceMeta)

    def __post_init__(self):
        if not self.requests:
            raise TraceError("trace is empty")
        ids = set()
        prev = -math.inf
        for req in self.requests:
            if req.arrival_s < prev:
                raise TraceError("trace requests not sorted by arrival_s")
            prev = req.arrival_s
            if req.id in ids:
                raise TraceError(f"duplicate request id {req.id!r}")
            ids.add(req.id)

    def __len__(self) -> int:
        return len(self.requests)

    def __iter__(self):
        return iter(self.requests)

    def prompt_lens(self) -> np.ndarray:
        return np.array([r.prompt_len for r in self.requests], dtype=np.int64)

    def output_lens(self) -> np.ndarray:
        return np.array([r.output_len for r in self.requests], dtype=np.int64)

    def arrivals(self) -> np.ndarray:
        return np.array([r.arrival_s for r in self.requests], dtype=float)


@dataclass(frozen=True)
class LogNormalSpec:
    """Log-normal distribution given by the mean/std of the log-values."""

    mu: float
    sigma: float
    n: int
    seed: int = 0

    def __post_init__(self):
        if not self.sigma > 0:
            raise DegenerateSpecError("sigma must be > 0")
        if self.n < 1:
            raise DegenerateSpecError("n must be >= 1")


_REQUIRED_FIELDS = ("id", "arrival_s", "prompt_len", "output_len")


def _parse_record(raw: dict, where: str, gen_cap: int | None) -> Request:
    for name in _REQUIRED_FIELDS:
        if name not in raw:
            raise TraceError(f"{where}: missing field {name!r}")
    try:
        prompt_len = int(raw["prompt_len"])
        output_len = int(raw["output_len"])
        arrival = float(raw["arrival_s"])
    except (TypeError, ValueError) as exc:
        raise TraceError(f"{where}: {exc}") from exc
    if gen_cap is not None:
        output_len = min(output_len, gen_cap)
    ttft = raw.get("ttft_s")
    tbt = raw.get("tbt_s")
    try:
        return Request(
            id=str(raw["id"]),
            arrival_s=arrival,
            prompt_len=prompt_len,
            output_len=output_len,
            ttft_s=None if ttft is None else float(ttft),
            tbt_s=None if tbt is None else tuple(float(x) for x in tbt),
        )
    except TraceError as exc:
        raise TraceError(f"{where}: {exc}") from exc


def load_trace(path: str | Path, format: str = "jsonl", gen_cap: int | None = None) -> Trace:
    """Load a trace file, re-sorting stably by arrival time.

    Raises :class:`TraceError` with the offending line number on parse
    failures, invariant violations (non-positive lengths, duplicate ids), or
    an empty file.  Unknown record fields are ignored.
    """
    if format != "jsonl":
        raise TraceError(f"unsupported trace format {format!r}")
    path = Path(path)
    requests: list[Request] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            where = f"{path}:{lineno}"
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceError(f"{where}: invalid JSON: {exc}") from exc
            if not isinstance(raw, dict):
                raise TraceError(f"{where}: record must be a JSON object")
            requests.append(_parse_record(raw, where, gen_cap))
    if not requests:
        raise TraceError(f"{path}: trace is empty")
    requests.sort(key=lambda r: r.arrival_s)  # sort() is stable
    return Trace(tuple(requests), TraceMeta(source=str(path), gen_cap=gen_cap))


def save_trace(trace: Trace, path: str | Path) -> None:
    """Write a trace as JSONL, one record per request in arrival order."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for req in trace.requests:
            rec: dict = {
                "id": req.id,
                "arrival_s": req.arrival_s,
                "prompt_len": req.prompt_len,
                "output_len": req.output_len,
            }
            if req.ttft_s is not None:
                rec["ttft_s"] = req.ttft_s
            if req.tbt_s is not None:
                rec["tbt_s"] = list(req.tbt_s)
            fh.write(json.dumps(rec, separators=(",", ":")))
            fh.write("\n")


def fit_lognormal(samples, seed: int = 0) -> LogNormalSpec:
    """Fit a log-normal spec: mean and population std of the log-values.

    Requires at least two samples, all positive, and non-zero spread.
    """
    xs = np.asarray(samples, dtype=float)
    if xs.size < 2:
        raise WorkloadError("need at least 2 samples to fit")
    if np.any(xs <= 0):
        raise WorkloadError("all samples must be > 0")
    logs = np.log(xs)
    mu = float(np.mean(logs))
    sigma = float(np.std(logs))  # population std (ddof=0)
    if sigma == 0.0:
        raise DegenerateSpecError("samples have zero spread in log space")
    return LogNormalSpec(mu=mu, sigma=sigma, n=int(xs.size), seed=seed)


def gen_synthetic(
    spec_len: LogNormalSpec,
    mean_interarrival_s: float,
    seed: int,
    spec_output: LogNormalSpec | None = None,
    output_len: int = 128,
    gen_cap: int | None = None,
    source: str = "synthetic",
) -> Trace:
    """Generate a synthetic trace.

    Prompt lengths are ceiled log-normal draws (floor 1); inter-arrival times
    are exponential with the given mean.  Output lengths are either the fixed
    ``output_len`` or drawn from ``spec_output`` the same way, optionally
    capped by ``gen_cap``.  Deterministic for a given seed: the draw order is
    inter-arrivals, prompt lengths, then output lengths.
    """
    if mean_interarrival_s <= 0:
        raise WorkloadError("mean_interarrival_s must be > 0")
    if output_len < 1:
        raise WorkloadError("output_len must be >= 1")
    n = spec_len.n
    rng = np.random.default_rng(seed)
    arrivals = np.cumsum(rng.exponential(mean_interarrival_s, size=n))
    lens = np.maximum(1, np.ceil(rng.lognormal(spec_len.mu, spec_len.sigma, size=n))).astype(np.int64)
    if spec_output is not None:
        if spec_output.n != n:
            raise WorkloadError("spec_output.n must match spec_len.n")
        outs = np.maximum(1, np.ceil(rng.lognormal(spec_output.mu, spec_output.sigma, size=n))).astype(np.int64)
    else:
        outs = np.full(n, output_len, dtype=np.int64)
    if gen_cap is not None:
        outs = np.minimum(outs, gen_cap)
    requests = tuple(
        Request(
            id=f"syn-{i:06d}",
            arrival_s=float(arrivals[i]),
            prompt_len=int(lens[i]),
            output_len=int(outs[i]),
        )
        for i in range(n)
    )
    return Trace(requests, TraceMeta(source=source, gen_cap=gen_cap))
