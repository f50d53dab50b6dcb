"""Dispatch policies for racing a device endpoint against a server endpoint.

Two policy families, selected by which endpoint's per-token cost dominates:

* Server-constrained: a length threshold.  Prompts below the threshold run
  on the device only; prompts at or above it run on both endpoints
  concurrently.  The threshold is chosen so the expected device-only token
  mass covers at least a (1-b) fraction of all prompt tokens, which keeps
  the expected server prompt-token share within the budget ratio b.

* Device-constrained: a wait-time schedule.  Every request is sent to the
  server immediately; the device starts prefill only after a per-length wait
  w(l).  A tail reserve alpha pins the maximum wait w_tail at the
  (1 - min(alpha, b)) quantile of the server TTFT distribution, bounding
  worst-case TTFT by w_tail + device prefill time.  The remaining budget is
  spent greedily, shortest lengths first, buying zero waits; at most one
  boundary length gets a partial wait solved on the observed-sample grid.

Policy computation is pure and deterministic; computed policies are
immutable snapshots.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cost import BudgetSpec, Constrained, CostRates
from .profiles import ServerTtftEcdf, ecdf_eval, ecdf_quantile

__all__ = [
    "PolicyError",
    "LengthDist",
    "ExecPlan",
    "WaitSchedule",
    "DispatchDecision",
    "classify",
    "plan_server_constrained",
    "plan_device_constrained",
    "plan",
    "decide",
    "policy_audit_dict",
    "save_policy",
    "load_policy",
]


class PolicyError(ValueError):
    """Raised on invalid policy inputs."""


@dataclass(frozen=True, eq=False)
class LengthDist:
    """Empirical prompt-length distribution on integer support."""

    lengths: np.ndarray  # ascending unique ints
    probs: np.ndarray

    def __post_init__(self):
        lengths = np.asarray(self.lengths, dtype=np.int64)
        probs = np.asarray(self.probs, dtype=float)
        if lengths.size == 0 or lengths.shape != probs.shape:
            raise PolicyError("length distribution must be non-empty and aligned")
        if np.any(np.diff(lengths) <= 0):
            raise PolicyError("lengths must be strictly ascending")
        if np.any(lengths < 1) or np.any(probs < 0):
            raise PolicyError("lengths must be >= 1 and probs >= 0")
        total = probs.sum()
        if not total > 0:
            raise PolicyError("probabilities must sum to a positive value")
        probs = probs / total
        lengths.setflags(write=False)
        probs.setflags(write=False)
        object.__setattr__(self, "lengths", lengths)
        object.__setattr__(self, "probs", probs)

    @classmethod
    def from_samples(cls, samples) -> "LengthDist":
        values, counts = np.unique(np.asarray(samples, dtype=np.int64), return_counts=True)
        return cls(values, counts.astype(float))

    @property
    def mean(self) -> float:
        return float(np.dot(self.lengths, self.probs))


@dataclass(frozen=True)
class ExecPlan:
    """Server-constrained policy: lengths >= l_th run concurrently.

    ``l_th`` may be 0 (everything concurrent, b=1) or infinity (everything
    device-only, b=0).
    """

    l_th: float

    def __post_init__(self):
        if self.l_th < 0:
            raise PolicyError("l_th must be >= 0")


@dataclass(frozen=True, eq=False)
class WaitSchedule:
    """Device-constrained policy: per-length device start delays.

    ``lengths``/``waits`` tabulate the schedule on the empirical support.
    ``w_tail`` caps every wait; ``l_th`` is the largest length with a zero
    wait (0 when no length starts immediately).
    """

    lengths: np.ndarray
    waits: np.ndarray
    w_tail: float
    l_th: int

    def __post_init__(self):
        lengths = np.asarray(self.lengths, dtype=np.int64)
        waits = np.asarray(self.waits, dtype=float)
        if lengths.size == 0 or lengths.shape != waits.shape:
            raise PolicyError("schedule must be non-empty and aligned")
        if np.any(waits < 0) or np.any(waits > self.w_tail + 1e-12):
            raise PolicyError("waits must lie in [0, w_tail]")
        if np.any(waits[lengths <= self.l_th] != 0.0):
            raise PolicyError("waits must be 0 for all lengths <= l_th")
        lengths.setflags(write=False)
        waits.setflags(write=False)
        object.__setattr__(self, "lengths", lengths)
        object.__setattr__(self, "waits", waits)

    @property
    def entries(self) -> dict[int, float]:
        return {int(l): float(w) for l, w in zip(self.lengths, self.waits)}

    def wait_for(self, prompt_len: int) -> float:
        """Wait for an arbitrary length: nearest tabulated length at or
        below; w_tail above the support; the smallest entry below it."""
        idx = int(np.searchsorted(self.lengths, prompt_len, side="right")) - 1
        if idx < 0:
            return float(self.waits[0])
        if prompt_len > int(self.lengths[-1]):
            return self.w_tail
        return float(self.waits[idx])


@dataclass(frozen=True)
class DispatchDecision:
    """Per-request outcome of the active policy.

    ``device_start_delay_s`` is the wait before device prefill starts
    (infinity means the device never runs); ``server_issue`` says whether
    the request is sent to the server.  At least one endpoint participates.
    """

    device_start_delay_s: float
    server_issue: bool

    def __post_init__(self):
        if math.isinf(self.device_start_delay_s) and not self.server_issue:
            raise PolicyError("decision must involve at least one endpoint")
        if self.device_start_delay_s < 0:
            raise PolicyError("delay must be >= 0")


def classify(rates: CostRates) -> Constrained:
    """Pick the binding constraint from unified per-token dollar costs.

    Device-constrained iff the cheaper device phase still costs strictly
    more than the pricier server phase; ties go to server-constrained.
    """
    device_min = min(rates.device_prefill_usd(), rates.device_decode_usd())
    server_max = max(rates.server_prefill, rates.server_decode)
    return Constrained.DEVICE if device_min > server_max else Constrained.SERVER


def plan_server_constrained(dist: LengthDist, b: float) -> ExecPlan:
    """Length threshold that keeps expected server prompt tokens <= b * E[l].

    Walking lengths in ascending order, the crossing length is the first
    whose cumulative token mass reaches (1-b) * E[l]; it is kept device-only
    (conservative: the server share never exceeds the budget), so the
    returned threshold is crossing + 1.
    """
    if not 0.0 <= b <= 1.0:
        raise PolicyError(f"b must be in [0, 1], got {b}")
    if b == 0.0:
        return ExecPlan(l_th=math.inf)
    mean_len = dist.mean
    target = (1.0 - b) * mean_len
    if target <= 0.0:
        return ExecPlan(l_th=0.0)
    cum = np.cumsum(dist.lengths * dist.probs)
    idx = int(np.searchsorted(cum, target - 1e-12))
    if idx >= dist.lengths.size:
        # Cumulative mass never reaches the target within float noise; only
        # possible at b ~ 0, where everything stays device-only.
        return ExecPlan(l_th=math.inf)
    return ExecPlan(l_th=float(dist.lengths[idx]) + 1.0)


def plan_device_constrained(
    dist: LengthDist,
    ecdf: ServerTtftEcdf,
    b: float,
    alpha: float = 0.05,
) -> WaitSchedule:
    """Two-phase wait schedule under a device token budget b.

    Phase 1 reserves an alpha slice of the budget for tail protection by
    capping all waits at w_tail, the (1 - min(alpha, b)) server-TTFT
    quantile.  If b <= alpha that is the whole schedule.

    Phase 2 spends the remaining (b - alpha) * E[l] expected device tokens
    buying zero waits, shortest lengths first.  Zeroing length l is booked
    at p(l) * l * (1 - alpha) tokens: the increment from the alpha-reserved
    charge p(l)*l*alpha up to the always-start charge p(l)*l.  The first
    length that does not fit receives a partial wait, chosen as the smallest
    grid value (zero or an observed sample) that keeps the total expected
    device-charged tokens within b * E[l]; the step ECDF makes exact balance
    unattainable, and rounding up the wait errs toward less device usage.
    The device is charged for a length iff the server has not delivered its
    first token by w(l), which happens with probability 1 - F(w(l)).
    """
    if not 0.0 <= b <= 1.0:
        raise PolicyError(f"b must be in [0, 1], got {b}")
    if not 0.0 < alpha < 1.0:
        raise PolicyError(f"alpha must be in (0, 1), got {alpha}")

    w_tail = ecdf_quantile(ecdf, 1.0 - min(alpha, b))
    lengths = dist.lengths
    waits = np.full(lengths.size, w_tail, dtype=float)
    if b <= alpha:
        return WaitSchedule(lengths=lengths, waits=waits, w_tail=w_tail, l_th=0)

    mean_len = dist.mean
    budget_tokens = b * mean_len
    available = (b - alpha) * mean_len
    # Actual tail charge per token of always-w_tail mass; <= alpha on a step
    # ECDF, which keeps the booked ledger conservative.
    tail_miss = 1.0 - ecdf_eval(ecdf, w_tail)

    token_mass = lengths * dist.probs  # p(l) * l
    zero_cost = token_mass * (1.0 - alpha)

    l_th = 0
    for i in range(lengths.size):
        if available >= zero_cost[i] - 1e-12:
            waits[i] = 0.0
            available -= zero_cost[i]
            l_th = int(lengths[i])
            continue
        # Partial slot: expected device tokens charged elsewhere.
        zeroed_mass = float(np.sum(token_mass[:i]))
        rest_mass = float(np.sum(token_mass[i + 1:]))
        slack = budget_tokens - zeroed_mass - tail_miss * rest_mass
        need_q = 1.0 - slack / float(token_mass[i])
        if need_q <= 0.0:
            # Booked cost was conservative; the actual ledger affords an
            # immediate start for this length too.
            waits[i] = 0.0
            l_th = int(lengths[i])
        elif need_q > ecdf_eval(ecdf, w_tail):
            waits[i] = w_tail
        else:
            samples = ecdf.samples
            hi = int(np.searchsorted(samples, w_tail, side="right"))
            # Smallest observed sample with F(w) >= need_q.
            rank = max(1, math.ceil(need_q * ecdf.n - 1e-9))
            waits[i] = min(float(samples[min(rank, hi) - 1]), w_tail)
        break

    return WaitSchedule(lengths=lengths, waits=waits, w_tail=w_tail, l_th=l_th)


def plan(dist: LengthDist, ecdf: ServerTtftEcdf, budget: BudgetSpec):
    """Compute the policy matching the budget's constraint kind."""
    if budget.constrained is Constrained.SERVER:
        return plan_server_constrained(dist, budget.b)
    return plan_device_constrained(dist, ecdf, budget.b, budget.alpha)


def decide(policy: ExecPlan | WaitSchedule, prompt_len: int) -> DispatchDecision:
    """Apply a computed policy to one request.

    Server-constrained: lengths below the threshold run device-only; at or
    above it, both endpoints start immediately.  Device-constrained: the
    server is always issued and the device starts after the tabulated wait.
    """
    if prompt_len < 1:
        raise PolicyError("prompt_len must be >= 1")
    if isinstance(policy, ExecPlan):
        if prompt_len < policy.l_th:
            return DispatchDecision(device_start_delay_s=0.0, server_issue=False)
        return DispatchDecision(device_start_delay_s=0.0, server_issue=True)
    if isinstance(policy, WaitSchedule):
        return DispatchDecision(device_start_delay_s=policy.wait_for(prompt_len), server_issue=True)
    raise PolicyError(f"unknown policy type {type(policy).__name__}")


def policy_audit_dict(policy: ExecPlan | WaitSchedule, budget: BudgetSpec) -> dict:
    """Audit snapshot of a policy: kind, parameters, and the full table.

    Infinite thresholds serialize as null.
    """
    base = {"constraint": budget.constrained.value, "b": budget.b, "alpha": budget.alpha}
    if isinstance(policy, ExecPlan):
        base.update({
            "w_tail": None,
            "l_th": None if math.isinf(policy.l_th) else policy.l_th,
            "table": [],
        })
    else:
        base.update({
            "w_tail": policy.w_tail,
            "l_th": policy.l_th,
            "table": [[int(l), float(w)] for l, w in zip(policy.lengths, policy.waits)],
        })
    return base


def save_policy(policy, budget: BudgetSpec, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(policy_audit_dict(policy, budget), indent=2) + "\n", encoding="utf-8"
    )


def load_policy(path: str | Path) -> tuple[ExecPlan | WaitSchedule, BudgetSpec]:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    budget = BudgetSpec(b=float(raw["b"]), alpha=float(raw["alpha"]),
                        constrained=Constrained(raw["constraint"]))
    if budget.constrained is Constrained.SERVER:
        l_th = raw["l_th"]
        return ExecPlan(l_th=math.inf if l_th is None else float(l_th)), budget
    table = raw["table"]
    return (
        WaitSchedule(
            lengths=np.array([row[0] for row in table], dtype=np.int64),
            waits=np.array([row[1] for row in table], dtype=float),
            w_tail=float(raw["w_tail"]),
            l_th=int(raw["l_th"]),
        ),
        budget,
    )
