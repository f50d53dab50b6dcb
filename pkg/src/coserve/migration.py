"""Mid-stream decode migration between endpoints.

When the endpoint that won the prefill race has the more expensive decode,
generation can be handed off to the other endpoint.  The handoff is masked
from the consumer by a token buffer: delivery is paced at the consumption
rate r_c while generation runs faster, so undelivered tokens accumulate.
The target endpoint is triggered once the buffer holds B = ceil(r_c * t_m)
tokens, enough to cover the estimated migration overhead t_m.  The source
keeps generating through the estimated handoff window and stops at the
planned barrier (or earlier, if the target comes up sooner); the delivered
sequence is the source prefix followed by the target suffix, deduplicated
by an idempotent stop barrier at the source's last token index.

Only token IDs (or, across incompatible vocabularies, the detokenized text
prefix) ever travel between endpoints; intermediate attention state never
does.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "MigrationError",
    "MigrationParams",
    "HandoffPlan",
    "HandoffTimeline",
    "migration_gain",
    "should_migrate",
    "buffer_target",
    "schedule_handoff",
    "token_id_payload",
    "max_delivery_gap",
]


class MigrationError(ValueError):
    """Raised on invalid migration parameters."""


@dataclass(frozen=True)
class MigrationParams:
    """Inputs to the handoff scheduler.

    ``t_m_estimate_s`` is the predicted migration overhead (target's time to
    first token for the transferred context); the realized overhead may
    differ.  ``delta_decode_cost`` and ``overhead_cost`` are unified dollar
    figures used by the trigger rule, not by the timeline itself.
    """

    r_c: float  # consumer pacing rate, tokens/s
    r_g_source: float  # source generation rate, tokens/s
    r_g_target: float  # target generation rate, tokens/s
    t_m_estimate_s: float
    delta_decode_cost: float = 0.0  # |server - device| decode $/token
    overhead_cost: float = 0.0  # $ to bring the target online

    def __post_init__(self):
        if not self.r_c > 0:
            raise MigrationError("r_c must be > 0")
        if not self.r_g_source > 0 or not self.r_g_target > 0:
            raise MigrationError("generation rates must be > 0")
        if self.t_m_estimate_s < 0:
            raise MigrationError("t_m_estimate_s must be >= 0")


@dataclass(frozen=True)
class HandoffPlan:
    """Outcome of scheduling one handoff.

    ``start_after_token`` is the token index whose production filled the
    buffer and fired the target; ``source_stop_token`` is the last index the
    source produced.  ``migrated`` is False when the buffer never reached
    the target size before generation finished (the source simply runs to
    completion).
    """

    buffer_target: int
    start_after_token: int
    source_stop_token: int
    delayed_tokens: int
    migrated: bool
    trigger_s: float | None = None
    target_first_token_s: float | None = None


@dataclass(frozen=True, eq=False)
class HandoffTimeline:
    """Per-token availability and paced delivery times.

    ``producers`` holds ``"source"`` / ``"target"`` per token.  Delivery is
    paced against a fixed schedule anchored at the first token: token i is
    delivered at max(first + i/r_c, available_i), so a stall never shifts
    the schedule and delivery catches back up once tokens are available.
    """

    available_s: np.ndarray
    delivered_s: np.ndarray
    producers: tuple[str, ...]


def migration_gain(delta_decode_cost: float, l_remaining: float) -> float:
    """Projected decode saving: cost-per-token difference times the expected
    number of tokens left to generate."""
    if l_remaining < 0:
        raise MigrationError("l_remaining must be >= 0")
    return delta_decode_cost * l_remaining


def should_migrate(gain: float, overhead_cost: float) -> bool:
    """Migrate only when the projected saving strictly exceeds the overhead."""
    if gain < 0 or overhead_cost < 0:
        raise MigrationError("gain and overhead_cost must be >= 0")
    return gain > overhead_cost


def buffer_target(r_c: float, t_m: float) -> int:
    """Tokens to accumulate before triggering: ceil(r_c * t_m), whole tokens."""
    if not r_c > 0:
        raise MigrationError("r_c must be > 0")
    if t_m < 0:
        raise MigrationError("t_m must be >= 0")
    return max(0, math.ceil(r_c * t_m - 1e-9))


def schedule_handoff(
    params: MigrationParams,
    total_tokens: int,
    first_token_s: float = 0.0,
    t_m_actual_s: float | None = None,
) -> tuple[HandoffPlan, HandoffTimeline]:
    """Schedule a handoff and produce the resulting delivery timeline.

    The source makes token i available at first + i/r_g_source.  The target
    is triggered at the first production instant where the undelivered
    buffer reaches B; it delivers its first post-barrier token t_m (actual)
    later.  The source stops at trigger + min(estimate, actual): it never
    generates past the planned window, so an underestimated overhead stalls
    delivery by at most the uncovered gap, bounded by ceil(r_c * actual)+1
    late tokens.  Requires surplus generation speed (r_g_source > r_c) for
    the buffer to grow; otherwise, and when generation ends before the
    buffer fills, the plan degenerates to no-migration.
    """
    if total_tokens < 1:
        raise MigrationError("total_tokens must be >= 1")
    slot = 1.0 / params.r_c
    t_est = params.t_m_estimate_s
    t_act = t_est if t_m_actual_s is None else t_m_actual_s
    if t_act < 0:
        raise MigrationError("t_m_actual_s must be >= 0")
    target_size = buffer_target(params.r_c, t_est)

    src_step = 1.0 / params.r_g_source
    tgt_step = 1.0 / params.r_g_target

    # Scan source production instants for the trigger.  Token j is produced
    # at first + j*src_step; token i is delivered no earlier than its paced
    # slot first + i*slot, so the undelivered count at a production instant
    # only depends on the two grids.
    trigger_idx: int | None = None
    trigger_s = None
    if target_size == 0:
        trigger_idx, trigger_s = 0, first_token_s
    elif params.r_g_source > params.r_c:
        delivered = 0
        for j in range(total_tokens):
            t = first_token_s + j * src_step
            while delivered <= j and first_token_s + delivered * slot <= t + 1e-12:
                delivered += 1
            if (j + 1) - delivered >= target_size:
                trigger_idx, trigger_s = j, t
                break

    if trigger_idx is None:
        available = first_token_s + np.arange(total_tokens) * src_step
        plan = HandoffPlan(
            buffer_target=target_size,
            start_after_token=total_tokens - 1,
            source_stop_token=total_tokens - 1,
            delayed_tokens=0,
            migrated=False,
        )
        return plan, _paced_timeline(available, ("source",) * total_tokens, first_token_s, slot)

    source_stop_s = trigger_s + min(t_est, t_act)
    target_first_s = trigger_s + t_act
    # Last source-produced index within the planned window.
    stop_idx = min(total_tokens - 1, trigger_idx + int((source_stop_s - trigger_s) / src_step + 1e-9))

    if stop_idx >= total_tokens - 1:
        # Source finished everything before handing off; nothing migrates.
        available = first_token_s + np.arange(total_tokens) * src_step
        plan = HandoffPlan(
            buffer_target=target_size,
            start_after_token=trigger_idx,
            source_stop_token=total_tokens - 1,
            delayed_tokens=0,
            migrated=False,
            trigger_s=trigger_s,
        )
        return plan, _paced_timeline(available, ("source",) * total_tokens, first_token_s, slot)

    n_target = total_tokens - stop_idx - 1
    available = np.empty(total_tokens)
    available[: stop_idx + 1] = first_token_s + np.arange(stop_idx + 1) * src_step
    available[stop_idx + 1:] = target_first_s + np.arange(n_target) * tgt_step
    producers = ("source",) * (stop_idx + 1) + ("target",) * n_target
    timeline = _paced_timeline(available, producers, first_token_s, slot)

    late = available - (first_token_s + np.arange(total_tokens) * slot)
    delayed = int(np.count_nonzero(late > slot + 1e-9))
    plan = HandoffPlan(
        buffer_target=target_size,
        start_after_token=trigger_idx,
        source_stop_token=stop_idx,
        delayed_tokens=delayed,
        migrated=True,
        trigger_s=trigger_s,
        target_first_token_s=target_first_s,
    )
    return plan, timeline


def _paced_timeline(available: np.ndarray, producers: tuple[str, ...],
                    first_s: float, slot: float) -> HandoffTimeline:
    schedule = first_s + np.arange(available.size) * slot
    delivered = np.maximum.accumulate(np.maximum(schedule, available))
    available = available.copy()
    available.setflags(write=False)
    delivered.setflags(write=False)
    return HandoffTimeline(available_s=available, delivered_s=delivered, producers=producers)


def max_delivery_gap(delivered_s: np.ndarray) -> float:
    """Largest inter-token delivery interval; 0 for single-token streams."""
    if delivered_s.size < 2:
        return 0.0
    return float(np.max(np.diff(delivered_s)))


def token_id_payload(
    req_id: str,
    prompt: str | Sequence[int],
    prefix_ids: Sequence[int],
    next_index: int,
    shared_vocab: bool,
    prefix_text: str | None = None,
) -> dict:
    """Build the transfer payload for a handoff.

    With a shared vocabulary the generated prefix travels as token IDs;
    otherwise the caller must supply the detokenized text prefix.  The
    payload never contains intermediate state (no attention cache), so its
    size is linear in the prefix length.
    """
    if next_index < 0:
        raise MigrationError("next_index must be >= 0")
    payload: dict = {
        "req_id": req_id,
        "prompt": prompt if isinstance(prompt, str) else list(prompt),
        "next_index": int(next_index),
    }
    if shared_vocab:
        payload["prefix_ids"] = [int(t) for t in prefix_ids]
    else:
        if prefix_text is None:
            raise MigrationError("prefix_text is required when vocabularies differ")
        payload["prefix_text"] = prefix_text
    return payload
