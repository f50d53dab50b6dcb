"""Streaming middleware between OpenAI-compatible clients and two upstreams.

For every ``/v1/chat/completions`` request with ``"stream": true`` the
gateway estimates the prompt length, applies the active dispatch policy,
races the device and server upstreams (the device side may be delayed by
the policy's wait time), streams the winner's tokens to the client with
paced delivery, cancels the loser, and optionally migrates decode to the
cheaper endpoint behind the smoothing buffer.  The final chunk reports the
per-request ledger.

Server first-token latencies are collected into a sliding window; a refresh
rebuilds the empirical distribution and recomputes the policy into a fresh
immutable snapshot, swapped in a single assignment so in-flight sessions
never observe a torn policy.
"""

from __future__ import annotations

import asyncio
import itertools
import json
import math
import os
import time
import uuid
from collections import deque
from contextlib import asynccontextmanager
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import httpx
import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, StreamingResponse

from .cost import BudgetSpec, Constrained, CostRates, unified_request_cost
from .dispatch import LengthDist, decide, plan, policy_audit_dict
from .migration import buffer_target, migration_gain, should_migrate, token_id_payload
from .profiles import DeviceTtftModel, ServerTtftEcdf, ecdf_quantile

__all__ = [
    "GatewayConfigError",
    "UpstreamConfig",
    "GatewayConfig",
    "PolicySnapshot",
    "SessionPhase",
    "Gateway",
    "create_app",
]

LAMBDA_HEADER = "x-exchange-rate"


class GatewayConfigError(ValueError):
    """Raised on invalid gateway configuration."""


@dataclass(frozen=True)
class UpstreamConfig:
    name: str
    role: str  # "device" | "server"
    base_url: str
    auth_token_env: str | None = None
    timeout_s: float = 120.0
    shared_vocab: bool = True

    def __post_init__(self):
        if self.role not in ("device", "server"):
            raise GatewayConfigError(f"upstream role must be device|server, got {self.role!r}")

    def auth_headers(self) -> dict[str, str]:
        if not self.auth_token_env:
            return {}
        token = os.environ.get(self.auth_token_env)
        return {"Authorization": f"Bearer {token}"} if token else {}


@dataclass(frozen=True)
class GatewayConfig:
    upstreams: tuple[UpstreamConfig, ...]
    rates: CostRates
    budget: BudgetSpec
    device_ttft: DeviceTtftModel
    device_decode_rate: float
    server_ttft_seed_s: tuple[float, ...]
    length_samples: tuple[int, ...]
    r_c: float | None = 4.0
    mean_output_len: int = 128
    refresh_min_window: int = 64
    window_size: int = 512
    refresh_every: int | None = None  # auto-refresh cadence in completed sessions
    cancel_grace_ms: int = 50
    server_ttft_quantile: float = 0.9
    model_name: str = "coserve"
    mock: bool = False

    def __post_init__(self):
        roles = sorted(u.role for u in self.upstreams)
        if roles != ["device", "server"]:
            raise GatewayConfigError("exactly one device and one server upstream required")
        if self.r_c is not None and not self.r_c > 0:
            raise GatewayConfigError("r_c must be > 0 or null")
        if not self.length_samples:
            raise GatewayConfigError("length_samples must be non-empty")
        if self.refresh_min_window < 1 or self.window_size < self.refresh_min_window:
            raise GatewayConfigError("window_size must be >= refresh_min_window >= 1")

    def upstream(self, role: str) -> UpstreamConfig:
        return next(u for u in self.upstreams if u.role == role)

    @classmethod
    def from_dict(cls, raw: dict) -> "GatewayConfig":
        try:
            ups = tuple(
                UpstreamConfig(
                    name=u["name"],
                    role=u["role"],
                    base_url=u.get("base_url", ""),
                    auth_token_env=u.get("auth_token_env"),
                    timeout_s=float(u.get("timeout_s", 120.0)),
                    shared_vocab=bool(u.get("shared_vocab", True)),
                )
                for u in raw["upstreams"]
            )
            budget_raw = raw["budget"]
            dev = raw["device"]
            return cls(
                upstreams=ups,
                rates=CostRates.from_dict(raw["cost"]),
                budget=BudgetSpec(
                    b=float(budget_raw["b"]),
                    alpha=float(budget_raw.get("alpha", 0.05)),
                    constrained=Constrained(budget_raw["constrained"]),
                ),
                device_ttft=DeviceTtftModel(k=float(dev["k"]), c=float(dev["c"])),
                device_decode_rate=float(dev["decode_rate"]),
                server_ttft_seed_s=tuple(float(x) for x in raw["server_ttft_seed_s"]),
                length_samples=tuple(int(x) for x in raw["length_samples"]),
                r_c=None if raw.get("r_c") is None else float(raw["r_c"]),
                mean_output_len=int(raw.get("mean_output_len", 128)),
                refresh_min_window=int(raw.get("refresh_min_window", 64)),
                window_size=int(raw.get("window_size", 512)),
                refresh_every=(None if raw.get("refresh_every") is None
                               else int(raw["refresh_every"])),
                cancel_grace_ms=int(raw.get("cancel_grace_ms", 50)),
                server_ttft_quantile=float(raw.get("server_ttft_quantile", 0.9)),
                model_name=raw.get("model_name", "coserve"),
                mock=bool(raw.get("mock", False)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, GatewayConfigError):
                raise
            raise GatewayConfigError(f"bad gateway config: {exc}") from exc

    @classmethod
    def from_file(cls, path: str | Path) -> "GatewayConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True, eq=False)
class PolicySnapshot:
    id: int
    policy: object
    ecdf: ServerTtftEcdf
    budget: BudgetSpec


class SessionPhase(Enum):
    DISPATCHED = "dispatched"
    RACING = "racing"
    DECODING = "decoding"
    MIGRATING = "migrating"
    DONE = "done"
    FAILED = "failed"


_PHASE_ORDER = {
    SessionPhase.DISPATCHED: (SessionPhase.RACING, SessionPhase.FAILED),
    SessionPhase.RACING: (SessionPhase.DECODING, SessionPhase.FAILED),
    SessionPhase.DECODING: (SessionPhase.MIGRATING, SessionPhase.DONE, SessionPhase.FAILED),
    SessionPhase.MIGRATING: (SessionPhase.DECODING, SessionPhase.FAILED),
    SessionPhase.DONE: (),
    SessionPhase.FAILED: (),
}


@dataclass(eq=False)
class Session:
    req_id: str
    policy_id: int
    phase: SessionPhase = SessionPhase.DISPATCHED
    winner: str | None = None
    migrated: bool = False
    tokens_emitted: int = 0
    delayed_tokens: int = 0

    def advance(self, phase: SessionPhase) -> None:
        if phase not in _PHASE_ORDER[self.phase]:
            raise RuntimeError(f"illegal session transition {self.phase} -> {phase}")
        self.phase = phase


def estimate_prompt_len(prompt: str) -> int:
    """Cheap token-count estimate: one token per four characters, floor 1."""
    return max(1, math.ceil(len(prompt) / 4))


def _extract_prompt(body: dict) -> str:
    messages = body.get("messages")
    if isinstance(messages, list):
        parts = []
        for m in messages:
            content = m.get("content") if isinstance(m, dict) else None
            if isinstance(content, str):
                parts.append(content)
        return "\n".join(parts)
    prompt = body.get("prompt")
    return prompt if isinstance(prompt, str) else ""


class _UpstreamEvent:
    __slots__ = ("kind", "role", "text", "at")

    def __init__(self, kind: str, role: str, text: str = "", at: float = 0.0):
        self.kind = kind  # "token" | "eos" | "error"
        self.role = role
        self.text = text
        self.at = at


class Gateway:
    """State shared across sessions: clients, policy snapshot, TTFT window."""

    def __init__(
        self,
        config: GatewayConfig,
        device_client: httpx.AsyncClient | None = None,
        server_client: httpx.AsyncClient | None = None,
    ):
        self.config = config
        self._own_clients: list[httpx.AsyncClient] = []
        self._clients: dict[str, httpx.AsyncClient] = {}
        for role, injected in (("device", device_client), ("server", server_client)):
            if injected is not None:
                self._clients[role] = injected
            else:
                up = config.upstream(role)
                client = httpx.AsyncClient(base_url=up.base_url, timeout=up.timeout_s)
                self._clients[role] = client
                self._own_clients.append(client)
        self._dist = LengthDist.from_samples(np.asarray(config.length_samples, dtype=np.int64))
        self._snapshot_counter = itertools.count(1)
        self.snapshot = self._build_snapshot(ServerTtftEcdf(np.asarray(config.server_ttft_seed_s)))
        self.ttft_window: deque[float] = deque(config.server_ttft_seed_s, maxlen=config.window_size)
        self.sessions: set[Session] = set()
        self._completed_since_refresh = 0
        self._draining = False

    def _build_snapshot(self, ecdf: ServerTtftEcdf) -> PolicySnapshot:
        policy = plan(self._dist, ecdf, self.config.budget)
        return PolicySnapshot(id=next(self._snapshot_counter), policy=policy,
                              ecdf=ecdf, budget=self.config.budget)

    def observe_server_ttft(self, ttft_s: float) -> None:
        if ttft_s > 0:
            self.ttft_window.append(ttft_s)

    def profile_refresh(self) -> bool:
        """Rebuild the server TTFT distribution and swap in a new policy.

        Returns False (keeping the old snapshot) when the window is smaller
        than the configured minimum.  The swap is a single attribute
        assignment: sessions read ``self.snapshot`` once at dispatch and
        keep it, so a refresh can never tear an in-flight session.
        """
        window = list(self.ttft_window)
        if len(window) < self.config.refresh_min_window:
            return False
        self.snapshot = self._build_snapshot(ServerTtftEcdf(np.asarray(window, dtype=float)))
        self._completed_since_refresh = 0
        return True

    def _session_done(self, session: Session) -> None:
        self.sessions.discard(session)
        self._completed_since_refresh += 1
        every = self.config.refresh_every
        if every and self._completed_since_refresh >= every:
            self.profile_refresh()

    async def drain(self, timeout_s: float = 10.0) -> None:
        """Wait for in-flight sessions to finish (used at shutdown)."""
        self._draining = True
        deadline = time.monotonic() + timeout_s
        while self.sessions and time.monotonic() < deadline:
            await asyncio.sleep(0.01)

    async def aclose(self) -> None:
        for client in self._own_clients:
            await client.aclose()

    # ---- per-request streaming ------------------------------------------

    async def _read_upstream(
        self,
        role: str,
        payload: dict,
        delay_s: float,
        events: asyncio.Queue,
        meta: dict,
    ) -> None:
        """Issue one upstream call after ``delay_s`` and forward its tokens."""
        up = self.config.upstream(role)
        try:
            if delay_s > 0:
                await asyncio.sleep(delay_s)
            meta[role]["issued_at"] = time.monotonic()
            client = self._clients[role]
            async with client.stream(
                "POST", "/v1/chat/completions", json=payload, headers=up.auth_headers()
            ) as resp:
                if resp.status_code != 200:
                    await resp.aread()
                    raise RuntimeError(f"{role} upstream returned {resp.status_code}")
                async for line in resp.aiter_lines():
                    if not line.startswith("data:"):
                        continue
                    data = line[5:].strip()
                    if data == "[DONE]":
                        break
                    try:
                        chunk = json.loads(data)
                    except json.JSONDecodeError:
                        continue
                    delta = chunk.get("choices", [{}])[0].get("delta", {})
                    text = delta.get("content")
                    if not text:
                        continue
                    now = time.monotonic()
                    if meta[role].get("first_at") is None:
                        meta[role]["first_at"] = now
                    await events.put(_UpstreamEvent("token", role, text, now))
            await events.put(_UpstreamEvent("eos", role))
        except asyncio.CancelledError:
            meta[role]["cancelled_at"] = time.monotonic()
            raise
        except Exception as exc:  # noqa: BLE001 - reported as a stream error event
            await events.put(_UpstreamEvent("error", role, str(exc)))

    def _sse(self, obj: dict) -> bytes:
        return f"data: {json.dumps(obj)}\n\n".encode()

    def _chunk(self, comp_id: str, text: str | None, finish: str | None = None,
               extra: dict | None = None) -> bytes:
        delta = {"content": text} if text is not None else {}
        body: dict = {
            "id": comp_id,
            "object": "chat.completion.chunk",
            "model": self.config.model_name,
            "choices": [{"index": 0, "delta": delta, "finish_reason": finish}],
        }
        if extra:
            body.update(extra)
        return self._sse(body)

    async def handle_stream(self, body: dict, lam_override: float | None = None):
        """Async generator yielding SSE bytes for one chat completion."""
        cfg = self.config
        rates = cfg.rates
        if lam_override is not None:
            rates = CostRates(
                server_prefill=rates.server_prefill,
                server_decode=rates.server_decode,
                device_prefill_flops=rates.device_prefill_flops,
                device_decode_flops=rates.device_decode_flops,
                lambda_per_mflop=lam_override,
            )
        prompt = _extract_prompt(body)
        l_est = estimate_prompt_len(prompt)
        snapshot = self.snapshot
        decision = decide(snapshot.policy, l_est)

        comp_id = f"chatcmpl-{uuid.uuid4().hex[:12]}"
        session = Session(req_id=comp_id, policy_id=snapshot.id)
        self.sessions.add(session)

        events: asyncio.Queue[_UpstreamEvent] = asyncio.Queue()
        meta: dict = {"device": {}, "server": {}}
        upstream_payload = {
            "model": body.get("model", cfg.model_name),
            "messages": body.get("messages", [{"role": "user", "content": prompt}]),
            "stream": True,
        }
        if "max_tokens" in body:
            upstream_payload["max_tokens"] = body["max_tokens"]

        tasks: dict[str, asyncio.Task] = {}
        issued: set[str] = set()
        if decision.server_issue:
            tasks["server"] = asyncio.create_task(
                self._read_upstream("server", upstream_payload, 0.0, events, meta))
            issued.add("server")
        if not math.isinf(decision.device_start_delay_s):
            tasks["device"] = asyncio.create_task(
                self._read_upstream("device", upstream_payload,
                                    decision.device_start_delay_s, events, meta))
            issued.add("device")
        session.advance(SessionPhase.RACING)

        try:
            async for piece in self._run_session(
                session, snapshot, decision, rates, events, meta, tasks,
                issued, comp_id, prompt, l_est,
            ):
                yield piece
        finally:
            for task in tasks.values():
                task.cancel()
            await asyncio.gather(*tasks.values(), return_exceptions=True)
            if session.phase not in (SessionPhase.DONE, SessionPhase.FAILED):
                session.phase = SessionPhase.FAILED  # covers client disconnects
            self._session_done(session)

    async def _run_session(
        self, session, snapshot, decision, rates, events, meta, tasks,
        issued, comp_id, prompt, l_est,
    ):
        cfg = self.config
        failures: dict[str, str] = {}
        winner: str | None = None
        first_text = ""

        # ---- race for the first token ----
        while winner is None:
            ev = await events.get()
            if ev.kind == "token":
                winner = ev.role
                first_text = ev.text
            elif ev.kind in ("eos", "error"):
                failures[ev.role] = ev.text or "closed before first token"
                if set(failures) == issued:
                    session.advance(SessionPhase.FAILED)
                    yield self._sse({"error": {"message": "all upstreams failed",
                                               "details": failures}})
                    yield b"data: [DONE]\n\n"
                    return

        session.winner = winner
        session.advance(SessionPhase.DECODING)
        loser = "server" if winner == "device" else "device"
        if loser in tasks:
            tasks[loser].cancel()
        if winner == "server" and meta["server"].get("first_at") and meta["server"].get("issued_at"):
            self.observe_server_ttft(meta["server"]["first_at"] - meta["server"]["issued_at"])

        # ---- decode ledger bookkeeping ----
        device_started = ("device" in issued and "issued_at" in meta["device"]
                          and meta["device"].get("first_at") is None and winner != "device")
        device_partial_frac = 0.0
        if device_started:
            cancel_at = meta["device"].get("cancelled_at", time.monotonic())
            dur = cfg.device_ttft.predict(l_est)
            device_partial_frac = min(1.0, max(0.0, (cancel_at - meta["device"]["issued_at"]) / dur))

        # ---- migration decision (evaluated once) ----
        target = "server" if winner == "device" else "device"
        mig_allowed = (
            cfg.r_c is not None
            and (cfg.budget.constrained is Constrained.DEVICE) == (target == "server")
        )
        c_win = rates.server_decode if winner == "server" else rates.device_decode_usd()
        c_tgt = rates.server_decode if target == "server" else rates.device_decode_usd()
        buffer_goal: int | None = None
        if mig_allowed and c_win > c_tgt:
            if target == "device":
                t_est = cfg.device_ttft.predict(l_est + 1)
            else:
                t_est = ecdf_quantile(snapshot.ecdf, cfg.server_ttft_quantile)
            remaining_est = max(0.0, cfg.mean_output_len - 1.0)
            gain = migration_gain(c_win - c_tgt, remaining_est)
            if target == "server":
                overhead = rates.server_prefill * (l_est + 1)
            else:
                overhead = rates.device_prefill_flops * (l_est + 1) * rates.lambda_per_mflop / 1e6
            if should_migrate(gain, overhead):
                buffer_goal = buffer_target(cfg.r_c, t_est)

        # ---- paced emission with optional one-shot handoff ----
        slot = None if cfg.r_c is None else 1.0 / cfg.r_c
        source_tokens: list[str] = [first_text]
        target_tokens: list[str] = []
        target_events: asyncio.Queue[_UpstreamEvent] = asyncio.Queue()
        target_task: asyncio.Task | None = None
        target_fired_at_count: int | None = None
        barrier: int | None = None  # last source token index delivered
        skip_left = 0
        source_done = winner in failures
        target_done = False
        winner_count_at_cancel: int | None = None
        error_msg: str | None = None

        anchor: float | None = None
        emitted = 0
        delayed = 0

        up_target = cfg.upstream(target)
        up_winner = cfg.upstream(winner)

        def fire_target():
            # SSE chunks carry text, not token IDs, so chunk indices stand in
            # for IDs in the transfer payload; the text prefix rides along
            # for upstreams without a shared vocabulary.
            payload = token_id_payload(
                req_id=session.req_id,
                prompt=prompt,
                prefix_ids=list(range(len(source_tokens))),
                next_index=len(source_tokens),
                shared_vocab=up_target.shared_vocab and up_winner.shared_vocab,
                prefix_text="".join(source_tokens),
            )
            body = {
                "model": cfg.model_name,
                "messages": [
                    {"role": "user", "content": prompt},
                    {"role": "assistant", "content": "".join(source_tokens)},
                ],
                "stream": True,
                "x_migration": payload,
            }
            meta[target] = {}
            return asyncio.create_task(
                self._read_upstream(target, body, 0.0, target_events, meta))

        async def _tagged(tag: str, queue: asyncio.Queue):
            return tag, await queue.get()

        def pump(tag: str, ev: _UpstreamEvent) -> None:
            """Fold one upstream event into the session buffers."""
            nonlocal source_done, target_done, barrier, skip_left, buffer_goal
            nonlocal target_task, target_fired_at_count, error_msg, winner_count_at_cancel
            if tag == "race":
                if ev.role != winner:
                    return  # loser remnant from the race phase
                if ev.kind == "token":
                    source_tokens.append(ev.text)
                    if (target_task is None and buffer_goal is not None
                            and len(source_tokens) - emitted >= buffer_goal):
                        session.advance(SessionPhase.MIGRATING)
                        target_fired_at_count = len(source_tokens)
                        target_task = fire_target()
                else:
                    source_done = True
                    if ev.kind == "error":
                        error_msg = error_msg or ev.text
            else:  # dedicated migration-target stream
                if ev.kind == "token":
                    if barrier is None:
                        # Target is ready: stop the source at its current
                        # index (idempotent barrier).
                        barrier = len(source_tokens) - 1
                        winner_count_at_cancel = len(source_tokens)
                        skip_left = max(0, (barrier + 1) - target_fired_at_count)
                        tasks[winner].cancel()
                        session.migrated = True
                        session.advance(SessionPhase.DECODING)
                        if target == "server" and meta["server"].get("first_at") \
                                and meta["server"].get("issued_at"):
                            self.observe_server_ttft(
                                meta["server"]["first_at"] - meta["server"]["issued_at"])
                    target_tokens.append(ev.text)
                else:
                    target_done = True
                    if barrier is None:
                        # Target died before taking over: transparent
                        # fallback to the still-running source; migration is
                        # evaluated once, so do not re-arm the trigger.
                        target_task = None
                        target_done = False
                        buffer_goal = None
                        session.advance(SessionPhase.DECODING)
                    elif ev.kind == "error":
                        error_msg = error_msg or ev.text

        def drain_queues() -> None:
            """Fold in everything that has already arrived, so the buffer
            accounting (and with it the migration trigger) sees tokens as
            they land rather than as they are consumed."""
            while not source_done and barrier is None:
                try:
                    pump("race", events.get_nowait())
                except asyncio.QueueEmpty:
                    break
            while target_task is not None and not target_done:
                try:
                    pump("target", target_events.get_nowait())
                except asyncio.QueueEmpty:
                    break

        async def next_token() -> str | None:
            """Sequence tokens: source prefix, then target suffix."""
            nonlocal skip_left
            while True:
                drain_queues()
                # Serve buffered source tokens up to the barrier.
                limit = len(source_tokens) if barrier is None else min(barrier + 1, len(source_tokens))
                if emitted < limit:
                    return source_tokens[emitted]
                if barrier is not None:
                    # Past the barrier: serve target tokens (skipping its
                    # regenerated overlap with the source).
                    while skip_left and target_tokens:
                        target_tokens.pop(0)
                        skip_left -= 1
                    if not skip_left and emitted - (barrier + 1) < len(target_tokens):
                        return target_tokens[emitted - (barrier + 1)]
                    if target_done:
                        return None
                elif source_done and target_task is None:
                    return None

                # Nothing buffered: wait on whichever streams are live.
                pending = []
                if not source_done and barrier is None:
                    pending.append(asyncio.create_task(_tagged("race", events)))
                if target_task is not None and not target_done:
                    pending.append(asyncio.create_task(_tagged("target", target_events)))
                if not pending:
                    return None
                try:
                    done, rest = await asyncio.wait(pending, return_when=asyncio.FIRST_COMPLETED)
                except asyncio.CancelledError:
                    for task in pending:
                        task.cancel()
                    raise
                for task in rest:
                    task.cancel()
                await asyncio.gather(*rest, return_exceptions=True)
                for task in done:
                    tag, ev = task.result()
                    pump(tag, ev)
                # A cancelled helper cannot lose tokens: queue items are only
                # removed once a get() completes, so they stay queued for the
                # next drain.

        try:
            while True:
                text = await next_token()
                if text is None:
                    break
                now = time.monotonic()
                if anchor is None:
                    anchor = now
                elif slot is not None:
                    due = anchor + emitted * slot
                    wait = due - now
                    if wait > 0:
                        await asyncio.sleep(wait)
                    elif -wait > slot:
                        delayed += 1
                yield self._chunk(comp_id, text)
                emitted += 1
                session.tokens_emitted = emitted
        finally:
            if target_task is not None:
                target_task.cancel()
                await asyncio.gather(target_task, return_exceptions=True)

        session.delayed_tokens = delayed

        # ---- final usage + ledger chunk ----
        n_source = emitted if barrier is None else min(emitted, barrier + 1)
        n_target = emitted - n_source
        server_prefill = float(l_est) if "server" in issued else 0.0
        server_decode = 0.0
        device_prefill = 0.0
        device_decode = 0.0
        if winner == "server":
            server_decode += n_source
            device_prefill = rates.device_prefill_flops * l_est * device_partial_frac
        else:
            device_prefill = rates.device_prefill_flops * l_est
            device_decode += max(0, n_source - 1) * rates.device_decode_flops
        if session.migrated:
            prefix_ctx = l_est + (winner_count_at_cancel or n_source)
            if target == "server":
                server_prefill += prefix_ctx
                server_decode += n_target
            else:
                device_prefill += rates.device_prefill_flops * prefix_ctx
                device_decode += n_target * rates.device_decode_flops
        cost = unified_request_cost(rates, server_prefill, server_decode,
                                    device_prefill, device_decode)

        if error_msg is not None:
            # Stream broke mid-generation: partial tokens were flushed above.
            session.advance(SessionPhase.FAILED)
            yield self._sse({"error": {"message": error_msg, "tokens_flushed": emitted}})
            yield b"data: [DONE]\n\n"
            return

        session.advance(SessionPhase.DONE)
        yield self._chunk(
            comp_id, None, finish="stop",
            extra={
                "usage": {
                    "prompt_tokens": l_est,
                    "completion_tokens": emitted,
                    "total_tokens": l_est + emitted,
                },
                "x_disco": {
                    "winner": winner,
                    "migrated": session.migrated,
                    "delayed_tokens": delayed,
                    "unified_cost": cost,
                    "policy_snapshot_id": snapshot.id,
                },
            },
        )
        yield b"data: [DONE]\n\n"


def create_app(
    config: GatewayConfig,
    device_client: httpx.AsyncClient | None = None,
    server_client: httpx.AsyncClient | None = None,
) -> FastAPI:
    """Build the gateway ASGI app.

    In mock mode (or tests) the upstream clients are backed by in-process
    ASGI transports, so no socket ever opens toward an upstream.
    """
    if config.mock and device_client is None and server_client is None:
        from .asgi_stream import StreamingASGITransport
        from .mock_upstream import MockScript, MockUpstream

        device_mock = MockUpstream(name="device", script=MockScript(ttft_s=0.2, tbt_s=0.05))
        server_mock = MockUpstream(name="server", script=MockScript(ttft_s=0.05, tbt_s=0.02))
        device_client = httpx.AsyncClient(
            transport=StreamingASGITransport(app=device_mock.app), base_url="http://device.mock")
        server_client = httpx.AsyncClient(
            transport=StreamingASGITransport(app=server_mock.app), base_url="http://server.mock")

    gateway = Gateway(config, device_client=device_client, server_client=server_client)

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        yield
        await gateway.drain()
        await gateway.aclose()

    app = FastAPI(title="coserve-gateway", lifespan=lifespan)
    app.state.gateway = gateway

    @app.post("/v1/chat/completions")
    async def chat_completions(request: Request):
        body = await request.json()
        if not body.get("stream", False):
            return JSONResponse(status_code=400,
                                content={"error": "this gateway only serves streaming requests"})
        if not _extract_prompt(body):
            return JSONResponse(status_code=400, content={"error": "empty prompt"})
        lam_raw = request.headers.get(LAMBDA_HEADER)
        lam = None
        if lam_raw is not None:
            try:
                lam = float(lam_raw)
            except ValueError:
                return JSONResponse(status_code=400,
                                    content={"error": f"bad {LAMBDA_HEADER} header"})
        return StreamingResponse(gateway.handle_stream(body, lam_override=lam),
                                 media_type="text/event-stream")

    @app.get("/healthz")
    async def healthz():
        return {
            "status": "draining" if gateway._draining else "ok",
            "policy_snapshot_id": gateway.snapshot.id,
            "active_sessions": len(gateway.sessions),
            "ttft_window": len(gateway.ttft_window),
        }

    @app.post("/admin/refresh")
    async def refresh():
        refreshed = gateway.profile_refresh()
        return {
            "refreshed": refreshed,
            "policy_snapshot_id": gateway.snapshot.id,
            "window": len(gateway.ttft_window),
        }

    @app.get("/admin/policy")
    async def policy():
        snap = gateway.snapshot
        audit = policy_audit_dict(snap.policy, snap.budget)
        audit["snapshot_id"] = snap.id
        return audit

    return app
