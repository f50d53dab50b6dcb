"""Scripted OpenAI-compatible mock upstreams.

Used by the integration tests and by the gateway's mock serve mode, so the
full racing / cancellation / migration path runs with no real LLM and no
external network.  Each mock streams synthetic tokens ``t0 t1 ...`` after a
scripted first-token delay, honors the migration payload's ``next_index``
(continuing the same synthetic response), and records calls, completions,
and cancellations for assertions.
"""

from __future__ import annotations

import asyncio
import json
import time
from dataclasses import dataclass, field
from typing import Callable

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, StreamingResponse

__all__ = ["MockScript", "MockUpstream"]


@dataclass
class MockScript:
    """Latency script for one upstream call."""

    ttft_s: float = 0.02
    tbt_s: float = 0.002
    n_tokens: int = 16  # total response length, including continued prefixes
    fail: bool = False  # refuse before the first token


@dataclass
class CallRecord:
    payload: dict
    started_at: float
    tokens_sent: int = 0
    cancelled: bool = False
    completed: bool = False


@dataclass
class MockUpstream:
    """An in-process upstream endpoint with scripted latencies."""

    name: str = "mock"
    script: MockScript | Callable[[dict, int], MockScript] = field(default_factory=MockScript)
    calls: list[CallRecord] = field(default_factory=list)

    def __post_init__(self):
        self.app = FastAPI(title=f"mock-upstream-{self.name}")
        self.app.post("/v1/chat/completions")(self._chat)
        self.app.get("/healthz")(self._health)

    async def _health(self):
        return {"status": "ok", "name": self.name}

    def _script_for(self, payload: dict) -> MockScript:
        if callable(self.script):
            return self.script(payload, len(self.calls))
        return self.script

    @property
    def cancelled_count(self) -> int:
        return sum(1 for c in self.calls if c.cancelled)

    @property
    def completed_count(self) -> int:
        return sum(1 for c in self.calls if c.completed)

    async def _chat(self, request: Request):
        payload = await request.json()
        script = self._script_for(payload)
        record = CallRecord(payload=payload, started_at=time.monotonic())
        self.calls.append(record)
        if script.fail:
            return JSONResponse(status_code=503, content={"error": "scripted failure"})
        if not payload.get("stream", False):
            return JSONResponse(status_code=400, content={"error": "mock only streams"})

        start_index = 0
        mig = payload.get("x_migration")
        if isinstance(mig, dict):
            start_index = int(mig.get("next_index", 0))

        async def gen():
            comp_id = f"mock-{self.name}-{len(self.calls)}"
            try:
                await asyncio.sleep(script.ttft_s)
                for i in range(start_index, script.n_tokens):
                    if i > start_index:
                        await asyncio.sleep(script.tbt_s)
                    chunk = {
                        "id": comp_id,
                        "object": "chat.completion.chunk",
                        "model": payload.get("model", self.name),
                        "choices": [{
                            "index": 0,
                            "delta": {"content": f"t{i} "},
                            "finish_reason": None,
                        }],
                    }
                    yield f"data: {json.dumps(chunk)}\n\n"
                    record.tokens_sent += 1
                final = {
                    "id": comp_id,
                    "object": "chat.completion.chunk",
                    "model": payload.get("model", self.name),
                    "choices": [{"index": 0, "delta": {}, "finish_reason": "stop"}],
                }
                yield f"data: {json.dumps(final)}\n\n"
                yield "data: [DONE]\n\n"
                record.completed = True
            except asyncio.CancelledError:
                record.cancelled = True
                raise
            except GeneratorExit:
                record.cancelled = True
                raise

        return StreamingResponse(gen(), media_type="text/event-stream")
