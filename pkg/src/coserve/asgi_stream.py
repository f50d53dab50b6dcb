"""In-process streaming ASGI transport for httpx.

The stock ``httpx.ASGITransport`` runs the wrapped app to completion and
returns the whole body at once, which erases streaming semantics: races
would be decided by total completion time, mid-stream cancellation could
never happen, and first-token timestamps would be meaningless.  This
transport runs the app as a background task and hands body chunks to the
client as the app sends them.  Closing the response early delivers
``http.disconnect`` to the app and cancels it, exactly like a client
dropping a socket.  Used for mock upstreams in tests and in the gateway's
mock serve mode; no socket is ever opened.
"""

from __future__ import annotations

import asyncio
import typing

import httpx

__all__ = ["StreamingASGITransport"]

_DONE = object()


class _QueueStream(httpx.AsyncByteStream):
    def __init__(self, queue: asyncio.Queue, app_task: asyncio.Task,
                 closed: asyncio.Event) -> None:
        self._queue = queue
        self._app_task = app_task
        self._closed = closed

    async def __aiter__(self) -> typing.AsyncIterator[bytes]:
        while True:
            item = await self._queue.get()
            if item is _DONE:
                break
            if isinstance(item, BaseException):
                raise httpx.ReadError(str(item)) from item
            yield item

    async def aclose(self) -> None:
        self._closed.set()
        if not self._app_task.done():
            # Give the app one scheduling turn to observe the disconnect,
            # then cancel whatever is left.
            await asyncio.sleep(0)
            self._app_task.cancel()
        try:
            await self._app_task
        except (asyncio.CancelledError, Exception):  # noqa: BLE001
            pass


class StreamingASGITransport(httpx.AsyncBaseTransport):
    def __init__(self, app, client: tuple[str, int] = ("127.0.0.1", 123),
                 root_path: str = "") -> None:
        self.app = app
        self.client = client
        self.root_path = root_path

    async def handle_async_request(self, request: httpx.Request) -> httpx.Response:
        scope = {
            "type": "http",
            "asgi": {"version": "3.0"},
            "http_version": "1.1",
            "method": request.method,
            "headers": [(k.lower(), v) for (k, v) in request.headers.raw],
            "scheme": request.url.scheme,
            "path": request.url.path,
            "raw_path": request.url.raw_path.split(b"?")[0],
            "query_string": request.url.query,
            "server": (request.url.host, request.url.port),
            "client": self.client,
            "root_path": self.root_path,
        }
        body = await request.aread()

        chunks: asyncio.Queue = asyncio.Queue()
        closed = asyncio.Event()
        started = asyncio.Event()
        request_sent = False
        status_holder: dict = {"status": 500, "headers": []}

        async def receive():
            nonlocal request_sent
            if not request_sent:
                request_sent = True
                return {"type": "http.request", "body": body, "more_body": False}
            await closed.wait()
            return {"type": "http.disconnect"}

        async def send(message):
            if message["type"] == "http.response.start":
                status_holder["status"] = message["status"]
                status_holder["headers"] = message.get("headers", [])
                started.set()
            elif message["type"] == "http.response.body":
                part = message.get("body", b"")
                if part:
                    await chunks.put(part)
                if not message.get("more_body", False):
                    await chunks.put(_DONE)

        async def run_app():
            try:
                await self.app(scope, receive, send)
            except asyncio.CancelledError:
                await chunks.put(_DONE)
                raise
            except Exception as exc:  # noqa: BLE001 - surfaced as a read error
                if not started.is_set():
                    status_holder["status"] = 500
                    started.set()
                await chunks.put(exc)
            finally:
                started.set()
                await chunks.put(_DONE)

        app_task = asyncio.create_task(run_app())
        await started.wait()
        return httpx.Response(
            status_holder["status"],
            headers=status_holder["headers"],
            stream=_QueueStream(chunks, app_task, closed),
            request=request,
        )
