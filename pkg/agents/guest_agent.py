"""
The in-guest agent: serves one host session at a time.

Every request gets exactly one response. Request-level failures become error
responses and never stop the serve loop; only a shutdown request (exit 0) or a
refused handshake (exit 3) ends it.
"""

import asyncio
import logging
import time
from datetime import datetime, timezone
from typing import Callable, Optional, Tuple

from protocol.codec import decode, encode
from protocol.messages import (
    HANDSHAKE_ID,
    MALFORMED_FRAME_ID,
    MAX_FRAME_BYTES,
    PROTOCOL_VERSION,
    ProtocolError,
    Request,
    RequestKind,
    Response,
    ResponseStatus,
    error_payload,
    versions_compatible,
)
from protocol.transport import ChannelClosed, FrameChannel, StreamChannel
from resolver.screen_model import ResolverError
from resolver.target_resolver import TargetNotFound
from scripts.bash_tool import CommandSpawnError, CommandTool
from scripts.file_server import FileServerTool, TransferError, read_chunk
from scripts.registry import AssertionRegistry, TestStatus
from scripts.visual_qa import BackendError

from .execution_root import AgentError, PathConfinementError, RootMode
from .gui_actions import GuiDriver, GuiError

logger = logging.getLogger(__name__)

EXIT_CLEAN = 0
EXIT_CONNECTION_LOST = 1
EXIT_BIND_FAILURE = 2
EXIT_HANDSHAKE_REFUSED = 3

GUI_KINDS = ("click", "type_text", "scroll", "drag_drop")

_TEST_STATUS = {
    TestStatus.PASS: ResponseStatus.TEST_PASS,
    TestStatus.FAIL: ResponseStatus.TEST_FAIL,
    TestStatus.ERROR: ResponseStatus.ERROR,
}


class RequestFailed(AgentError):
    def __init__(self, error_class: str, message: str, **extra):
        super().__init__(message)
        self.error_class = error_class
        self.extra = extra


class GuestAgent:
    def __init__(self, root, registry: AssertionRegistry, driver: Optional[GuiDriver] = None):
        self.root = root
        self.registry = registry
        self.driver = driver
        self.command_tool = CommandTool(root)
        self.file_tool = FileServerTool(root)
        self._last_clock = datetime.min.replace(tzinfo=timezone.utc)

    @property
    def capabilities(self) -> list:
        caps = ["file_transfer"]
        if self.driver is not None:
            caps.append("gui")
        if self.root.mode is RootMode.SANDBOX:
            caps.append("sandbox")
        return sorted(caps)

    def handshake_payload(self) -> dict:
        return {
            "protocol_version": PROTOCOL_VERSION,
            "agent_capabilities": self.capabilities,
            "registry_digest": self.registry.digest(),
            "mode": self.root.mode.value,
            "path_family": self.root.path_family,
            "sys_vars": dict(self.root.sys_vars),
        }

    def clock(self) -> str:
        # started_at values must never go backwards within a session
        now = max(datetime.now(timezone.utc), self._last_clock)
        self._last_clock = now
        return now.isoformat()

    async def serve(self, channel: FrameChannel) -> int:
        code = await self._serve(channel)
        try:
            await channel.close()
        except ProtocolError:
            pass
        return code

    async def _serve(self, channel: FrameChannel) -> int:
        frame = await channel.receive()
        if frame is None:
            return EXIT_CONNECTION_LOST
        if not await self._handshake(channel, frame):
            return EXIT_HANDSHAKE_REFUSED

        last_id = HANDSHAKE_ID
        while True:
            try:
                frame = await channel.receive()
            except ProtocolError as e:
                await self._send(channel, self._error(MALFORMED_FRAME_ID, "protocol_error", str(e), time.perf_counter()))
                continue
            if frame is None:
                logger.info("host disconnected without shutdown")
                return EXIT_CONNECTION_LOST
            start = time.perf_counter()
            try:
                request = decode(frame)
                if not isinstance(request, Request):
                    raise ProtocolError("expected a request frame")
            except ProtocolError as e:
                await self._send(channel, self._error(MALFORMED_FRAME_ID, "protocol_error", str(e), start))
                continue
            if request.id <= last_id:
                await self._send(channel, self._error(request.id, "protocol_error", f"request id {request.id} is not increasing", start))
                continue
            last_id = request.id

            if request.kind is RequestKind.SHUTDOWN:
                await self._send(channel, Response(request.id, ResponseStatus.OK, None, self.clock(), self._elapsed(start)))
                logger.info("shutdown requested")
                return EXIT_CLEAN
            response = await self.handle(request)
            if not await self._send(channel, response):
                return EXIT_CONNECTION_LOST

    async def _handshake(self, channel: FrameChannel, frame: str) -> bool:
        start = time.perf_counter()
        try:
            request = decode(frame)
        except ProtocolError as e:
            await self._send(channel, self._error(MALFORMED_FRAME_ID, "handshake_required", str(e), start))
            return False
        if not isinstance(request, Request) or request.kind is not RequestKind.HANDSHAKE or request.id != HANDSHAKE_ID:
            await self._send(channel, self._error(getattr(request, "id", MALFORMED_FRAME_ID), "handshake_required", "first frame must be the handshake", start))
            return False
        theirs = (request.payload or {}).get("protocol_version", "") if isinstance(request.payload, dict) else ""
        try:
            compatible = versions_compatible(PROTOCOL_VERSION, theirs)
        except ProtocolError:
            compatible = False
        if not compatible:
            logger.warning("refusing host protocol %r (agent speaks %s)", theirs, PROTOCOL_VERSION)
            await self._send(channel, self._error(HANDSHAKE_ID, "version_mismatch", f"agent speaks {PROTOCOL_VERSION}, host sent {theirs!r}", start))
            return False
        await self._send(channel, Response(HANDSHAKE_ID, ResponseStatus.OK, self.handshake_payload(), self.clock(), self._elapsed(start)))
        return True

    async def _send(self, channel: FrameChannel, response: Response) -> bool:
        try:
            await channel.send(encode(response))
            return True
        except ChannelClosed:
            return False

    @staticmethod
    def _elapsed(start: float) -> float:
        return round((time.perf_counter() - start) * 1000, 3)

    def _error(self, request_id: int, error_class: str, message: str, start: float, **extra) -> Response:
        return Response(request_id, ResponseStatus.ERROR, error_payload(error_class, message, **extra), self.clock(), self._elapsed(start))

    async def handle(self, request: Request) -> Response:
        """Turn one request into its terminal response."""
        start = time.perf_counter()
        agent_clock = self.clock()
        logger.debug("request %d %s", request.id, request.kind.value)
        try:
            status, payload = await self._dispatch(request)
        except RequestFailed as e:
            return self._error(request.id, e.error_class, str(e), start, **e.extra)
        except PathConfinementError as e:
            return self._error(request.id, "path_confinement", str(e), start)
        except TargetNotFound as e:
            return self._error(request.id, "target_not_found", str(e), start, candidates=e.candidates)
        except BackendError as e:
            return self._error(request.id, "backend_error", str(e), start)
        except CommandSpawnError as e:
            return self._error(request.id, "spawn_failure", str(e), start)
        except TransferError as e:
            return self._error(request.id, "transfer_failed", str(e), start)
        except (GuiError, ResolverError) as e:
            return self._error(request.id, "gui_error", str(e), start)
        except OSError as e:
            return self._error(request.id, "io", f"{e.strerror or e}: {getattr(e, 'filename', '')}", start)
        except Exception as e:
            logger.exception("request %d failed", request.id)
            return self._error(request.id, "internal", f"{type(e).__name__}: {e}", start)
        return Response(request.id, status, payload, agent_clock, self._elapsed(start))

    async def _dispatch(self, request: Request) -> Tuple[ResponseStatus, object]:
        payload = request.payload if isinstance(request.payload, dict) else {}
        kind = request.kind
        if kind is RequestKind.PING:
            return ResponseStatus.OK, {"pong": True}
        if kind is RequestKind.HANDSHAKE:
            raise RequestFailed("protocol_error", "handshake is only allowed as frame 0")
        if kind is RequestKind.ACTION:
            return ResponseStatus.OK, await self.perform(payload)
        if kind is RequestKind.TEST:
            result = self.evaluate_test(payload)
            return _TEST_STATUS[result.status], result.to_dict()
        if kind is RequestKind.PUSH_FILE:
            return ResponseStatus.OK, await self.file_tool.forward(
                payload["path"], payload["data"], int(payload.get("index", 0)), payload.get("sha256") if payload.get("final") else None
            )
        if kind is RequestKind.FETCH_FILE:
            return ResponseStatus.OK, await read_chunk(self.root, payload["path"], int(payload.get("offset", 0)), int(payload.get("length", MAX_FRAME_BYTES // 2)))
        raise RequestFailed("protocol_error", f"unsupported request kind {kind.value}")

    async def perform(self, action: dict) -> dict:
        kind = action.get("kind")
        if kind == "command":
            return await self.command_tool.forward(action["command"], action.get("shell", True))
        if kind == "wait":
            await asyncio.sleep(int(action.get("duration_ms", 0)) / 1000.0)
            return {"waited_ms": int(action.get("duration_ms", 0))}
        if kind in GUI_KINDS:
            if self.driver is None:
                raise RequestFailed("gui_unavailable", "this agent has no GUI driver")
            return await self.driver.perform(action)
        raise RequestFailed("unknown_action", f"unknown action kind {kind!r}")

    def evaluate_test(self, payload: dict):
        return self.registry.evaluate(
            payload.get("test_name", ""),
            payload.get("function", ""),
            payload.get("parameters") or {},
            resolve_path=self.root.resolve,
        )


async def serve_tcp(agent: GuestAgent, host: str, port: int, on_ready: Optional[Callable[[Tuple[str, int]], None]] = None) -> int:
    """Listen for host sessions, one at a time, until shutdown or a refused handshake."""
    loop = asyncio.get_running_loop()
    finished: asyncio.Future = loop.create_future()
    busy = False

    async def on_connect(reader, writer):
        nonlocal busy
        channel = StreamChannel(reader, writer)
        if busy or finished.done():
            await channel.close()
            return
        busy = True
        try:
            code = await agent.serve(channel)
        except Exception:
            logger.exception("session crashed")
            code = EXIT_CONNECTION_LOST
        finally:
            busy = False
        if code in (EXIT_CLEAN, EXIT_HANDSHAKE_REFUSED) and not finished.done():
            finished.set_result(code)

    try:
        server = await asyncio.start_server(on_connect, host, port, limit=MAX_FRAME_BYTES + 1)
    except OSError as e:
        logger.error("cannot listen on %s:%s: %s", host, port, e)
        return EXIT_BIND_FAILURE
    address = server.sockets[0].getsockname()[:2]
    logger.info("agent listening on %s:%s", *address)
    if on_ready is not None:
        on_ready(address)
    async with server:
        return await finished
