"""
Host side of a connection to a guest agent.

One request is outstanding at a time. A missed deadline, a lost connection or
a protocol violation poisons the session; after that every send is refused
until a new session is opened on a fresh connection.
"""

import asyncio
import base64
import hashlib
import logging
import time
from dataclasses import dataclass, field
from typing import Any, Iterable, List, Optional, Tuple

from .codec import decode, encode
from .messages import (
    HANDSHAKE_ID,
    PROTOCOL_VERSION,
    TRANSFER_CHUNK_BYTES,
    ProtocolError,
    Request,
    RequestKind,
    Response,
    ResponseStatus,
    error_payload,
    versions_compatible,
)
from .transport import ChannelClosed, FrameChannel

logger = logging.getLogger(__name__)


class SessionPoisoned(ProtocolError):
    pass


class HandshakeRefused(ProtocolError):
    pass


class TransferError(ProtocolError):
    pass


@dataclass(frozen=True)
class TraceEvent:
    direction: str  # "send", "recv" or "synth"
    id: int
    at: float


@dataclass
class Exchange:
    """A request, its terminal response and the host instants around them."""

    request: Request
    response: Response
    sent_at: float
    received_at: float


def alternation_holds(trace: Iterable[TraceEvent]) -> bool:
    """True when sends minus terminal responses stays in {0, 1} and ids echo in order."""
    outstanding: Optional[int] = None
    for event in trace:
        if event.direction == "send":
            if outstanding is not None:
                return False
            outstanding = event.id
        else:
            if outstanding is None or event.id != outstanding:
                return False
            outstanding = None
    return True


@dataclass
class HostSession:
    channel: FrameChannel
    default_deadline_ms: Optional[int] = None
    trace: List[TraceEvent] = field(default_factory=list)
    agent_info: Optional[dict] = None
    poisoned: Optional[str] = None
    _next_id: int = 1

    async def handshake(self, registry_digest: Optional[str] = None, deadline_ms: Optional[int] = 30_000) -> dict:
        """Exchange frame 0; raise HandshakeRefused on refusal or an incompatible major version."""
        payload = {"protocol_version": PROTOCOL_VERSION, "registry_digest": registry_digest}
        response = await self._exchange(Request(HANDSHAKE_ID, RequestKind.HANDSHAKE, payload, deadline_ms))
        if response.status is ResponseStatus.ERROR:
            self.poisoned = "handshake_refused"
            message = response.payload.get("message") if isinstance(response.payload, dict) else response.payload
            raise HandshakeRefused(f"agent refused handshake: {message}")
        info = response.payload if isinstance(response.payload, dict) else {}
        theirs = info.get("protocol_version", "")
        if not versions_compatible(PROTOCOL_VERSION, theirs):
            self.poisoned = "version_mismatch"
            raise HandshakeRefused(f"agent speaks protocol {theirs}, host speaks {PROTOCOL_VERSION}")
        if registry_digest and info.get("registry_digest") not in (None, registry_digest):
            logger.warning("agent assertion registry differs from the host's (%s != %s)", info.get("registry_digest"), registry_digest)
        self.agent_info = info
        return info

    async def request(self, kind: RequestKind, payload: Any = None, deadline_ms: Optional[int] = None) -> Response:
        return (await self.exchange(kind, payload, deadline_ms)).response

    async def exchange(self, kind: RequestKind, payload: Any = None, deadline_ms: Optional[int] = None) -> Exchange:
        if self.agent_info is None:
            raise ProtocolError("handshake has not completed")
        request = Request(self._next_id, kind, payload, deadline_ms if deadline_ms is not None else self.default_deadline_ms)
        self._next_id += 1
        sent_at = time.time()
        response = await self._exchange(request)
        return Exchange(request, response, sent_at, time.time())

    async def run_session(self, requests: Iterable[Tuple[RequestKind, Any]]) -> List[Response]:
        return [await self.request(kind, payload) for kind, payload in requests]

    async def _exchange(self, request: Request) -> Response:
        if self.poisoned:
            raise SessionPoisoned(f"session is poisoned ({self.poisoned}); reconnect first")
        start = time.monotonic()
        try:
            await self.channel.send(encode(request))
        except ChannelClosed:
            return self._synthesize(request, "connection_lost", "connection closed before the request was sent", start)
        self.trace.append(TraceEvent("send", request.id, start))

        try:
            if request.deadline_ms is not None:
                frame = await asyncio.wait_for(self.channel.receive(), request.deadline_ms / 1000.0)
            else:
                frame = await self.channel.receive()
        except asyncio.TimeoutError:
            return self._synthesize(request, "deadline_exceeded", f"no response within {request.deadline_ms} ms", start)
        except ProtocolError as e:
            return self._synthesize(request, "protocol_violation", str(e), start)

        if frame is None:
            return self._synthesize(request, "connection_lost", "connection closed while waiting for the response", start)
        try:
            response = decode(frame)
        except ProtocolError as e:
            return self._synthesize(request, "protocol_violation", str(e), start)
        if not isinstance(response, Response) or response.id != request.id:
            return self._synthesize(request, "protocol_violation", f"expected response to request {request.id}", start)
        self.trace.append(TraceEvent("recv", response.id, time.monotonic()))
        return response

    def _synthesize(self, request: Request, error_class: str, message: str, start: float) -> Response:
        self.poisoned = error_class
        logger.warning("session poisoned by request %d (%s): %s", request.id, error_class, message)
        self.trace.append(TraceEvent("synth", request.id, time.monotonic()))
        return Response(
            request.id,
            ResponseStatus.ERROR,
            error_payload(error_class, message),
            None,
            round((time.monotonic() - start) * 1000, 3),
        )

    async def push_file(self, guest_path: str, data: bytes, chunk_bytes: int = TRANSFER_CHUNK_BYTES) -> Response:
        """Send `data` in chunks; the last chunk carries the SHA-256 of the whole file."""
        digest = hashlib.sha256(data).hexdigest()
        chunks = [data[i : i + chunk_bytes] for i in range(0, len(data), chunk_bytes)] or [b""]
        response = None
        for index, chunk in enumerate(chunks):
            final = index == len(chunks) - 1
            payload = {
                "path": guest_path,
                "index": index,
                "data": base64.b64encode(chunk).decode("ascii"),
                "final": final,
            }
            if final:
                payload["sha256"] = digest
            response = await self.request(RequestKind.PUSH_FILE, payload)
            if response.status is not ResponseStatus.OK:
                return response
        return response

    async def fetch_file(self, guest_path: str, chunk_bytes: int = TRANSFER_CHUNK_BYTES) -> Tuple[bytes, str]:
        """Read a guest file; raise TransferError on an error response or a hash mismatch."""
        parts, offset = [], 0
        while True:
            response = await self.request(
                RequestKind.FETCH_FILE, {"path": guest_path, "offset": offset, "length": chunk_bytes}
            )
            if response.status is not ResponseStatus.OK:
                raise TransferError(f"fetch of {guest_path} failed: {response.payload}")
            chunk = base64.b64decode(response.payload["data"])
            parts.append(chunk)
            offset += len(chunk)
            if response.payload.get("eof"):
                content = b"".join(parts)
                digest = hashlib.sha256(content).hexdigest()
                if response.payload.get("sha256") != digest:
                    raise TransferError(f"hash mismatch fetching {guest_path}")
                return content, digest

    async def close(self, shutdown: bool = True) -> None:
        if shutdown and self.agent_info is not None and not self.poisoned:
            try:
                await self.request(RequestKind.SHUTDOWN, None, deadline_ms=5000)
            except ProtocolError:
                pass
        await self.channel.close()
