"""
Ordered, reliable text-frame channels.

`StreamChannel` frames with newlines over an asyncio stream (TCP in practice);
`memory_channel_pair` gives two connected in-process ends for tests and for
the sandbox backend.
"""

import asyncio
import logging
from typing import Optional, Tuple

from .messages import MAX_FRAME_BYTES, ProtocolError

logger = logging.getLogger(__name__)


class ChannelClosed(ProtocolError):
    pass


class FrameChannel:
    async def send(self, frame: str) -> None:
        raise NotImplementedError

    async def receive(self) -> Optional[str]:
        """Next frame, or None once the peer has closed."""
        raise NotImplementedError

    async def close(self) -> None:
        raise NotImplementedError


class StreamChannel(FrameChannel):
    def __init__(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter, max_frame_bytes: int = MAX_FRAME_BYTES):
        self._reader = reader
        self._writer = writer
        self._max = max_frame_bytes
        self._closed = False

    @property
    def peer(self):
        return self._writer.get_extra_info("peername")

    async def send(self, frame: str) -> None:
        if self._closed:
            raise ChannelClosed("channel is closed")
        if "\n" in frame:
            raise ProtocolError("frame contains a raw newline")
        data = frame.encode("utf-8")
        if len(data) > self._max:
            raise ProtocolError(f"frame of {len(data)} bytes exceeds {self._max}")
        try:
            self._writer.write(data + b"\n")
            await self._writer.drain()
        except (ConnectionError, OSError) as e:
            self._closed = True
            raise ChannelClosed(f"send failed: {e}") from None

    async def receive(self) -> Optional[str]:
        if self._closed:
            return None
        try:
            line = await self._reader.readline()
        except (asyncio.LimitOverrunError, ValueError):
            raise ProtocolError(f"frame exceeds {self._max} bytes") from None
        except (ConnectionError, OSError):
            self._closed = True
            return None
        if not line:
            self._closed = True
            return None
        return line.rstrip(b"\r\n").decode("utf-8", errors="replace")

    async def close(self) -> None:
        if self._closed and self._writer.is_closing():
            return
        self._closed = True
        self._writer.close()
        try:
            await self._writer.wait_closed()
        except (ConnectionError, OSError):
            pass


async def open_tcp_channel(host: str, port: int, max_frame_bytes: int = MAX_FRAME_BYTES) -> StreamChannel:
    reader, writer = await asyncio.open_connection(host, port, limit=max_frame_bytes + 1)
    return StreamChannel(reader, writer, max_frame_bytes)


_EOF = object()


class MemoryChannel(FrameChannel):
    def __init__(self, inbox: asyncio.Queue, outbox: asyncio.Queue):
        self._inbox = inbox
        self._outbox = outbox
        self._closed = False

    async def send(self, frame: str) -> None:
        if self._closed:
            raise ChannelClosed("channel is closed")
        if "\n" in frame:
            raise ProtocolError("frame contains a raw newline")
        await self._outbox.put(frame)

    async def receive(self) -> Optional[str]:
        if self._closed and self._inbox.empty():
            return None
        item = await self._inbox.get()
        if item is _EOF:
            self._closed = True
            return None
        return item

    async def close(self) -> None:
        if not self._closed:
            self._closed = True
            await self._outbox.put(_EOF)
            # wake a pending receive on this end
            await self._inbox.put(_EOF)


def memory_channel_pair() -> Tuple[MemoryChannel, MemoryChannel]:
    a_to_b: asyncio.Queue = asyncio.Queue()
    b_to_a: asyncio.Queue = asyncio.Queue()
    return MemoryChannel(b_to_a, a_to_b), MemoryChannel(a_to_b, b_to_a)
