"""Message types exchanged between the host and the guest agent."""

from dataclasses import dataclass
from enum import Enum
from typing import Any, Optional

PROTOCOL_VERSION = "1.0.0"
DEFAULT_PORT = 48620
MAX_FRAME_BYTES = 8 * 1024 * 1024
TRANSFER_CHUNK_BYTES = 1024 * 1024
HANDSHAKE_ID = 0
# id used for responses to frames that could not be decoded
MALFORMED_FRAME_ID = -1

CAPABILITIES = ("gui", "sandbox", "file_transfer")


class RequestKind(str, Enum):
    HANDSHAKE = "handshake"
    ACTION = "action"
    TEST = "test"
    PUSH_FILE = "push_file"
    FETCH_FILE = "fetch_file"
    PING = "ping"
    SHUTDOWN = "shutdown"


class ResponseStatus(str, Enum):
    OK = "ok"
    TEST_PASS = "test_pass"
    TEST_FAIL = "test_fail"
    ERROR = "error"


class ProtocolError(Exception):
    def __init__(self, message: str, field: Optional[str] = None):
        super().__init__(message)
        self.field = field


@dataclass(frozen=True)
class Request:
    id: int
    kind: RequestKind
    payload: Any = None
    deadline_ms: Optional[int] = None


@dataclass(frozen=True)
class Response:
    id: int
    status: ResponseStatus
    payload: Any = None
    agent_clock: Optional[str] = None
    duration_ms: float = 0.0

    @property
    def error_class(self) -> Optional[str]:
        if self.status is ResponseStatus.ERROR and isinstance(self.payload, dict):
            return self.payload.get("class")
        return None


def error_payload(error_class: str, message: str, **extra) -> dict:
    payload = {"class": error_class, "message": message}
    payload.update(extra)
    return payload


def major_version(version: str) -> int:
    try:
        return int(str(version).split(".", 1)[0])
    except ValueError:
        raise ProtocolError(f"bad protocol version {version!r}", "protocol_version") from None


def versions_compatible(ours: str, theirs: str) -> bool:
    return major_version(ours) == major_version(theirs)
