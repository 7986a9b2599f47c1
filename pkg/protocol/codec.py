"""One JSON object per text frame. Frames never contain a raw newline."""

import json
from typing import Union

from .messages import ProtocolError, Request, RequestKind, Response, ResponseStatus

Message = Union[Request, Response]


def _message_dict(msg: Message) -> dict:
    if isinstance(msg, Request):
        data = {"id": msg.id, "kind": msg.kind.value, "payload": msg.payload}
        if msg.deadline_ms is not None:
            data["deadline_ms"] = msg.deadline_ms
        return data
    if isinstance(msg, Response):
        return {
            "id": msg.id,
            "status": msg.status.value,
            "payload": msg.payload,
            "agent_clock": msg.agent_clock,
            "duration_ms": msg.duration_ms,
        }
    raise TypeError(f"cannot encode {type(msg).__name__}")


def encode(msg: Message, canonical: bool = True) -> str:
    return json.dumps(
        _message_dict(msg),
        sort_keys=canonical,
        separators=(",", ":"),
        ensure_ascii=False,
        allow_nan=False,
    )


def _integer(data: dict, field: str) -> int:
    value = data[field]
    if isinstance(value, bool) or not isinstance(value, int):
        raise ProtocolError(f"field '{field}' must be an integer, got {type(value).__name__}", field)
    return value


def _require(data: dict, field: str):
    if field not in data:
        raise ProtocolError(f"missing {field}", field)
    return data[field]


def decode(frame: Union[str, bytes]) -> Message:
    """Parse one frame. Unknown extra fields are ignored; an unknown kind or status is an error."""
    try:
        data = json.loads(frame)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ProtocolError(f"malformed JSON: {e}") from None
    if not isinstance(data, dict):
        raise ProtocolError("frame is not a JSON object")

    _require(data, "id")
    msg_id = _integer(data, "id")

    if "kind" in data:
        try:
            kind = RequestKind(data["kind"])
        except ValueError:
            raise ProtocolError(f"unknown kind {data['kind']!r}", "kind") from None
        payload = _require(data, "payload")
        deadline = data.get("deadline_ms")
        if deadline is not None:
            deadline = _integer(data, "deadline_ms")
        return Request(msg_id, kind, payload, deadline)

    if "status" in data:
        try:
            status = ResponseStatus(data["status"])
        except ValueError:
            raise ProtocolError(f"unknown status {data['status']!r}", "status") from None
        payload = _require(data, "payload")
        duration = _require(data, "duration_ms")
        if isinstance(duration, bool) or not isinstance(duration, (int, float)):
            raise ProtocolError("field 'duration_ms' must be a number", "duration_ms")
        clock = data.get("agent_clock")
        if clock is not None and not isinstance(clock, str):
            raise ProtocolError("field 'agent_clock' must be a string", "agent_clock")
        return Response(msg_id, status, payload, clock, duration)

    raise ProtocolError("missing kind", "kind")
