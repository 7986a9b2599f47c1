import os
import re
from datetime import datetime, timezone
from typing import Any, Optional

from .registry import AssertionTool, ErrorClass, Outcome

DEFAULT_TOLERANCE_MS = 2000
DEFAULT_CONTENT_PATTERN = r"DeletionDate=(.+)"
SOURCES = ("value", "file_mtime", "file_content")

# Epoch values above this are taken as milliseconds (year ~5138 in seconds).
_MILLIS_THRESHOLD = 100_000_000_000


class TimestampError(ValueError):
    pass


def parse_instant(value: Any) -> datetime:
    """Parse RFC 3339, trash-spec local time (no offset) or epoch seconds/millis into an aware UTC datetime."""
    if isinstance(value, datetime):
        moment = value
    elif isinstance(value, (int, float)) and not isinstance(value, bool):
        moment = _from_epoch(value)
    else:
        text = str(value).strip()
        try:
            moment = _from_epoch(float(text))
        except (ValueError, OverflowError, OSError):
            if text[-1:] in ("Z", "z"):
                text = text[:-1] + "+00:00"
            try:
                moment = datetime.fromisoformat(text)
            except ValueError:
                raise TimestampError(f"unparseable timestamp {text!r}") from None
    if moment.tzinfo is None:
        # trash-spec DeletionDate and other offset-less values are local time
        moment = moment.astimezone()
    return moment.astimezone(timezone.utc)


def _from_epoch(number: float) -> datetime:
    if abs(number) >= _MILLIS_THRESHOLD:
        number = number / 1000.0
    return datetime.fromtimestamp(number, tz=timezone.utc)


class TimestampWithinTool(AssertionTool):
    name = "timestamp_within"
    description = """Passes when an actual timestamp lies within `tolerance_ms` of `reference`.
The actual value comes from `actual` (source=value), the modification time of `dst` (source=file_mtime)
or the first capture group of `pattern` searched in `dst` (source=file_content)."""
    inputs = {
        "reference": {"description": "Reference instant (captured variable or literal).", "type": "any"},
        "source": {"description": "[Optional]: value, file_mtime or file_content.", "type": "string", "nullable": True},
        "actual": {"description": "[Optional]: Actual instant when source=value.", "type": "string", "nullable": True},
        "dst": {"description": "[Optional]: File for file_mtime or file_content.", "type": "string", "nullable": True},
        "pattern": {"description": "[Optional]: Regex whose group 1 holds the timestamp.", "type": "string", "nullable": True},
        "tolerance_ms": {"description": "[Optional]: Allowed distance in milliseconds, default 2000.", "type": "integer", "nullable": True},
    }
    path_inputs = ("dst",)

    def forward(
        self,
        reference: Any,
        source: Optional[str] = "value",
        actual: Optional[str] = None,
        dst: Optional[str] = None,
        pattern: Optional[str] = DEFAULT_CONTENT_PATTERN,
        tolerance_ms: Optional[int] = DEFAULT_TOLERANCE_MS,
    ):
        source = source or "value"
        if source not in SOURCES:
            return Outcome.errored(ErrorClass.BAD_PARAMETER, f"source must be one of {', '.join(SOURCES)}")
        try:
            tolerance_ms = DEFAULT_TOLERANCE_MS if tolerance_ms is None else float(tolerance_ms)
        except (TypeError, ValueError):
            return Outcome.errored(ErrorClass.BAD_PARAMETER, f"tolerance_ms must be a number, got {tolerance_ms!r}")
        if tolerance_ms.is_integer():
            tolerance_ms = int(tolerance_ms)
        if tolerance_ms < 0:
            return Outcome.errored(ErrorClass.BAD_PARAMETER, "tolerance_ms must be >= 0")

        try:
            reference_at = parse_instant(reference)
        except TimestampError as e:
            return Outcome.errored(ErrorClass.BAD_PARAMETER, f"reference: {e}")

        if source == "value":
            if actual is None:
                return Outcome.errored(ErrorClass.BAD_PARAMETER, "source=value needs `actual`")
            try:
                actual_at = parse_instant(actual)
            except TimestampError as e:
                return Outcome.errored(ErrorClass.BAD_PARAMETER, f"actual: {e}")
        else:
            if not dst:
                return Outcome.errored(ErrorClass.BAD_PARAMETER, f"source={source} needs `dst`")
            outcome = self._from_file(source, dst, pattern or DEFAULT_CONTENT_PATTERN)
            if isinstance(outcome, Outcome):
                return outcome
            actual_at = outcome

        delta_ms = abs((actual_at - reference_at).total_seconds()) * 1000.0
        if delta_ms <= tolerance_ms:
            return Outcome.passed(f"timestamp within {tolerance_ms} ms of reference")
        return Outcome.failed(
            {"actual": actual_at.isoformat(), "delta_ms": round(delta_ms, 3)},
            {"reference": reference_at.isoformat(), "tolerance_ms": tolerance_ms},
            f"timestamp is {delta_ms:.0f} ms away from reference, tolerance {tolerance_ms} ms",
        )

    @staticmethod
    def _from_file(source: str, dst: str, pattern: str):
        try:
            if source == "file_mtime":
                return datetime.fromtimestamp(os.stat(dst).st_mtime, tz=timezone.utc)
            with open(dst, "rb") as fh:
                text = fh.read().decode("utf-8", errors="replace")
        except OSError as e:
            return Outcome.errored(ErrorClass.IO, f"cannot read {dst}: {e.strerror or e}")
        try:
            match = re.search(pattern, text, re.MULTILINE)
        except re.error as e:
            return Outcome.errored(ErrorClass.BAD_PARAMETER, f"invalid pattern: {e}")
        if match is None:
            return Outcome.errored(ErrorClass.MALFORMED_FILE, f"no timestamp matching {pattern!r} in {dst}")
        raw = match.group(1) if match.groups() else match.group(0)
        try:
            return parse_instant(raw)
        except TimestampError as e:
            return Outcome.errored(ErrorClass.MALFORMED_FILE, str(e))
