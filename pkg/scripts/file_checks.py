import os
import re
from typing import Optional

from .registry import AssertionTool, ErrorClass, Outcome

DEFAULT_SIZE_CAP = 64 * 1024 * 1024
EXCERPT_BYTES = 256
CONTAINS_MODES = ("substring", "regex", "full_match")


def path_present(dst: str) -> Optional[bool]:
    """True if something exists at dst, False if not, None when the parent is unreadable."""
    try:
        os.lstat(dst)
        return True
    except (FileNotFoundError, NotADirectoryError):
        return False
    except PermissionError:
        return None


class FileExistsTool(AssertionTool):
    name = "file_exists"
    description = "Passes when a file or directory exists at `dst`."
    inputs = {
        "dst": {"description": "Absolute path inside the execution root.", "type": "string"},
    }
    path_inputs = ("dst",)

    def forward(self, dst: str):
        present = path_present(dst)
        if present is None:
            return Outcome.errored(ErrorClass.IO, f"cannot inspect {dst}: permission denied on a parent directory")
        if present:
            return Outcome.passed(f"{dst} exists")
        return Outcome.failed("absent", "present", f"{dst} does not exist")


class FileAbsentTool(AssertionTool):
    name = "file_absent"
    description = "Passes when nothing exists at `dst`."
    inputs = {
        "dst": {"description": "Absolute path inside the execution root.", "type": "string"},
    }
    path_inputs = ("dst",)

    def forward(self, dst: str):
        present = path_present(dst)
        if present is None:
            return Outcome.errored(ErrorClass.IO, f"cannot inspect {dst}: permission denied on a parent directory")
        if present:
            return Outcome.failed("present", "absent", f"{dst} still exists")
        return Outcome.passed(f"{dst} is absent")


def _excerpt(text: str, pattern: str) -> str:
    # Start at the longest prefix of the pattern that does occur, else at the top.
    start = 0
    for length in range(len(pattern), 2, -1):
        index = text.find(pattern[:length])
        if index >= 0:
            start = index
            break
    return text[start:].encode("utf-8")[:EXCERPT_BYTES].decode("utf-8", errors="ignore")


class FileContainsTool(AssertionTool):
    name = "file_contains"
    description = """Passes when the file at `dst` contains `pattern`.
`mode` is one of substring (default), regex (search anywhere, multiline) or full_match (the whole file)."""
    inputs = {
        "dst": {"description": "Absolute path of a regular file.", "type": "string"},
        "pattern": {"description": "Literal text or regular expression.", "type": "string"},
        "mode": {"description": "[Optional]: substring, regex or full_match.", "type": "string", "nullable": True},
    }
    path_inputs = ("dst",)
    size_cap = DEFAULT_SIZE_CAP

    def forward(self, dst: str, pattern: str, mode: Optional[str] = "substring"):
        mode = mode or "substring"
        if mode not in CONTAINS_MODES:
            return Outcome.errored(ErrorClass.BAD_PARAMETER, f"mode must be one of {', '.join(CONTAINS_MODES)}")
        try:
            size = os.stat(dst).st_size
            if not os.path.isfile(dst):
                return Outcome.errored(ErrorClass.IO, f"{dst} is not a regular file")
            if size > self.size_cap:
                return Outcome.errored(ErrorClass.IO, f"{dst} is {size} bytes, above the {self.size_cap} byte cap")
            with open(dst, "rb") as fh:
                text = fh.read().decode("utf-8", errors="replace")
        except FileNotFoundError:
            return Outcome.errored(ErrorClass.IO, f"{dst} does not exist")
        except OSError as e:
            return Outcome.errored(ErrorClass.IO, f"cannot read {dst}: {e.strerror or e}")

        if mode == "substring":
            found = pattern in text
        else:
            try:
                regex = re.compile(pattern, re.MULTILINE)
            except re.error as e:
                return Outcome.errored(ErrorClass.BAD_PARAMETER, f"invalid regular expression: {e}")
            found = bool(regex.search(text)) if mode == "regex" else bool(regex.fullmatch(text))

        if found:
            return Outcome.passed(f"{dst} matches ({mode})")
        return Outcome.failed(_excerpt(text, pattern), pattern, f"{dst} does not match ({mode})")
