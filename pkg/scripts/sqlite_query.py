import json
import os
import re
import sqlite3
from collections import Counter
from pathlib import Path
from typing import Any
from urllib.parse import quote

from .format_queries import values_equal
from .registry import AssertionTool, ErrorClass, Outcome

_COMMENT = re.compile(r"--[^\n]*|/\*.*?\*/", re.DOTALL)
_STRING = re.compile(r"'(?:[^']|'')*'|\"(?:[^\"]|\"\")*\"")
_ORDER_BY = re.compile(r"\border\s+by\b", re.IGNORECASE)

_ALLOWED_ACTIONS = {sqlite3.SQLITE_SELECT, sqlite3.SQLITE_READ, sqlite3.SQLITE_FUNCTION}
if hasattr(sqlite3, "SQLITE_RECURSIVE"):
    _ALLOWED_ACTIONS.add(sqlite3.SQLITE_RECURSIVE)


class StatementRejected(ValueError):
    pass


def classify_statement(sql: str) -> str:
    """Return the statement with literals blanked; raise unless it is one SELECT (or WITH ... SELECT)."""
    stripped = _COMMENT.sub(" ", _STRING.sub("''", sql)).strip()
    if stripped.endswith(";"):
        stripped = stripped[:-1].rstrip()
    if ";" in stripped:
        raise StatementRejected("only a single statement is allowed")
    keyword = stripped.split(None, 1)[0].upper() if stripped else ""
    if keyword not in ("SELECT", "WITH"):
        raise StatementRejected(f"only SELECT statements are allowed, got {keyword or 'nothing'}")
    return stripped


def _authorizer(action, *_):
    return sqlite3.SQLITE_OK if action in _ALLOWED_ACTIONS else sqlite3.SQLITE_DENY


def open_read_only(dst: str) -> sqlite3.Connection:
    # immutable=1 skips locking entirely, which is unsafe while a WAL is live
    uri = f"file:{quote(str(Path(dst).resolve()))}?mode=ro"
    if not os.path.exists(f"{dst}-wal"):
        uri += "&immutable=1"
    connection = sqlite3.connect(uri, uri=True)
    connection.set_authorizer(_authorizer)
    return connection


def _canonical(value: Any) -> str:
    if isinstance(value, bool):
        return json.dumps(["b", value])
    if isinstance(value, (int, float)):
        return json.dumps(["n", float(value)])
    if isinstance(value, bytes):
        return json.dumps(["x", value.hex()])
    return json.dumps(["s", value])


def _as_rows(expected: Any) -> list:
    return [list(row) if isinstance(row, (list, tuple)) else [row] for row in expected]


def _plain(rows: list) -> list:
    return [[cell.hex() if isinstance(cell, bytes) else cell for cell in row] for row in rows]


class SqliteQueryEqualsTool(AssertionTool):
    name = "sqlite_query_equals"
    description = """Runs one read-only SELECT on the SQLite database `dst` and compares the result with `expected`.
A scalar `expected` needs a single-cell result. A list is compared row by row, in order only when the statement has ORDER BY."""
    inputs = {
        "dst": {"description": "Absolute path of the database file.", "type": "string"},
        "sql": {"description": "A single SELECT statement.", "type": "string"},
        "expected": {"description": "Scalar or list of rows.", "type": "any"},
    }
    path_inputs = ("dst",)

    def forward(self, dst: str, sql: str, expected: Any):
        try:
            cleaned = classify_statement(sql)
        except StatementRejected as e:
            return Outcome.errored(ErrorClass.BAD_QUERY, str(e))
        if not os.path.isfile(dst):
            return Outcome.errored(ErrorClass.IO, f"{dst} is not a readable file")

        connection = None
        try:
            connection = open_read_only(dst)
            rows = [list(row) for row in connection.execute(sql).fetchall()]
        except sqlite3.DatabaseError as e:
            text = str(e)
            if "not authorized" in text or "syntax error" in text or "no such" in text:
                return Outcome.errored(ErrorClass.BAD_QUERY, text)
            if "locked" in text or "unable to open" in text:
                return Outcome.errored(ErrorClass.IO, text)
            return Outcome.errored(ErrorClass.MALFORMED_FILE, f"{dst}: {text}")
        finally:
            if connection is not None:
                connection.close()

        if not isinstance(expected, (list, tuple)):
            if len(rows) == 1 and len(rows[0]) == 1:
                if values_equal(rows[0][0], expected):
                    return Outcome.passed("query result equals expected value")
                return Outcome.failed(_plain(rows)[0][0], expected, f"query returned {rows[0][0]!r}")
            return Outcome.failed(_plain(rows), expected, f"query returned {len(rows)} row(s), expected a single value")

        wanted = _as_rows(expected)
        if _ORDER_BY.search(cleaned):
            same = len(rows) == len(wanted) and all(values_equal(r, w) for r, w in zip(rows, wanted))
        else:
            same = Counter(tuple(map(_canonical, r)) for r in rows) == Counter(tuple(map(_canonical, w)) for w in wanted)
        if same:
            return Outcome.passed("query rows equal expected rows")
        return Outcome.failed(_plain(rows), wanted, f"query returned {len(rows)} row(s) that differ from expected")
