"""Tests for the core assertion library and its registry."""

import hashlib
import json
import os
import sqlite3
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import pytest

from conftest import running_as_root
from scripts.file_checks import FileContainsTool
from scripts.registry import (
    AssertionRegistry,
    AssertionTool,
    ErrorClass,
    Outcome,
    RegistryError,
    TestResult,
    TestStatus,
)
from scripts.sqlite_query import StatementRejected, classify_statement
from scripts.timestamp_check import TimestampError, parse_instant


class AlwaysPassTool(AssertionTool):
    name = "always_pass"
    description = "Passes unconditionally."
    inputs = {"note": {"description": "[Optional]: echoed back.", "type": "string", "nullable": True}}

    def forward(self, note: Optional[str] = None):
        return Outcome.passed(note or "")


class CrashingTool(AssertionTool):
    name = "crashes"
    description = "Raises instead of returning an outcome."
    inputs = {"dst": {"description": "Ignored.", "type": "string"}}

    def forward(self, dst: str):
        raise RuntimeError("boom")


class TestFileChecks:
    def test_exists_and_absent(self, tmp_path, evaluate):
        target = tmp_path / "a.txt"
        target.write_text("x")
        assert evaluate("file_exists", dst=str(target)).status is TestStatus.PASS
        assert evaluate("file_absent", dst=str(target)).status is TestStatus.FAIL
        missing = str(tmp_path / "missing")
        result = evaluate("file_exists", dst=missing)
        assert result.status is TestStatus.FAIL
        assert (result.observed, result.expected) == ("absent", "present")
        assert evaluate("file_absent", dst=missing).status is TestStatus.PASS

    def test_directory_counts_as_existing(self, tmp_path, evaluate):
        assert evaluate("file_exists", dst=str(tmp_path)).status is TestStatus.PASS

    @running_as_root
    def test_unreadable_parent_is_an_error(self, tmp_path, evaluate):
        locked = tmp_path / "locked"
        locked.mkdir()
        (locked / "inner").write_text("x")
        locked.chmod(0)
        try:
            result = evaluate("file_exists", dst=str(locked / "inner"))
        finally:
            locked.chmod(0o755)
        assert result.status is TestStatus.ERROR
        assert result.error_class is ErrorClass.IO

    def test_contains_modes(self, tmp_path, evaluate):
        target = tmp_path / "x.trashinfo"
        target.write_text("[Trash Info]\nPath=/home/u/secret.txt\nDeletionDate=2024-01-01T10:00:00\n")
        dst = str(target)
        assert evaluate("file_contains", dst=dst, pattern="Path=/home/u/secret.txt").status is TestStatus.PASS
        assert evaluate("file_contains", dst=dst, pattern=r"^DeletionDate=\d{4}", mode="regex").status is TestStatus.PASS
        assert evaluate("file_contains", dst=dst, pattern="Path=", mode="full_match").status is TestStatus.FAIL
        assert evaluate("file_contains", dst=dst, pattern=r"(?s)\[Trash Info\].*", mode="full_match").status is TestStatus.PASS

    def test_contains_failure_carries_excerpt(self, tmp_path, evaluate):
        target = tmp_path / "f.txt"
        target.write_text("Path=/elsewhere\n")
        result = evaluate("file_contains", dst=str(target), pattern="Path=/home")
        assert result.status is TestStatus.FAIL
        assert result.observed.startswith("Path=/")
        assert result.expected == "Path=/home"

    def test_contains_errors(self, tmp_path, evaluate):
        missing = evaluate("file_contains", dst=str(tmp_path / "nope"), pattern="x")
        assert missing.error_class is ErrorClass.IO
        target = tmp_path / "f.txt"
        target.write_text("x")
        assert evaluate("file_contains", dst=str(target), pattern="(", mode="regex").error_class is ErrorClass.BAD_PARAMETER
        assert evaluate("file_contains", dst=str(target), pattern="x", mode="fuzzy").error_class is ErrorClass.BAD_PARAMETER
        assert evaluate("file_contains", dst=str(tmp_path), pattern="x").error_class is ErrorClass.IO

    def test_contains_size_cap(self, tmp_path):
        target = tmp_path / "big.bin"
        target.write_bytes(b"a" * 2048)
        tool = FileContainsTool()
        tool.size_cap = 1024
        outcome = tool(dst=str(target), pattern="a")
        assert outcome.status is TestStatus.ERROR
        assert outcome.error_class is ErrorClass.IO


class TestJsonQuery:
    @pytest.fixture
    def document(self, tmp_path):
        path = tmp_path / "state.json"
        path.write_text(json.dumps({"a": {"b": [1, 2, {"c": True}]}, "n": 1.0, "a/b": "slash"}))
        return str(path)

    def test_typed_equality(self, document, evaluate):
        assert evaluate("json_query_equals", dst=document, query="/n", expected=1).status is TestStatus.PASS
        assert evaluate("json_query_equals", dst=document, query="/a/b/2/c", expected=True).status is TestStatus.PASS
        result = evaluate("json_query_equals", dst=document, query="/a/b/2/c", expected="true")
        assert result.status is TestStatus.FAIL
        assert evaluate("json_query_equals", dst=document, query="/a/b/0", expected=True).status is TestStatus.FAIL

    def test_escaped_tokens(self, document, evaluate):
        assert evaluate("json_query_equals", dst=document, query="/a~1b", expected="slash").status is TestStatus.PASS

    def test_absent_path_fails(self, document, evaluate):
        result = evaluate("json_query_equals", dst=document, query="/a/b/9", expected=1)
        assert result.status is TestStatus.FAIL
        assert result.observed == "path absent"

    def test_errors(self, tmp_path, document, evaluate):
        assert evaluate("json_query_equals", dst=document, query="a", expected=1).error_class is ErrorClass.BAD_QUERY
        broken = tmp_path / "broken.json"
        broken.write_text("{not json")
        assert evaluate("json_query_equals", dst=str(broken), query="/a", expected=1).error_class is ErrorClass.MALFORMED_FILE


class TestXmlQuery:
    @pytest.fixture
    def document(self, tmp_path):
        path = tmp_path / "recent.xbel"
        path.write_text(
            '<?xml version="1.0"?>\n'
            '<xbel xmlns:bookmark="http://example.org/b">'
            '<bookmark href="file:///a" bookmark:visited="3">first</bookmark>'
            '<bookmark href="file:///b">second</bookmark>'
            "</xbel>"
        )
        return str(path)

    def test_selection(self, document, evaluate):
        assert evaluate("xml_query_equals", dst=document, query="bookmark[1]@href", expected="file:///a").status is TestStatus.PASS
        assert evaluate("xml_query_equals", dst=document, query="/xbel/bookmark[2]", expected="second").status is TestStatus.PASS
        assert evaluate("xml_query_equals", dst=document, query="bookmark[1]@visited", expected="3").status is TestStatus.PASS

    def test_multiple_nodes_fail(self, document, evaluate):
        result = evaluate("xml_query_equals", dst=document, query="bookmark", expected="first")
        assert result.status is TestStatus.FAIL
        assert result.observed == {"count": 2}

    def test_errors(self, tmp_path, document, evaluate):
        assert evaluate("xml_query_equals", dst=document, query="bookmark[0]", expected="x").error_class is ErrorClass.BAD_QUERY
        assert evaluate("xml_query_equals", dst=document, query="a//b", expected="x").error_class is ErrorClass.BAD_QUERY
        broken = tmp_path / "broken.xml"
        broken.write_text("<a><b></a>")
        assert evaluate("xml_query_equals", dst=str(broken), query="b", expected="x").error_class is ErrorClass.MALFORMED_FILE


class TestSqliteQuery:
    @pytest.fixture
    def database(self, tmp_path):
        path = tmp_path / "places.sqlite"
        connection = sqlite3.connect(path)
        connection.execute("CREATE TABLE visits (url TEXT, count INTEGER)")
        connection.executemany("INSERT INTO visits VALUES (?, ?)", [("a", 1), ("b", 2), ("c", 3)])
        connection.commit()
        connection.close()
        return str(path)

    def test_scalar(self, database, evaluate):
        assert evaluate("sqlite_query_equals", dst=database, sql="SELECT count(*) FROM visits", expected=3).status is TestStatus.PASS
        assert evaluate("sqlite_query_equals", dst=database, sql="SELECT count(*) FROM visits", expected=4).status is TestStatus.FAIL

    def test_rows_unordered_without_order_by(self, database, evaluate):
        expected = [["c", 3], ["a", 1], ["b", 2]]
        assert evaluate("sqlite_query_equals", dst=database, sql="SELECT url, count FROM visits", expected=expected).status is TestStatus.PASS

    def test_rows_ordered_with_order_by(self, database, evaluate):
        sql = "SELECT url FROM visits ORDER BY count DESC"
        assert evaluate("sqlite_query_equals", dst=database, sql=sql, expected=["c", "b", "a"]).status is TestStatus.PASS
        assert evaluate("sqlite_query_equals", dst=database, sql=sql, expected=["a", "b", "c"]).status is TestStatus.FAIL

    @pytest.mark.parametrize(
        "sql",
        [
            "DELETE FROM visits",
            "SELECT 1; DROP TABLE visits",
            "UPDATE visits SET count = 0",
            "PRAGMA user_version = 3",
        ],
    )
    def test_mutations_are_rejected(self, database, evaluate, sql):
        result = evaluate("sqlite_query_equals", dst=database, sql=sql, expected=0)
        assert result.error_class is ErrorClass.BAD_QUERY
        assert evaluate("sqlite_query_equals", dst=database, sql="SELECT count(*) FROM visits", expected=3).status is TestStatus.PASS

    def test_statement_classifier(self):
        assert classify_statement("SELECT ';' FROM t;") == "SELECT '' FROM t"
        assert classify_statement("-- note\nWITH x AS (SELECT 1) SELECT * FROM x").startswith("WITH")
        with pytest.raises(StatementRejected):
            classify_statement("")

    def test_missing_table(self, database, evaluate):
        assert evaluate("sqlite_query_equals", dst=database, sql="SELECT * FROM nope", expected=[]).error_class is ErrorClass.BAD_QUERY

    def test_not_a_database(self, tmp_path, evaluate):
        junk = tmp_path / "junk.sqlite"
        junk.write_bytes(b"definitely not sqlite" * 100)
        result = evaluate("sqlite_query_equals", dst=str(junk), sql="SELECT 1", expected=1)
        assert result.status is TestStatus.ERROR
        assert result.error_class is ErrorClass.MALFORMED_FILE


class TestTimestampWithin:
    def test_parse_forms(self):
        utc = datetime(2024, 1, 1, tzinfo=timezone.utc)
        assert parse_instant("2024-01-01T00:00:00+00:00") == utc
        assert parse_instant(1704067200) == utc
        assert parse_instant("1704067200000") == utc
        assert parse_instant("2024-01-01T00:00:00Z") == utc
        assert parse_instant("2024-01-01T01:30:00.250z") == utc.replace(hour=1, minute=30, microsecond=250000)
        assert parse_instant(datetime(2024, 1, 1).astimezone()) == datetime(2024, 1, 1).astimezone()
        with pytest.raises(TimestampError):
            parse_instant("yesterday")

    @pytest.mark.parametrize("offset, status", [(1.5, TestStatus.PASS), (2.0, TestStatus.PASS), (2.5, TestStatus.FAIL)])
    def test_value_tolerance(self, evaluate, offset, status):
        actual = datetime.fromtimestamp(1704067200 + offset, tz=timezone.utc).isoformat()
        result = evaluate("timestamp_within", reference="2024-01-01T00:00:00+00:00", actual=actual)
        assert result.status is status

    def test_file_content_uses_local_time(self, tmp_path, evaluate):
        info = tmp_path / "secret.txt.trashinfo"
        info.write_text("[Trash Info]\nPath=/x\nDeletionDate=2024-03-05T14:30:00\n")
        reference = datetime(2024, 3, 5, 14, 30, 1).astimezone().isoformat()
        result = evaluate("timestamp_within", reference=reference, source="file_content", dst=str(info))
        assert result.status is TestStatus.PASS

    def test_file_mtime(self, tmp_path, evaluate):
        target = tmp_path / "counter.txt"
        target.write_text("1")
        os.utime(target, (1704067200, 1704067200))
        assert evaluate("timestamp_within", reference=1704067200, source="file_mtime", dst=str(target)).status is TestStatus.PASS
        assert evaluate("timestamp_within", reference=1704067300, source="file_mtime", dst=str(target)).status is TestStatus.FAIL

    def test_bad_inputs(self, tmp_path, evaluate):
        assert evaluate("timestamp_within", reference="soon", actual="2024-01-01").error_class is ErrorClass.BAD_PARAMETER
        assert evaluate("timestamp_within", reference=0).error_class is ErrorClass.BAD_PARAMETER
        assert evaluate("timestamp_within", reference=0, source="file_mtime").error_class is ErrorClass.BAD_PARAMETER
        assert evaluate("timestamp_within", reference=0, actual="0", tolerance_ms=-1).error_class is ErrorClass.BAD_PARAMETER
        no_date = tmp_path / "info"
        no_date.write_text("[Trash Info]\n")
        result = evaluate("timestamp_within", reference=0, source="file_content", dst=str(no_date))
        assert result.error_class is ErrorClass.MALFORMED_FILE

    def test_tolerance_from_template(self, evaluate):
        reference = "2024-01-01T00:00:00Z"
        assert evaluate("timestamp_within", reference=reference, actual="2024-01-01T00:00:00.400Z", tolerance_ms="500").status is TestStatus.PASS
        assert evaluate("timestamp_within", reference=reference, actual="2024-01-01T00:00:00.600Z", tolerance_ms="500").status is TestStatus.FAIL
        assert evaluate("timestamp_within", reference=reference, actual=reference, tolerance_ms="lenient").error_class is ErrorClass.BAD_PARAMETER
        assert evaluate("timestamp_within", reference=reference, actual=reference, tolerance_ms=[1]).error_class is ErrorClass.BAD_PARAMETER


class TestRegistry:
    def test_core_functions(self, registry):
        assert registry.names() == [
            "file_absent",
            "file_contains",
            "file_exists",
            "json_query_equals",
            "sqlite_query_equals",
            "timestamp_within",
            "xml_query_equals",
        ]
        descriptor = registry.describe("file_contains")
        assert set(descriptor.required) == {"dst", "pattern"}
        assert set(descriptor.optional) == {"mode"}
        assert descriptor.path_parameters == frozenset({"dst"})

    def test_parameter_errors(self, evaluate):
        assert evaluate("no_such_function").error_class is ErrorClass.UNKNOWN_FUNCTION
        assert evaluate("file_exists").error_class is ErrorClass.BAD_PARAMETER
        result = evaluate("file_exists", dst="/tmp", colour="red")
        assert result.error_class is ErrorClass.BAD_PARAMETER
        assert "colour" in result.message

    def test_result_metadata(self, evaluate, tmp_path):
        result = evaluate("file_exists", dst=str(tmp_path))
        assert result.test_name == "t"
        assert result.function == "file_exists"
        assert result.duration_ms >= 0
        assert datetime.fromisoformat(result.started_at).tzinfo is not None
        assert TestResult.from_dict(json.loads(json.dumps(result.to_dict()))) == result

    def test_path_resolver_confines(self, registry):
        def refuse(path):
            raise ValueError(f"{path} escapes the root")

        result = registry.evaluate("t", "file_exists", {"dst": "/etc/passwd"}, resolve_path=refuse)
        assert result.error_class is ErrorClass.PATH_CONFINEMENT

    def test_path_resolver_rewrites(self, registry, tmp_path):
        (tmp_path / "inside").write_text("x")
        result = registry.evaluate("t", "file_exists", {"dst": "inside"}, resolve_path=lambda p: tmp_path / p)
        assert result.status is TestStatus.PASS

    def test_crash_becomes_internal_error(self):
        registry = AssertionRegistry()
        registry.register(CrashingTool())
        result = registry.evaluate("t", "crashes", {"dst": "x"})
        assert result.status is TestStatus.ERROR
        assert result.error_class is ErrorClass.INTERNAL
        assert "boom" in result.message

    def test_register_custom_tool(self):
        registry = AssertionRegistry()
        registry.register(AlwaysPassTool(), library="extras")
        registry.freeze()
        assert registry.describe("always_pass").optional["note"] == ("string", None)
        assert registry.evaluate("t", "always_pass", {}).status is TestStatus.PASS
        with pytest.raises(RegistryError):
            registry.register(CrashingTool())

    def test_duplicate_registration(self):
        registry = AssertionRegistry()
        registry.register(AlwaysPassTool())
        with pytest.raises(RegistryError):
            registry.register(AlwaysPassTool())

    def test_manifest_name_mismatch(self, tmp_path):
        manifest = tmp_path / "extras.yaml"
        manifest.write_text("library: extras\nfunctions:\n  - name: exists_alias\n    tool: scripts.file_checks:FileExistsTool\n")
        with pytest.raises(RegistryError):
            AssertionRegistry.from_manifests([manifest], include_core=False)

    def test_manifest_collides_with_core(self, tmp_path):
        manifest = tmp_path / "extras.yaml"
        manifest.write_text("library: extras\nfunctions:\n  - name: file_exists\n    tool: scripts.file_checks:FileExistsTool\n")
        with pytest.raises(RegistryError):
            AssertionRegistry.from_manifests([manifest])

    def test_manifest_schema_must_agree(self, tmp_path):
        manifest = tmp_path / "extras.yaml"
        manifest.write_text(
            "library: extras\nfunctions:\n  - name: file_exists\n    tool: scripts.file_checks:FileExistsTool\n"
            "    parameters:\n      dst: {type: string, required: false}\n"
        )
        with pytest.raises(RegistryError):
            AssertionRegistry.from_manifests([manifest], include_core=False)

    def test_digest(self, registry):
        assert registry.digest() == AssertionRegistry.core().digest()
        assert registry.without("file_exists").digest() != registry.digest()


def _tree_state(root: Path) -> dict:
    state = {}
    for path in sorted(root.rglob("*")):
        stat = path.stat()
        content = hashlib.sha256(path.read_bytes()).hexdigest() if path.is_file() else None
        state[str(path.relative_to(root))] = (content, stat.st_mtime_ns, stat.st_size)
    return state


def test_assertions_leave_files_untouched(tmp_path, registry):
    (tmp_path / "docs").mkdir()
    (tmp_path / "docs" / "note.txt").write_text("DeletionDate=2024-01-01T00:00:00\n")
    (tmp_path / "state.json").write_text('{"k": [1, 2]}')
    (tmp_path / "recent.xml").write_text("<r><i>1</i></r>")
    connection = sqlite3.connect(tmp_path / "db.sqlite")
    connection.execute("CREATE TABLE t (v INTEGER)")
    connection.execute("INSERT INTO t VALUES (1)")
    connection.commit()
    connection.close()
    before = _tree_state(tmp_path)

    calls = [
        ("file_exists", {"dst": str(tmp_path / "docs" / "note.txt")}),
        ("file_absent", {"dst": str(tmp_path / "docs")}),
        ("file_contains", {"dst": str(tmp_path / "docs" / "note.txt"), "pattern": "Deletion"}),
        ("json_query_equals", {"dst": str(tmp_path / "state.json"), "query": "/k/1", "expected": 2}),
        ("xml_query_equals", {"dst": str(tmp_path / "recent.xml"), "query": "i", "expected": "1"}),
        ("sqlite_query_equals", {"dst": str(tmp_path / "db.sqlite"), "sql": "SELECT v FROM t", "expected": 1}),
        ("sqlite_query_equals", {"dst": str(tmp_path / "db.sqlite"), "sql": "DELETE FROM t", "expected": 0}),
        ("timestamp_within", {"reference": 0, "source": "file_content", "dst": str(tmp_path / "docs" / "note.txt")}),
        ("timestamp_within", {"reference": 0, "source": "file_mtime", "dst": str(tmp_path / "state.json")}),
    ]
    for function, parameters in calls:
        registry.evaluate("t", function, parameters)

    assert _tree_state(tmp_path) == before
