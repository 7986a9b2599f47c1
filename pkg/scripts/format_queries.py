"""JSON pointer and restricted XML path assertions."""

import json
import re
import xml.etree.ElementTree as ET
from typing import Any, List, Optional, Tuple

from .registry import AssertionTool, ErrorClass, Outcome

_MISSING = object()


def values_equal(actual: Any, expected: Any) -> bool:
    """Type-aware equality: numbers numerically, strings byte-wise, booleans only with booleans."""
    if isinstance(actual, bool) or isinstance(expected, bool):
        return isinstance(actual, bool) and isinstance(expected, bool) and actual == expected
    if isinstance(actual, (int, float)) and isinstance(expected, (int, float)):
        return actual == expected
    if isinstance(actual, str) and isinstance(expected, str):
        return actual.encode("utf-8") == expected.encode("utf-8")
    if isinstance(actual, (list, tuple)) and isinstance(expected, (list, tuple)):
        return len(actual) == len(expected) and all(values_equal(a, e) for a, e in zip(actual, expected))
    if isinstance(actual, dict) and isinstance(expected, dict):
        return actual.keys() == expected.keys() and all(values_equal(actual[k], expected[k]) for k in actual)
    if actual is None or expected is None:
        return actual is None and expected is None
    return False


def resolve_pointer(document: Any, pointer: str) -> Any:
    """RFC 6901 lookup; returns the _MISSING marker when the path is absent."""
    if pointer == "":
        return document
    if not pointer.startswith("/"):
        raise ValueError(f"JSON pointer must start with '/': {pointer!r}")
    node = document
    for token in pointer[1:].split("/"):
        token = token.replace("~1", "/").replace("~0", "~")
        if isinstance(node, dict):
            if token not in node:
                return _MISSING
            node = node[token]
        elif isinstance(node, list):
            if not token.isdigit() or (len(token) > 1 and token.startswith("0")):
                return _MISSING
            index = int(token)
            if index >= len(node):
                return _MISSING
            node = node[index]
        else:
            return _MISSING
    return node


class JsonQueryEqualsTool(AssertionTool):
    name = "json_query_equals"
    description = "Passes when the value at JSON pointer `query` in the file `dst` equals `expected` (typed comparison)."
    inputs = {
        "dst": {"description": "Absolute path of a JSON file.", "type": "string"},
        "query": {"description": "JSON pointer such as /steps/0/status.", "type": "string"},
        "expected": {"description": "Expected value of any JSON type.", "type": "any"},
    }
    path_inputs = ("dst",)

    def forward(self, dst: str, query: str, expected: Any):
        try:
            with open(dst, "r", encoding="utf-8") as fh:
                document = json.load(fh)
        except (json.JSONDecodeError, UnicodeDecodeError) as e:
            return Outcome.errored(ErrorClass.MALFORMED_FILE, f"{dst} is not valid JSON: {e}")
        except OSError as e:
            return Outcome.errored(ErrorClass.IO, f"cannot read {dst}: {e.strerror or e}")
        try:
            value = resolve_pointer(document, query)
        except ValueError as e:
            return Outcome.errored(ErrorClass.BAD_QUERY, str(e))
        if value is _MISSING:
            return Outcome.failed("path absent", expected, f"{query} does not exist in {dst}")
        if values_equal(value, expected):
            return Outcome.passed(f"{query} equals expected value")
        return Outcome.failed(value, expected, f"{query} is {value!r}, expected {expected!r}")


# name, name[2], @attr or name[2]@attr; prefixes are ignored when matching
_STEP = re.compile(r"^(?P<tag>[A-Za-z_*][\w.:-]*)?(?:\[(?P<index>\d+)\])?(?:@(?P<attr>[A-Za-z_][\w.:-]*))?$")


def _local(name: str) -> str:
    if name.startswith("{"):
        name = name.split("}", 1)[1]
    return name.split(":")[-1]


def parse_xml_path(query: str) -> Tuple[bool, List[Tuple[str, Optional[int]]], Optional[str]]:
    """Split a restricted path into (absolute, [(tag, 1-based index)], attribute)."""
    absolute = query.startswith("/")
    parts = [part for part in query.strip("/").split("/")]
    if not parts or any(part == "" for part in parts):
        raise ValueError(f"empty step in XML path {query!r}")
    steps, attribute = [], None
    for position, part in enumerate(parts):
        match = _STEP.match(part)
        if not match:
            raise ValueError(f"unsupported XML path step {part!r}")
        tag, index, attr = match.group("tag"), match.group("index"), match.group("attr")
        if attr is not None and position != len(parts) - 1:
            raise ValueError("attribute access is only allowed in the last step")
        if tag is None and (index is not None or position != len(parts) - 1):
            raise ValueError(f"step {part!r} needs an element name")
        if tag is not None:
            number = int(index) if index is not None else None
            if number == 0:
                raise ValueError("positional indices start at 1")
            steps.append((tag, number))
        attribute = attr
    return absolute, steps, attribute


def select_nodes(root: ET.Element, query: str):
    absolute, steps, attribute = parse_xml_path(query)
    nodes = [root]
    if absolute:
        if not steps:
            raise ValueError("absolute XML path needs a root element")
        tag, index = steps[0]
        if (tag != "*" and _local(root.tag) != _local(tag)) or (index not in (None, 1)):
            return [], attribute
        steps = steps[1:]
    for tag, index in steps:
        selected = []
        for node in nodes:
            matches = [child for child in node if tag == "*" or _local(child.tag) == _local(tag)]
            if index is None:
                selected.extend(matches)
            elif index <= len(matches):
                selected.append(matches[index - 1])
        nodes = selected
    return nodes, attribute


def _attribute(node: ET.Element, name: str):
    for key, value in node.attrib.items():
        if _local(key) == _local(name):
            return value
    return None


class XmlQueryEqualsTool(AssertionTool):
    name = "xml_query_equals"
    description = """Passes when exactly one node selected by `query` has text (or attribute) equal to `expected`.
Paths are relative to the document element unless they start with '/'. Steps: name, name[n], trailing @attr."""
    inputs = {
        "dst": {"description": "Absolute path of an XML file.", "type": "string"},
        "query": {"description": "Restricted path expression, e.g. bookmark[1]@visited.", "type": "string"},
        "expected": {"description": "Expected text.", "type": "string"},
    }
    path_inputs = ("dst",)

    def forward(self, dst: str, query: str, expected: str):
        try:
            root = ET.parse(dst).getroot()
        except ET.ParseError as e:
            return Outcome.errored(ErrorClass.MALFORMED_FILE, f"{dst} is not well-formed XML: {e}")
        except OSError as e:
            return Outcome.errored(ErrorClass.IO, f"cannot read {dst}: {e.strerror or e}")
        try:
            nodes, attribute = select_nodes(root, query)
        except ValueError as e:
            return Outcome.errored(ErrorClass.BAD_QUERY, str(e))
        if attribute is not None:
            values = [value for value in (_attribute(node, attribute) for node in nodes) if value is not None]
        else:
            values = ["".join(node.itertext()).strip() for node in nodes]
        if len(values) != 1:
            return Outcome.failed({"count": len(values)}, expected, f"{query} selects {len(values)} nodes, expected exactly one")
        if values[0] == str(expected):
            return Outcome.passed(f"{query} equals expected text")
        return Outcome.failed(values[0], expected, f"{query} is {values[0]!r}, expected {expected!r}")
