"""
Playbook parser.

Reads the YAML playbook document into the immutable model of
:mod:`playbook.model`. The document is composed into a node tree first so that
every diagnostic and every model node carries a line/column, and so that
duplicate keys (which a plain ``safe_load`` silently merges) are reported.
"""

import logging
from dataclasses import dataclass
from typing import Any, List, Optional

import yaml

from .model import (
    COMPARISON_OPERATORS,
    DEFAULT_MAX_DEPTH,
    IDENTIFIER_PATTERN,
    CaptureTime,
    Click,
    ClickButton,
    Command,
    Conditional,
    CoordinatesTarget,
    DragDrop,
    ImageTarget,
    Loop,
    Playbook,
    PlaybookError,
    PlaybookMetadata,
    Predicate,
    Scroll,
    ScrollDirection,
    ShareDirection,
    ShareFile,
    SourceLocation,
    TemplateString,
    TestDef,
    TestInvocation,
    TextTarget,
    TypeText,
    VariableDecl,
    VariableKind,
    Wait,
    freeze_mapping,
    walk_steps,
)

logger = logging.getLogger(__name__)

TOP_LEVEL_KEYS = ("metadata", "variables", "tests", "actions")

# Timestamps stay text; the assertion library parses them itself.
TIMESTAMP_TAG = "tag:yaml.org,2002:timestamp"


@dataclass(frozen=True)
class Diagnostic:
    line: int
    column: int
    code: str
    message: str

    def __str__(self) -> str:
        return f"{self.line}:{self.column}: {self.message} [{self.code}]"


class PlaybookParseError(PlaybookError):
    """Raised with every diagnostic found in a document."""

    def __init__(self, diagnostics: List[Diagnostic]):
        self.diagnostics = list(diagnostics)
        summary = "; ".join(str(d) for d in self.diagnostics[:5])
        super().__init__(f"{len(self.diagnostics)} problem(s) in playbook: {summary}")


class _Skip(Exception):
    """Abandon the current node; a diagnostic has already been recorded."""


def _location(node: yaml.Node) -> SourceLocation:
    return SourceLocation(node.start_mark.line + 1, node.start_mark.column + 1)


class _PlaybookBuilder:
    def __init__(self, max_depth: int):
        self.max_depth = max_depth
        self.diagnostics: List[Diagnostic] = []
        self._constructor = yaml.SafeLoader("")

    # -- helpers -----------------------------------------------------------

    def error(self, node: Optional[yaml.Node], code: str, message: str):
        if node is None:
            self.diagnostics.append(Diagnostic(1, 1, code, message))
        else:
            location = _location(node)
            self.diagnostics.append(Diagnostic(location.line, location.column, code, message))

    def mapping(self, node: yaml.Node, what: str, allowed=None, required=()) -> dict:
        """Return ``{key: (key_node, value_node)}``; report duplicates and unknown keys."""
        if not isinstance(node, yaml.MappingNode):
            self.error(node, "expected_mapping", f"{what} must be a mapping")
            raise _Skip()
        entries = {}
        for key_node, value_node in node.value:
            if not isinstance(key_node, yaml.ScalarNode):
                self.error(key_node, "bad_key", f"{what} keys must be plain names")
                continue
            key = key_node.value
            if key in entries:
                self.error(key_node, "duplicate_key", f"duplicate key '{key}' in {what}")
                continue
            if allowed is not None and key not in allowed:
                self.error(key_node, "unknown_key", f"unknown key '{key}' in {what}")
                continue
            entries[key] = (key_node, value_node)
        for key in required:
            if key not in entries:
                self.error(node, "missing_key", f"{what} requires '{key}'")
                raise _Skip()
        return entries

    def sequence(self, node: yaml.Node, what: str) -> list:
        if not isinstance(node, yaml.SequenceNode):
            self.error(node, "expected_sequence", f"{what} must be a list")
            raise _Skip()
        return list(node.value)

    def scalar(self, node: yaml.Node, what: str) -> Any:
        if not isinstance(node, yaml.ScalarNode):
            self.error(node, "expected_scalar", f"{what} must be a single value")
            raise _Skip()
        if node.tag == TIMESTAMP_TAG:
            return node.value
        return self._constructor.construct_object(node)

    def text(self, node: yaml.Node, what: str) -> str:
        if not isinstance(node, yaml.ScalarNode):
            self.error(node, "expected_scalar", f"{what} must be a single value")
            raise _Skip()
        return node.value

    def template(self, node: yaml.Node, what: str) -> TemplateString:
        return TemplateString(self.text(node, what))

    def integer(self, node: yaml.Node, what: str, minimum: int = 0) -> int:
        value = self.scalar(node, what)
        if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
            self.error(node, "bad_integer", f"{what} must be an integer >= {minimum}")
            raise _Skip()
        return value

    def boolean(self, node: yaml.Node, what: str) -> bool:
        value = self.scalar(node, what)
        if not isinstance(value, bool):
            self.error(node, "bad_boolean", f"{what} must be true or false")
            raise _Skip()
        return value

    def choice(self, node: yaml.Node, what: str, enum):
        value = self.text(node, what)
        try:
            return enum(value)
        except ValueError:
            options = ", ".join(member.value for member in enum)
            self.error(node, "bad_choice", f"{what} must be one of: {options}")
            raise _Skip()

    def identifier(self, node: yaml.Node, what: str) -> str:
        value = self.text(node, what)
        if not IDENTIFIER_PATTERN.fullmatch(value):
            self.error(node, "bad_identifier", f"{what} '{value}' must match [a-z][a-z0-9_]*")
            raise _Skip()
        return value

    def literal(self, node: yaml.Node) -> Any:
        """Parameter literal: strings become templates, containers recurse."""
        if isinstance(node, yaml.ScalarNode):
            value = self.scalar(node, "parameter value")
            return TemplateString(value) if isinstance(value, str) else value
        if isinstance(node, yaml.SequenceNode):
            return tuple(self.literal(item) for item in node.value)
        entries = self.mapping(node, "parameter value")
        return freeze_mapping((key, self.literal(value)) for key, (_, value) in entries.items())

    # -- sections ----------------------------------------------------------

    def build(self, root: Optional[yaml.Node]) -> Optional[Playbook]:
        if root is None:
            self.error(None, "empty_actions", "step sequence is non-empty: the document is empty")
            return None
        try:
            sections = self.mapping(root, "playbook", allowed=TOP_LEVEL_KEYS)
        except _Skip:
            return None

        metadata = PlaybookMetadata()
        if "metadata" in sections:
            metadata = self.build_metadata(sections["metadata"][1])
        variables = self.build_variables(sections["variables"][1]) if "variables" in sections else {}
        tests = self.build_tests(sections["tests"][1]) if "tests" in sections else {}

        actions: tuple = ()
        if "actions" in sections:
            actions = self.build_steps(sections["actions"][1], depth=0, what="actions")
        if not actions:
            anchor = sections["actions"][1] if "actions" in sections else root
            self.error(anchor, "empty_actions", "step sequence is non-empty: no actions declared")

        for step in walk_steps(actions):
            if isinstance(step, TestInvocation) and step.test_name not in tests:
                line, column = (step.location.line, step.location.column) if step.location else (1, 1)
                self.diagnostics.append(
                    Diagnostic(line, column, "undeclared_test", f"action references undeclared test '{step.test_name}'")
                )

        if self.diagnostics:
            return None
        return Playbook(
            variables=freeze_mapping(variables),
            tests=freeze_mapping(tests),
            actions=actions,
            metadata=metadata,
        )

    def build_metadata(self, node: yaml.Node) -> PlaybookMetadata:
        try:
            entries = self.mapping(node, "metadata", allowed=("author", "title", "description"))
        except _Skip:
            return PlaybookMetadata()
        values = {}
        for key, (_, value_node) in entries.items():
            try:
                values[key] = self.text(value_node, f"metadata.{key}")
            except _Skip:
                pass
        return PlaybookMetadata(**values)

    def build_variables(self, node: yaml.Node) -> dict:
        try:
            entries = self.mapping(node, "variables")
        except _Skip:
            return {}
        variables = {}
        for name, (key_node, value_node) in entries.items():
            try:
                if not IDENTIFIER_PATTERN.fullmatch(name):
                    self.error(key_node, "bad_identifier", f"variable name '{name}' must match [a-z][a-z0-9_]*")
                    continue
                fields = self.mapping(value_node, f"variable '{name}'", allowed=("type", "value"), required=("type",))
                kind = self.choice(fields["type"][1], f"variable '{name}' type", VariableKind)
                value = None
                if kind is VariableKind.DYNAMIC:
                    if "value" in fields:
                        self.error(fields["value"][0], "dynamic_with_value", f"dynamic variable '{name}' cannot carry a value")
                        continue
                else:
                    if "value" not in fields:
                        self.error(value_node, "missing_value", f"variable '{name}' of type {kind.value} needs a value")
                        continue
                    value = self.template(fields["value"][1], f"variable '{name}' value")
                variables[name] = VariableDecl(name, kind, value, _location(key_node))
            except _Skip:
                continue
        return variables

    def build_tests(self, node: yaml.Node) -> dict:
        try:
            items = self.sequence(node, "tests")
        except _Skip:
            return {}
        tests = {}
        for item in items:
            try:
                fields = self.mapping(item, "test", allowed=("name", "function", "parameter"), required=("name", "function"))
                name = self.identifier(fields["name"][1], "test name")
                function = self.identifier(fields["function"][1], "test function")
                parameter = {}
                if "parameter" in fields:
                    param_entries = self.mapping(fields["parameter"][1], f"parameters of test '{name}'")
                    parameter = {key: self.literal(value) for key, (_, value) in param_entries.items()}
                if name in tests:
                    self.error(fields["name"][1], "duplicate_test", f"test '{name}' is declared more than once")
                    continue
                tests[name] = TestDef(name, function, freeze_mapping(parameter), _location(item))
            except _Skip:
                continue
        return tests

    # -- steps -------------------------------------------------------------

    def build_steps(self, node: yaml.Node, depth: int, what: str) -> tuple:
        try:
            items = self.sequence(node, what)
        except _Skip:
            return ()
        steps = []
        for item in items:
            try:
                steps.append(self.build_step(item, depth))
            except _Skip:
                continue
        return tuple(steps)

    def build_step(self, node: yaml.Node, depth: int):
        entries = self.mapping(node, "step")
        if len(entries) != 1:
            self.error(node, "bad_step", "each step must have exactly one kind key")
            raise _Skip()
        kind, (key_node, body) = next(iter(entries.items()))
        location = _location(node)
        builder = getattr(self, f"step_{kind}", None)
        if builder is None:
            self.error(key_node, "unknown_action", f"unknown action kind '{kind}'")
            raise _Skip()
        return builder(body, location, depth)

    def target(self, node: yaml.Node, what: str):
        entries = self.mapping(node, what, allowed=("image", "text", "coordinates"))
        if len(entries) != 1:
            self.error(node, "bad_target", f"{what} needs exactly one of image, text, coordinates")
            raise _Skip()
        variant, (_, value) = next(iter(entries.items()))
        if variant == "image":
            return ImageTarget(self.text(value, f"{what} image"))
        if variant == "text":
            return TextTarget(self.template(value, f"{what} text"))
        point = self.mapping(value, f"{what} coordinates", allowed=("x", "y"), required=("x", "y"))
        return CoordinatesTarget(self.integer(point["x"][1], "x"), self.integer(point["y"][1], "y"))

    def step_test(self, body, location, depth):
        return TestInvocation(self.identifier(body, "test reference"), location)

    def step_command(self, body, location, depth):
        fields = self.mapping(body, "command", allowed=("command", "shell"), required=("command",))
        shell = self.boolean(fields["shell"][1], "shell") if "shell" in fields else False
        return Command(self.template(fields["command"][1], "command"), shell, location)

    def step_click(self, body, location, depth):
        fields = self.mapping(body, "click", allowed=("type", "target"), required=("target",))
        button = self.choice(fields["type"][1], "click type", ClickButton) if "type" in fields else ClickButton.LEFT
        return Click(self.target(fields["target"][1], "click target"), button, location)

    def step_type_text(self, body, location, depth):
        fields = self.mapping(body, "type_text", allowed=("text",), required=("text",))
        return TypeText(self.template(fields["text"][1], "text"), location)

    def step_scroll(self, body, location, depth):
        fields = self.mapping(body, "scroll", allowed=("direction", "amount"), required=("direction",))
        amount = self.integer(fields["amount"][1], "scroll amount", minimum=1) if "amount" in fields else 1
        return Scroll(self.choice(fields["direction"][1], "scroll direction", ScrollDirection), amount, location)

    def step_drag_drop(self, body, location, depth):
        fields = self.mapping(body, "drag_drop", allowed=("from", "to"), required=("from", "to"))
        return DragDrop(self.target(fields["from"][1], "drag source"), self.target(fields["to"][1], "drop target"), location)

    def step_share_file(self, body, location, depth):
        fields = self.mapping(body, "share_file", allowed=("direction", "src", "dst"), required=("direction", "src", "dst"))
        return ShareFile(
            self.choice(fields["direction"][1], "share direction", ShareDirection),
            self.template(fields["src"][1], "src"),
            self.template(fields["dst"][1], "dst"),
            location,
        )

    def step_wait(self, body, location, depth):
        fields = self.mapping(body, "wait", allowed=("duration_ms",), required=("duration_ms",))
        return Wait(self.integer(fields["duration_ms"][1], "duration_ms"), location)

    def step_capture_time(self, body, location, depth):
        fields = self.mapping(body, "capture_time", allowed=("into",), required=("into",))
        return CaptureTime(self.identifier(fields["into"][1], "capture target"), location)

    def _nested(self, body, depth: int):
        if depth + 1 > self.max_depth:
            self.error(body, "nesting_too_deep", f"loops/conditionals nest deeper than {self.max_depth}")
            raise _Skip()

    def step_loop(self, body, location, depth):
        self._nested(body, depth)
        fields = self.mapping(body, "loop", allowed=("count", "as", "body"), required=("count", "body"))
        count_node = fields["count"][1]
        count = self.scalar(count_node, "loop count")
        if isinstance(count, str):
            count = self.identifier(count_node, "loop count variable")
        elif isinstance(count, bool) or not isinstance(count, int) or count < 1:
            self.error(count_node, "bad_loop_count", "literal loop count must be an integer >= 1")
            raise _Skip()
        index_variable = self.identifier(fields["as"][1], "loop variable") if "as" in fields else None
        steps = self.build_steps(fields["body"][1], depth + 1, "loop body")
        if not steps:
            self.error(fields["body"][1], "empty_body", "loop body is empty")
            raise _Skip()
        return Loop(count, steps, index_variable, location)

    def step_if(self, body, location, depth):
        self._nested(body, depth)
        fields = self.mapping(body, "if", allowed=("condition", "then", "else"), required=("condition", "then"))
        cond_node = fields["condition"][1]
        cond = self.mapping(cond_node, "condition", allowed=("variable", "op", "value"), required=("variable", "op", "value"))
        op = self.text(cond["op"][1], "condition op")
        if op not in COMPARISON_OPERATORS:
            self.error(cond["op"][1], "bad_operator", f"condition op must be one of {', '.join(COMPARISON_OPERATORS)}")
            raise _Skip()
        predicate = Predicate(
            self.identifier(cond["variable"][1], "condition variable"),
            op,
            self.scalar(cond["value"][1], "condition value"),
            _location(cond_node),
        )
        then = self.build_steps(fields["then"][1], depth + 1, "then branch")
        otherwise = self.build_steps(fields["else"][1], depth + 1, "else branch") if "else" in fields else None
        return Conditional(predicate, then, otherwise, location)


def parse_playbook(source, max_depth: int = DEFAULT_MAX_DEPTH) -> Playbook:
    """Parse a playbook document.

    Args:
        source: UTF-8 bytes (or already decoded text) of the document.
        max_depth: maximum nesting of loops and conditionals.

    Raises:
        PlaybookParseError: with one diagnostic per problem found.
    """
    if isinstance(source, (bytes, bytearray)):
        try:
            source = bytes(source).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise PlaybookParseError([Diagnostic(1, 1, "encoding", f"playbook is not UTF-8: {exc}")]) from None
    try:
        root = yaml.compose(source, Loader=yaml.SafeLoader)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        line, column = (mark.line + 1, mark.column + 1) if mark else (1, 1)
        raise PlaybookParseError([Diagnostic(line, column, "syntax", f"{exc.problem or exc}")]) from None
    except yaml.YAMLError as exc:
        raise PlaybookParseError([Diagnostic(1, 1, "syntax", str(exc))]) from None

    builder = _PlaybookBuilder(max_depth)
    playbook = builder.build(root)
    if playbook is None:
        raise PlaybookParseError(builder.diagnostics)
    logger.debug("parsed playbook: %d variables, %d tests, %d top-level steps",
                 len(playbook.variables), len(playbook.tests), len(playbook.actions))
    return playbook


def parse_playbook_file(path) -> Playbook:
    with open(path, "rb") as fh:
        return parse_playbook(fh.read())
