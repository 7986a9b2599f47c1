"""
Playbook data model.

A playbook pairs simulated user actions with tests that check system state.
All values here are immutable once the parser has built them, so a parsed
playbook can be shared between concurrently running experiments.
"""

import re
from dataclasses import dataclass, field
from enum import Enum
from types import MappingProxyType
from typing import Any, Mapping, Optional, Union

IDENTIFIER_PATTERN = re.compile(r"[a-z][a-z0-9_]*")

DEFAULT_MAX_DEPTH = 8


class PlaybookError(Exception):
    """Base class for playbook errors."""


@dataclass(frozen=True)
class SourceLocation:
    line: int
    column: int

    def __str__(self) -> str:
        return f"{self.line}:{self.column}"


@dataclass(frozen=True)
class TemplateString:
    """Text with zero or more ``{{ identifier }}`` placeholders."""

    raw: str

    def __str__(self) -> str:
        return self.raw


class VariableKind(str, Enum):
    STRING = "string"
    PATH = "path"
    NUMBER = "number"
    BOOLEAN = "boolean"
    DYNAMIC = "dynamic"


@dataclass(frozen=True)
class VariableDecl:
    name: str
    kind: VariableKind
    value: Optional[TemplateString] = None
    location: Optional[SourceLocation] = field(default=None, compare=False)


# Test parameters: templates, plain scalars, or lists/mappings of those.
ParameterValue = Any


@dataclass(frozen=True)
class TestDef:
    __test__ = False  # keep pytest from collecting this

    name: str
    function: str
    parameter: Mapping[str, ParameterValue] = field(default_factory=lambda: MappingProxyType({}))
    location: Optional[SourceLocation] = field(default=None, compare=False)


# Targets


@dataclass(frozen=True)
class ImageTarget:
    reference: str


@dataclass(frozen=True)
class TextTarget:
    value: TemplateString


@dataclass(frozen=True)
class CoordinatesTarget:
    x: int
    y: int


TargetSpec = Union[ImageTarget, TextTarget, CoordinatesTarget]


# Actions


class ClickButton(str, Enum):
    LEFT = "left"
    RIGHT = "right"
    DOUBLE = "double"


class ScrollDirection(str, Enum):
    UP = "up"
    DOWN = "down"
    LEFT = "left"
    RIGHT = "right"


class ShareDirection(str, Enum):
    HOST_TO_GUEST = "host_to_guest"
    GUEST_TO_HOST = "guest_to_host"


@dataclass(frozen=True)
class Click:
    target: TargetSpec
    button: ClickButton = ClickButton.LEFT
    location: Optional[SourceLocation] = field(default=None, compare=False)
    kind = "click"


@dataclass(frozen=True)
class TypeText:
    text: TemplateString
    location: Optional[SourceLocation] = field(default=None, compare=False)
    kind = "type_text"


@dataclass(frozen=True)
class Scroll:
    direction: ScrollDirection
    amount: int = 1
    location: Optional[SourceLocation] = field(default=None, compare=False)
    kind = "scroll"


@dataclass(frozen=True)
class DragDrop:
    source: TargetSpec
    destination: TargetSpec
    location: Optional[SourceLocation] = field(default=None, compare=False)
    kind = "drag_drop"


@dataclass(frozen=True)
class Command:
    command: TemplateString
    shell: bool = False
    location: Optional[SourceLocation] = field(default=None, compare=False)
    kind = "command"


@dataclass(frozen=True)
class ShareFile:
    direction: ShareDirection
    src: TemplateString
    dst: TemplateString
    location: Optional[SourceLocation] = field(default=None, compare=False)
    kind = "share_file"


@dataclass(frozen=True)
class Wait:
    duration_ms: int
    location: Optional[SourceLocation] = field(default=None, compare=False)
    kind = "wait"


@dataclass(frozen=True)
class CaptureTime:
    into: str
    location: Optional[SourceLocation] = field(default=None, compare=False)
    kind = "capture_time"


Action = Union[Click, TypeText, Scroll, DragDrop, Command, ShareFile, Wait, CaptureTime]
GUI_ACTIONS = (Click, TypeText, Scroll, DragDrop)


# Control flow


COMPARISON_OPERATORS = ("==", "!=", "<", "<=", ">", ">=")


@dataclass(frozen=True)
class Predicate:
    """Comparison between a variable and a literal."""

    variable: str
    op: str
    value: Any
    location: Optional[SourceLocation] = field(default=None, compare=False)


@dataclass(frozen=True)
class TestInvocation:
    __test__ = False

    test_name: str
    location: Optional[SourceLocation] = field(default=None, compare=False)
    kind = "test"


@dataclass(frozen=True)
class Loop:
    count: Union[int, str]
    body: tuple
    index_variable: Optional[str] = None
    location: Optional[SourceLocation] = field(default=None, compare=False)
    kind = "loop"


@dataclass(frozen=True)
class Conditional:
    predicate: Predicate
    then: tuple
    otherwise: Optional[tuple] = None
    location: Optional[SourceLocation] = field(default=None, compare=False)
    kind = "if"


Step = Union[Action, TestInvocation, Loop, Conditional]


@dataclass(frozen=True)
class PlaybookMetadata:
    author: Optional[str] = None
    title: Optional[str] = None
    description: Optional[str] = None


@dataclass(frozen=True)
class Playbook:
    variables: Mapping[str, VariableDecl]
    tests: Mapping[str, TestDef]
    actions: tuple
    metadata: PlaybookMetadata = field(default_factory=PlaybookMetadata)

    def dynamic_variables(self) -> set:
        return {name for name, decl in self.variables.items() if decl.kind is VariableKind.DYNAMIC}

    def loop_variables(self) -> set:
        names = set()
        for step in walk_steps(self.actions):
            if isinstance(step, Loop) and step.index_variable:
                names.add(step.index_variable)
        return names


def walk_steps(steps):
    """Yield every step in the tree, parents before children, in document order."""
    for step in steps:
        yield step
        if isinstance(step, Loop):
            yield from walk_steps(step.body)
        elif isinstance(step, Conditional):
            yield from walk_steps(step.then)
            if step.otherwise:
                yield from walk_steps(step.otherwise)


def freeze_mapping(items) -> Mapping:
    return MappingProxyType(dict(items))
