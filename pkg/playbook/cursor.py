"""
Lazy traversal of a playbook step tree.

Loops are expanded and conditionals decided only when the cursor reaches them,
against the scope as it is at that moment, so values captured earlier in a run
can steer what happens next.
"""

from dataclasses import dataclass, field
from typing import Any, List, MutableMapping, Optional

from .model import Conditional, Loop, PlaybookError
from .template import UNSET


class CursorError(PlaybookError):
    pass


@dataclass
class _Frame:
    steps: tuple
    label: str
    position: int = 0
    # loop bookkeeping
    count: int = 0
    iteration: int = 0
    index_variable: Optional[str] = None


@dataclass
class ExecutionCursor:
    """Position inside a (possibly nested) step tree."""

    frames: List[_Frame] = field(default_factory=list)
    current_path: str = ""

    @classmethod
    def start(cls, steps) -> "ExecutionCursor":
        return cls([_Frame(tuple(steps), "actions")])

    def path(self) -> str:
        return self.current_path


def _lookup(scope, name: str, what: str):
    if name not in scope:
        raise CursorError(f"{what} references unset variable '{name}'")
    value = scope[name]
    if value is UNSET:
        raise CursorError(f"{what} reads dynamic variable '{name}' before it was captured")
    return value


def _as_number(value: Any):
    if isinstance(value, bool):
        return None
    if isinstance(value, (int, float)):
        return value
    try:
        return float(str(value))
    except ValueError:
        return None


def _loop_count(loop: Loop, scope) -> int:
    if isinstance(loop.count, int):
        return loop.count
    value = _lookup(scope, loop.count, "loop count")
    number = _as_number(value)
    if number is None or number != int(number) or number < 0:
        raise CursorError(f"loop count variable '{loop.count}' is not a non-negative integer: {value!r}")
    return int(number)


def evaluate_predicate(predicate, scope) -> bool:
    """Compare a variable with a literal; numerically when both sides are numbers."""
    actual = _lookup(scope, predicate.variable, "condition")
    expected = predicate.value
    left, right = _as_number(actual), _as_number(expected)
    if isinstance(actual, bool) or isinstance(expected, bool):
        left, right = str(actual).lower(), str(expected).lower()
    elif left is None or right is None:
        left, right = str(actual), str(expected)
    op = predicate.op
    if op == "==":
        return left == right
    if op == "!=":
        return left != right
    if op == "<":
        return left < right
    if op == "<=":
        return left <= right
    if op == ">":
        return left > right
    if op == ">=":
        return left >= right
    raise CursorError(f"unsupported operator {op!r}")


def next_step(cursor: ExecutionCursor, scope: MutableMapping[str, Any]):
    """Return the next action or test invocation in document order, or None when done.

    Loop index variables are written into ``scope`` as the cursor enters each iteration.
    """
    while cursor.frames:
        frame = cursor.frames[-1]
        if frame.position >= len(frame.steps):
            if frame.count and frame.iteration < frame.count:
                frame.iteration += 1
                frame.position = 0
                if frame.index_variable:
                    scope[frame.index_variable] = frame.iteration
                continue
            cursor.frames.pop()
            continue

        index = frame.position
        step = frame.steps[index]
        frame.position += 1
        label = f"{frame.label}[{index}]"

        if isinstance(step, Loop):
            count = _loop_count(step, scope)
            if count == 0:
                continue
            cursor.frames.append(_Frame(step.body, f"{label}.loop", count=count, iteration=1, index_variable=step.index_variable))
            if step.index_variable:
                scope[step.index_variable] = 1
            continue
        if isinstance(step, Conditional):
            if evaluate_predicate(step.predicate, scope):
                cursor.frames.append(_Frame(step.then, f"{label}.then"))
            elif step.otherwise:
                cursor.frames.append(_Frame(step.otherwise, f"{label}.else"))
            continue

        cursor.current_path = _describe_path(cursor.frames, label)
        return step
    return None


def _describe_path(frames: List[_Frame], label: str) -> str:
    # e.g. actions[2].loop#3[0] for the first body step of the third iteration
    text = label
    for frame in reversed(frames):
        if frame.count:
            text = text.replace(f"{frame.label}[", f"{frame.label}#{frame.iteration}[", 1)
    return text


def iter_steps(steps, scope: MutableMapping[str, Any]):
    """Generator over every step the cursor yields."""
    cursor = ExecutionCursor.start(steps)
    while True:
        step = next_step(cursor, scope)
        if step is None:
            return
        yield step
