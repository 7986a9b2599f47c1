"""Canonical YAML form of a playbook and its digest."""

import hashlib
from typing import Any, Mapping

import yaml

from .model import (
    CaptureTime,
    Click,
    Command,
    Conditional,
    CoordinatesTarget,
    DragDrop,
    ImageTarget,
    Loop,
    Playbook,
    Scroll,
    ShareFile,
    TemplateString,
    TestInvocation,
    TextTarget,
    TypeText,
    Wait,
)


def _plain(value: Any) -> Any:
    if isinstance(value, TemplateString):
        return value.raw
    if isinstance(value, (list, tuple)):
        return [_plain(item) for item in value]
    if isinstance(value, Mapping):
        return {key: _plain(item) for key, item in value.items()}
    return value


def _target(target) -> dict:
    if isinstance(target, ImageTarget):
        return {"image": target.reference}
    if isinstance(target, TextTarget):
        return {"text": target.value.raw}
    if isinstance(target, CoordinatesTarget):
        return {"coordinates": {"x": target.x, "y": target.y}}
    raise TypeError(f"not a target: {target!r}")


def _step(step) -> dict:
    if isinstance(step, TestInvocation):
        return {"test": step.test_name}
    if isinstance(step, Command):
        return {"command": {"command": step.command.raw, "shell": step.shell}}
    if isinstance(step, Click):
        return {"click": {"type": step.button.value, "target": _target(step.target)}}
    if isinstance(step, TypeText):
        return {"type_text": {"text": step.text.raw}}
    if isinstance(step, Scroll):
        return {"scroll": {"direction": step.direction.value, "amount": step.amount}}
    if isinstance(step, DragDrop):
        return {"drag_drop": {"from": _target(step.source), "to": _target(step.destination)}}
    if isinstance(step, ShareFile):
        return {"share_file": {"direction": step.direction.value, "src": step.src.raw, "dst": step.dst.raw}}
    if isinstance(step, Wait):
        return {"wait": {"duration_ms": step.duration_ms}}
    if isinstance(step, CaptureTime):
        return {"capture_time": {"into": step.into}}
    if isinstance(step, Loop):
        body = {"count": step.count}
        if step.index_variable:
            body["as"] = step.index_variable
        body["body"] = [_step(child) for child in step.body]
        return {"loop": body}
    if isinstance(step, Conditional):
        pred = step.predicate
        body = {
            "condition": {"variable": pred.variable, "op": pred.op, "value": pred.value},
            "then": [_step(child) for child in step.then],
        }
        if step.otherwise is not None:
            body["else"] = [_step(child) for child in step.otherwise]
        return {"if": body}
    raise TypeError(f"unknown step {step!r}")


def playbook_to_document(playbook: Playbook) -> dict:
    document = {}
    meta = {key: value for key, value in vars(playbook.metadata).items() if value is not None}
    if meta:
        document["metadata"] = meta
    if playbook.variables:
        variables = {}
        for name, decl in playbook.variables.items():
            entry = {"type": decl.kind.value}
            if decl.value is not None:
                entry["value"] = decl.value.raw
            variables[name] = entry
        document["variables"] = variables
    if playbook.tests:
        tests = []
        for test in playbook.tests.values():
            entry = {"name": test.name, "function": test.function}
            if test.parameter:
                entry["parameter"] = _plain(test.parameter)
            tests.append(entry)
        document["tests"] = tests
    document["actions"] = [_step(step) for step in playbook.actions]
    return document


def serialize_playbook(playbook: Playbook) -> str:
    """Canonical form: keys in declaration order, defaults written out."""
    return yaml.safe_dump(
        playbook_to_document(playbook),
        sort_keys=False,
        allow_unicode=True,
        default_flow_style=False,
        width=4096,
    )


def playbook_digest(playbook: Playbook) -> str:
    return hashlib.sha256(serialize_playbook(playbook).encode("utf-8")).hexdigest()
