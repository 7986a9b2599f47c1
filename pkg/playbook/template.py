"""Placeholder rendering for playbook templates."""

import re
from typing import Any, Mapping

from .model import (
    Click,
    Command,
    CoordinatesTarget,
    DragDrop,
    ImageTarget,
    PlaybookError,
    Scroll,
    ShareFile,
    TemplateString,
    TextTarget,
    TypeText,
    VariableKind,
    Wait,
)

# `{{`, optional spaces, identifier, optional spaces, `}}`. Anything else is literal text.
PLACEHOLDER_PATTERN = re.compile(r"\{\{ *([a-z][a-z0-9_]*) *\}\}")


class _Unset:
    """Marker for a dynamic variable that has not been captured yet."""

    def __repr__(self) -> str:
        return "UNSET"

    def __bool__(self) -> bool:
        return False


UNSET = _Unset()


class TemplateError(PlaybookError):
    def __init__(self, identifier: str, message: str):
        super().__init__(message)
        self.identifier = identifier


class UnresolvedIdentifierError(TemplateError):
    pass


class UnsetDynamicVariableError(TemplateError):
    pass


def placeholders(template) -> list:
    """Identifiers referenced by a template, in order of appearance (with repeats)."""
    raw = template.raw if isinstance(template, TemplateString) else str(template)
    return PLACEHOLDER_PATTERN.findall(raw)


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float) and value.is_integer():
        return str(int(value))
    return str(value)


def render_template(template, scope: Mapping[str, Any]) -> str:
    """Replace every placeholder with the string form of its value.

    Substitution is a single pass over the original text, so `{{` produced by a
    substituted value is never expanded again.
    """
    raw = template.raw if isinstance(template, TemplateString) else str(template)

    def substitute(match: re.Match) -> str:
        identifier = match.group(1)
        if identifier not in scope:
            raise UnresolvedIdentifierError(identifier, f"unresolved identifier '{identifier}' in template {raw!r}")
        value = scope[identifier]
        if value is UNSET:
            raise UnsetDynamicVariableError(
                identifier, f"dynamic variable '{identifier}' is read before it was captured"
            )
        return format_value(value)

    return PLACEHOLDER_PATTERN.sub(substitute, raw)


def render_value(value: Any, scope: Mapping[str, Any]) -> Any:
    """Render templates nested anywhere inside a parameter value."""
    if isinstance(value, TemplateString):
        return render_template(value, scope)
    if isinstance(value, (list, tuple)):
        return [render_value(item, scope) for item in value]
    if isinstance(value, Mapping):
        return {key: render_value(item, scope) for key, item in value.items()}
    return value


def render_parameters(parameter: Mapping[str, Any], scope: Mapping[str, Any]) -> dict:
    return {name: render_value(value, scope) for name, value in parameter.items()}


def render_target(target, scope: Mapping[str, Any]) -> dict:
    if isinstance(target, ImageTarget):
        return {"image": target.reference}
    if isinstance(target, TextTarget):
        return {"text": render_template(target.value, scope)}
    if isinstance(target, CoordinatesTarget):
        return {"coordinates": {"x": target.x, "y": target.y}}
    raise TypeError(f"not a target: {target!r}")


def render_action(action, scope: Mapping[str, Any]) -> dict:
    """Render an agent-side action into its wire form."""
    if isinstance(action, Click):
        return {"kind": "click", "button": action.button.value, "target": render_target(action.target, scope)}
    if isinstance(action, TypeText):
        return {"kind": "type_text", "text": render_template(action.text, scope)}
    if isinstance(action, Scroll):
        return {"kind": "scroll", "direction": action.direction.value, "amount": action.amount}
    if isinstance(action, DragDrop):
        return {
            "kind": "drag_drop",
            "from": render_target(action.source, scope),
            "to": render_target(action.destination, scope),
        }
    if isinstance(action, Command):
        return {"kind": "command", "command": render_template(action.command, scope), "shell": action.shell}
    if isinstance(action, Wait):
        return {"kind": "wait", "duration_ms": action.duration_ms}
    if isinstance(action, ShareFile):
        return {
            "kind": "share_file",
            "direction": action.direction.value,
            "src": render_template(action.src, scope),
            "dst": render_template(action.dst, scope),
        }
    raise TypeError(f"action {type(action).__name__} has no wire form")


_WINDOWS_FORBIDDEN = set('<>"|?*')


def is_valid_path(value: str, family: str = "posix") -> bool:
    """Syntactic check of a rendered path for the guest's path family."""
    if not value or "\x00" in value:
        return False
    if family == "windows":
        body = value[2:] if len(value) > 1 and value[1] == ":" else value
        return not (_WINDOWS_FORBIDDEN & set(body))
    return True


def resolve_variables(playbook, sys_vars: Mapping[str, Any], path_family: str = "posix") -> dict:
    """Build the initial run scope: system variables, then playbook variables in declaration order.

    Dynamic variables start out UNSET; number and boolean kinds are converted
    to Python values after rendering.
    """
    scope = dict(sys_vars)
    for name, decl in playbook.variables.items():
        if decl.kind is VariableKind.DYNAMIC:
            scope[name] = UNSET
            continue
        text = render_template(decl.value, scope)
        if decl.kind is VariableKind.NUMBER:
            try:
                number = float(text)
            except ValueError:
                raise TemplateError(name, f"variable '{name}' is not a number: {text!r}") from None
            scope[name] = int(number) if number.is_integer() else number
        elif decl.kind is VariableKind.BOOLEAN:
            lowered = text.strip().lower()
            if lowered not in ("true", "false"):
                raise TemplateError(name, f"variable '{name}' is not a boolean: {text!r}")
            scope[name] = lowered == "true"
        elif decl.kind is VariableKind.PATH:
            if not is_valid_path(text, path_family):
                raise TemplateError(name, f"variable '{name}' is not a valid {path_family} path: {text!r}")
            scope[name] = text
        else:
            scope[name] = text
    return scope
