"""Static checks of a parsed playbook against an assertion registry and system variables."""

from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Tuple

from .model import (
    CaptureTime,
    Click,
    Command,
    Conditional,
    DragDrop,
    Loop,
    Playbook,
    ShareFile,
    SourceLocation,
    TemplateString,
    TextTarget,
    TypeText,
    VariableKind,
)
from .template import placeholders

HOST_VARIABLES = frozenset({"host_playbook_dir"})


@dataclass(frozen=True)
class Finding:
    code: str
    message: str
    location: Optional[SourceLocation] = None

    def __str__(self) -> str:
        where = f"{self.location}: " if self.location else ""
        return f"{where}{self.message} [{self.code}]"


@dataclass(frozen=True)
class ValidationReport:
    findings: Tuple[Finding, ...] = field(default_factory=tuple)

    @property
    def ok(self) -> bool:
        return not self.findings

    def __len__(self) -> int:
        return len(self.findings)

    def __iter__(self):
        return iter(self.findings)


def _templates_in(value) -> Iterable[TemplateString]:
    if isinstance(value, TemplateString):
        yield value
    elif isinstance(value, (list, tuple)):
        for item in value:
            yield from _templates_in(item)
    elif hasattr(value, "items"):
        for item in value.values():
            yield from _templates_in(item)


def _step_templates(step) -> List[TemplateString]:
    if isinstance(step, Command):
        return [step.command]
    if isinstance(step, TypeText):
        return [step.text]
    if isinstance(step, ShareFile):
        return [step.src, step.dst]
    if isinstance(step, Click) and isinstance(step.target, TextTarget):
        return [step.target.value]
    if isinstance(step, DragDrop):
        return [t.value for t in (step.source, step.destination) if isinstance(t, TextTarget)]
    return []


def validate(pb: Playbook, registry, sys_vars: Iterable[str]) -> ValidationReport:
    """Return every finding, in document order. Never raises."""
    sys_vars = set(sys_vars) | HOST_VARIABLES
    findings: List[Finding] = []
    declared = set(pb.variables)
    loop_vars = pb.loop_variables()

    def check_identifiers(templates, visible, where, location):
        for template in templates:
            for identifier in placeholders(template):
                if identifier not in visible:
                    findings.append(
                        Finding("undeclared_identifier", f"{where} references undeclared '{identifier}'", location)
                    )

    # Variables resolve in declaration order.
    earlier = set()
    for name, decl in pb.variables.items():
        if decl.value is not None:
            for identifier in placeholders(decl.value):
                if identifier in sys_vars or identifier in earlier:
                    continue
                if identifier in declared:
                    findings.append(
                        Finding("forward_reference", f"variable '{name}' uses '{identifier}' before it is defined", decl.location)
                    )
                else:
                    findings.append(
                        Finding("undeclared_identifier", f"variable '{name}' references undeclared '{identifier}'", decl.location)
                    )
        earlier.add(name)

    visible_to_tests = declared | sys_vars | loop_vars
    for test in pb.tests.values():
        if test.function not in registry:
            findings.append(Finding("unknown_function", f"test '{test.name}' uses unknown function '{test.function}'", test.location))
        else:
            descriptor = registry.describe(test.function)
            for required in descriptor.required:
                if required not in test.parameter:
                    findings.append(
                        Finding("missing_parameter", f"test '{test.name}' misses required parameter '{required}'", test.location)
                    )
            for given in test.parameter:
                if given not in descriptor.required and given not in descriptor.optional:
                    findings.append(
                        Finding("unknown_parameter", f"test '{test.name}' passes unknown parameter '{given}'", test.location)
                    )
        check_identifiers(list(_templates_in(test.parameter)), visible_to_tests, f"test '{test.name}'", test.location)

    def visit(steps, visible):
        for step in steps:
            location = getattr(step, "location", None)
            check_identifiers(_step_templates(step), visible, step.kind, location)
            if isinstance(step, CaptureTime):
                decl = pb.variables.get(step.into)
                if decl is None:
                    findings.append(Finding("capture_into_undeclared", f"capture_time into undeclared variable '{step.into}'", location))
                elif decl.kind is not VariableKind.DYNAMIC:
                    findings.append(
                        Finding("capture_into_non_dynamic", f"capture_time into '{step.into}' which is {decl.kind.value}, not dynamic", location)
                    )
            elif isinstance(step, Loop):
                inner = set(visible)
                if isinstance(step.count, str):
                    decl = pb.variables.get(step.count)
                    if step.count not in visible:
                        findings.append(Finding("undeclared_identifier", f"loop count references undeclared '{step.count}'", location))
                    elif decl is not None and decl.kind not in (VariableKind.NUMBER, VariableKind.DYNAMIC):
                        findings.append(Finding("non_numeric_loop_count", f"loop count variable '{step.count}' is {decl.kind.value}", location))
                if step.index_variable:
                    if step.index_variable in declared or step.index_variable in sys_vars:
                        findings.append(
                            Finding("loop_variable_collision", f"loop variable '{step.index_variable}' shadows a declared variable", location)
                        )
                    inner.add(step.index_variable)
                visit(step.body, inner)
            elif isinstance(step, Conditional):
                if step.predicate.variable not in visible:
                    findings.append(
                        Finding(
                            "undeclared_predicate_variable",
                            f"condition references undeclared '{step.predicate.variable}'",
                            step.predicate.location or location,
                        )
                    )
                visit(step.then, visible)
                if step.otherwise:
                    visit(step.otherwise, visible)

    visit(pb.actions, declared | sys_vars)
    return ValidationReport(tuple(findings))
