"""Compare two run reports of the same experiment, ignoring timing."""

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, List, Optional

from .report import RunReport

ROOT_PLACEHOLDER = "<root>"


class ReproStatus(str, Enum):
    REPRODUCED = "reproduced"
    DIVERGED = "diverged"
    NOT_COMPARABLE = "not_comparable"


@dataclass
class ReproVerdict:
    status: ReproStatus
    differences: List[str] = field(default_factory=list)

    @property
    def exit_code(self) -> int:
        return {ReproStatus.REPRODUCED: 0, ReproStatus.DIVERGED: 1, ReproStatus.NOT_COMPARABLE: 2}[self.status]


def _normalize(value: Any, root: Optional[str]) -> Any:
    # each run gets its own sandbox directory
    if isinstance(value, str) and root:
        return value.replace(root, ROOT_PLACEHOLDER)
    if isinstance(value, list):
        return [_normalize(item, root) for item in value]
    if isinstance(value, dict):
        return {key: _normalize(item, root) for key, item in value.items()}
    return value


def _comparable(outcome: Any, kind: str) -> Any:
    if not isinstance(outcome, dict):
        return None
    if kind == "test":
        return {key: outcome.get(key) for key in ("status", "observed", "expected", "error_class")}
    if kind == "command":
        return {key: outcome.get(key) for key in ("exit_code", "stdout", "stderr")}
    if kind in ("click", "drag_drop"):
        return {key: outcome.get(key) for key in ("element", "method", "ambiguous")}
    if "class" in outcome:
        return {"class": outcome["class"]}
    return None


def reproduce_check(report_a: RunReport, report_b: RunReport) -> ReproVerdict:
    if report_a.playbook_digest != report_b.playbook_digest:
        return ReproVerdict(ReproStatus.NOT_COMPARABLE, ["playbook_digest"])
    if report_a.environment_id != report_b.environment_id:
        return ReproVerdict(ReproStatus.NOT_COMPARABLE, ["environment"])

    differences = []
    if report_a.clean_state_digest != report_b.clean_state_digest:
        differences.append("clean_state_digest")
    if report_a.verdict != report_b.verdict:
        differences.append(f"verdict: {report_a.verdict.value} != {report_b.verdict.value}")
    if len(report_a.steps) != len(report_b.steps):
        differences.append(f"steps: {len(report_a.steps)} != {len(report_b.steps)}")

    for a, b in zip(report_a.steps, report_b.steps):
        where = f"steps[{a.index}]"
        for attr in ("kind", "path", "status"):
            if getattr(a, attr) != getattr(b, attr):
                differences.append(f"{where}.{attr}: {getattr(a, attr)!r} != {getattr(b, attr)!r}")
        if a.kind != b.kind:
            continue
        left = _normalize(_comparable(a.outcome, a.kind), report_a.sandbox_root)
        right = _normalize(_comparable(b.outcome, b.kind), report_b.sandbox_root)
        if left != right:
            for key in sorted(set(left or {}) | set(right or {})):
                if (left or {}).get(key) != (right or {}).get(key):
                    differences.append(f"{where}.{key} ({a.description})")

    status = ReproStatus.DIVERGED if differences else ReproStatus.REPRODUCED
    return ReproVerdict(status, differences)
