"""Run reports: canonical JSON, written atomically."""

import hashlib
import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

REPORT_VERSION = 1
ENGINE_VERSION = "1.0.0"


class Verdict(str, Enum):
    ALL_PASS = "all_pass"
    TEST_FAILURES = "test_failures"
    ABORTED_ERROR = "aborted_error"


@dataclass
class StepRecord:
    index: int
    path: str
    kind: str
    description: str
    status: str  # ok, pass, fail or error
    request: Any = None
    outcome: Any = None
    started_at: str = ""
    finished_at: str = ""
    duration_ms: float = 0.0
    agent_clock: Optional[str] = None


@dataclass
class RunReport:
    run_id: str
    author: Optional[str]
    submitted_at: str
    playbook_digest: str
    environment: Dict[str, Any]
    steps: List[StepRecord] = field(default_factory=list)
    verdict: Verdict = Verdict.ALL_PASS
    captured_variables: Dict[str, Any] = field(default_factory=dict)
    registry_digest: Optional[str] = None
    clean_state_digest: Optional[str] = None
    agent_touched_paths: List[str] = field(default_factory=list)
    abort_reason: Optional[str] = None
    sandbox_root: Optional[str] = None
    metadata: Dict[str, Any] = field(default_factory=dict)
    engine_version: str = ENGINE_VERSION

    @property
    def environment_id(self) -> str:
        return self.environment.get("id", "")

    def to_dict(self) -> dict:
        data = asdict(self)
        data["verdict"] = self.verdict.value
        data["report_version"] = REPORT_VERSION
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "RunReport":
        data = dict(data)
        version = data.pop("report_version", REPORT_VERSION)
        if version != REPORT_VERSION:
            raise ValueError(f"unsupported report_version {version}")
        data["steps"] = [StepRecord(**step) for step in data.get("steps", [])]
        data["verdict"] = Verdict(data["verdict"])
        return cls(**data)


def compute_run_id(playbook_digest: str, environment_id: str, submitted_at: str, engine_version: str = ENGINE_VERSION) -> str:
    text = "\n".join((playbook_digest, environment_id, engine_version, submitted_at))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def decide_verdict(steps: List[StepRecord], aborted: bool = False) -> Verdict:
    if aborted or any(step.status == "error" and step.kind != "test" for step in steps):
        return Verdict.ABORTED_ERROR
    if any(step.kind == "test" and step.status != "pass" for step in steps):
        return Verdict.TEST_FAILURES
    return Verdict.ALL_PASS


def steps_sequential(report: RunReport) -> bool:
    """Each request was sent no earlier than the previous response arrived."""
    for before, after in zip(report.steps, report.steps[1:]):
        if not before.finished_at or not after.started_at:
            continue
        if datetime.fromisoformat(after.started_at) < datetime.fromisoformat(before.finished_at):
            return False
    return True


def report_to_json(report: RunReport) -> str:
    return json.dumps(report.to_dict(), sort_keys=True, indent=2, ensure_ascii=False, default=str) + "\n"


def write_atomic(path: Union[str, Path], text: str) -> Path:
    """Write-then-rename so readers never see a truncated file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, temp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(temp, path)
    except BaseException:
        if os.path.exists(temp):
            os.unlink(temp)
        raise
    return path


def write_report(report: RunReport, directory: Union[str, Path], filename: Optional[str] = None) -> Path:
    name = filename or f"{report.environment_id}-{report.run_id[:12]}.json"
    return write_atomic(Path(directory) / name, report_to_json(report))


def load_run_report(path: Union[str, Path]) -> RunReport:
    with open(path, "r", encoding="utf-8") as fh:
        return RunReport.from_dict(json.load(fh))
