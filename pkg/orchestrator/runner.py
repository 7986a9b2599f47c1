"""
Sequential experiment loop.

Steps come from the playbook cursor one at a time. Every action or test is one
request on the session, and its result is recorded before the next step is
rendered, so a test placed right after an action sees exactly the state that
action left behind.
"""

import logging
from dataclasses import dataclass
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any, MutableMapping, Optional

import aiofiles

from playbook.cursor import CursorError, ExecutionCursor, next_step
from playbook.model import CaptureTime, Playbook, PlaybookError, ShareDirection, ShareFile, TestInvocation, VariableKind
from playbook.serializer import playbook_digest
from playbook.template import UNSET, TemplateError, render_action, render_parameters, render_template, resolve_variables
from protocol.messages import ProtocolError, RequestKind, ResponseStatus
from protocol.session import HostSession, TransferError
from resolver.screen_model import ResolverError
from scripts.registry import AssertionRegistry

from .environments import EnvironmentSpec, OrchestratorError, create_backend
from .report import RunReport, StepRecord, compute_run_id, decide_verdict

logger = logging.getLogger(__name__)


class Policy(str, Enum):
    CONTINUE = "continue"
    ABORT = "abort"


@dataclass(frozen=True)
class FailurePolicy:
    on_test_fail: Policy = Policy.CONTINUE
    on_nonzero_exit: Policy = Policy.CONTINUE

    @property
    def on_action_error(self) -> Policy:
        return Policy.ABORT


def _iso(moment: datetime) -> str:
    return moment.astimezone(timezone.utc).isoformat()


def _from_epoch(seconds: float) -> str:
    return _iso(datetime.fromtimestamp(seconds, tz=timezone.utc))


def capture_dynamic(action: CaptureTime, scope: MutableMapping[str, Any], instant: datetime) -> MutableMapping[str, Any]:
    """Store the host instant at which the previous terminal response was processed."""
    previous = scope.get(action.into, UNSET)
    if previous is not UNSET:
        logger.info("dynamic variable '%s' overwritten (was %s)", action.into, previous)
    scope[action.into] = _iso(instant)
    return scope


def _describe(step) -> str:
    if isinstance(step, TestInvocation):
        return f"test {step.test_name}"
    if isinstance(step, CaptureTime):
        return f"capture_time into {step.into}"
    return step.kind


class _Run:
    def __init__(self, pb: Playbook, session: HostSession, policy: FailurePolicy, sys_vars: dict, playbook_dir: Optional[Path]):
        self.pb = pb
        self.session = session
        self.policy = policy
        self.playbook_dir = playbook_dir
        self.steps = []
        self.touched = []
        self.aborted: Optional[str] = None
        # a policy stop after a failed test is not an infrastructure abort
        self.policy_stop = False
        self.last_response_at = datetime.now(timezone.utc)
        info = session.agent_info or {}
        self.scope = resolve_variables(pb, sys_vars, info.get("path_family", "posix"))

    def _record(self, step, kind: str, status: str, request=None, outcome=None, started_at="", finished_at="", duration_ms=0.0, agent_clock=None, path=""):
        record = StepRecord(
            index=len(self.steps),
            path=path,
            kind=kind,
            description=_describe(step),
            status=status,
            request=request,
            outcome=outcome,
            started_at=started_at,
            finished_at=finished_at,
            duration_ms=duration_ms,
            agent_clock=agent_clock,
        )
        self.steps.append(record)
        return record

    async def execute(self) -> None:
        cursor = ExecutionCursor.start(self.pb.actions)
        while self.aborted is None:
            try:
                step = next_step(cursor, self.scope)
            except CursorError as e:
                self.aborted = f"cursor: {e}"
                break
            if step is None:
                return
            path = cursor.path()
            try:
                if isinstance(step, TestInvocation):
                    await self._test(step, path)
                elif isinstance(step, CaptureTime):
                    capture_dynamic(step, self.scope, self.last_response_at)
                    now = _iso(datetime.now(timezone.utc))
                    self._record(step, step.kind, "ok", outcome={"variable": step.into, "value": self.scope[step.into]}, started_at=now, finished_at=now, path=path)
                elif isinstance(step, ShareFile):
                    await self._share(step, path)
                else:
                    await self._action(step, path)
            except TemplateError as e:
                now = _iso(datetime.now(timezone.utc))
                self._record(step, step.kind, "error", outcome={"class": "template_error", "message": str(e)}, started_at=now, finished_at=now, path=path)
                self.aborted = f"template: {e}"

    async def _test(self, step: TestInvocation, path: str) -> None:
        test = self.pb.tests[step.test_name]
        payload = {"test_name": test.name, "function": test.function, "parameters": render_parameters(test.parameter, self.scope)}
        exchange = await self.session.exchange(RequestKind.TEST, payload)
        response = exchange.response
        self.last_response_at = datetime.fromtimestamp(exchange.received_at, tz=timezone.utc)
        result = response.payload if isinstance(response.payload, dict) else {}
        if response.status is ResponseStatus.ERROR and "test_name" not in result:
            status = "error"
            self.aborted = f"test '{test.name}': {result.get('class', 'error')}: {result.get('message', '')}"
        else:
            status = result.get("status", "error")
        self._record(
            step, "test", status, payload, result,
            _from_epoch(exchange.sent_at), _from_epoch(exchange.received_at), response.duration_ms, response.agent_clock, path,
        )
        if status == "fail" and self.policy.on_test_fail is Policy.ABORT and self.aborted is None:
            self.aborted = f"test '{test.name}' failed and policy is abort"
            self.policy_stop = True

    async def _action(self, step, path: str) -> None:
        wire = render_action(step, self.scope)
        exchange = await self.session.exchange(RequestKind.ACTION, wire)
        response = exchange.response
        self.last_response_at = datetime.fromtimestamp(exchange.received_at, tz=timezone.utc)
        status = "ok" if response.status is ResponseStatus.OK else "error"
        outcome = response.payload
        if status == "error":
            self.aborted = f"{step.kind}: {outcome.get('class') if isinstance(outcome, dict) else outcome}"
        elif step.kind == "command" and isinstance(outcome, dict) and outcome.get("exit_code", 0) != 0:
            if self.policy.on_nonzero_exit is Policy.ABORT:
                status = "error"
                self.aborted = f"command exited {outcome['exit_code']} and policy is abort"
        self._record(
            step, step.kind, status, wire, outcome,
            _from_epoch(exchange.sent_at), _from_epoch(exchange.received_at), response.duration_ms, response.agent_clock, path,
        )

    def _host_path(self, rendered: str) -> Path:
        candidate = Path(rendered)
        if not candidate.is_absolute() and self.playbook_dir is not None:
            candidate = self.playbook_dir / candidate
        return candidate

    async def _share(self, step: ShareFile, path: str) -> None:
        src, dst = render_template(step.src, self.scope), render_template(step.dst, self.scope)
        request = {"kind": "share_file", "direction": step.direction.value, "src": src, "dst": dst}
        started = datetime.now(timezone.utc)
        try:
            if step.direction is ShareDirection.HOST_TO_GUEST:
                async with aiofiles.open(self._host_path(src), "rb") as fh:
                    data = await fh.read()
                response = await self.session.push_file(dst, data)
                if response.status is not ResponseStatus.OK:
                    raise TransferError(f"push to {dst} failed: {response.payload}")
                self.touched.append(response.payload.get("path", dst))
                outcome = {"bytes": len(data), "content_hash": response.payload.get("content_hash")}
            else:
                content, digest = await self.session.fetch_file(src)
                target = self._host_path(dst)
                target.parent.mkdir(parents=True, exist_ok=True)
                async with aiofiles.open(target, "wb") as fh:
                    await fh.write(content)
                outcome = {"bytes": len(content), "content_hash": digest}
            status = "ok"
        except (TransferError, OSError) as e:
            status, outcome = "error", {"class": "transfer_failed", "message": str(e)}
            self.aborted = f"share_file: {e}"
        self.last_response_at = datetime.now(timezone.utc)
        self._record(
            step, step.kind, status, request, outcome, _iso(started), _iso(self.last_response_at),
            round((self.last_response_at - started).total_seconds() * 1000, 3), None, path,
        )


async def run_experiment(
    pb: Playbook,
    env: EnvironmentSpec,
    policy: FailurePolicy = FailurePolicy(),
    registry: Optional[AssertionRegistry] = None,
    author: Optional[str] = None,
    playbook_dir: Optional[Path] = None,
    keep_sandbox: bool = False,
    deadline_ms: Optional[int] = None,
) -> RunReport:
    """Provision, run every step in order, tear down. Never raises for run-time failures."""
    registry = registry or AssertionRegistry.core()
    submitted_at = _iso(datetime.now(timezone.utc))
    digest = playbook_digest(pb)
    metadata = {k: v for k, v in vars(pb.metadata).items() if v is not None}
    report = RunReport(
        run_id=compute_run_id(digest, env.id, submitted_at),
        author=author or pb.metadata.author,
        submitted_at=submitted_at,
        playbook_digest=digest,
        environment=env.to_dict(),
        registry_digest=registry.digest(),
        metadata=metadata,
    )
    backend = None
    run: Optional[_Run] = None
    try:
        backend = create_backend(env, registry, keep_sandbox=keep_sandbox, deadline_ms=deadline_ms)
        await backend.prepare()
        report.clean_state_digest = backend.clean_state_digest
        report.sandbox_root = str(backend.sandbox_root) if backend.sandbox_root else None
        session = await backend.connect()
        sys_vars = dict((session.agent_info or {}).get("sys_vars") or env.sys_vars)
        if playbook_dir is not None:
            sys_vars["host_playbook_dir"] = str(playbook_dir)
        run = _Run(pb, session, policy, sys_vars, playbook_dir)
        await run.execute()
    except (OrchestratorError, ProtocolError, PlaybookError, ResolverError, OSError) as e:
        logger.error("run of '%s' aborted: %s", env.id, e)
        report.abort_reason = f"{type(e).__name__}: {e}"
    finally:
        if backend is not None:
            await backend.teardown()

    if run is not None:
        report.steps = run.steps
        report.agent_touched_paths = sorted(set(run.touched))
        report.abort_reason = report.abort_reason or run.aborted
        report.captured_variables = {
            name: run.scope[name]
            for name, decl in pb.variables.items()
            if decl.kind is VariableKind.DYNAMIC and run.scope.get(name, UNSET) is not UNSET
        }
    aborted = report.abort_reason is not None and not (run is not None and run.policy_stop)
    report.verdict = decide_verdict(report.steps, aborted=aborted)
    logger.info("run %s on '%s': %s", report.run_id[:12], env.id, report.verdict.value)
    return report
