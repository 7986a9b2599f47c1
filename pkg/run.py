# run.py
# command-line entry point: validate, run, matrix, diff, reproduce, agent

import argparse
import asyncio
import glob
import logging
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional

from dotenv import dotenv_values, load_dotenv

from agents.execution_root import AgentError, ExecutionRoot, load_sys_vars
from agents.guest_agent import EXIT_BIND_FAILURE, GuestAgent, serve_tcp
from agents.gui_actions import GuiError, NativeGuiDriver, SandboxGuiDriver
from orchestrator.environments import EnvironmentRegistry, EnvironmentRegistryError
from orchestrator.matrix import run_matrix, summary_rows, write_matrix
from orchestrator.report import Verdict, load_run_report, write_atomic, write_report
from orchestrator.reproduce import reproduce_check
from orchestrator.runner import FailurePolicy, Policy, run_experiment
from playbook import PlaybookParseError, parse_playbook_file, validate
from protocol.messages import DEFAULT_PORT
from regression.diff import compare
from regression.divergence_matrix import MatrixFormat, aggregate, render_matrix
from regression.tabular import RegressionError, ReportMissing, load_report
from resolver.screen_model import ResolverError, load_screen_model
from resolver.target_resolver import TargetResolver
from scripts.registry import AssertionRegistry, RegistryError
from scripts.visual_qa import CvBackendClient

logger = logging.getLogger("run")

EXIT_OK = 0
EXIT_FAILURES = 1
EXIT_USAGE = 2
EXIT_ABORTED = 3

POLICY_CHOICES = [policy.value for policy in Policy]

VERDICT_EXIT = {
    Verdict.ALL_PASS: EXIT_OK,
    Verdict.TEST_FAILURES: EXIT_FAILURES,
    Verdict.ABORTED_ERROR: EXIT_ABORTED,
}


class UsageError(Exception):
    pass


@dataclass
class CliConfig:
    environments_file: Path = Path("environments.yaml")
    reports_dir: Path = Path("reports")
    cv_backend: Optional[str] = None
    parallelism: int = 1
    policy: FailurePolicy = field(default_factory=FailurePolicy)
    test_libraries: List[str] = field(default_factory=list)
    author: Optional[str] = None


def load_config(args) -> CliConfig:
    """flags > TDF_CONFIG file > defaults"""
    config = CliConfig()
    path = args.config or os.getenv("TDF_CONFIG")
    values = {}
    if path:
        if not os.path.isfile(path):
            raise UsageError(f"config file {path} does not exist")
        values = dotenv_values(path)
    try:
        if values.get("TDF_ENVIRONMENTS_FILE"):
            config.environments_file = Path(values["TDF_ENVIRONMENTS_FILE"])
        if values.get("TDF_REPORTS_DIR"):
            config.reports_dir = Path(values["TDF_REPORTS_DIR"])
        config.cv_backend = values.get("TDF_CV_BACKEND") or None
        if values.get("TDF_PARALLELISM"):
            config.parallelism = int(values["TDF_PARALLELISM"])
        config.policy = FailurePolicy(
            Policy(values.get("TDF_ON_TEST_FAIL") or "continue"),
            Policy(values.get("TDF_ON_NONZERO_EXIT") or "continue"),
        )
        if values.get("TDF_TEST_LIBRARIES"):
            config.test_libraries = [p.strip() for p in values["TDF_TEST_LIBRARIES"].split(",") if p.strip()]
        config.author = values.get("TDF_AUTHOR") or None
    except ValueError as e:
        raise UsageError(f"bad configuration value: {e}") from None

    if getattr(args, "environments", None):
        config.environments_file = Path(args.environments)
    if args.reports_dir:
        config.reports_dir = Path(args.reports_dir)
    if getattr(args, "cv_backend", None):
        config.cv_backend = args.cv_backend
    if getattr(args, "parallelism", None):
        config.parallelism = args.parallelism
    if getattr(args, "on_test_fail", None):
        config.policy = replace(config.policy, on_test_fail=Policy(args.on_test_fail))
    if getattr(args, "on_nonzero_exit", None):
        config.policy = replace(config.policy, on_nonzero_exit=Policy(args.on_nonzero_exit))
    if args.test_library:
        config.test_libraries = list(args.test_library)
    if getattr(args, "author", None):
        config.author = args.author
    if config.parallelism < 1:
        raise UsageError("parallelism must be at least 1")
    return config


def _registry(config: CliConfig) -> AssertionRegistry:
    try:
        return AssertionRegistry.from_manifests(config.test_libraries)
    except (RegistryError, OSError) as e:
        raise UsageError(f"cannot load test libraries: {e}") from None


def _environments(config: CliConfig, required: bool = True) -> Optional[EnvironmentRegistry]:
    if not config.environments_file.exists():
        if required:
            raise UsageError(f"environment registry {config.environments_file} does not exist")
        return None
    try:
        return EnvironmentRegistry.load(config.environments_file)
    except (EnvironmentRegistryError, OSError) as e:
        raise UsageError(str(e)) from None


def _print_findings(path, report) -> None:
    for finding in report:
        print(f"{path}:{finding}")


def cmd_validate(args, config: CliConfig) -> int:
    try:
        pb = parse_playbook_file(args.playbook)
    except OSError as e:
        print(f"cannot read {args.playbook}: {e.strerror}", file=sys.stderr)
        return EXIT_USAGE
    except PlaybookParseError as e:
        for diagnostic in e.diagnostics:
            print(f"{args.playbook}:{diagnostic}")
        return EXIT_FAILURES
    registry = _registry(config)
    envs = _environments(config, required=bool(args.env))
    sys_vars = set()
    if envs is not None:
        try:
            sys_vars = envs.sys_var_names(args.env)
        except EnvironmentRegistryError as e:
            raise UsageError(str(e)) from None
    report = validate(pb, registry, sys_vars)
    _print_findings(args.playbook, report)
    if report.ok:
        print(f"{args.playbook}: ok")
        return EXIT_OK
    return EXIT_FAILURES


def _load_valid(path, registry, sys_vars):
    try:
        pb = parse_playbook_file(path)
    except OSError as e:
        raise UsageError(f"cannot read {path}: {e.strerror}") from None
    except PlaybookParseError as e:
        raise UsageError(str(e)) from None
    report = validate(pb, registry, sys_vars)
    if not report.ok:
        _print_findings(path, report)
        raise UsageError(f"{path} has {len(report)} validation finding(s)")
    return pb


def cmd_run(args, config: CliConfig) -> int:
    envs = _environments(config)
    if args.env not in envs:
        raise UsageError(f"unknown environment '{args.env}'")
    env = envs.get(args.env)
    registry = _registry(config)
    pb = _load_valid(args.playbook, registry, set(env.sys_vars))
    report = asyncio.run(
        run_experiment(
            pb,
            env,
            config.policy,
            registry,
            author=config.author,
            playbook_dir=Path(args.playbook).parent.resolve(),
            keep_sandbox=args.keep_sandbox,
            deadline_ms=args.deadline_ms,
        )
    )
    path = write_report(report, config.reports_dir)
    passed = sum(1 for step in report.steps if step.kind == "test" and step.status == "pass")
    tests = sum(1 for step in report.steps if step.kind == "test")
    print(f"{report.verdict.value}: {passed}/{tests} tests passed, {len(report.steps)} steps")
    for step in report.steps:
        if step.status in ("fail", "error"):
            print(f"  [{step.index}] {step.description}: {step.status}")
    if report.abort_reason:
        print(f"  aborted: {report.abort_reason}")
    print(f"report: {path}")
    return VERDICT_EXIT[report.verdict]


def cmd_matrix(args, config: CliConfig) -> int:
    envs = _environments(config)
    env_ids = [e.strip() for e in (args.envs or "").split(",") if e.strip()]
    unknown = [e for e in env_ids if e not in envs]
    if unknown:
        raise UsageError(f"unknown environment(s): {', '.join(unknown)}")
    selected = [envs.get(e) for e in env_ids]
    registry = _registry(config)
    sources = sorted(glob.glob(args.playbooks))
    if not sources and selected:
        raise UsageError(f"no playbook matches {args.playbooks}")
    names = {name for env in selected for name in env.sys_vars}
    playbooks = [(source, _load_valid(source, registry, names)) for source in sources]
    result = asyncio.run(
        run_matrix(
            playbooks,
            selected,
            config.policy,
            registry,
            parallelism=config.parallelism,
            author=config.author,
            progress=sys.stderr.isatty(),
        )
    )
    index = write_matrix(result, config.reports_dir)
    for label, env_id, verdict in summary_rows(result):
        print(f"{label:30} {env_id:20} {verdict}")
    print(f"index: {index}")
    worst = result.worst_verdict()
    return VERDICT_EXIT[worst] if worst else EXIT_OK


def cmd_diff(args, config: CliConfig) -> int:
    try:
        baseline = load_report(args.baseline)
        if isinstance(baseline, ReportMissing):
            raise UsageError(f"baseline {args.baseline} is missing or empty")
        records = [compare(baseline, load_report(candidate)) for candidate in args.candidates]
        matrix = aggregate(records)
    except RegressionError as e:
        raise UsageError(str(e)) from None
    out = Path(args.out) if args.out else None
    if out is not None:
        for name, record in zip(_record_names(records), records):
            write_atomic(out / name, record.to_json())
        write_atomic(out / "matrix.csv", render_matrix(matrix, MatrixFormat.CSV).decode("utf-8"))
    if args.verbose:
        for record in records:
            for finding in record.findings:
                print(f"{record.candidate_id}: {finding}")
    fmt = MatrixFormat.CSV if args.csv else MatrixFormat.TEXT_TABLE
    sys.stdout.write(render_matrix(matrix, fmt).decode("utf-8"))
    return EXIT_OK if all(record.empty for record in records) else EXIT_FAILURES


def _record_names(records) -> list:
    """``<candidate>.json``; repeated candidate ids get ``-2``, ``-3`` ... in input order."""
    seen = {}
    names = []
    for record in records:
        stem = record.candidate_id or "missing"
        seen[stem] = seen.get(stem, 0) + 1
        names.append(f"{stem}.json" if seen[stem] == 1 else f"{stem}-{seen[stem]}.json")
    return names


def cmd_reproduce(args, config: CliConfig) -> int:
    try:
        a, b = load_run_report(args.report_a), load_run_report(args.report_b)
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise UsageError(f"cannot load report: {e}") from None
    verdict = reproduce_check(a, b)
    print(verdict.status.value)
    for difference in verdict.differences:
        print(f"  {difference}")
    return verdict.exit_code


def _listen_address(text: str):
    host, _, port = text.rpartition(":")
    try:
        return host or "127.0.0.1", int(port)
    except ValueError:
        raise UsageError(f"--listen expects HOST:PORT, got {text!r}") from None


def cmd_agent(args, config: CliConfig) -> int:
    host, port = _listen_address(args.listen)
    try:
        sys_vars = load_sys_vars(args.sys_vars) if args.sys_vars else {}
    except (AgentError, OSError) as e:
        raise UsageError(str(e)) from None
    registry = _registry(config)
    backend = None
    if config.cv_backend:
        backend = CvBackendClient(config.cv_backend, assets_dir=args.assets)
    resolver = TargetResolver(backend)
    try:
        if args.mode == "sandbox":
            if not args.root:
                raise UsageError("--mode sandbox needs --root")
            root = ExecutionRoot.sandbox(args.root, sys_vars)
            driver = SandboxGuiDriver(load_screen_model(args.screen_model), root, resolver) if args.screen_model else None
        else:
            root = ExecutionRoot.native(sys_vars)
            driver = NativeGuiDriver(resolver)
    except (GuiError, ResolverError, OSError) as e:
        print(f"cannot start the agent: {e}", file=sys.stderr)
        return EXIT_USAGE
    agent = GuestAgent(root, registry, driver)
    code = asyncio.run(serve_tcp(agent, host, port))
    if code == EXIT_BIND_FAILURE:
        print(f"cannot listen on {host}:{port}", file=sys.stderr)
    return code


def parse_args(argv=None):
    parser = argparse.ArgumentParser(prog="run.py", description="test-driven forensic experiment engine")
    parser.add_argument("--config", type=str, default=None, help="dotenv-style config file (default: $TDF_CONFIG)")
    parser.add_argument("--reports-dir", type=str, default=None)
    parser.add_argument("--test-library", action="append", default=None, help="extra assertion manifest (repeatable)")
    parser.add_argument("--verbose", "-v", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="parse and statically check a playbook")
    p.add_argument("playbook")
    p.add_argument("--env", default=None, help="take system variable names from this environment")
    p.add_argument("--environments", default=None)
    p.set_defaults(handler=cmd_validate)

    p = sub.add_parser("run", help="run one playbook in one environment")
    p.add_argument("playbook")
    p.add_argument("--env", required=True)
    p.add_argument("--environments", default=None)
    p.add_argument("--author", default=None)
    p.add_argument("--keep-sandbox", action="store_true")
    p.add_argument("--deadline-ms", type=int, default=None)
    p.add_argument("--on-test-fail", choices=POLICY_CHOICES, default=None)
    p.add_argument("--on-nonzero-exit", choices=POLICY_CHOICES, default=None)
    p.set_defaults(handler=cmd_run)

    p = sub.add_parser("matrix", help="run playbooks across environments")
    p.add_argument("playbooks", help="glob, e.g. 'playbooks/*.yaml'")
    p.add_argument("--envs", default="", help="comma-separated environment ids")
    p.add_argument("--environments", default=None)
    p.add_argument("--parallelism", type=int, default=None)
    p.add_argument("--author", default=None)
    p.add_argument("--on-test-fail", choices=POLICY_CHOICES, default=None)
    p.add_argument("--on-nonzero-exit", choices=POLICY_CHOICES, default=None)
    p.set_defaults(handler=cmd_matrix)

    p = sub.add_parser("diff", help="compare tool reports against a baseline")
    p.add_argument("baseline")
    p.add_argument("candidates", nargs="*")
    p.add_argument("--out", default=None, help="write divergence records and matrix.csv here")
    p.add_argument("--csv", action="store_true")
    p.set_defaults(handler=cmd_diff)

    p = sub.add_parser("reproduce", help="check two run reports for identical results")
    p.add_argument("report_a")
    p.add_argument("report_b")
    p.set_defaults(handler=cmd_reproduce)

    p = sub.add_parser("agent", help="start the guest agent")
    p.add_argument("--listen", default=f"127.0.0.1:{DEFAULT_PORT}")
    p.add_argument("--mode", choices=["sandbox", "native"], default="sandbox")
    p.add_argument("--root", default=None)
    p.add_argument("--sys-vars", default=None, help="YAML mapping of system variables")
    p.add_argument("--screen-model", default=None)
    p.add_argument("--assets", default=None)
    p.add_argument("--cv-backend", default=None)
    p.set_defaults(handler=cmd_agent)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    load_dotenv(override=False)
    args = parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        config = load_config(args)
        return args.handler(args, config)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
