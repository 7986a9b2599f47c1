"""End-to-end experiment runs against sandbox environments."""

import asyncio
import copy
import json
import os
import shutil
from collections import Counter
from datetime import datetime

import pytest

from conftest import LOCKSTEP, LOCKSTEP_DOUBLE, TRASH_EXPERIMENT, TRASH_WALKTHROUGH, run
from orchestrator.environments import BackendKind, EnvironmentRegistry, EnvironmentRegistryError, EnvironmentSpec, tree_digest
from orchestrator.matrix import run_matrix, summary_rows, write_matrix
from orchestrator.report import RunReport, Verdict, load_run_report, steps_sequential, write_report
from orchestrator.reproduce import ReproStatus, reproduce_check
from orchestrator.runner import FailurePolicy, Policy, run_experiment
from playbook import parse_playbook, parse_playbook_file

ABORT_ON_FAIL = FailurePolicy(on_test_fail=Policy.ABORT)


def execute(playbook, env, **kwargs):
    return run(run_experiment(playbook, env, **kwargs))


def statuses(report: RunReport):
    return [(step.description, step.status) for step in report.steps if step.kind == "test"]


class TestEnvironmentRegistry:
    def test_fixture_environments(self, environments):
        assert [env.id for env in environments] == [
            "ubuntu_sandbox",
            "ubuntu_sandbox_no_trashinfo",
            "headless_sandbox",
            "kde_sandbox",
            "unreachable_vm",
        ]
        ubuntu = environments.get("ubuntu_sandbox")
        assert ubuntu.backend is BackendKind.SANDBOX
        assert os.path.isabs(ubuntu.params["screen_model"])
        assert environments.sys_var_names("kde_sandbox") == {"adare_user_home", "adare_user_documents"}

    def test_unknown_environment(self, environments):
        with pytest.raises(EnvironmentRegistryError):
            environments.get("windows_xp")

    @pytest.mark.parametrize(
        "text",
        [
            "environments: {}\n",
            "environments:\n  - backend: sandbox\n",
            "environments:\n  - {id: a}\n  - {id: a}\n",
            "environments:\n  - {id: a, backend: docker}\n",
            "environments:\n  - {id: a, backend: vm_snapshot, params: {machine_name: m}}\n",
        ],
    )
    def test_invalid_registries(self, tmp_path, text):
        path = tmp_path / "environments.yaml"
        path.write_text(text)
        with pytest.raises(EnvironmentRegistryError):
            EnvironmentRegistry.load(path)

    def test_tree_digest_tracks_content(self, tmp_path):
        (tmp_path / "a").mkdir()
        (tmp_path / "a" / "f.txt").write_text("1")
        first = tree_digest(tmp_path)
        assert tree_digest(tmp_path) == first
        (tmp_path / "a" / "f.txt").write_text("2")
        assert tree_digest(tmp_path) != first


class TestTrashExperiment:
    def test_trash_walkthrough_passes(self, trash_walkthrough, environments, registry):
        report = execute(trash_walkthrough, environments.get("ubuntu_sandbox"), registry=registry)
        assert report.verdict is Verdict.ALL_PASS, report.abort_reason
        assert len(report.steps) == 7
        assert [step.kind for step in report.steps] == ["command", "click", "click", "click", "click", "test", "test"]
        assert statuses(report) == [("test file_in_trash", "pass"), ("test trashinfo_exists", "pass")]
        assert report.steps[1].outcome["element"] == "files_icon"
        assert report.abort_reason is None
        assert steps_sequential(report)

    def test_missing_trashinfo_fails_only_that_test(self, trash_walkthrough, environments):
        report = execute(trash_walkthrough, environments.get("ubuntu_sandbox_no_trashinfo"))
        assert report.verdict is Verdict.TEST_FAILURES
        assert statuses(report) == [("test file_in_trash", "pass"), ("test trashinfo_exists", "fail")]

    def test_full_experiment_with_captured_time(self, environments):
        pb = parse_playbook_file(TRASH_EXPERIMENT)
        report = execute(pb, environments.get("ubuntu_sandbox"))
        assert report.verdict is Verdict.ALL_PASS, [(s.description, s.outcome) for s in report.steps]
        assert len(report.steps) == 11
        assert report.author == "lab-a"
        assert report.metadata["title"].startswith("Trash artifacts")
        assert set(report.captured_variables) == {"del_time"}
        captured = report.steps[5]
        assert captured.kind == "capture_time"
        assert captured.outcome == {"variable": "del_time", "value": report.captured_variables["del_time"]}
        assert datetime.fromisoformat(report.captured_variables["del_time"]).tzinfo is not None

    def test_abort_policy_stops_after_failed_test(self, environments):
        pb = parse_playbook_file(TRASH_EXPERIMENT)
        report = execute(pb, environments.get("ubuntu_sandbox_no_trashinfo"), policy=ABORT_ON_FAIL)
        assert report.verdict is Verdict.TEST_FAILURES
        assert len(report.steps) == 9
        assert report.steps[-1].description == "test trashinfo_exists"
        assert "policy" in report.abort_reason

    def test_without_gui_driver_the_run_aborts(self, trash_walkthrough, environments):
        report = execute(trash_walkthrough, environments.get("headless_sandbox"))
        assert report.verdict is Verdict.ABORTED_ERROR
        assert [step.status for step in report.steps] == ["ok", "error"]
        assert report.steps[1].outcome["class"] == "gui_unavailable"

    def test_author_override_and_run_id(self, trash_walkthrough, environments):
        report = execute(trash_walkthrough, environments.get("ubuntu_sandbox"), author="examiner-7")
        assert report.author == "examiner-7"
        assert len(report.run_id) == 64
        assert report.environment["id"] == "ubuntu_sandbox"

    def test_assertions_leave_sandbox_untouched(self, environments, watched_registry):
        for playbook in (TRASH_WALKTHROUGH, TRASH_EXPERIMENT):
            report = execute(parse_playbook_file(playbook), environments.get("ubuntu_sandbox"), registry=watched_registry)
            assert report.abort_reason is None
        assert watched_registry.evaluations > 2
        assert watched_registry.mutations == []


class TestLockstep:
    def test_counter_tracks_iterations(self, environments):
        report = execute(parse_playbook_file(LOCKSTEP), environments.get("headless_sandbox"))
        assert report.verdict is Verdict.ALL_PASS, report.abort_reason
        assert len(report.steps) == 41
        results = statuses(report)
        assert results.count(("test counter_matches_iteration", "pass")) == 10
        assert results.count(("test counter_written_now", "pass")) == 10
        assert steps_sequential(report)

    def test_double_increment_breaks_later_iterations(self, environments):
        report = execute(parse_playbook_file(LOCKSTEP_DOUBLE), environments.get("headless_sandbox"))
        assert report.verdict is Verdict.TEST_FAILURES
        assert len(report.steps) == 42
        matches = [step for step in report.steps if step.description == "test counter_matches_iteration"]
        assert [step.status for step in matches] == ["pass"] * 5 + ["fail"] * 5
        failed_iterations = [step.request["parameters"]["pattern"] for step in matches if step.status == "fail"]
        assert failed_iterations == ["^6$", "^7$", "^8$", "^9$", "^10$"]

    def test_step_paths_are_unique(self, environments):
        report = execute(parse_playbook_file(LOCKSTEP), environments.get("headless_sandbox"))
        paths = [step.path for step in report.steps]
        assert len(set(paths)) == len(paths)
        assert [step.index for step in report.steps] == list(range(41))

    def test_assertions_leave_sandbox_untouched(self, environments, watched_registry):
        for playbook in (LOCKSTEP, LOCKSTEP_DOUBLE):
            report = execute(parse_playbook_file(playbook), environments.get("headless_sandbox"), registry=watched_registry)
            assert report.abort_reason is None
        assert watched_registry.evaluations == 40
        assert watched_registry.mutations == []


class TestFailureHandling:
    NONZERO = """
tests:
  - {name: home_exists, function: file_exists, parameter: {dst: "{{ adare_user_home }}"}}
actions:
  - command: {command: "exit 4", shell: true}
  - test: home_exists
"""

    def test_nonzero_exit_continues_by_default(self, environments):
        report = execute(parse_playbook(self.NONZERO), environments.get("headless_sandbox"))
        assert report.verdict is Verdict.ALL_PASS
        assert report.steps[0].outcome["exit_code"] == 4
        assert report.steps[0].status == "ok"

    def test_nonzero_exit_can_abort(self, environments):
        policy = FailurePolicy(on_nonzero_exit=Policy.ABORT)
        report = execute(parse_playbook(self.NONZERO), environments.get("headless_sandbox"), policy=policy)
        assert report.verdict is Verdict.ABORTED_ERROR
        assert len(report.steps) == 1
        assert report.steps[0].status == "error"

    def test_unset_dynamic_variable_aborts(self, environments):
        pb = parse_playbook(
            """
variables:
  later: {type: dynamic}
actions:
  - command: {command: "echo {{ later }}", shell: true}
  - capture_time: {into: later}
"""
        )
        report = execute(pb, environments.get("headless_sandbox"))
        assert report.verdict is Verdict.ABORTED_ERROR
        assert len(report.steps) == 1
        assert report.steps[0].outcome["class"] == "template_error"
        assert report.captured_variables == {}

    def test_predicate_on_unset_variable_aborts(self, environments):
        pb = parse_playbook(
            """
variables:
  t: {type: dynamic}
actions:
  - if: {condition: {variable: t, op: "==", value: 1}, then: [{wait: {duration_ms: 0}}]}
"""
        )
        report = execute(pb, environments.get("headless_sandbox"))
        assert report.verdict is Verdict.ABORTED_ERROR
        assert report.steps == []
        assert report.abort_reason.startswith("cursor")

    def test_missed_deadline_aborts(self, environments):
        pb = parse_playbook("actions:\n  - command: {command: 'sleep 1', shell: true}\n  - wait: {duration_ms: 0}\n")
        report = execute(pb, environments.get("headless_sandbox"), deadline_ms=50)
        assert report.verdict is Verdict.ABORTED_ERROR
        assert len(report.steps) == 1
        assert report.steps[0].outcome["class"] == "deadline_exceeded"

    def test_unreachable_environment(self, trash_walkthrough, environments):
        report = execute(trash_walkthrough, environments.get("unreachable_vm"))
        assert report.verdict is Verdict.ABORTED_ERROR
        assert report.steps == []
        assert "unreachable" in report.abort_reason
        assert report.clean_state_digest is not None

    def test_missing_screen_model_aborts(self, trash_walkthrough, tmp_path):
        path = tmp_path / "environments.yaml"
        path.write_text(
            "environments:\n  - id: broken\n    backend: sandbox\n    params: {screen_model: missing.yaml}\n"
            "    sys_vars: {adare_user_home: h, adare_user_documents: h/D}\n"
        )
        report = execute(trash_walkthrough, EnvironmentRegistry.load(path).get("broken"))
        assert report.verdict is Verdict.ABORTED_ERROR
        assert report.steps == []


class TestSandboxLifecycle:
    def test_sandbox_is_removed(self, trash_walkthrough, environments):
        report = execute(trash_walkthrough, environments.get("ubuntu_sandbox"))
        assert report.sandbox_root is not None
        assert not os.path.exists(report.sandbox_root)

    def test_sandbox_can_be_kept(self, trash_walkthrough, environments):
        report = execute(trash_walkthrough, environments.get("ubuntu_sandbox"), keep_sandbox=True)
        try:
            trash = os.path.join(report.sandbox_root, "home", "user", ".local", "share", "Trash")
            assert os.path.exists(os.path.join(trash, "files", "secret.txt"))
        finally:
            shutil.rmtree(report.sandbox_root, ignore_errors=True)

    def test_clean_state_is_identical(self, trash_walkthrough, environments):
        env = environments.get("ubuntu_sandbox")
        first, second = execute(trash_walkthrough, env), execute(trash_walkthrough, env)
        assert first.clean_state_digest == second.clean_state_digest
        assert first.sandbox_root != second.sandbox_root

    def test_layout_follows_environment(self, environments):
        pb = parse_playbook(
            """
variables:
  target: {type: path, value: "{{ adare_user_documents }}/note.txt"}
tests:
  - {name: written, function: file_contains, parameter: {dst: "{{ target }}", pattern: kde}}
actions:
  - command: {command: "echo kde > {{ target }}", shell: true}
  - test: written
"""
        )
        report = execute(pb, environments.get("kde_sandbox"))
        assert report.verdict is Verdict.ALL_PASS
        assert report.steps[1].request["parameters"]["dst"].endswith("users/kde/Dokumente/note.txt")

    def test_share_file_both_ways(self, environments, tmp_path):
        (tmp_path / "payload.bin").write_bytes(b"\x00evidence\xff" * 1000)
        pb = parse_playbook(
            """
tests:
  - {name: arrived, function: file_exists, parameter: {dst: "{{ adare_user_home }}/payload.bin"}}
actions:
  - share_file: {direction: host_to_guest, src: payload.bin, dst: "{{ adare_user_home }}/payload.bin"}
  - test: arrived
  - share_file: {direction: guest_to_host, src: "{{ adare_user_home }}/payload.bin", dst: returned/payload.bin}
"""
        )
        report = execute(pb, environments.get("headless_sandbox"), playbook_dir=tmp_path)
        assert report.verdict is Verdict.ALL_PASS, report.abort_reason
        assert (tmp_path / "returned" / "payload.bin").read_bytes() == (tmp_path / "payload.bin").read_bytes()
        assert report.steps[0].outcome["bytes"] == 10_000
        assert len(report.agent_touched_paths) == 1
        assert report.agent_touched_paths[0].endswith("home/user/payload.bin")

    def test_report_round_trip(self, trash_walkthrough, environments, tmp_path):
        report = execute(trash_walkthrough, environments.get("ubuntu_sandbox"))
        path = write_report(report, tmp_path)
        assert path.name.startswith("ubuntu_sandbox-")
        assert load_run_report(path) == report
        data = json.loads(path.read_text())
        assert data["report_version"] == 1
        assert data["verdict"] == "all_pass"


class TestReproduce:
    def test_same_run_reproduces(self, trash_walkthrough, environments):
        env = environments.get("ubuntu_sandbox")
        verdict = reproduce_check(execute(trash_walkthrough, env), execute(trash_walkthrough, env))
        assert verdict.status is ReproStatus.REPRODUCED, verdict.differences
        assert verdict.exit_code == 0

    def test_lockstep_reproduces(self, environments):
        env = environments.get("headless_sandbox")
        pb = parse_playbook_file(LOCKSTEP_DOUBLE)
        verdict = reproduce_check(execute(pb, env), execute(pb, env))
        assert verdict.status is ReproStatus.REPRODUCED, verdict.differences

    def test_changed_outcome_diverges(self, trash_walkthrough, environments):
        report = execute(trash_walkthrough, environments.get("ubuntu_sandbox"))
        tampered = copy.deepcopy(report)
        tampered.steps[-1].status = "fail"
        tampered.steps[-1].outcome["status"] = "fail"
        tampered.verdict = Verdict.TEST_FAILURES
        verdict = reproduce_check(report, tampered)
        assert verdict.status is ReproStatus.DIVERGED
        assert verdict.exit_code == 1
        assert any(d.startswith("verdict") for d in verdict.differences)
        assert "steps[6].status: 'pass' != 'fail'" in verdict.differences

    def test_other_environment_is_not_comparable(self, trash_walkthrough, environments):
        a = execute(trash_walkthrough, environments.get("ubuntu_sandbox"))
        b = execute(trash_walkthrough, environments.get("ubuntu_sandbox_no_trashinfo"))
        verdict = reproduce_check(a, b)
        assert verdict.status is ReproStatus.NOT_COMPARABLE
        assert verdict.exit_code == 2

    def test_other_playbook_is_not_comparable(self, environments):
        env = environments.get("headless_sandbox")
        a = execute(parse_playbook_file(LOCKSTEP), env)
        b = execute(parse_playbook_file(LOCKSTEP_DOUBLE), env)
        assert reproduce_check(a, b).differences == ["playbook_digest"]


class TestMatrix:
    def test_one_playbook_three_environments(self, trash_walkthrough, environments, tmp_path):
        envs = [environments.get(name) for name in ("ubuntu_sandbox", "ubuntu_sandbox_no_trashinfo", "headless_sandbox")]
        result = run(run_matrix([(TRASH_WALKTHROUGH, trash_walkthrough)], envs, parallelism=3))
        assert len(result) == 3
        assert summary_rows(result) == [
            ("trash_walkthrough", "headless_sandbox", "aborted_error"),
            ("trash_walkthrough", "ubuntu_sandbox", "all_pass"),
            ("trash_walkthrough", "ubuntu_sandbox_no_trashinfo", "test_failures"),
        ]
        assert result.worst_verdict() is Verdict.ABORTED_ERROR
        roots = {report.sandbox_root for report in result.cells.values()}
        assert len(roots) == 3

        index_path = write_matrix(result, tmp_path)
        index = json.loads(index_path.read_text())
        assert len(index["cells"]) == 3
        for cell in index["cells"]:
            stored = load_run_report(tmp_path / cell["report"])
            assert stored.verdict.value == cell["verdict"]
            assert stored.environment_id == cell["environment"]

    def test_matrix_cells_match_single_runs(self, environments):
        envs = [environments.get("headless_sandbox"), environments.get("kde_sandbox")]
        playbooks = [(LOCKSTEP, parse_playbook_file(LOCKSTEP)), (LOCKSTEP_DOUBLE, parse_playbook_file(LOCKSTEP_DOUBLE))]
        result = run(run_matrix(playbooks, envs, parallelism=2))
        assert len(result) == 4
        for env in envs:
            assert result.cells[("lockstep", env.id)].verdict is Verdict.ALL_PASS
            assert result.cells[("lockstep_double_increment", env.id)].verdict is Verdict.TEST_FAILURES

    def test_empty_matrix(self, trash_walkthrough):
        result = run(run_matrix([(TRASH_WALKTHROUGH, trash_walkthrough)], []))
        assert len(result) == 0
        assert result.worst_verdict() is None

    def test_unbuildable_environment_still_gets_a_cell(self, environments, tmp_path):
        bad_addr = EnvironmentSpec(
            id="vm_bad_addr",
            backend=BackendKind.VM_SNAPSHOT,
            params={"machine_name": "m", "snapshot_name": "s", "connect_addr": "host:notaport"},
        )
        envs = [bad_addr, environments.get("headless_sandbox")]
        result = run(run_matrix([(LOCKSTEP, parse_playbook_file(LOCKSTEP))], envs))
        assert len(result) == 2
        crashed = result.cells[("lockstep", "vm_bad_addr")]
        assert crashed.verdict is Verdict.ABORTED_ERROR
        assert crashed.abort_reason.startswith("ProvisioningError")
        assert crashed.steps == []
        assert result.cells[("lockstep", "headless_sandbox")].verdict is Verdict.ALL_PASS
        index = json.loads(write_matrix(result, tmp_path).read_text())
        assert {cell["environment"] for cell in index["cells"]} == {"vm_bad_addr", "headless_sandbox"}

    def test_crashing_cell_is_recorded(self, environments, monkeypatch):
        real = run_experiment

        async def crash_on_kde(pb, env, *args, **kwargs):
            if env.id == "kde_sandbox":
                raise RuntimeError("agent binary vanished")
            return await real(pb, env, *args, **kwargs)

        monkeypatch.setattr("orchestrator.matrix.run_experiment", crash_on_kde)
        envs = [environments.get("headless_sandbox"), environments.get("kde_sandbox")]
        playbooks = [(LOCKSTEP, parse_playbook_file(LOCKSTEP)), (LOCKSTEP_DOUBLE, parse_playbook_file(LOCKSTEP_DOUBLE))]
        result = run(run_matrix(playbooks, envs, parallelism=2))
        assert len(result) == 4
        for label in ("lockstep", "lockstep_double_increment"):
            crashed = result.cells[(label, "kde_sandbox")]
            assert crashed.verdict is Verdict.ABORTED_ERROR
            assert crashed.abort_reason == "RuntimeError: agent binary vanished"
            assert crashed.environment_id == "kde_sandbox"
            assert len(crashed.run_id) == 64
        assert result.cells[("lockstep", "headless_sandbox")].verdict is Verdict.ALL_PASS
        assert result.worst_verdict() is Verdict.ABORTED_ERROR

    def test_environment_cells_never_overlap(self, environments, monkeypatch):
        real = run_experiment
        active, peak = Counter(), Counter()

        async def tracked(pb, env, *args, **kwargs):
            active[env.id] += 1
            peak[env.id] = max(peak[env.id], active[env.id])
            try:
                await asyncio.sleep(0.01)
                return await real(pb, env, *args, **kwargs)
            finally:
                active[env.id] -= 1

        monkeypatch.setattr("orchestrator.matrix.run_experiment", tracked)
        headless = environments.get("headless_sandbox")
        playbooks = [(LOCKSTEP, parse_playbook_file(LOCKSTEP)), (LOCKSTEP_DOUBLE, parse_playbook_file(LOCKSTEP_DOUBLE))]
        result = run(run_matrix(playbooks, [headless, headless, environments.get("kde_sandbox")], parallelism=3))
        assert sorted(result.cells) == [
            ("lockstep", "headless_sandbox"),
            ("lockstep", "kde_sandbox"),
            ("lockstep_double_increment", "headless_sandbox"),
            ("lockstep_double_increment", "kde_sandbox"),
        ]
        assert peak == Counter({"headless_sandbox": 1, "kde_sandbox": 1})
