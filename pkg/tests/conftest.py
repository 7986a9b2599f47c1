import asyncio
import os
from pathlib import Path

import pytest

from orchestrator.environments import EnvironmentRegistry, tree_digest
from playbook import parse_playbook_file
from scripts.registry import AssertionRegistry

FIXTURES = Path(__file__).parent / "fixtures"

TRASH_WALKTHROUGH = FIXTURES / "trash_walkthrough.yaml"
TRASH_EXPERIMENT = FIXTURES / "trash_experiment.yaml"
LOCKSTEP = FIXTURES / "lockstep.yaml"
LOCKSTEP_DOUBLE = FIXTURES / "lockstep_double_increment.yaml"
ENVIRONMENTS = FIXTURES / "environments.yaml"

TRASH_SYS_VARS = {"adare_user_documents", "adare_user_home"}

running_as_root = pytest.mark.skipif(
    hasattr(os, "geteuid") and os.geteuid() == 0, reason="permission bits are not enforced for root"
)


def run(coro):
    return asyncio.run(coro)


@pytest.fixture(scope="session")
def registry() -> AssertionRegistry:
    return AssertionRegistry.core()


@pytest.fixture(scope="session")
def environments() -> EnvironmentRegistry:
    return EnvironmentRegistry.load(ENVIRONMENTS)


@pytest.fixture
def trash_walkthrough():
    return parse_playbook_file(TRASH_WALKTHROUGH)


@pytest.fixture
def evaluate(registry):
    """Evaluate one core assertion with plain (already rendered) parameters."""

    def _evaluate(function, **parameters):
        return registry.evaluate("t", function, parameters)

    return _evaluate


class WatchedRegistry(AssertionRegistry):
    """Hashes the sandbox tree around every evaluation and records the tests that changed it."""

    def __init__(self):
        super().__init__()
        self.evaluations = 0
        self.mutations = []

    def evaluate(self, test_name, function, parameters, resolve_path=None):
        root = resolve_path(".") if resolve_path is not None else None
        before = tree_digest(root) if root is not None else None
        result = super().evaluate(test_name, function, parameters, resolve_path)
        self.evaluations += 1
        if root is not None and tree_digest(root) != before:
            self.mutations.append(test_name)
        return result


@pytest.fixture
def watched_registry() -> WatchedRegistry:
    return WatchedRegistry.core()
