"""Playbook x environment matrix runs."""

import asyncio
import json
import logging
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

from tqdm import tqdm

from playbook.model import Playbook
from playbook.serializer import playbook_digest
from scripts.registry import AssertionRegistry

from .environments import EnvironmentSpec
from .report import RunReport, Verdict, compute_run_id, report_to_json, write_atomic
from .runner import FailurePolicy, run_experiment

logger = logging.getLogger(__name__)

Cell = Tuple[str, str]


@dataclass
class MatrixResult:
    cells: Dict[Cell, RunReport] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.cells)

    def worst_verdict(self) -> Optional[Verdict]:
        verdicts = {report.verdict for report in self.cells.values()}
        for verdict in (Verdict.ABORTED_ERROR, Verdict.TEST_FAILURES, Verdict.ALL_PASS):
            if verdict in verdicts:
                return verdict
        return None


async def run_matrix(
    playbooks: Sequence[Tuple[Union[str, Path], Playbook]],
    envs: Sequence[EnvironmentSpec],
    policy: FailurePolicy = FailurePolicy(),
    registry: Optional[AssertionRegistry] = None,
    parallelism: int = 1,
    author: Optional[str] = None,
    deadline_ms: Optional[int] = None,
    progress: bool = False,
) -> MatrixResult:
    """Run every playbook in every environment.

    Cells of one environment run one after another; distinct environments run
    concurrently up to ``parallelism``.
    """
    registry = registry or AssertionRegistry.core()
    result = MatrixResult()
    envs = _one_per_id(envs)
    gate = asyncio.Semaphore(max(1, parallelism))
    bar = tqdm(total=len(playbooks) * len(envs), desc="matrix", unit="run", file=sys.stderr, disable=not progress)

    async def column(env: EnvironmentSpec) -> None:
        async with gate:
            for source, pb in playbooks:
                label = _label(source)
                playbook_dir = Path(source).parent.resolve() if source else None
                try:
                    report = await run_experiment(
                        pb, env, policy, registry, author=author, playbook_dir=playbook_dir, deadline_ms=deadline_ms
                    )
                except Exception as e:
                    logger.exception("cell %s x %s crashed", label, env.id)
                    report = _crashed(pb, env, registry, author, e)
                result.cells[(label, env.id)] = report
                bar.update(1)

    try:
        await asyncio.gather(*(column(env) for env in envs))
    finally:
        bar.close()
    # gather completes in arbitrary order
    result.cells = {key: result.cells[key] for key in sorted(result.cells)}
    return result


def _one_per_id(envs: Sequence[EnvironmentSpec]) -> List[EnvironmentSpec]:
    seen: Dict[str, EnvironmentSpec] = {}
    for env in envs:
        if env.id in seen:
            logger.warning("environment '%s' listed more than once; running it once", env.id)
            continue
        seen[env.id] = env
    return list(seen.values())


def _label(source: Union[str, Path]) -> str:
    return Path(source).stem if source else "playbook"


def write_matrix(result: MatrixResult, directory: Union[str, Path]) -> Path:
    """One report per cell as ``<playbook>__<env>.json`` plus ``index.json``."""
    directory = Path(directory)
    index = []
    for (label, env_id), report in result.cells.items():
        name = f"{label}__{env_id}.json"
        write_atomic(directory / name, report_to_json(report))
        index.append(
            {
                "playbook": label,
                "environment": env_id,
                "report": name,
                "run_id": report.run_id,
                "verdict": report.verdict.value,
            }
        )
    return write_atomic(directory / "index.json", json.dumps({"cells": index}, sort_keys=True, indent=2) + "\n")


def summary_rows(result: MatrixResult) -> List[Tuple[str, str, str]]:
    return [(label, env_id, report.verdict.value) for (label, env_id), report in result.cells.items()]


def _crashed(pb: Playbook, env: EnvironmentSpec, registry: AssertionRegistry, author: Optional[str], error: Exception) -> RunReport:
    submitted_at = datetime.now(timezone.utc).isoformat()
    digest = playbook_digest(pb)
    return RunReport(
        run_id=compute_run_id(digest, env.id, submitted_at),
        author=author or pb.metadata.author,
        submitted_at=submitted_at,
        playbook_digest=digest,
        environment=env.to_dict(),
        verdict=Verdict.ABORTED_ERROR,
        registry_digest=registry.digest(),
        abort_reason=f"{type(error).__name__}: {error}",
    )
