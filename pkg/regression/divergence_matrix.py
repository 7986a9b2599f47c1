"""Per-version divergence counts against one baseline."""

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Sequence

import pandas as pd

from .diff import CATEGORIES, DivergenceRecord
from .tabular import RegressionError

TOTAL_LABEL = "total"


class MatrixFormat(str, Enum):
    TEXT_TABLE = "text_table"
    CSV = "csv"


@dataclass
class DivergenceMatrix:
    baseline_id: str = ""
    versions: List[str] = field(default_factory=list)
    counts: Dict[str, Dict[str, int]] = field(default_factory=dict)

    def count(self, version: str, category: str) -> int:
        return self.counts[version][category]

    def totals(self) -> Dict[str, int]:
        return {category: sum(self.counts[v][category] for v in self.versions) for category in CATEGORIES}

    def to_frame(self) -> pd.DataFrame:
        rows = [[version] + [self.counts[version][c] for c in CATEGORIES] for version in self.versions]
        if len(rows) > 1:
            totals = self.totals()
            rows.append([TOTAL_LABEL] + [totals[c] for c in CATEGORIES])
        return pd.DataFrame(rows, columns=["version", *CATEGORIES])


def aggregate(records: Sequence[DivergenceRecord]) -> DivergenceMatrix:
    """Count findings per category for every candidate, in input order."""
    baselines = {record.baseline_id for record in records}
    if len(baselines) > 1:
        raise RegressionError(f"records compare against different baselines: {sorted(baselines)}")
    matrix = DivergenceMatrix(baselines.pop() if baselines else "")
    for record in records:
        counts = record.counts()
        if record.candidate_id in matrix.counts:
            # the same version may be compared in several batches
            previous = matrix.counts[record.candidate_id]
            counts = {c: previous[c] + counts[c] for c in CATEGORIES}
        else:
            matrix.versions.append(record.candidate_id)
        matrix.counts[record.candidate_id] = counts
    return matrix


def render_matrix(matrix: DivergenceMatrix, fmt: MatrixFormat = MatrixFormat.TEXT_TABLE) -> bytes:
    """One row per version in input order, then a total row when there are two or more versions."""
    fmt = MatrixFormat(fmt)
    frame = matrix.to_frame()
    if fmt is MatrixFormat.CSV:
        return frame.to_csv(index=False, lineterminator="\n").encode("utf-8")
    if frame.empty:
        return ("  ".join(frame.columns) + "\n").encode("utf-8")
    return (frame.to_string(index=False) + "\n").encode("utf-8")
