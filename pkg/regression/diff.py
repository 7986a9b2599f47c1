"""
Classify differences between a baseline report and a candidate report.

Categories, in reporting order: report_missing, structural, row_added,
row_removed, cell_changed. Rows are paired by minimum total number of
differing cells; a pair with at most two differing cells is a modified row,
anything else is an added row plus a removed row.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import linear_sum_assignment

from .tabular import ReportMissing, Sheet, TabularReport

logger = logging.getLogger(__name__)

CATEGORIES = ("report_missing", "structural", "row_added", "row_removed", "cell_changed")

MAX_CHANGED_CELLS = 2
OPTIMAL_PAIR_LIMIT = 200 * 200


@dataclass(frozen=True)
class Finding:
    category: str
    sheet: Optional[str] = None
    # structural: sheet_added, sheet_removed, column_added, column_removed
    change: Optional[str] = None
    column: Optional[str] = None
    row: Optional[Tuple[str, ...]] = None
    row_key: Optional[int] = None
    baseline_value: Optional[str] = None
    candidate_value: Optional[str] = None

    def to_dict(self) -> dict:
        return {key: value for key, value in asdict(self).items() if value is not None}

    def __str__(self) -> str:
        if self.category == "report_missing":
            return "report missing"
        if self.category == "structural":
            target = f"column '{self.column}' in " if self.column else ""
            return f"{self.change}: {target}sheet '{self.sheet}'"
        if self.category == "cell_changed":
            return f"cell changed: '{self.sheet}' row {self.row_key} '{self.column}': {self.baseline_value!r} -> {self.candidate_value!r}"
        return f"{self.category.replace('_', ' ')}: '{self.sheet}' {list(self.row)}"


@dataclass
class DivergenceRecord:
    baseline_id: str
    candidate_id: str
    findings: List[Finding] = field(default_factory=list)

    def count(self, category: str) -> int:
        return sum(1 for finding in self.findings if finding.category == category)

    def counts(self) -> Dict[str, int]:
        return {category: self.count(category) for category in CATEGORIES}

    @property
    def empty(self) -> bool:
        return not self.findings

    def to_dict(self) -> dict:
        return {
            "baseline_id": self.baseline_id,
            "candidate_id": self.candidate_id,
            "counts": self.counts(),
            "findings": [finding.to_dict() for finding in self.findings],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def row_distance(a: Sequence[str], b: Sequence[str]) -> int:
    return sum(1 for x, y in zip(a, b) if x != y)


def _as_array(rows) -> np.ndarray:
    width = len(rows[0])
    array = np.empty((len(rows), width), dtype=object)
    for i, row in enumerate(rows):
        array[i, :] = row
    return array


def _cost_matrix(base_rows, cand_rows) -> np.ndarray:
    base, cand = _as_array(base_rows), _as_array(cand_rows)
    cost = (base[:, None, :] != cand[None, :, :]).sum(axis=2).astype(np.int64)
    # saturate so a rejected pairing can never beat an acceptable one on total cost
    return np.minimum(cost, MAX_CHANGED_CELLS + 1)


def _pair_optimal(base_rows, cand_rows) -> List[Tuple[int, int]]:
    cost = _cost_matrix(base_rows, cand_rows)
    rows, cols = linear_sum_assignment(cost)
    return [(int(b), int(c)) for b, c in zip(rows, cols) if cost[b, c] <= MAX_CHANGED_CELLS]


def _pair_greedy(base_rows, cand_rows) -> List[Tuple[int, int]]:
    pairs = []
    free_base = dict.fromkeys(range(len(base_rows)))
    free_cand = []
    exact: Dict[tuple, List[int]] = {}
    for index, row in enumerate(base_rows):
        exact.setdefault(row, []).append(index)
    for c, row in enumerate(cand_rows):
        matches = exact.get(row)
        if matches:
            b = matches.pop(0)
            del free_base[b]
            pairs.append((b, c))
        else:
            free_cand.append(c)
    for c in free_cand:
        best, best_cost = None, MAX_CHANGED_CELLS + 1
        for b in free_base:
            cost = row_distance(base_rows[b], cand_rows[c])
            if cost < best_cost:
                best, best_cost = b, cost
                if cost == 1:
                    break
        if best is not None:
            del free_base[best]
            pairs.append((best, c))
    return pairs


def pair_rows(base_rows: Sequence[tuple], cand_rows: Sequence[tuple]) -> List[Tuple[int, int]]:
    """Accepted (baseline index, candidate index) pairs, sorted by baseline index."""
    if not base_rows or not cand_rows:
        return []
    if len(base_rows) * len(cand_rows) <= OPTIMAL_PAIR_LIMIT:
        pairs = _pair_optimal(base_rows, cand_rows)
    else:
        logger.debug("greedy row pairing for %dx%d rows", len(base_rows), len(cand_rows))
        pairs = _pair_greedy(base_rows, cand_rows)
    return sorted(pairs)


def _compare_sheet(name: str, base: Sheet, cand: Sheet) -> List[Finding]:
    findings = []
    cand_columns = {column: i for i, column in reversed(list(enumerate(cand.header)))}
    base_columns = {column: i for i, column in reversed(list(enumerate(base.header)))}
    shared = [column for column in dict.fromkeys(base.header) if column in cand_columns]
    for column in dict.fromkeys(base.header):
        if column not in cand_columns:
            findings.append(Finding("structural", name, "column_removed", column=column))
    for column in dict.fromkeys(cand.header):
        if column not in base_columns:
            findings.append(Finding("structural", name, "column_added", column=column))

    base_rows = [tuple(row[base_columns[c]] for c in shared) for row in base.rows]
    cand_rows = [tuple(row[cand_columns[c]] for c in shared) for row in cand.rows]
    pairs = pair_rows(base_rows, cand_rows)

    for b, c in pairs:
        for column, old, new in zip(shared, base_rows[b], cand_rows[c]):
            if old != new:
                findings.append(Finding("cell_changed", name, column=column, row_key=b, baseline_value=old, candidate_value=new))
    paired_base = {b for b, _ in pairs}
    paired_cand = {c for _, c in pairs}
    for b, row in enumerate(base.rows):
        if b not in paired_base:
            findings.append(Finding("row_removed", name, row=row, row_key=b))
    for c, row in enumerate(cand.rows):
        if c not in paired_cand:
            findings.append(Finding("row_added", name, row=row, row_key=c))
    return findings


def compare(baseline: TabularReport, candidate: Union[TabularReport, ReportMissing]) -> DivergenceRecord:
    record = DivergenceRecord(baseline.report_id, candidate.report_id)
    if isinstance(candidate, ReportMissing):
        record.findings.append(Finding("report_missing"))
        return record
    for name in baseline.sheets:
        if name not in candidate.sheets:
            record.findings.append(Finding("structural", name, "sheet_removed"))
    for name in candidate.sheets:
        if name not in baseline.sheets:
            record.findings.append(Finding("structural", name, "sheet_added"))
    for name, sheet in baseline.sheets.items():
        if name in candidate.sheets:
            record.findings.extend(_compare_sheet(name, sheet, candidate.sheets[name]))
    return record
