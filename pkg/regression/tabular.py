"""
Tabular tool reports in normalized form.

A report is a directory `<tool>-<version>/` with one `<Sheet Name>.csv` per
sheet (UTF-8, first line is the header), or a JSON file
`{"report_id": ..., "sheets": [{"name", "header", "rows"}]}`.
Cells are trimmed and NFC-normalized on load.
"""

import json
import logging
import re
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple, Union

import pandas as pd

logger = logging.getLogger(__name__)


class RegressionError(Exception):
    pass


class ReportLoadError(RegressionError):
    def __init__(self, sheet: str, row: int, message: str):
        super().__init__(f"sheet '{sheet}', row {row}: {message}")
        self.sheet = sheet
        self.row = row


@dataclass(frozen=True)
class Sheet:
    header: Tuple[str, ...]
    rows: Tuple[Tuple[str, ...], ...] = ()


@dataclass(frozen=True)
class TabularReport:
    report_id: str
    sheets: Dict[str, Sheet] = field(default_factory=dict)


@dataclass(frozen=True)
class ReportMissing:
    report_id: str


def normalize_cell(value) -> str:
    return unicodedata.normalize("NFC", str(value).strip())


def _sheet_from_rows(name: str, raw_rows: List[list]) -> Sheet:
    if not raw_rows:
        return Sheet(())
    header = tuple(normalize_cell(cell) for cell in raw_rows[0])
    rows = []
    for index, raw in enumerate(raw_rows[1:]):
        if len(raw) != len(header):
            raise ReportLoadError(name, index, f"{len(raw)} cells under a {len(header)}-column header")
        rows.append(tuple(normalize_cell(cell) for cell in raw))
    return Sheet(header, tuple(rows))


_LINE_IN_MESSAGE = re.compile(r"line (\d+)")


def read_sheet_csv(path: Union[str, Path]) -> Sheet:
    path = Path(path)
    name = path.stem
    try:
        frame = pd.read_csv(
            path, header=None, dtype=str, keep_default_na=False, skip_blank_lines=False, encoding="utf-8"
        )
    except pd.errors.EmptyDataError:
        return Sheet(())
    except pd.errors.ParserError as e:
        # pandas reports the 1-based file line; header is line 1
        match = _LINE_IN_MESSAGE.search(str(e))
        row = int(match.group(1)) - 2 if match else -1
        raise ReportLoadError(name, row, "more cells than the header") from None
    raw_rows = []
    for values in frame.itertuples(index=False, name=None):
        # short rows come back padded with NaN; empty cells stay ""
        cells = [value for value in values if isinstance(value, str)]
        if not any(cells):
            # blank line: a record whose cells are all empty
            cells = [""] * len(values)
        raw_rows.append(cells)
    return _sheet_from_rows(name, raw_rows)


def _load_directory(path: Path) -> Union[TabularReport, ReportMissing]:
    files = sorted(path.glob("*.csv"))
    if not files:
        return ReportMissing(path.name)
    sheets = {file.stem: read_sheet_csv(file) for file in files}
    if all(not sheet.header for sheet in sheets.values()):
        return ReportMissing(path.name)
    return TabularReport(path.name, sheets)


def _load_json(path: Path) -> Union[TabularReport, ReportMissing]:
    with open(path, "r", encoding="utf-8") as fh:
        document = json.load(fh)
    report_id = str(document.get("report_id") or path.stem)
    entries = document.get("sheets") or []
    if not entries:
        return ReportMissing(report_id)
    sheets = {}
    for entry in entries:
        name = normalize_cell(entry["name"])
        if name in sheets:
            raise RegressionError(f"{path}: duplicate sheet '{name}'")
        sheets[name] = _sheet_from_rows(name, [list(entry.get("header") or [])] + [list(row) for row in entry.get("rows") or []])
    return TabularReport(report_id, sheets)


def load_report(source: Union[str, Path, None]) -> Union[TabularReport, ReportMissing]:
    """Load a report; an absent or empty source is ReportMissing, not an error."""
    if source is None:
        return ReportMissing("")
    path = Path(source)
    if not path.exists():
        logger.info("report %s is absent", path)
        return ReportMissing(path.stem if path.suffix == ".json" else path.name)
    if path.is_dir():
        return _load_directory(path)
    return _load_json(path)
