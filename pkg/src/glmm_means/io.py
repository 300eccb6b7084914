"""CSV ingestion and report emission.

Input is RFC-4180-style CSV with a header row: a subject id column, a
response column, numeric covariate columns, and group-by columns whose
cartesian levels define the groups.  An intercept column is prepended to
the covariates automatically.  Parse problems raise InputError carrying
row/column diagnostics.

Numeric output is written at full precision in JSON and with 6 significant
digits in CSV.
"""

from __future__ import annotations

import csv
import json
import sys
from dataclasses import dataclass, field

import numpy as np

from .model import Dataset, SubjectBlock


class InputError(Exception):
    """Malformed or unreadable input (exit code 3 at the CLI)."""


@dataclass(frozen=True)
class ColumnMapping:
    subject: str = "subject_id"
    response: str = "y"
    covariates: tuple[str, ...] = ()
    group_by: tuple[str, ...] = ()


def _parse_cell(value: str, row: int, column: str) -> float:
    try:
        return float(value)
    except (TypeError, ValueError):
        raise InputError(
            f"row {row}, column {column!r}: cannot parse {value!r} as a number"
        ) from None


def read_dataset(path: str, mapping: ColumnMapping) -> Dataset:
    """Parse a CSV file into a Dataset, grouping rows by subject id.

    Subjects appear in order of first occurrence; rows keep file order
    within a subject.  Group labels are "col=value" pairs joined with
    commas, or "all" when no group-by columns are declared.
    """
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot open {path}: {exc.strerror or exc}") from None

    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise InputError(f"{path}: file is empty (no header row)")
        header = set(reader.fieldnames)
        needed = [mapping.subject, mapping.response, *mapping.covariates, *mapping.group_by]
        missing = [c for c in needed if c not in header]
        if missing:
            raise InputError(f"{path}: missing column(s) {', '.join(repr(c) for c in missing)}")

        order: list[str] = []
        rows_by_subject: dict[str, list[tuple[float, list[float], str]]] = {}
        n_rows = 0
        for i, rec in enumerate(reader, start=2):  # header is line 1
            n_rows += 1
            sid = rec[mapping.subject]
            if sid is None or sid == "":
                raise InputError(f"row {i}, column {mapping.subject!r}: empty subject id")
            yval = _parse_cell(rec[mapping.response], i, mapping.response)
            xvals = [1.0] + [_parse_cell(rec[c], i, c) for c in mapping.covariates]
            if mapping.group_by:
                label = ",".join(f"{c}={rec[c]}" for c in mapping.group_by)
            else:
                label = "all"
            if sid not in rows_by_subject:
                rows_by_subject[sid] = []
                order.append(sid)
            rows_by_subject[sid].append((yval, xvals, label))

        if n_rows == 0:
            raise InputError(f"{path}: file has a header but no data rows")

    subjects = []
    for sid in order:
        rows = rows_by_subject[sid]
        subjects.append(
            SubjectBlock(
                subject_id=sid,
                y=np.array([r[0] for r in rows]),
                X=np.array([r[1] for r in rows]),
                groups=tuple(r[2] for r in rows),
            )
        )
    return Dataset(subjects)


# ---- report writers ----------------------------------------------------------


def _csv_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return f"{value:.6g}"
    return str(value)


def write_rows_csv(rows: list[dict], fieldnames: list[str], out=None) -> str:
    lines = [",".join(fieldnames)]
    for row in rows:
        lines.append(",".join(_csv_cell(row.get(f)) for f in fieldnames))
    text = "\n".join(lines) + "\n"
    _emit(text, out)
    return text


def write_json(payload, out=None) -> str:
    text = json.dumps(payload, indent=2, sort_keys=True, allow_nan=True) + "\n"
    _emit(text, out)
    return text


def _emit(text: str, out) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        with open(out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
