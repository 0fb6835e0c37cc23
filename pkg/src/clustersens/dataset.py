"""Long-format clustered observational data: ingestion, validation, strata checks.

A dataset is an immutable collection of (cluster, outcome, treatment,
covariate) records. ``truth_u`` is a simulation-only column carrying the
generated unmeasured confounder; it is never placed in a fitting design
matrix.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import SchemaError, ValidationError

REQUIRED_COLUMNS = ("cluster_id", "outcome", "treatment", "covariate_x")
OPTIONAL_COLUMNS = ("study_id", "truth_u")
SCALES = ("continuous", "binary")


@dataclass(frozen=True)
class ObservationRecord:
    cluster_id: str
    unit_index: int  # ordinal within its cluster, assigned on construction
    outcome: float
    treatment: int
    covariate_x: float
    study_id: Optional[str] = None
    truth_u: Optional[float] = None


@dataclass(frozen=True)
class ClusteredDataset:
    records: tuple[ObservationRecord, ...]
    scale: str
    cluster_count: int
    study_count: int

    @staticmethod
    def from_records(records: Sequence[ObservationRecord], scale: str) -> "ClusteredDataset":
        if scale not in SCALES:
            raise ValidationError(f"unknown scale {scale!r}; expected one of {SCALES}")
        if not records:
            raise ValidationError("dataset has no records")
        has_study = records[0].study_id is not None
        has_truth = records[0].truth_u is not None
        clusters: list[str] = []
        seen = set()
        for i, rec in enumerate(records, start=1):
            if rec.treatment not in (0, 1):
                raise ValidationError(f"treatment must be 0 or 1, got {rec.treatment!r} at row {i}")
            if not math.isfinite(rec.outcome):
                raise ValidationError(f"non-finite outcome at row {i}")
            if scale == "binary" and rec.outcome not in (0.0, 1.0):
                raise ValidationError(
                    f"binary-scale outcome must be 0 or 1, got {rec.outcome!r} at row {i}"
                )
            if not math.isfinite(rec.covariate_x):
                raise ValidationError(f"non-finite covariate_x at row {i}")
            if (rec.study_id is not None) != has_study:
                raise ValidationError(f"study_id present for some records but not row {i}")
            if (rec.truth_u is not None) != has_truth:
                raise ValidationError(f"truth_u present for some records but not row {i}")
            if rec.cluster_id not in seen:
                seen.add(rec.cluster_id)
                clusters.append(rec.cluster_id)
        if has_study:
            study_count = len({rec.study_id for rec in records})
        else:
            study_count = 1
        return ClusteredDataset(
            records=tuple(records),
            scale=scale,
            cluster_count=len(clusters),
            study_count=study_count,
        )

    @property
    def has_truth_u(self) -> bool:
        return self.records[0].truth_u is not None

    @property
    def has_study_id(self) -> bool:
        return self.records[0].study_id is not None

    def to_arrays(self):
        """Outcome, treatment, covariate vectors plus integer cluster codes.

        Cluster codes follow first appearance order. truth_u is deliberately
        not returned: fitting code cannot see it.
        """
        n = len(self.records)
        y = np.empty(n)
        a = np.empty(n)
        x = np.empty(n)
        codes = np.empty(n, dtype=np.int64)
        index: dict[str, int] = {}
        for i, rec in enumerate(self.records):
            y[i] = rec.outcome
            a[i] = rec.treatment
            x[i] = rec.covariate_x
            codes[i] = index.setdefault(rec.cluster_id, len(index))
        return y, a, x, codes


def _parse_float(text: str, column: str, row: int) -> float:
    try:
        return float(text)
    except ValueError as exc:
        raise ValidationError(f"cannot parse {column}={text!r} as a number at row {row}") from exc


def load_csv(path, scale: str) -> ClusteredDataset:
    """Read a comma-delimited UTF-8 file with a header row into a dataset.

    Required columns: cluster_id, outcome, treatment, covariate_x.
    Optional: study_id, truth_u. Row order is preserved; missing values
    are rejected.
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise SchemaError(f"{path}: empty file, header row required")
        for col in REQUIRED_COLUMNS:
            if col not in reader.fieldnames:
                raise SchemaError(f"{path}: missing required column {col!r}")
        has_study = "study_id" in reader.fieldnames
        has_truth = "truth_u" in reader.fieldnames
        records: list[ObservationRecord] = []
        counters: dict[str, int] = {}
        for row_num, row in enumerate(reader, start=1):
            for col in REQUIRED_COLUMNS + tuple(c for c in OPTIONAL_COLUMNS if c in reader.fieldnames):
                if row.get(col) is None or row[col] == "":
                    raise ValidationError(f"missing value for {col!r} at row {row_num}")
            treatment_raw = _parse_float(row["treatment"], "treatment", row_num)
            if treatment_raw not in (0.0, 1.0):
                raise ValidationError(
                    f"treatment must be 0 or 1, got {row['treatment']!r} at row {row_num}"
                )
            cluster_id = row["cluster_id"]
            unit = counters.get(cluster_id, 0)
            counters[cluster_id] = unit + 1
            records.append(
                ObservationRecord(
                    cluster_id=cluster_id,
                    unit_index=unit,
                    outcome=_parse_float(row["outcome"], "outcome", row_num),
                    treatment=int(treatment_raw),
                    covariate_x=_parse_float(row["covariate_x"], "covariate_x", row_num),
                    study_id=row["study_id"] if has_study else None,
                    truth_u=_parse_float(row["truth_u"], "truth_u", row_num) if has_truth else None,
                )
            )
    return ClusteredDataset.from_records(records, scale)


def write_csv(ds: ClusteredDataset, path) -> None:
    """Inverse of load_csv: field-for-field round trip on valid datasets."""
    columns = list(REQUIRED_COLUMNS)
    if ds.has_study_id:
        columns.append("study_id")
    if ds.has_truth_u:
        columns.append("truth_u")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for rec in ds.records:
            row = [rec.cluster_id, repr(rec.outcome), rec.treatment, repr(rec.covariate_x)]
            if ds.has_study_id:
                row.append(rec.study_id)
            if ds.has_truth_u:
                row.append(repr(rec.truth_u))
            writer.writerow(row)


@dataclass(frozen=True)
class PositivityStratum:
    covariate_x: float
    treated: int
    control: int

    @property
    def flagged(self) -> bool:
        return self.treated == 0 or self.control == 0


@dataclass(frozen=True)
class PositivityReport:
    strata: tuple[PositivityStratum, ...] = field(default_factory=tuple)

    @property
    def flagged_values(self) -> tuple[float, ...]:
        return tuple(s.covariate_x for s in self.strata if s.flagged)


def positivity_report(ds: ClusteredDataset) -> PositivityReport:
    """Treated/control counts per distinct covariate value.

    A stratum with no treated or no control units is flagged, never
    raised: empty cells are a finding, not an error.
    """
    counts: dict[float, list[int]] = {}
    for rec in ds.records:
        cell = counts.setdefault(rec.covariate_x, [0, 0])
        cell[rec.treatment] += 1
    strata = tuple(
        PositivityStratum(covariate_x=xv, treated=counts[xv][1], control=counts[xv][0])
        for xv in sorted(counts)
    )
    return PositivityReport(strata=strata)
