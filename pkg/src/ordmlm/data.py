"""Ordinal outcome recoding and covariate score encoding for clustered survey data.

The outcome is a four-level anemia grade derived from hemoglobin (g/dL) with
the WHO cutoffs for young children: below 7 is severe, 7-9.9 moderate,
10-10.9 mild, 11 and above not anemic.  Categorical risk factors enter the
models as consecutive integer scores (0, 1, 2, ...) in a fixed category
order, so each covariate carries a single slope.
"""
from __future__ import annotations

import csv
import math
from bisect import bisect_right
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np


class DataError(Exception):
    """Ingestion or encoding failure (bad file, bad label, bad column)."""


class ClassificationError(DataError):
    """Hemoglobin value cannot be graded (missing, negative, or non-finite)."""


class EncodingError(DataError):
    """A covariate value is not a recognized category label."""


# g/dL boundaries between Severe/Moderate, Moderate/Mild, Mild/None.
# Intervals are half-open: [0,7), [7,10), [10,11), [11,inf).
HB_CUTOFFS = (7.0, 10.0, 11.0)

# Hemoglobin written out when a generated dataset is exported to the CSV
# schema; each value classifies back to its own level.
LEVEL_REPRESENTATIVE_HB = {1: 6.0, 2: 8.5, 3: 10.5, 4: 12.0}


class AnemiaLevel(IntEnum):
    """Ordinal anemia grade; Severe < Moderate < Mild < None."""

    SEVERE = 1
    MODERATE = 2
    MILD = 3
    NONE = 4

    @property
    def label(self) -> str:
        return _LEVEL_LABELS[self.value]


_LEVEL_LABELS = {1: "Severe", 2: "Moderate", 3: "Mild", 4: "None"}

ANEMIA_LEVEL_LABELS = tuple(_LEVEL_LABELS[k] for k in range(1, 5))


def classify_hemoglobin(hb) -> AnemiaLevel:
    """Grade a hemoglobin concentration (g/dL) into the four ordinal levels.

    Raises ClassificationError for missing, negative, or non-finite values;
    callers exclude such records and tally the reason.
    """
    if hb is None:
        raise ClassificationError("missing hemoglobin")
    value = float(hb)
    if not math.isfinite(value):
        raise ClassificationError(f"non-finite hemoglobin {value!r}")
    if value < 0.0:
        raise ClassificationError(f"negative hemoglobin {value!r}")
    return AnemiaLevel(1 + bisect_right(HB_CUTOFFS, value))


@dataclass(frozen=True)
class ObservationRecord:
    """One child: hemoglobin (g/dL, possibly missing), cluster label, raw covariates."""

    hemoglobin: float | None
    cluster_id: str
    covariates: Mapping[str, str | None] = field(default_factory=dict)

    def __post_init__(self):
        if not self.cluster_id:
            raise DataError("cluster_id must be non-empty")


@dataclass(frozen=True)
class CovariateSpec:
    """A named categorical covariate with its ordered category labels.

    Position in ``categories`` is the numeric score used in the design
    matrix (first category scores 0).
    """

    name: str
    categories: tuple[str, ...]

    def __post_init__(self):
        if len(self.categories) < 2:
            raise DataError(f"covariate {self.name!r} needs at least two categories")
        if len(set(self.categories)) != len(self.categories):
            raise DataError(f"covariate {self.name!r} has duplicate category labels")

    def score(self, label: str) -> int:
        try:
            return self.categories.index(label)
        except ValueError:
            raise EncodingError(
                f"unrecognized category {label!r} for covariate {self.name!r}; "
                f"known: {list(self.categories)}"
            ) from None

    def label(self, score: int) -> str:
        return self.categories[int(score)]


# Default risk-factor codebook (category order fixes the 0-based scores).
DEFAULT_COVARIATES = (
    CovariateSpec("residence", ("Rural", "Urban")),
    CovariateSpec("religion", ("Hindu", "Muslim", "Christian", "Others")),
    CovariateSpec("living_standard", ("Low", "Medium", "High")),
    CovariateSpec("sex", ("Male", "Female")),
    CovariateSpec("literacy", ("Can read and write", "Cannot read and write")),
    CovariateSpec("children_ever_born", ("2 or less", "3-4", "5 or more")),
    CovariateSpec("age_at_marriage", ("Below 18", "18-26", "Above 26")),
    CovariateSpec("child_age", ("<48", "48 or more")),
)


@dataclass(frozen=True)
class EncodingSpec:
    """Which covariates to encode, and their category orderings."""

    covariates: tuple[CovariateSpec, ...] = DEFAULT_COVARIATES

    def __post_init__(self):
        names = [c.name for c in self.covariates]
        if len(set(names)) != len(names):
            raise DataError("duplicate covariate names in encoding spec")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.covariates)

    def subset(self, names: Sequence[str]) -> "EncodingSpec":
        by_name = {c.name: c for c in self.covariates}
        missing = [n for n in names if n not in by_name]
        if missing:
            raise DataError(f"unknown covariates {missing}; known: {sorted(by_name)}")
        return EncodingSpec(tuple(by_name[n] for n in names))


@dataclass(frozen=True)
class EncodedDataset:
    """Cluster-indexed ordinal responses plus the numeric-score design matrix.

    Immutable after construction; the arrays are marked read-only so the
    dataset can be shared across workers.
    """

    responses: np.ndarray          # (n,) int, values 1..n_levels
    design: np.ndarray             # (n, p) float scores
    cluster_index: np.ndarray      # (n,) int in [0, n_clusters)
    n_clusters: int
    n_levels: int
    covariate_names: tuple[str, ...]
    covariate_categories: tuple[tuple[str, ...], ...]
    cluster_labels: tuple[str, ...]

    def __post_init__(self):
        responses = np.ascontiguousarray(self.responses, dtype=np.int64)
        design = np.ascontiguousarray(self.design, dtype=np.float64)
        cluster_index = np.ascontiguousarray(self.cluster_index, dtype=np.int64)
        if design.ndim != 2 or design.shape[0] != responses.shape[0]:
            raise DataError("design must be (n, p) aligned with responses")
        if cluster_index.shape != responses.shape:
            raise DataError("cluster_index must align with responses")
        if responses.size == 0:
            raise DataError("dataset is empty")
        if self.n_clusters < 1:
            raise DataError("n_clusters must be >= 1")
        if self.n_levels < 2:
            raise DataError("n_levels must be >= 2")
        if responses.min() < 1 or responses.max() > self.n_levels:
            raise DataError(f"responses must lie in 1..{self.n_levels}")
        if cluster_index.min() < 0 or cluster_index.max() >= self.n_clusters:
            raise DataError("cluster_index out of range")
        if len(self.covariate_names) != design.shape[1]:
            raise DataError("covariate_names must match design columns")
        if len(self.covariate_categories) != len(self.covariate_names):
            raise DataError("covariate_categories must match covariate_names")
        if len(self.cluster_labels) != self.n_clusters:
            raise DataError("cluster_labels must match n_clusters")
        for arr in (responses, design, cluster_index):
            arr.setflags(write=False)
        object.__setattr__(self, "responses", responses)
        object.__setattr__(self, "design", design)
        object.__setattr__(self, "cluster_index", cluster_index)

    @property
    def n_obs(self) -> int:
        return int(self.responses.shape[0])

    def column(self, name: str) -> np.ndarray:
        try:
            j = self.covariate_names.index(name)
        except ValueError:
            raise DataError(
                f"unknown covariate {name!r}; known: {list(self.covariate_names)}"
            ) from None
        return self.design[:, j]

    def categories_of(self, name: str) -> tuple[str, ...]:
        j = self.covariate_names.index(name)
        return self.covariate_categories[j]


@dataclass
class ExclusionReport:
    """Listwise-deletion tally: why records were dropped before modeling."""

    total_input: int = 0
    total_kept: int = 0
    counts: dict[str, int] = field(default_factory=dict)

    def add(self, reason: str) -> None:
        self.counts[reason] = self.counts.get(reason, 0) + 1

    @property
    def total_excluded(self) -> int:
        return sum(self.counts.values())

    def summary(self) -> str:
        lines = [
            f"records read:     {self.total_input}",
            f"records kept:     {self.total_kept}",
            f"records excluded: {self.total_excluded}",
        ]
        for reason in sorted(self.counts):
            lines.append(f"  {reason}: {self.counts[reason]}")
        return "\n".join(lines) + "\n"


def encode_dataset(
    records: Sequence[ObservationRecord],
    spec: EncodingSpec = EncodingSpec(),
    n_levels: int = 4,
) -> tuple[EncodedDataset, ExclusionReport]:
    """Recode hemoglobin to ordinal levels and covariates to integer scores.

    Records with missing/invalid hemoglobin or a missing selected covariate
    are dropped (listwise) and tallied per reason.  An unrecognized
    non-missing category label is a hard error naming the record and field.
    Clusters are indexed densely in order of first appearance, so identical
    input yields an identical dataset.
    """
    if len(records) == 0:
        raise DataError("no records to encode")
    report = ExclusionReport(total_input=len(records))
    cluster_of: dict[str, int] = {}
    responses: list[int] = []
    rows: list[list[int]] = []
    cluster_idx: list[int] = []
    for pos, rec in enumerate(records):
        try:
            level = classify_hemoglobin(rec.hemoglobin)
        except ClassificationError:
            if rec.hemoglobin is None:
                report.add("missing hemoglobin")
            else:
                report.add("invalid hemoglobin")
            continue
        row: list[int] = []
        dropped = False
        for cov in spec.covariates:
            raw = rec.covariates.get(cov.name)
            if raw is None or raw == "":
                report.add(f"missing covariate: {cov.name}")
                dropped = True
                break
            try:
                row.append(cov.score(raw))
            except EncodingError as exc:
                raise EncodingError(f"record {pos}: {exc}") from None
        if dropped:
            continue
        if rec.cluster_id not in cluster_of:
            cluster_of[rec.cluster_id] = len(cluster_of)
        responses.append(int(level))
        rows.append(row)
        cluster_idx.append(cluster_of[rec.cluster_id])
    report.total_kept = len(responses)
    if not responses:
        raise DataError("all records were excluded; nothing to encode")
    design = np.asarray(rows, dtype=np.float64)
    if design.ndim == 1:  # zero selected covariates
        design = design.reshape(len(responses), 0)
    dataset = EncodedDataset(
        responses=np.asarray(responses),
        design=design,
        cluster_index=np.asarray(cluster_idx),
        n_clusters=len(cluster_of),
        n_levels=n_levels,
        covariate_names=spec.names,
        covariate_categories=tuple(c.categories for c in spec.covariates),
        cluster_labels=tuple(cluster_of),
    )
    return dataset, report


@dataclass(frozen=True)
class ColumnMapping:
    """Maps record roles to CSV column names.

    Exactly one of ``hemoglobin`` (raw g/dL, recoded on ingest) or
    ``response`` (pre-coded ordinal 1..K) must be set.
    """

    cluster: str = "state"
    hemoglobin: str | None = "hemoglobin"
    response: str | None = None
    covariates: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if (self.hemoglobin is None) == (self.response is None):
            raise DataError("set exactly one of hemoglobin/response columns")


_MISSING_TOKENS = {"", "NA", "N/A", "NaN", "nan", "."}


def _cell(row: Mapping[str, str], column: str) -> str | None:
    value = row.get(column)
    if value is None:
        return None
    value = value.strip()
    return None if value in _MISSING_TOKENS else value


def read_observations(path, columns: ColumnMapping) -> list[ObservationRecord]:
    """Read raw records from a headered CSV; missing cells become None."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        needed = [columns.cluster, columns.hemoglobin or columns.response]
        needed += list(columns.covariates.values())
        absent = [c for c in needed if c not in header]
        if absent:
            raise DataError(f"{path}: missing columns {absent}; header has {header}")
        records = []
        for lineno, row in enumerate(reader, start=2):
            cluster = _cell(row, columns.cluster)
            if cluster is None:
                raise DataError(f"{path}:{lineno}: empty cluster id")
            if columns.hemoglobin is not None:
                raw_hb = _cell(row, columns.hemoglobin)
                try:
                    hb = None if raw_hb is None else float(raw_hb)
                except ValueError:
                    raise DataError(
                        f"{path}:{lineno}: hemoglobin {raw_hb!r} is not a number"
                    ) from None
            else:
                raw_r = _cell(row, columns.response)
                if raw_r is None:
                    hb = None
                else:
                    try:
                        hb = LEVEL_REPRESENTATIVE_HB[int(raw_r)]
                    except (ValueError, KeyError):
                        raise DataError(
                            f"{path}:{lineno}: response {raw_r!r} is not a level in 1..4"
                        ) from None
            covs = {
                role: _cell(row, col) for role, col in columns.covariates.items()
            }
            records.append(ObservationRecord(hb, cluster, covs))
    if not records:
        raise DataError(f"{path}: no data rows")
    return records


def load_dataset(
    path,
    columns: ColumnMapping,
    spec: EncodingSpec | None = None,
    n_levels: int = 4,
) -> tuple[EncodedDataset, ExclusionReport]:
    """Ingest a CSV and encode it in one step."""
    if spec is None:
        spec = EncodingSpec(DEFAULT_COVARIATES).subset(list(columns.covariates))
    records = read_observations(path, columns)
    return encode_dataset(records, spec, n_levels=n_levels)


def write_dataset_csv(path, data: EncodedDataset, columns: ColumnMapping) -> None:
    """Export an encoded dataset in the same CSV schema the ingestion reads.

    Responses are written as representative hemoglobin values (or as raw
    levels when the mapping uses a response column), covariate scores as
    their category labels, so load_dataset() round-trips the dataset.
    """
    path = Path(path)
    role_order = list(columns.covariates)
    header = [columns.cluster]
    header.append(columns.hemoglobin if columns.hemoglobin else columns.response)
    header += [columns.covariates[r] for r in role_order]
    cat_by_name = dict(zip(data.covariate_names, data.covariate_categories))
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(data.n_obs):
            row = [data.cluster_labels[data.cluster_index[i]]]
            level = int(data.responses[i])
            if columns.hemoglobin:
                row.append(repr(LEVEL_REPRESENTATIVE_HB[level]))
            else:
                row.append(str(level))
            for role in role_order:
                cats = cat_by_name[role]
                row.append(cats[int(data.column(role)[i])])
            writer.writerow(row)
