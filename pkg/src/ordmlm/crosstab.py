"""Contingency tables of anemia level by risk factor, with Pearson chi-square tests."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaincc

from .data import ANEMIA_LEVEL_LABELS, EncodedDataset

CLUSTER_FACTOR = "cluster"


class TableError(ValueError):
    """Degenerate table: a test statistic is undefined."""


class SmallExpectedCountWarning(UserWarning):
    """Some expected cell count is below 5; the chi-square approximation is rough."""


@dataclass(frozen=True)
class ContingencyTable:
    """Observed counts with margins; percentages are kept at full precision."""

    row_labels: tuple[str, ...]
    col_labels: tuple[str, ...]
    counts: np.ndarray  # (r, c) nonnegative ints

    def __post_init__(self):
        counts = np.ascontiguousarray(self.counts, dtype=np.int64)
        if counts.ndim != 2:
            raise TableError("counts must be a 2-D array")
        if counts.shape != (len(self.row_labels), len(self.col_labels)):
            raise TableError("counts shape must match labels")
        if counts.shape[0] < 2 or counts.shape[1] < 2:
            raise TableError("need at least a 2x2 table")
        if (counts < 0).any():
            raise TableError("counts must be nonnegative")
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    @property
    def row_totals(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def col_totals(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    @property
    def grand_total(self) -> int:
        return int(self.counts.sum())

    def row_percent(self) -> np.ndarray:
        """Cell share of its row total, in percent (full precision)."""
        return 100.0 * self.counts / self.row_totals[:, None]

    def col_percent(self) -> np.ndarray:
        """Cell share of its column total, in percent (full precision)."""
        return 100.0 * self.counts / self.col_totals[None, :]

    def expected(self) -> np.ndarray:
        return np.outer(self.row_totals, self.col_totals) / self.grand_total


@dataclass(frozen=True)
class ChiSquareResult:
    statistic: float
    df: int
    p_value: float
    min_expected_cell: float


def chi_square_sf(x: float, df: int) -> float:
    """Upper-tail probability of a chi-square(df) variable at x.

    Equals the regularized upper incomplete gamma function Q(df/2, x/2).
    """
    if not np.isfinite(x) or x < 0:
        raise ValueError(f"chi-square statistic must be finite and >= 0, got {x!r}")
    if int(df) != df or df < 1:
        raise ValueError(f"df must be a positive integer, got {df!r}")
    return float(gammaincc(df / 2.0, x / 2.0))


def build_crosstab(data: EncodedDataset, factor: str) -> ContingencyTable:
    """Cross-tabulate anemia level against a covariate or the cluster factor.

    Rows are the factor's observed categories (original order preserved);
    columns are the outcome levels.  Pass ``factor="cluster"`` to tabulate
    by cluster label.
    """
    if factor == CLUSTER_FACTOR:
        values = data.cluster_index
        labels = data.cluster_labels
    else:
        values = data.column(factor).astype(np.int64)
        labels = data.categories_of(factor)
    n_rows = len(labels)
    n_cols = data.n_levels
    flat = values * n_cols + (data.responses - 1)
    counts = np.bincount(flat, minlength=n_rows * n_cols).reshape(n_rows, n_cols)
    observed = counts.sum(axis=1) > 0
    if observed.sum() < 2:
        raise TableError(
            f"factor {factor!r} has a single observed level; independence test undefined"
        )
    col_labels = (
        ANEMIA_LEVEL_LABELS if n_cols == 4 else tuple(str(k) for k in range(1, n_cols + 1))
    )
    return ContingencyTable(
        row_labels=tuple(lab for lab, keep in zip(labels, observed) if keep),
        col_labels=col_labels,
        counts=counts[observed],
    )


def chi_square_independence(table: ContingencyTable) -> ChiSquareResult:
    """Pearson chi-square test of independence (no continuity correction)."""
    expected = table.expected()
    if (expected <= 0).any():
        i, j = np.argwhere(expected <= 0)[0]
        raise TableError(
            f"zero expected count in cell ({table.row_labels[i]!r}, {table.col_labels[j]!r})"
        )
    min_expected = float(expected.min())
    if min_expected < 5.0:
        warnings.warn(
            f"minimum expected cell count {min_expected:.3g} < 5",
            SmallExpectedCountWarning,
            stacklevel=2,
        )
    observed = table.counts.astype(np.float64)
    statistic = float(((observed - expected) ** 2 / expected).sum())
    df = (len(table.row_labels) - 1) * (len(table.col_labels) - 1)
    return ChiSquareResult(
        statistic=statistic,
        df=df,
        p_value=chi_square_sf(statistic, df),
        min_expected_cell=min_expected,
    )
