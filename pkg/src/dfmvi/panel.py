"""Possibly-incomplete multivariate time series panels.

A panel is a T x n matrix of observations with an explicit boolean
availability mask.  Missing cells hold NaN, but all downstream math is
driven by the mask, never by sentinel comparisons.  Columns with zero
available observations are retained: their parameters simply stay at
their priors during estimation.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, PanelFormatError


@dataclass(frozen=True)
class TimeSeriesPanel:
    """Immutable T x n panel with per-cell availability.

    Attributes
    ----------
    values : (T, n) float array, NaN where the mask is False.
    mask : (T, n) bool array, True where the observation is available.
    names : variable names, length n.
    """

    values: np.ndarray
    mask: np.ndarray
    names: tuple[str, ...]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        mask = np.asarray(self.mask, dtype=bool)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise DomainError("panel values must be a T x n matrix with T, n >= 1")
        if mask.shape != values.shape:
            raise DomainError("mask shape does not match values shape")
        if len(self.names) != values.shape[1]:
            raise DomainError("number of names does not match number of columns")
        if np.any(np.isnan(values[mask])):
            raise DomainError("available cells must hold finite values, not NaN")
        if np.any(~np.isnan(values[~mask])):
            raise DomainError("missing cells must hold the NaN marker")
        values = values.copy()
        mask = mask.copy()
        values.flags.writeable = False
        mask.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "names", tuple(str(v) for v in self.names))

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def n(self) -> int:
        return self.values.shape[1]

    def filled(self, fill: float = 0.0) -> np.ndarray:
        """Values with missing cells replaced by ``fill``."""
        return np.where(self.mask, self.values, fill)

    def availability(self) -> "AvailabilitySummary":
        return AvailabilitySummary(
            counts=self.mask.sum(axis=0).astype(int), patterns=self.mask
        )


@dataclass(frozen=True)
class AvailabilitySummary:
    """Per-variable observation counts and per-time availability patterns.

    ``counts[i]`` is the number of available observations of variable i;
    ``patterns[t]`` is the diagonal of the availability selector at time t.
    """

    counts: np.ndarray
    patterns: np.ndarray


def from_arrays(values: np.ndarray, names=None) -> TimeSeriesPanel:
    """Build a panel from a float matrix, treating NaN cells as missing."""
    values = np.asarray(values, dtype=float)
    if names is None:
        names = [f"var{i + 1}" for i in range(values.shape[1])]
    return TimeSeriesPanel(values=values, mask=~np.isnan(values), names=tuple(names))


def load_csv(path, missing_token: str = "") -> TimeSeriesPanel:
    """Read a panel from a UTF-8 CSV file with a header of variable names.

    Each subsequent row is one time step.  Cells equal to ``missing_token``
    (after stripping surrounding whitespace) are treated as missing.

    Raises
    ------
    PanelFormatError
        On an empty file, ragged rows, or cells that parse as neither a
        number nor the missing token (the error names the row and column).
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        rows = list(reader)
    if not rows:
        raise PanelFormatError(f"{path}: empty file, expected a header row")
    names = [c.strip() for c in rows[0]]
    n = len(names)
    if n == 0:
        raise PanelFormatError(f"{path}: header row has no columns")
    data = np.full((len(rows) - 1, n), np.nan)
    mask = np.zeros((len(rows) - 1, n), dtype=bool)
    for r, row in enumerate(rows[1:], start=2):
        if len(row) != n:
            raise PanelFormatError(
                f"{path}: row {r} has {len(row)} fields, expected {n}"
            )
        for j, cell in enumerate(row):
            cell = cell.strip()
            if cell == missing_token:
                continue
            try:
                data[r - 2, j] = float(cell)
            except ValueError:
                raise PanelFormatError(
                    f"{path}: row {r}, column {names[j]!r}: "
                    f"cannot parse {cell!r} as a number"
                ) from None
            mask[r - 2, j] = True
    if data.shape[0] < 1:
        raise PanelFormatError(f"{path}: no data rows after the header")
    return TimeSeriesPanel(values=np.where(mask, data, np.nan), mask=mask, names=names)


def write_csv(panel: TimeSeriesPanel, path, missing_token: str = "") -> None:
    """Write a panel in the format read by :func:`load_csv`.

    Floats are written with ``repr`` so a write/load round trip reproduces
    values bit-exactly.
    """
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(panel.names)
        for t in range(panel.T):
            writer.writerow(
                [
                    repr(float(panel.values[t, j])) if panel.mask[t, j] else missing_token
                    for j in range(panel.n)
                ]
            )


@dataclass(frozen=True)
class StandardizationRecord:
    """Per-column location/scale used to invert standardization.

    ``degenerate[i]`` flags columns with at most one available observation,
    which are passed through with identity scaling.
    """

    mean: np.ndarray
    scale: np.ndarray
    degenerate: np.ndarray = field(default=None)

    def to_json(self) -> str:
        return json.dumps(
            {
                "mean": [float(v) for v in self.mean],
                "scale": [float(v) for v in self.scale],
                "degenerate": [bool(v) for v in self.degenerate],
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "StandardizationRecord":
        obj = json.loads(text)
        return cls(
            mean=np.asarray(obj["mean"], dtype=float),
            scale=np.asarray(obj["scale"], dtype=float),
            degenerate=np.asarray(obj["degenerate"], dtype=bool),
        )


def standardize(panel: TimeSeriesPanel) -> tuple[TimeSeriesPanel, StandardizationRecord]:
    """Rescale each column to mean 0, sample stdev 1 over its available cells.

    The sample standard deviation uses denominator T_i - 1.  Columns with
    T_i <= 1 are passed through unchanged and flagged in the returned
    record.  Missing cells are untouched.

    Raises
    ------
    DomainError
        If a column with T_i >= 2 has zero sample variance (names the column).
    """
    counts = panel.mask.sum(axis=0)
    mean = np.zeros(panel.n)
    scale = np.ones(panel.n)
    degenerate = counts <= 1
    for i in range(panel.n):
        if degenerate[i]:
            continue
        col = panel.values[panel.mask[:, i], i]
        mu = col.mean()
        sd = col.std(ddof=1)
        if sd == 0.0:
            raise DomainError(
                f"column {panel.names[i]!r} has zero variance over its "
                f"{counts[i]} available cells and cannot be standardized"
            )
        mean[i] = mu
        scale[i] = sd
    out = (panel.values - mean) / scale
    out = np.where(panel.mask, out, np.nan)
    record = StandardizationRecord(mean=mean, scale=scale, degenerate=degenerate)
    return (
        TimeSeriesPanel(values=out, mask=panel.mask, names=panel.names),
        record,
    )


def unstandardize(values: np.ndarray, record: StandardizationRecord) -> np.ndarray:
    """Invert :func:`standardize` on an array whose last axis indexes columns."""
    return np.asarray(values) * record.scale + record.mean
