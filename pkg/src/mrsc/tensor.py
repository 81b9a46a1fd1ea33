"""Multi-metric panel data model.

A panel is stored densely as an ``N x T x K`` float array plus a boolean
presence mask of the same shape (``True`` = observed).  Absent cells hold 0.0
in the value array so that zero-filling is free downstream.

The flattened layout is metric-major: donor column ``k * T + j`` holds
metric ``k`` at period ``j``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import DimensionMismatch, EmptyInput, MissingDataWarning, NonFinite, PreconditionError


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class ObservationTensor:
    """Panel of ``n_units`` units, ``n_periods`` periods and ``n_metrics`` metrics.

    Parameters
    ----------
    values : ndarray, shape (N, T, K)
        Observations; entries where ``mask`` is False are ignored (stored as 0).
    mask : ndarray of bool, shape (N, T, K)
        Presence mask.
    unit_labels, metric_labels : tuple of str
        Display labels. Defaults are ``"unit0", ...`` and ``"metric0", ...``.
    """

    values: np.ndarray
    mask: np.ndarray
    unit_labels: Tuple[str, ...] = ()
    metric_labels: Tuple[str, ...] = ()

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        mask = np.asarray(self.mask, dtype=bool)
        if values.ndim != 3:
            raise DimensionMismatch(f"values must be 3-D (N, T, K), got shape {values.shape}")
        if mask.shape != values.shape:
            raise DimensionMismatch(f"mask shape {mask.shape} != values shape {values.shape}")
        n, t, k = values.shape
        if n < 2 or t < 1 or k < 1:
            raise DimensionMismatch(f"need N >= 2, T >= 1, K >= 1; got N={n}, T={t}, K={k}")
        if not np.all(np.isfinite(values[mask])):
            raise NonFinite("present values must be finite")
        values = np.where(mask, values, 0.0)

        units = tuple(self.unit_labels) or tuple(f"unit{i}" for i in range(n))
        metrics = tuple(self.metric_labels) or tuple(f"metric{i}" for i in range(k))
        if len(units) != n:
            raise DimensionMismatch(f"{len(units)} unit labels for N={n}")
        if len(metrics) != k:
            raise DimensionMismatch(f"{len(metrics)} metric labels for K={k}")

        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "mask", _frozen(mask))
        object.__setattr__(self, "unit_labels", tuple(str(u) for u in units))
        object.__setattr__(self, "metric_labels", tuple(str(m) for m in metrics))

    @classmethod
    def from_array(cls, array, unit_labels=(), metric_labels=()) -> "ObservationTensor":
        """Build from an ``(N, T, K)`` array where NaN marks a missing cell."""
        array = np.asarray(array, dtype=np.float64)
        if array.ndim == 2:
            array = array[:, :, None]
        mask = ~np.isnan(array)
        return cls(np.nan_to_num(array, nan=0.0), mask, tuple(unit_labels), tuple(metric_labels))

    @property
    def n_units(self) -> int:
        return self.values.shape[0]

    @property
    def n_periods(self) -> int:
        return self.values.shape[1]

    @property
    def n_metrics(self) -> int:
        return self.values.shape[2]

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.values.shape

    @property
    def n_missing(self) -> int:
        return int(self.mask.size - self.mask.sum())

    def as_nan_array(self) -> np.ndarray:
        return np.where(self.mask, self.values, np.nan)

    def unit_index(self, label: Union[str, int]) -> int:
        if isinstance(label, (int, np.integer)):
            if not 0 <= label < self.n_units:
                raise PreconditionError(f"unit index {label} out of range [0, {self.n_units})")
            return int(label)
        try:
            return self.unit_labels.index(str(label))
        except ValueError:
            raise PreconditionError(f"unknown unit label {label!r}") from None

    def select_units(self, indices: Sequence[int]) -> "ObservationTensor":
        idx = np.asarray(indices, dtype=int)
        return ObservationTensor(
            self.values[idx], self.mask[idx], tuple(self.unit_labels[i] for i in idx), self.metric_labels
        )

    def select_metrics(self, indices: Sequence[int]) -> "ObservationTensor":
        idx = np.asarray(indices, dtype=int)
        return ObservationTensor(
            self.values[:, :, idx],
            self.mask[:, :, idx],
            self.unit_labels,
            tuple(self.metric_labels[i] for i in idx),
        )

    def with_mask(self, mask: np.ndarray) -> "ObservationTensor":
        """Return a copy whose presence mask is ``self.mask & mask``."""
        return ObservationTensor(self.values, self.mask & np.asarray(mask, dtype=bool), self.unit_labels, self.metric_labels)


@dataclass(frozen=True)
class PanelSplit:
    """Treatment unit and intervention period (periods ``< t0`` are pre-intervention)."""

    treatment_index: int
    t0: int

    def validate(self, tensor: ObservationTensor) -> None:
        if not 0 <= self.treatment_index < tensor.n_units:
            raise PreconditionError(f"treatment_index {self.treatment_index} not in [0, {tensor.n_units})")
        if not 1 <= self.t0 < tensor.n_periods:
            raise PreconditionError(f"t0 must satisfy 1 <= t0 < T={tensor.n_periods}, got {self.t0}")


@dataclass(frozen=True)
class FlattenedPanel:
    """Concatenated donor matrix and treatment pre-intervention vector.

    ``donor_values`` is zero wherever ``donor_mask`` is False; likewise for the
    treatment vector.  ``column_map[c] = (k, j)`` gives the origin of flat
    donor column ``c``; ``treatment_column_map`` does the same for the
    treatment vector.
    """

    donor_values: np.ndarray
    donor_mask: np.ndarray
    treatment_pre: np.ndarray
    treatment_mask: np.ndarray
    column_map: np.ndarray
    treatment_column_map: np.ndarray
    n_periods: int
    n_metrics: int
    t0: int
    donor_index: np.ndarray
    treatment_index: int
    donor_labels: Tuple[str, ...] = field(default=())

    @property
    def n_donors(self) -> int:
        return self.donor_values.shape[0]

    @property
    def donor(self) -> np.ndarray:
        """Donor matrix with NaN at missing entries."""
        return np.where(self.donor_mask, self.donor_values, np.nan)

    @property
    def treatment(self) -> np.ndarray:
        return np.where(self.treatment_mask, self.treatment_pre, np.nan)

    def pre_columns(self) -> np.ndarray:
        """Flat donor column indices of the pre-intervention periods, in treatment order."""
        k, j = self.treatment_column_map[:, 0], self.treatment_column_map[:, 1]
        return k * self.n_periods + j


def flatten(tensor: ObservationTensor, split: PanelSplit) -> FlattenedPanel:
    split.validate(tensor)
    n, t, k = tensor.shape
    donors = np.array([i for i in range(n) if i != split.treatment_index], dtype=int)

    # (N-1, T, K) -> (N-1, K, T) -> (N-1, K*T): metric-major
    donor_values = tensor.values[donors].transpose(0, 2, 1).reshape(len(donors), k * t)
    donor_mask = tensor.mask[donors].transpose(0, 2, 1).reshape(len(donors), k * t)
    treat = tensor.values[split.treatment_index, : split.t0, :].T.reshape(k * split.t0)
    treat_mask = tensor.mask[split.treatment_index, : split.t0, :].T.reshape(k * split.t0)

    kk, jj = np.meshgrid(np.arange(k), np.arange(t), indexing="ij")
    column_map = np.stack([kk.ravel(), jj.ravel()], axis=1)
    kk, jj = np.meshgrid(np.arange(k), np.arange(split.t0), indexing="ij")
    treatment_column_map = np.stack([kk.ravel(), jj.ravel()], axis=1)

    return FlattenedPanel(
        donor_values=_frozen(donor_values),
        donor_mask=_frozen(donor_mask),
        treatment_pre=_frozen(treat),
        treatment_mask=_frozen(treat_mask),
        column_map=_frozen(column_map),
        treatment_column_map=_frozen(treatment_column_map),
        n_periods=t,
        n_metrics=k,
        t0=split.t0,
        donor_index=_frozen(donors),
        treatment_index=split.treatment_index,
        donor_labels=tuple(tensor.unit_labels[i] for i in donors),
    )


def unflatten(panel: FlattenedPanel) -> Tuple[np.ndarray, np.ndarray]:
    """Invert the donor concatenation, returning ``(values, mask)`` of shape (N-1, T, K)."""
    n = panel.n_donors
    values = np.zeros((n, panel.n_periods, panel.n_metrics))
    mask = np.zeros((n, panel.n_periods, panel.n_metrics), dtype=bool)
    k, j = panel.column_map[:, 0], panel.column_map[:, 1]
    values[:, j, k] = panel.donor_values
    mask[:, j, k] = panel.donor_mask
    return values, mask


def observed_fraction(panel: FlattenedPanel) -> float:
    """Fraction of present donor entries, floored at one entry's worth."""
    total = panel.donor_mask.size
    if total == 0:
        raise EmptyInput("donor matrix is empty")
    present = int(panel.donor_mask.sum())
    if present == 0:
        warnings.warn("donor pool has no observed entries", MissingDataWarning, stacklevel=2)
    return max(present, 1) / total


def bernoulli_mask(shape, rho: float, rng: np.random.Generator) -> np.ndarray:
    """Independent Bernoulli(rho) presence mask."""
    if not 0.0 < rho <= 1.0:
        raise PreconditionError(f"rho must lie in (0, 1], got {rho}")
    return rng.random(shape) < rho


def mask_donors(tensor: ObservationTensor, treatment_index: int, rho: float, rng: np.random.Generator) -> ObservationTensor:
    """Mask donor entries independently with keep-probability ``rho``; the treatment row is untouched."""
    keep = bernoulli_mask(tensor.shape, rho, rng)
    keep[treatment_index] = True
    return tensor.with_mask(keep)


Cell = Union[float, int, str, None]


def _parse_cell(cell: Cell, where: str) -> Optional[float]:
    if cell is None:
        return None
    if isinstance(cell, str):
        cell = cell.strip()
        if cell == "":
            return None
        try:
            cell = float(cell)
        except ValueError:
            raise NonFinite(f"{where}: cannot parse {cell!r} as a number") from None
    value = float(cell)
    if not np.isfinite(value):
        raise NonFinite(f"{where}: non-finite value {value}")
    return value


def build_tensor(
    tables: Union[Mapping[str, Sequence[Sequence[Cell]]], Sequence[Sequence[Sequence[Cell]]]],
    unit_labels: Optional[Sequence[str]] = None,
    metric_labels: Optional[Sequence[str]] = None,
) -> ObservationTensor:
    """Assemble a tensor from one ``N x T`` table per metric.

    Cells that are ``None`` or blank strings are recorded as missing.  A NaN
    or infinite cell is rejected with :class:`NonFinite`; use
    :meth:`ObservationTensor.from_array` for NaN-coded arrays.
    """
    if isinstance(tables, Mapping):
        if metric_labels is None:
            metric_labels = list(tables.keys())
        tables = list(tables.values())
    tables = list(tables)
    if not tables:
        raise EmptyInput("no metric tables supplied")

    shapes = []
    parsed = []
    for k, table in enumerate(tables):
        rows = [list(r) for r in table]
        if not rows or not any(len(r) for r in rows):
            raise EmptyInput(f"metric {k} table is empty")
        widths = {len(r) for r in rows}
        if len(widths) != 1:
            raise DimensionMismatch(f"metric {k} table is ragged (row lengths {sorted(widths)})")
        shapes.append((len(rows), widths.pop()))
        parsed.append(rows)
    if len(set(shapes)) != 1:
        raise DimensionMismatch(f"metric tables disagree on (N, T): {shapes}")

    n, t = shapes[0]
    values = np.zeros((n, t, len(tables)))
    mask = np.zeros((n, t, len(tables)), dtype=bool)
    for k, rows in enumerate(parsed):
        for i, row in enumerate(rows):
            for j, cell in enumerate(row):
                v = _parse_cell(cell, f"metric {k}, row {i}, column {j}")
                if v is not None:
                    values[i, j, k] = v
                    mask[i, j, k] = True
    return ObservationTensor(values, mask, tuple(unit_labels or ()), tuple(metric_labels or ()))
