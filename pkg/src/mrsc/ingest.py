"""CSV-per-metric panels and the JSON manifest that ties them together.

Each metric CSV has a header row (first cell names the unit column, the rest
label periods) followed by one row per unit: unit label, then period values.
An empty cell is a missing observation.

Manifest::

    {
      "metrics": [{"name": "runs", "path": "runs.csv"}, ...],
      "treatment": "unit label",
      "t0": 30,
      "period_scale": 6          # optional, t0 is multiplied by it
    }

Relative paths resolve against the manifest's directory.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np

from .errors import DimensionMismatch, EmptyInput, MRSCError, PreconditionError
from .tensor import ObservationTensor, PanelSplit, build_tensor

PathLike = Union[str, Path]


@dataclass(frozen=True)
class MetricTable:
    name: str
    unit_labels: Tuple[str, ...]
    period_labels: Tuple[str, ...]
    rows: Tuple[Tuple[str, ...], ...]


@dataclass(frozen=True)
class Dataset:
    tensor: ObservationTensor
    period_labels: Tuple[str, ...]
    treatment: Optional[str]
    t0: Optional[int]
    source: Optional[Path] = None

    def split(self, treatment: Optional[str] = None, t0: Optional[int] = None) -> PanelSplit:
        label = treatment if treatment is not None else self.treatment
        t0 = t0 if t0 is not None else self.t0
        if label is None or t0 is None:
            raise PreconditionError("treatment unit and t0 must be given (manifest or arguments)")
        return PanelSplit(self.tensor.unit_index(label), int(t0))


def read_metric_csv(path: PathLike, name: Optional[str] = None) -> MetricTable:
    path = Path(path)
    with path.open(newline="") as fh:
        rows = [r for r in csv.reader(fh) if any(cell.strip() for cell in r)]
    if len(rows) < 2:
        raise EmptyInput(f"{path}: no data rows")
    header, body = rows[0], rows[1:]
    width = len(header)
    if width < 2:
        raise EmptyInput(f"{path}: no period columns")
    for i, r in enumerate(body):
        if len(r) > width:
            raise DimensionMismatch(f"{path}: row {i + 1} has {len(r)} cells, header has {width}")
    body = [r + [""] * (width - len(r)) for r in body]
    units = tuple(r[0].strip() for r in body)
    if len(set(units)) != len(units):
        raise PreconditionError(f"{path}: duplicate unit labels")
    return MetricTable(
        name=name or path.stem,
        unit_labels=units,
        period_labels=tuple(h.strip() for h in header[1:]),
        rows=tuple(tuple(r[1:]) for r in body),
    )


def tables_to_tensor(tables: List[MetricTable]) -> Tuple[ObservationTensor, Tuple[str, ...]]:
    """Align tables on the first table's unit order and stack them into a tensor."""
    if not tables:
        raise EmptyInput("manifest lists no metrics")
    ref = tables[0]
    aligned = []
    for tab in tables:
        if set(tab.unit_labels) != set(ref.unit_labels):
            raise DimensionMismatch(
                f"metric {tab.name!r} has {len(tab.unit_labels)} units that differ from {ref.name!r} ({len(ref.unit_labels)})"
            )
        if len(tab.period_labels) != len(ref.period_labels):
            raise DimensionMismatch(
                f"metric {tab.name!r} has T={len(tab.period_labels)}, {ref.name!r} has T={len(ref.period_labels)}"
            )
        order = {u: i for i, u in enumerate(tab.unit_labels)}
        aligned.append([tab.rows[order[u]] for u in ref.unit_labels])
    tensor = build_tensor(aligned, unit_labels=ref.unit_labels, metric_labels=[t.name for t in tables])
    return tensor, ref.period_labels


def _read_manifest_json(path: Path) -> dict:
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise PreconditionError(f"{path}: invalid JSON ({exc})") from None
    metrics = manifest.get("metrics")
    if isinstance(metrics, dict):
        manifest["metrics"] = [{"name": k, "path": v} for k, v in metrics.items()]
    elif not isinstance(metrics, list) or not metrics:
        raise EmptyInput(f"{path}: 'metrics' must be a nonempty list")
    return manifest


def load_manifest(path: PathLike) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise PreconditionError(f"{path}: manifest not found")
    manifest = _read_manifest_json(path)
    tables = [read_metric_csv(path.parent / m["path"], m.get("name")) for m in manifest["metrics"]]
    tensor, periods = tables_to_tensor(tables)
    t0 = manifest.get("t0")
    if t0 is not None:
        t0 = int(t0) * int(manifest.get("period_scale", 1))
    return Dataset(tensor, periods, manifest.get("treatment"), t0, path)


def validate_manifest(path: PathLike) -> dict:
    """Collect every input problem instead of stopping at the first one."""
    path = Path(path)
    report = {"manifest": str(path), "valid": False, "errors": []}

    def record(exc: Exception):
        report["errors"].append({"error": type(exc).__name__, "message": str(exc)})

    try:
        manifest = _read_manifest_json(path) if path.exists() else None
        if manifest is None:
            raise PreconditionError(f"{path}: manifest not found")
    except MRSCError as exc:
        record(exc)
        return report

    tables = []
    for m in manifest["metrics"]:
        try:
            tables.append(read_metric_csv(path.parent / m["path"], m.get("name")))
        except FileNotFoundError as exc:
            report["errors"].append({"error": "FileNotFound", "message": str(exc)})
        except MRSCError as exc:
            record(exc)
    if report["errors"]:
        return report
    try:
        tensor, periods = tables_to_tensor(tables)
    except MRSCError as exc:
        record(exc)
        return report

    report.update(
        n_units=tensor.n_units,
        n_periods=tensor.n_periods,
        n_metrics=tensor.n_metrics,
        missing_pct={
            label: 100.0 * float(1.0 - tensor.mask[:, :, k].mean()) for k, label in enumerate(tensor.metric_labels)
        },
    )
    try:
        ds = Dataset(tensor, periods, manifest.get("treatment"), None)
        if manifest.get("treatment") is not None and manifest.get("t0") is not None:
            t0 = int(manifest["t0"]) * int(manifest.get("period_scale", 1))
            ds.split(t0=t0).validate(tensor)
    except MRSCError as exc:
        record(exc)
        return report
    report["valid"] = True
    return report


def write_metric_csv(path: PathLike, unit_labels, period_labels, values: np.ndarray, mask: np.ndarray) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["unit", *period_labels])
        for i, unit in enumerate(unit_labels):
            writer.writerow([unit, *(repr(float(v)) if m else "" for v, m in zip(values[i], mask[i]))])


def write_manifest(tensor: ObservationTensor, directory: PathLike, treatment: Optional[str], t0: Optional[int]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    periods = [str(j) for j in range(tensor.n_periods)]
    entries = []
    for k, name in enumerate(tensor.metric_labels):
        fname = f"{name}.csv"
        write_metric_csv(directory / fname, tensor.unit_labels, periods, tensor.values[:, :, k], tensor.mask[:, :, k])
        entries.append({"name": name, "path": fname})
    manifest = {"metrics": entries}
    if treatment is not None:
        manifest["treatment"] = treatment
    if t0 is not None:
        manifest["t0"] = int(t0)
    out = directory / "manifest.json"
    out.write_text(json.dumps(manifest, indent=2))
    return out

