"""End-to-end estimator: flatten, denoise, weighted regression, predict."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .denoise import DenoisedModel, ThresholdPolicy, hsvt
from .regression import ForecastReport, MetricWeights, SyntheticControl, fit, predict, score
from .tensor import FlattenedPanel, ObservationTensor, PanelSplit, flatten


@dataclass(frozen=True)
class MRSCFit:
    panel: FlattenedPanel
    model: DenoisedModel
    control: SyntheticControl
    report: ForecastReport


def observed_trajectories(tensor: ObservationTensor, unit: int) -> np.ndarray:
    """Observed series of one unit as a ``(K, T)`` array with NaN where missing."""
    return np.where(tensor.mask[unit], tensor.values[unit], np.nan).T


def run_mrsc(
    tensor: ObservationTensor,
    split: PanelSplit,
    policy: ThresholdPolicy,
    weights: Optional[MetricWeights] = None,
    truth: Optional[np.ndarray] = None,
) -> MRSCFit:
    """Fit the multi-metric synthetic control for ``split.treatment_index``.

    If ``truth`` (shape ``(K, T)``) is given the report carries pre/post MSE
    against it.
    """
    panel = flatten(tensor, split)
    model = hsvt(panel, policy)
    control = fit(model, panel, split, weights)
    report = predict(control, model, tensor.metric_labels, split.t0)
    if truth is not None:
        report = score(report, truth, split)
    return MRSCFit(panel, model, control, report)
