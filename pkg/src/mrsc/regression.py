"""Metric-weighted least squares on the denoised donor pool, and counterfactual prediction."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .denoise import DenoisedModel
from .errors import DegenerateModel, DimensionMismatch, NoUsableColumns, PreconditionError
from .tensor import FlattenedPanel, PanelSplit

PINV_RCOND = 1e-10


@dataclass(frozen=True)
class MetricWeights:
    """Nonnegative per-metric multipliers applied to pre-intervention columns.

    A weight of 0 drops that metric from the fit.
    """

    w: Tuple[float, ...]

    def __post_init__(self):
        w = tuple(float(x) for x in self.w)
        if not w:
            raise PreconditionError("need at least one weight")
        if not all(np.isfinite(w)) or min(w) < 0:
            raise PreconditionError(f"weights must be finite and nonnegative, got {w}")
        if max(w) == 0:
            raise PreconditionError("at least one weight must be positive")
        object.__setattr__(self, "w", w)

    @classmethod
    def uniform(cls, k: int) -> "MetricWeights":
        return cls((1.0,) * k)

    def __len__(self):
        return len(self.w)


@dataclass(frozen=True)
class SyntheticControl:
    beta: np.ndarray
    weights: MetricWeights
    retained_rank: int
    fit_residual: float
    n_columns_used: int
    solver: str = "MinNormPseudoinverse"
    flags: Tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "beta": self.beta.tolist(),
            "weights": list(self.weights.w),
            "retained_rank": self.retained_rank,
            "fit_residual": self.fit_residual,
            "n_columns_used": self.n_columns_used,
            "solver": self.solver,
            "flags": list(self.flags),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticControl":
        return cls(
            beta=np.asarray(d["beta"], dtype=np.float64),
            weights=MetricWeights(tuple(d["weights"])),
            retained_rank=int(d["retained_rank"]),
            fit_residual=float(d["fit_residual"]),
            n_columns_used=int(d["n_columns_used"]),
            solver=d.get("solver", "MinNormPseudoinverse"),
            flags=tuple(d.get("flags", ())),
        )


@dataclass(frozen=True)
class ForecastReport:
    """Per-metric counterfactual trajectories, shape ``(K, T)``, plus error summaries.

    Error fields stay ``None`` until :func:`score` (MSE) or the evaluation
    helpers (MAPE, R^2) fill them.
    """

    trajectories: np.ndarray
    metric_labels: Tuple[str, ...] = ()
    t0: Optional[int] = None
    pre_mse: Optional[np.ndarray] = None
    post_mse: Optional[np.ndarray] = None
    mape: Optional[Dict[int, float]] = None
    r_squared: Optional[float] = None
    band: Optional[Tuple[np.ndarray, np.ndarray]] = field(default=None, repr=False)

    @property
    def pre_mse_mean(self) -> Optional[float]:
        return _nanmean(self.pre_mse)

    @property
    def post_mse_mean(self) -> Optional[float]:
        return _nanmean(self.post_mse)

    def to_dict(self) -> dict:
        k = self.trajectories.shape[0]
        labels = self.metric_labels or tuple(f"metric{i}" for i in range(k))
        out = {
            "t0": self.t0,
            "metrics": {labels[i]: self.trajectories[i].tolist() for i in range(k)},
        }
        if self.pre_mse is not None:
            out["pre_mse"] = {labels[i]: _num(self.pre_mse[i]) for i in range(k)}
            out["post_mse"] = {labels[i]: _num(self.post_mse[i]) for i in range(k)}
            out["pre_mse_mean"] = _num(self.pre_mse_mean)
            out["post_mse_mean"] = _num(self.post_mse_mean)
        if self.mape is not None:
            out["mape"] = {str(h): _num(v) for h, v in self.mape.items()}
        if self.r_squared is not None:
            out["r_squared"] = _num(self.r_squared)
        if self.band is not None:
            out["band"] = {
                "label": "residual bootstrap (not part of the estimator)",
                "lower": self.band[0].tolist(),
                "upper": self.band[1].tolist(),
            }
        return out


def _nanmean(x) -> Optional[float]:
    if x is None:
        return None
    x = np.asarray(x, dtype=np.float64)
    return float(np.mean(x[~np.isnan(x)])) if (~np.isnan(x)).any() else float("nan")


def _num(x) -> Optional[float]:
    x = float(x)
    return None if np.isnan(x) else x


def _design(model: DenoisedModel, panel: FlattenedPanel, weights: MetricWeights):
    """Weighted pre-intervention design matrix (donors x usable columns) and target vector."""
    if model.m_hat.shape != panel.donor_values.shape or model.n_periods != panel.n_periods:
        raise DimensionMismatch(f"model shape {model.m_hat.shape} vs panel donor shape {panel.donor_values.shape}")
    if len(weights) != panel.n_metrics:
        raise DimensionMismatch(f"{len(weights)} weights for K={panel.n_metrics} metrics")
    w = np.asarray(weights.w)[panel.treatment_column_map[:, 0]]
    keep = panel.treatment_mask & (w > 0)
    if not keep.any():
        raise NoUsableColumns("every pre-intervention column was dropped (missing treatment entries or zero weight)")
    cols = panel.pre_columns()[keep]
    design = model.m_hat[:, cols] * w[keep]
    target = panel.treatment_pre[keep] * w[keep]
    return design, target


def min_norm_lstsq(design: np.ndarray, target: np.ndarray, rcond: float = PINV_RCOND) -> np.ndarray:
    """Minimum-norm ``v`` minimising ``||target - v @ design||``.

    Singular values of ``design`` below ``rcond * s_max`` are treated as zero.
    """
    u, s, vt = np.linalg.svd(design, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros(design.shape[0])
    keep = s > rcond * s[0]
    return u[:, keep] @ ((vt[keep] @ target) / s[keep])


def fit(model: DenoisedModel, panel: FlattenedPanel, split: PanelSplit, weights: Optional[MetricWeights] = None) -> SyntheticControl:
    if weights is None:
        weights = MetricWeights.uniform(panel.n_metrics)
    if split.t0 != panel.t0 or split.treatment_index != panel.treatment_index:
        raise DimensionMismatch(f"split {split} does not match the flattened panel")
    design, target = _design(model, panel, weights)

    if model.retained_rank == 0:
        warnings.warn("model retained no singular values; beta set to zero", DegenerateModel, stacklevel=2)
        beta = np.zeros(model.n_donors)
        flags = ("DegenerateModel",)
    else:
        beta = min_norm_lstsq(design, target)
        flags = ()
    residual = float(np.linalg.norm(target - beta @ design))
    return SyntheticControl(
        beta=beta,
        weights=weights,
        retained_rank=model.retained_rank,
        fit_residual=residual,
        n_columns_used=int(target.size),
        flags=flags,
    )


def predict(control: SyntheticControl, model: DenoisedModel, metric_labels: Sequence[str] = (), t0: Optional[int] = None) -> ForecastReport:
    """Counterfactual trajectory per metric, ``beta @ block_k`` over all periods."""
    if control.beta.shape != (model.n_donors,):
        raise DimensionMismatch(f"beta has length {control.beta.size}, model has {model.n_donors} donors")
    traj = (control.beta @ model.m_hat).reshape(model.n_metrics, model.n_periods)
    return ForecastReport(trajectories=traj, metric_labels=tuple(metric_labels), t0=t0)


def score(report: ForecastReport, truth: np.ndarray, split: PanelSplit) -> ForecastReport:
    """Fill per-metric pre/post MSE against ``truth`` of shape ``(K, T)``.

    NaN entries of ``truth`` are skipped; a window with no usable entries
    scores NaN.
    """
    truth = np.asarray(truth, dtype=np.float64)
    if truth.shape != report.trajectories.shape:
        raise DimensionMismatch(f"truth shape {truth.shape} != forecast shape {report.trajectories.shape}")
    sq = (report.trajectories - truth) ** 2
    t0 = split.t0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        pre = np.nanmean(sq[:, :t0], axis=1)
        post = np.nanmean(sq[:, t0:], axis=1)
    return replace(report, pre_mse=pre, post_mse=post, t0=t0)


def residual_bootstrap_band(
    model: DenoisedModel,
    panel: FlattenedPanel,
    split: PanelSplit,
    weights: Optional[MetricWeights] = None,
    n_boot: int = 200,
    level: float = 0.95,
    seed: int = 0,
) -> Tuple[np.ndarray, np.ndarray]:
    """Pointwise band for the trajectories from resampling pre-intervention fit residuals.

    This is a convenience heuristic layered on top of the point estimator; it
    conditions on the denoised donor pool and ignores its estimation error.
    """
    if weights is None:
        weights = MetricWeights.uniform(panel.n_metrics)
    design, target = _design(model, panel, weights)
    beta = min_norm_lstsq(design, target)
    fitted = beta @ design
    resid = target - fitted
    rng = np.random.default_rng(seed)
    draws = np.empty((n_boot, model.n_metrics, model.n_periods))
    for b in range(n_boot):
        bb = min_norm_lstsq(design, fitted + rng.choice(resid, size=resid.size, replace=True))
        draws[b] = (bb @ model.m_hat).reshape(model.n_metrics, model.n_periods)
    alpha = (1.0 - level) / 2.0
    return np.quantile(draws, alpha, axis=0), np.quantile(draws, 1.0 - alpha, axis=0)
