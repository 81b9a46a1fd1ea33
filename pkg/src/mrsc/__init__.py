"""Multi-metric robust synthetic control.

Typical use::

    from mrsc import ObservationTensor, PanelSplit, FixedRank, run_mrsc

    fit = run_mrsc(tensor, PanelSplit(treatment_index=0, t0=30), FixedRank(5))
    fit.report.trajectories      # (K, T) counterfactual means
"""

__version__ = "0.1.0"

from .denoise import (
    DenoisedModel,
    DiagnosticReport,
    EnergyFraction,
    FixedRank,
    SingularValueCutoff,
    UniversalCutoff,
    effective_rank,
    hsvt,
    rank_preservation_diagnostic,
)
from .errors import MRSCError
from .pipeline import MRSCFit, run_mrsc
from .regression import ForecastReport, MetricWeights, SyntheticControl, fit, predict, score
from .synthgen import GroundTruthBundle, LvmSpec, generate_lowrank_tensor, generate_lvm, prop2_residual
from .tensor import FlattenedPanel, ObservationTensor, PanelSplit, build_tensor, flatten, observed_fraction

__all__ = [
    "DenoisedModel",
    "DiagnosticReport",
    "EnergyFraction",
    "FixedRank",
    "FlattenedPanel",
    "ForecastReport",
    "GroundTruthBundle",
    "LvmSpec",
    "MRSCError",
    "MRSCFit",
    "MetricWeights",
    "ObservationTensor",
    "PanelSplit",
    "SingularValueCutoff",
    "SyntheticControl",
    "UniversalCutoff",
    "build_tensor",
    "effective_rank",
    "fit",
    "flatten",
    "generate_lowrank_tensor",
    "generate_lvm",
    "hsvt",
    "observed_fraction",
    "predict",
    "prop2_residual",
    "rank_preservation_diagnostic",
    "run_mrsc",
    "score",
]
