"""Hard singular value thresholding of the donor pool and the rank-preservation diagnostic."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np

from .errors import AllZeroSpectrum, EmptyInput, PreconditionError, RankTooLarge, SvdFailure
from .tensor import FlattenedPanel, ObservationTensor, observed_fraction

DEFAULT_ENERGY = 0.995
DEFAULT_PASS_RATIO = 1.25


@dataclass(frozen=True)
class FixedRank:
    r: int

    def __post_init__(self):
        if int(self.r) != self.r or self.r < 1:
            raise PreconditionError(f"FixedRank needs a positive integer, got {self.r}")


@dataclass(frozen=True)
class SingularValueCutoff:
    lam: float

    def __post_init__(self):
        if not self.lam >= 0:
            raise PreconditionError(f"cutoff must be nonnegative, got {self.lam}")


@dataclass(frozen=True)
class EnergyFraction:
    p: float

    def __post_init__(self):
        if not 0.0 < self.p <= 1.0:
            raise PreconditionError(f"energy fraction must lie in (0, 1], got {self.p}")


@dataclass(frozen=True)
class UniversalCutoff:
    """Data-driven cutoff for unknown noise level: ``omega(beta) * median(s)``.

    ``beta`` is the aspect ratio of the donor matrix and ``omega`` the cubic
    approximation of the optimal hard-threshold coefficient
    (Gavish & Donoho, 2014).  Resolved to a :class:`SingularValueCutoff`
    against the spectrum being thresholded.
    """

    def resolve(self, spectrum: np.ndarray, shape: Tuple[int, int]) -> SingularValueCutoff:
        beta = min(shape) / max(shape)
        omega = 0.56 * beta**3 - 0.95 * beta**2 + 1.82 * beta + 1.43
        return SingularValueCutoff(float(omega * np.median(spectrum)) if spectrum.size else 0.0)


ThresholdPolicy = Union[FixedRank, SingularValueCutoff, EnergyFraction, UniversalCutoff]


def policy_to_dict(policy: ThresholdPolicy) -> dict:
    if isinstance(policy, FixedRank):
        return {"rank": int(policy.r)}
    if isinstance(policy, SingularValueCutoff):
        return {"lambda": float(policy.lam)}
    if isinstance(policy, UniversalCutoff):
        return {"lambda": "auto"}
    return {"energy": float(policy.p)}


def policy_from_dict(d: dict) -> ThresholdPolicy:
    keys = set(d) & {"rank", "lambda", "energy"}
    if len(keys) != 1:
        raise PreconditionError(f"policy needs exactly one of rank/lambda/energy, got {sorted(d)}")
    if "rank" in d:
        return FixedRank(int(d["rank"]))
    if "lambda" in d:
        if d["lambda"] == "auto":
            return UniversalCutoff()
        return SingularValueCutoff(float(d["lambda"]))
    return EnergyFraction(float(d["energy"]))


def svd(matrix: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD with a fixed sign convention.

    Each left singular vector is flipped so that its largest-magnitude entry
    is positive (first such entry on ties); the matching right vector is
    flipped with it.
    """
    try:
        u, s, vt = np.linalg.svd(matrix, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise SvdFailure(str(exc)) from exc
    if u.size:
        pivot = np.argmax(np.abs(u), axis=0)
        signs = np.sign(u[pivot, np.arange(u.shape[1])])
        signs[signs == 0] = 1.0
        u = u * signs
        vt = vt * signs[:, None]
    return u, s, vt


def effective_rank(spectrum, energy_threshold: float = DEFAULT_ENERGY) -> int:
    """Smallest ``m`` whose leading ``m`` squared singular values reach the energy fraction.

    The comparison is done on the tail energy ``sum(s[m:]**2) <= (1 - p) * total``
    so thresholds close to 1 are not lost to cancellation.  An all-zero
    spectrum yields 0 and an :class:`AllZeroSpectrum` warning.
    """
    s = np.asarray(spectrum, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise PreconditionError("spectrum must be a nonempty 1-D array")
    if np.any(s < 0) or not np.all(np.isfinite(s)):
        raise PreconditionError("spectrum must be finite and nonnegative")
    if np.any(np.diff(s) > 0):
        raise PreconditionError("spectrum must be sorted in descending order")
    if not 0.0 < energy_threshold <= 1.0:
        raise PreconditionError(f"energy_threshold must lie in (0, 1], got {energy_threshold}")

    sq = s * s
    total = sq.sum()
    if total == 0.0:
        warnings.warn("all singular values are zero", AllZeroSpectrum, stacklevel=2)
        return 0
    # tail[m] = energy outside the leading m values, m = 0..len
    tail = np.concatenate([np.cumsum(sq[::-1])[::-1], [0.0]])
    allowed = (1.0 - energy_threshold) * total
    return int(np.argmax(tail <= allowed))


@dataclass(frozen=True)
class DenoisedModel:
    """Rescaled low-rank estimate of the donor matrix.

    ``m_hat`` has shape ``(N-1, K*T)`` in the metric-major layout;
    ``singular_values_all`` is the spectrum of the zero-filled donor matrix
    before the ``1 / rho_hat`` rescaling.
    """

    m_hat: np.ndarray
    singular_values_all: np.ndarray
    retained_rank: int
    rho_hat: float
    n_periods: int
    n_metrics: int
    flags: Tuple[str, ...] = field(default=())

    @property
    def n_donors(self) -> int:
        return self.m_hat.shape[0]

    @property
    def blocks(self) -> List[np.ndarray]:
        t = self.n_periods
        return [self.m_hat[:, k * t : (k + 1) * t] for k in range(self.n_metrics)]

    def block(self, k: int) -> np.ndarray:
        t = self.n_periods
        return self.m_hat[:, k * t : (k + 1) * t]

    def save(self, path: Union[str, Path]) -> Path:
        """Write ``<path>.json`` metadata and a ``<path>.npy`` sidecar holding ``m_hat``."""
        path = Path(path)
        meta_path, mat_path = path.with_suffix(".json"), path.with_suffix(".npy")
        np.save(mat_path, self.m_hat)
        meta = {
            "dims": {"n_donors": self.n_donors, "n_periods": self.n_periods, "n_metrics": self.n_metrics},
            "retained_rank": self.retained_rank,
            "rho_hat": self.rho_hat,
            "spectrum": self.singular_values_all.tolist(),
            "flags": list(self.flags),
            "m_hat": mat_path.name,
        }
        meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True))
        return meta_path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "DenoisedModel":
        meta_path = Path(path).with_suffix(".json")
        meta = json.loads(meta_path.read_text())
        m_hat = np.load(meta_path.parent / meta["m_hat"])
        dims = meta["dims"]
        if m_hat.shape != (dims["n_donors"], dims["n_metrics"] * dims["n_periods"]):
            raise PreconditionError(f"sidecar shape {m_hat.shape} disagrees with recorded dims {dims}")
        return cls(
            m_hat=m_hat,
            singular_values_all=np.asarray(meta["spectrum"], dtype=np.float64),
            retained_rank=int(meta["retained_rank"]),
            rho_hat=float(meta["rho_hat"]),
            n_periods=dims["n_periods"],
            n_metrics=dims["n_metrics"],
            flags=tuple(meta.get("flags", ())),
        )


def _retained(s: np.ndarray, policy: ThresholdPolicy, max_rank: int, shape: Tuple[int, int]) -> int:
    if isinstance(policy, UniversalCutoff):
        policy = policy.resolve(s, shape)
    if isinstance(policy, FixedRank):
        if policy.r > max_rank:
            raise RankTooLarge(f"rank {policy.r} exceeds min(N-1, K*T) = {max_rank}")
        return int(policy.r)
    if isinstance(policy, SingularValueCutoff):
        return int(np.sum(s >= policy.lam))
    if isinstance(policy, EnergyFraction):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", AllZeroSpectrum)
            return effective_rank(s, policy.p)
    raise TypeError(f"unknown threshold policy {policy!r}")


def hsvt(panel: FlattenedPanel, policy: ThresholdPolicy) -> DenoisedModel:
    """Zero-fill, take the SVD, keep the components chosen by ``policy`` and rescale by ``1/rho_hat``."""
    z = np.asarray(panel.donor_values, dtype=np.float64)
    if z.size == 0:
        raise EmptyInput("donor matrix is empty")
    rho = observed_fraction(panel)
    u, s, vt = svd(z)
    r = _retained(s, policy, min(z.shape), z.shape)
    flags = []
    if s.size and s[0] == 0.0:
        flags.append("AllZeroSpectrum")
    if r == 0:
        m_hat = np.zeros_like(z)
    else:
        m_hat = (u[:, :r] * (s[:r] / rho)) @ vt[:r]
    m_hat.flags.writeable = False
    s.flags.writeable = False
    return DenoisedModel(
        m_hat=m_hat,
        singular_values_all=s,
        retained_rank=r,
        rho_hat=rho,
        n_periods=panel.n_periods,
        n_metrics=panel.n_metrics,
        flags=tuple(flags),
    )


def no_denoise(panel: FlattenedPanel) -> DenoisedModel:
    """Treat the zero-filled observations themselves as the model (no thresholding, no rescaling)."""
    z = np.array(panel.donor_values, dtype=np.float64)
    s = np.linalg.svd(z, compute_uv=False)
    z.flags.writeable = False
    rank = int(np.sum(s > s[0] * max(z.shape) * np.finfo(float).eps)) if s.size and s[0] > 0 else 0
    return DenoisedModel(z, s, rank, observed_fraction(panel), panel.n_periods, panel.n_metrics, ("NoDenoise",))


@dataclass(frozen=True)
class DiagnosticReport:
    per_metric_rank: Tuple[int, ...]
    combined_rank: int
    ratio: float
    passed: bool
    energy_threshold: float
    pass_ratio: float
    per_metric_spectra: Tuple[np.ndarray, ...] = field(default=(), repr=False)
    combined_spectrum: Optional[np.ndarray] = field(default=None, repr=False)
    note: str = ""

    def to_dict(self) -> dict:
        return {
            "per_metric_rank": list(self.per_metric_rank),
            "combined_rank": self.combined_rank,
            "ratio": self.ratio,
            "passed": self.passed,
            "energy_threshold": self.energy_threshold,
            "pass_ratio": self.pass_ratio,
            "note": self.note,
        }


def _spectrum(matrix: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.svd(matrix, compute_uv=False)
    except np.linalg.LinAlgError as exc:
        raise SvdFailure(str(exc)) from exc


def rank_preservation_diagnostic(
    tensor: ObservationTensor,
    energy_threshold: float = DEFAULT_ENERGY,
    pass_ratio: float = DEFAULT_PASS_RATIO,
) -> DiagnosticReport:
    """Compare the effective rank of each zero-filled metric slice with that of their concatenation.

    All units are included; the check is about shared latent structure, not
    about any particular treatment unit.
    """
    n, t, k = tensor.shape
    slices = [tensor.values[:, :, m] for m in range(k)]
    spectra = tuple(_spectrum(sl) for sl in slices)
    combined = _spectrum(np.concatenate(slices, axis=1)) if k > 1 else spectra[0]

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", AllZeroSpectrum)
        ranks = tuple(effective_rank(s, energy_threshold) for s in spectra)
        combined_rank = effective_rank(combined, energy_threshold) if k > 1 else ranks[0]

    note = ""
    if k == 1:
        ratio, note = 1.0, "single metric: diagnostic passes trivially"
    elif max(ranks) == 0:
        ratio = 1.0 if combined_rank == 0 else float("inf")
    else:
        ratio = combined_rank / max(ranks)
    return DiagnosticReport(
        per_metric_rank=ranks,
        combined_rank=combined_rank,
        ratio=float(ratio),
        passed=bool(ratio <= pass_ratio),
        energy_threshold=energy_threshold,
        pass_ratio=pass_ratio,
        per_metric_spectra=spectra,
        combined_spectrum=combined,
        note=note,
    )
