"""Synthetic panels with known means: a logistic latent-variable model and an exact low-rank tensor."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from .errors import PreconditionError
from .tensor import ObservationTensor

RNG_NAME = "numpy.random.PCG64 seeded via numpy.random.SeedSequence"


def make_rng(*entropy: int) -> np.random.Generator:
    """PCG64 generator keyed by a tuple of nonnegative integers (seed, trial, ...)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(entropy))))


def logistic_mean(theta, rho, alpha: float) -> np.ndarray:
    """``10 / (1 + exp(-theta - rho - alpha * theta * rho))`` on the outer grid of ``theta`` x ``rho``."""
    th = np.asarray(theta, dtype=np.float64)[:, None]
    rh = np.asarray(rho, dtype=np.float64)[None, :]
    return 10.0 / (1.0 + np.exp(-th - rh - alpha * th * rh))


@dataclass(frozen=True)
class LvmSpec:
    """Parameters of the logistic latent-variable generator.

    ``n_units`` counts donor rows; the generated tensor has ``n_units + 1``
    rows with the target at row 0.  ``target_combination`` (length
    ``n_units``) overrides the default sparse convex combination.
    """

    n_units: int = 100
    n_periods: int = 50
    pool_size: int = 10
    alpha_per_metric: Tuple[float, ...] = (0.7, 0.3)
    noise_sd: float = 1.0
    share_latents: bool = True
    target_combination: Optional[Tuple[float, ...]] = None
    target_support: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.pool_size < 1:
            raise PreconditionError("pool_size must be >= 1")
        if self.noise_sd < 0:
            raise PreconditionError("noise_sd must be >= 0")
        if self.n_units < 1 or self.n_periods < 1 or not self.alpha_per_metric:
            raise PreconditionError("need n_units >= 1, n_periods >= 1 and at least one metric")
        if self.target_combination is not None and len(self.target_combination) != self.n_units:
            raise PreconditionError(f"target_combination must have length n_units={self.n_units}")
        object.__setattr__(self, "alpha_per_metric", tuple(float(a) for a in self.alpha_per_metric))


@dataclass(frozen=True)
class GroundTruthBundle:
    """Noisy observations, their means, and the combination generating the target row 0."""

    tensor: ObservationTensor
    mean_tensor: np.ndarray
    beta_star: np.ndarray
    metadata: dict = field(default_factory=dict)

    @property
    def target_mean(self) -> np.ndarray:
        """Target mean trajectories, shape (K, T)."""
        return self.mean_tensor[0].T

    def export(self, directory: Union[str, Path], t0: int, treatment: Optional[str] = None) -> Path:
        """Write per-metric CSVs, a manifest and a ground-truth sidecar; return the manifest path."""
        from .ingest import write_manifest

        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        manifest = write_manifest(self.tensor, directory, treatment or self.tensor.unit_labels[0], t0)
        truth = {
            "beta_star": self.beta_star.tolist(),
            "means": {
                label: self.mean_tensor[:, :, k].tolist() for k, label in enumerate(self.tensor.metric_labels)
            },
            "metadata": self.metadata,
        }
        (directory / "ground_truth.json").write_text(json.dumps(truth, sort_keys=True))
        return manifest


def _labels(n_donors: int) -> Tuple[str, ...]:
    return ("target",) + tuple(f"donor{i}" for i in range(1, n_donors + 1))


def default_target_combination(n_units: int, support: int, rng: np.random.Generator) -> np.ndarray:
    """Sparse convex combination: ``support`` donors with Uniform(0,1) weights normalised to sum 1."""
    beta = np.zeros(n_units)
    idx = rng.choice(n_units, size=min(support, n_units), replace=False)
    w = rng.uniform(0.0, 1.0, size=idx.size)
    beta[idx] = w / w.sum()
    return beta


def generate_lvm(spec: LvmSpec) -> GroundTruthBundle:
    rng = make_rng(spec.seed)
    n, t, k = spec.n_units, spec.n_periods, len(spec.alpha_per_metric)

    def draw_latents():
        row_pool = rng.uniform(0.0, 1.0, size=spec.pool_size)
        col_pool = rng.uniform(0.0, 1.0, size=spec.pool_size)
        return rng.choice(row_pool, size=n, replace=True), rng.choice(col_pool, size=t, replace=True)

    theta, rho = draw_latents()
    donor_means = np.empty((n, t, k))
    for m, alpha in enumerate(spec.alpha_per_metric):
        if m > 0 and not spec.share_latents:
            theta, rho = draw_latents()
        donor_means[:, :, m] = logistic_mean(theta, rho, alpha)

    if spec.target_combination is not None:
        beta = np.asarray(spec.target_combination, dtype=np.float64)
    else:
        beta = default_target_combination(n, spec.target_support, rng)
    target = np.einsum("i,itk->tk", beta, donor_means)
    means = np.concatenate([target[None], donor_means], axis=0)
    noisy = means + rng.normal(0.0, spec.noise_sd, size=means.shape) if spec.noise_sd > 0 else means.copy()

    metrics = tuple(f"metric{m}" for m in range(k))
    tensor = ObservationTensor(noisy, np.ones(noisy.shape, dtype=bool), _labels(n), metrics)
    meta = {"generator": "lvm", "rng": RNG_NAME, "seed": spec.seed, "spec": _spec_dict(spec)}
    return GroundTruthBundle(tensor, means, beta, meta)


def _spec_dict(spec: LvmSpec) -> dict:
    return {
        "n_units": spec.n_units,
        "n_periods": spec.n_periods,
        "pool_size": spec.pool_size,
        "alpha_per_metric": list(spec.alpha_per_metric),
        "noise_sd": spec.noise_sd,
        "share_latents": spec.share_latents,
        "target_support": spec.target_support,
    }


def generate_lowrank_tensor(n: int, t: int, k: int, r: int, seed: int = 0, noise_sd: float = 0.0) -> GroundTruthBundle:
    """Exact rank-``r`` CP tensor ``M_itk = sum_z U_iz V_tz W_kz`` over ``n`` units.

    Row 0 is the target: a random combination of ``r`` of the ``n - 1`` donor
    rows, so it lies in the donor span for every metric by construction.
    """
    if r < 1 or r > n - 1:
        raise PreconditionError(f"need 1 <= r <= n - 1, got r={r}, n={n}")
    rng = make_rng(seed)
    n = n - 1
    u = rng.uniform(-1.0, 1.0, size=(n, r))
    v = rng.uniform(-1.0, 1.0, size=(t, r))
    w = rng.uniform(-1.0, 1.0, size=(k, r))
    donor_means = np.einsum("iz,tz,kz->itk", u, v, w)

    beta = np.zeros(n)
    idx = rng.choice(n, size=r, replace=False)
    beta[idx] = rng.uniform(-1.0, 1.0, size=r)
    target = np.einsum("i,itk->tk", beta, donor_means)
    means = np.concatenate([target[None], donor_means], axis=0)
    noisy = means + rng.normal(0.0, noise_sd, size=means.shape) if noise_sd > 0 else means.copy()

    tensor = ObservationTensor(noisy, np.ones(noisy.shape, dtype=bool), _labels(n), tuple(f"metric{m}" for m in range(k)))
    meta = {"generator": "lowrank", "rng": RNG_NAME, "seed": seed, "rank": r, "noise_sd": noise_sd}
    return GroundTruthBundle(tensor, means, beta, meta)


def prop2_residual(bundle: GroundTruthBundle) -> float:
    """Relative residual of projecting the flattened target mean row onto the donor mean rows' span."""
    flat = bundle.mean_tensor.transpose(0, 2, 1).reshape(bundle.mean_tensor.shape[0], -1)
    target, donors = flat[0], flat[1:]
    norm = np.linalg.norm(target)
    if norm == 0.0:
        return 0.0
    coef, *_ = np.linalg.lstsq(donors.T, target, rcond=None)
    return float(np.linalg.norm(target - coef @ donors) / norm)


PRESETS = {
    # synthetic RMSE experiment: T = 50, N swept over [50, 500]
    "paper-5.1": dict(n_periods=50, pool_size=10, alpha_per_metric=(0.7, 0.3), noise_sd=1.0),
    # rank table: N = 100, T = 120
    "diagnostic-table": dict(n_units=100, n_periods=120, pool_size=10, alpha_per_metric=(0.7, 0.3), noise_sd=0.0),
}


def preset_spec(name: str, **overrides) -> LvmSpec:
    try:
        base = dict(PRESETS[name])
    except KeyError:
        raise PreconditionError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    base.update(overrides)
    return LvmSpec(**base)
