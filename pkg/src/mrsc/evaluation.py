"""Error metrics, comparator baselines, cross-validation and the seeded benchmark harness."""

from __future__ import annotations

import csv
import itertools
import json
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .denoise import ThresholdPolicy, hsvt, no_denoise, policy_from_dict, policy_to_dict
from .denoise import rank_preservation_diagnostic
from .errors import DegenerateBaseline, EmptyDonorPool, MRSCError, PreconditionError, RankTooLarge, ZeroActual
from .pipeline import observed_trajectories
from .regression import ForecastReport, MetricWeights, SyntheticControl, fit, predict, score
from .synthgen import RNG_NAME, LvmSpec, generate_lowrank_tensor, generate_lvm, make_rng
from .tensor import ObservationTensor, PanelSplit, flatten, mask_donors

MRSC = "MRSC"
RSC_PER_METRIC = "RSC_PER_METRIC"
REGRESSION_NO_DENOISE = "REGRESSION_NO_DENOISE"
DONOR_POOL_AVERAGE = "DONOR_POOL_AVERAGE"
RESTRICTED_DONOR_POOL = "RESTRICTED_DONOR_POOL"
COMPARATORS = (MRSC, RSC_PER_METRIC, REGRESSION_NO_DENOISE, DONOR_POOL_AVERAGE, RESTRICTED_DONOR_POOL)


# --------------------------------------------------------------------------- metrics


def mape(forecast, actual, horizons: Iterable[int], t0: int = 0) -> Dict[int, float]:
    """Mean absolute percentage error over ``(t0, t0 + h]`` for each horizon ``h``.

    Points where the actual value is 0 are dropped (with a
    :class:`ZeroActual` warning); NaN actuals are skipped silently.
    """
    f = np.asarray(forecast, dtype=np.float64)
    a = np.asarray(actual, dtype=np.float64)
    if f.shape != a.shape:
        raise PreconditionError(f"forecast shape {f.shape} != actual shape {a.shape}")
    out = {}
    for h in horizons:
        h = int(h)
        if h < 1 or t0 + h > a.size:
            raise PreconditionError(f"horizon {h} from t0={t0} exceeds series length {a.size}")
        fw, aw = f[t0 : t0 + h], a[t0 : t0 + h]
        zero = aw == 0
        if zero.any():
            warnings.warn(f"{int(zero.sum())} zero actual(s) excluded at horizon {h}", ZeroActual, stacklevel=2)
        ok = ~zero & ~np.isnan(aw)
        out[h] = float(np.mean(np.abs(fw[ok] - aw[ok]) / np.abs(aw[ok]))) if ok.any() else float("nan")
    return out


def r_squared(forecasts, actuals, baseline) -> float:
    """``1 - SS(actual - forecast) / SS(actual - baseline)`` across evaluation units."""
    f = np.asarray(forecasts, dtype=np.float64)
    a = np.asarray(actuals, dtype=np.float64)
    b = np.broadcast_to(np.asarray(baseline, dtype=np.float64), a.shape)
    if f.shape != a.shape:
        raise PreconditionError(f"forecasts shape {f.shape} != actuals shape {a.shape}")
    if a.size < 2:
        raise PreconditionError("r_squared needs at least two evaluation units")
    denom = float(np.sum((a - b) ** 2))
    if denom == 0.0:
        raise DegenerateBaseline("actuals coincide with the baseline")
    return 1.0 - float(np.sum((a - f) ** 2)) / denom


# --------------------------------------------------------------------------- comparators


def _restrict(tensor: ObservationTensor, split: PanelSplit, donor_filter: Callable[[str], bool]):
    keep = [split.treatment_index] + [
        i for i in range(tensor.n_units) if i != split.treatment_index and donor_filter(tensor.unit_labels[i])
    ]
    if len(keep) == 1:
        raise EmptyDonorPool("no donor passes the restriction")
    return tensor.select_units(keep), PanelSplit(0, split.t0)


def forecast(
    tensor: ObservationTensor,
    split: PanelSplit,
    policy: ThresholdPolicy,
    weights: Optional[MetricWeights] = None,
    comparator: str = MRSC,
    donor_filter: Optional[Callable[[str], bool]] = None,
) -> ForecastReport:
    """Unscored counterfactual trajectories for ``split.treatment_index`` under one comparator."""
    if comparator == RESTRICTED_DONOR_POOL:
        if donor_filter is None:
            raise PreconditionError("RESTRICTED_DONOR_POOL needs a donor_filter")
        tensor, split = _restrict(tensor, split, donor_filter)
        comparator = MRSC

    if comparator == RSC_PER_METRIC:
        rows = []
        for k in range(tensor.n_metrics):
            sub = tensor.select_metrics([k])
            rows.append(forecast(sub, split, policy, None, MRSC).trajectories[0])
        return ForecastReport(np.vstack(rows), tensor.metric_labels, split.t0)

    panel = flatten(tensor, split)
    if comparator == MRSC:
        model = hsvt(panel, policy)
        control = fit(model, panel, split, weights)
    elif comparator == REGRESSION_NO_DENOISE:
        model = no_denoise(panel)
        control = fit(model, panel, split, weights)
    elif comparator == DONOR_POOL_AVERAGE:
        model = hsvt(panel, policy)
        beta = np.full(model.n_donors, 1.0 / model.n_donors)
        control = SyntheticControl(beta, weights or MetricWeights.uniform(panel.n_metrics), model.retained_rank, float("nan"), 0, "DonorPoolAverage")
    else:
        raise PreconditionError(f"unknown comparator {comparator!r}; choose from {COMPARATORS}")
    return predict(control, model, tensor.metric_labels, split.t0)


def placebo_evaluate(
    data: ObservationTensor,
    treatment: Union[str, int],
    t0: int,
    policy: ThresholdPolicy,
    weights: Optional[MetricWeights] = None,
    comparator: str = MRSC,
    donor_filter: Optional[Callable[[str], bool]] = None,
    horizons: Sequence[int] = (),
) -> ForecastReport:
    """Fit on the pre-intervention window and score against the unit's own held-out observations."""
    tensor = getattr(data, "tensor", data)
    split = PanelSplit(tensor.unit_index(treatment), int(t0))
    split.validate(tensor)
    actual = observed_trajectories(tensor, split.treatment_index)
    if np.all(np.isnan(actual[:, split.t0 :])):
        raise PreconditionError("placebo unit has no observed post-intervention data")
    report = forecast(tensor, split, policy, weights, comparator, donor_filter)
    report = score(report, actual, split)
    if horizons:
        # MAPE summarised on the first metric, the usual quantity of interest
        report = replace(report, mape=mape(report.trajectories[0], actual[0], horizons, t0=split.t0))
    return report


def ablation_comparators(
    data: ObservationTensor,
    treatment: Union[str, int],
    t0: int,
    policy: ThresholdPolicy,
    weights: Optional[MetricWeights] = None,
    comparator: str = MRSC,
    donor_filter: Optional[Callable[[str], bool]] = None,
) -> ForecastReport:
    return placebo_evaluate(data, treatment, t0, policy, weights, comparator, donor_filter)


# --------------------------------------------------------------------------- cross-validation


@dataclass(frozen=True)
class CVResult:
    policy: ThresholdPolicy
    weights: MetricWeights
    scores: Tuple[dict, ...]


def _weight_deviation(w: MetricWeights) -> float:
    v = np.asarray(w.w)
    v = v / v.sum()
    return float(np.linalg.norm(v - 1.0 / v.size))


def cross_validate(
    tensor: ObservationTensor,
    split: PanelSplit,
    policies: Sequence[ThresholdPolicy],
    weight_grid: Optional[Sequence[MetricWeights]] = None,
    fit_fraction: float = 0.7,
) -> CVResult:
    """Pick (policy, weights) by forward-chaining validation inside the pre-intervention window.

    The treatment unit's first ``fit_fraction`` of pre-intervention periods
    are used for fitting and the rest for validation.  Validation MSE is
    averaged over metrics; near-ties (relative 1e-9) go to the smaller
    retained rank, then to weights closer to uniform.
    """
    split.validate(tensor)
    if split.t0 < 4:
        raise PreconditionError("cross-validation needs t0 >= 4")
    if not policies:
        raise PreconditionError("empty policy grid")
    weight_grid = list(weight_grid) if weight_grid else [MetricWeights.uniform(tensor.n_metrics)]

    t_fit = min(max(1, int(round(fit_fraction * split.t0))), split.t0 - 1)
    inner = PanelSplit(split.treatment_index, t_fit)
    panel = flatten(tensor, inner)
    actual = observed_trajectories(tensor, split.treatment_index)[:, t_fit : split.t0]

    scores = []
    for (pi, policy), (wi, weights) in itertools.product(enumerate(policies), enumerate(weight_grid)):
        try:
            model = hsvt(panel, policy)
        except RankTooLarge:
            continue
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            control = fit(model, panel, inner, weights)
        pred = predict(control, model).trajectories[:, t_fit : split.t0]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            err = float(np.nanmean(np.nanmean((pred - actual) ** 2, axis=1)))
        scores.append(
            {"policy": pi, "weights": wi, "rank": model.retained_rank, "deviation": _weight_deviation(weights), "mse": err}
        )
    if not scores:
        raise PreconditionError("no grid point could be evaluated")

    best = min(s["mse"] for s in scores)
    # relative tie band, floored at round-off level of the validation signal
    scale = float(np.nanmean(actual**2)) if np.isfinite(actual).any() else 0.0
    tol = 1e-9 * abs(best) + 1e-20 * scale
    tied = [s for s in scores if s["mse"] <= best + tol]
    pick = min(tied, key=lambda s: (s["rank"], s["deviation"], s["policy"], s["weights"]))
    return CVResult(policies[pick["policy"]], weight_grid[pick["weights"]], tuple(scores))


# --------------------------------------------------------------------------- benchmark harness


@dataclass(frozen=True)
class ExperimentConfig:
    """Seeded sweep over a generator preset.

    Every combination of ``n_units_grid`` x ``t0_grid`` x ``metric_counts`` x
    ``rho_grid`` is evaluated on the same ``n_trials`` bundles per ``n_units``
    (paired seeds).  A ``t0`` below 1 is read as a fraction of ``n_periods``.
    ``metric_counts`` selects the first K generated metrics.
    """

    generator: str = "lvm"
    n_units_grid: Tuple[int, ...] = (100,)
    n_periods: int = 50
    alpha_per_metric: Tuple[float, ...] = (0.7, 0.3)
    noise_sd: float = 1.0
    pool_size: int = 10
    share_latents: bool = True
    rank: int = 2
    t0_grid: Tuple[float, ...] = (25,)
    policy_grid: Tuple[dict, ...] = ({"lambda": "auto"},)
    weight_grid: Tuple[Optional[Tuple[float, ...]], ...] = (None,)
    metric_counts: Tuple[Optional[int], ...] = (None,)
    rho_grid: Tuple[float, ...] = (1.0,)
    n_trials: int = 100
    seed: int = 0
    comparators: Tuple[str, ...] = (MRSC, RSC_PER_METRIC)
    horizons: Tuple[int, ...] = ()

    def __post_init__(self):
        if self.n_trials < 1:
            raise PreconditionError("n_trials must be >= 1")
        for name in ("n_units_grid", "t0_grid", "policy_grid", "weight_grid", "metric_counts", "rho_grid", "comparators"):
            value = tuple(getattr(self, name))
            if not value:
                raise PreconditionError(f"{name} must be nonempty")
            object.__setattr__(self, name, value)
        for c in self.comparators:
            if c not in COMPARATORS or c == RESTRICTED_DONOR_POOL:
                raise PreconditionError(f"comparator {c!r} not available in synthetic sweeps")
        if self.generator not in ("lvm", "lowrank"):
            raise PreconditionError(f"unknown generator {self.generator!r}")
        object.__setattr__(self, "alpha_per_metric", tuple(self.alpha_per_metric))
        object.__setattr__(self, "horizons", tuple(self.horizons))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        preset = d.pop("preset", None)
        base = dict(BENCHMARK_PRESETS[preset]) if preset else {}
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise PreconditionError(f"unknown config keys {sorted(unknown)}")
        base.update(d)
        for key in ("weight_grid",):
            if key in base:
                base[key] = tuple(None if w is None else tuple(w) for w in base[key])
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in base.items()})

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


BENCHMARK_PRESETS: Dict[str, dict] = {
    "paper-5.1": dict(
        n_units_grid=(50, 100, 200, 500),
        n_periods=50,
        t0_grid=(25,),
        n_trials=100,
        comparators=(MRSC, RSC_PER_METRIC),
    ),
    "smoke": dict(n_units_grid=(50,), n_periods=30, t0_grid=(15,), n_trials=1, comparators=(MRSC, RSC_PER_METRIC)),
    "noiseless-lowrank": dict(
        generator="lowrank",
        n_units_grid=(20, 100),
        n_periods=30,
        alpha_per_metric=(0.0, 0.0),
        noise_sd=0.0,
        rank=2,
        policy_grid=({"rank": 2},),
        t0_grid=(15,),
        n_trials=5,
        comparators=(MRSC, RSC_PER_METRIC),
    ),
}


def _trial_seed(seed: int, n_units: int, trial: int) -> int:
    return int(np.random.SeedSequence([seed, n_units, trial]).generate_state(1)[0])


def _bundle(config: ExperimentConfig, n_units: int, trial_seed: int):
    if config.generator == "lowrank":
        return generate_lowrank_tensor(
            n_units + 1, config.n_periods, len(config.alpha_per_metric), config.rank, trial_seed, config.noise_sd
        )
    spec = LvmSpec(
        n_units=n_units,
        n_periods=config.n_periods,
        pool_size=config.pool_size,
        alpha_per_metric=config.alpha_per_metric,
        noise_sd=config.noise_sd,
        share_latents=config.share_latents,
        seed=trial_seed,
    )
    return generate_lvm(spec)


def _resolve_t0(t0: float, n_periods: int) -> int:
    return int(round(t0 * n_periods)) if t0 < 1 else int(t0)


def _run_trial(config: ExperimentConfig, n_units: int, trial: int) -> List[dict]:
    tseed = _trial_seed(config.seed, n_units, trial)
    bundle = _bundle(config, n_units, tseed)
    truth_full = bundle.target_mean
    records = []
    for rho in config.rho_grid:
        tensor = bundle.tensor
        if rho < 1.0:
            tensor = mask_donors(tensor, 0, rho, make_rng(tseed, 1, int(round(rho * 1e6))))
        baseline_full = np.array(
            [np.nanmean(np.where(tensor.mask[1:, :, k], tensor.values[1:, :, k], np.nan), axis=0) for k in range(tensor.n_metrics)]
        )
        for kc, t0v, (pi, pol), (wi, w) in itertools.product(
            config.metric_counts, config.t0_grid, enumerate(config.policy_grid), enumerate(config.weight_grid)
        ):
            k = kc or tensor.n_metrics
            sub = tensor.select_metrics(list(range(k)))
            truth = truth_full[:k]
            t0 = _resolve_t0(t0v, config.n_periods)
            split = PanelSplit(0, t0)
            policy = policy_from_dict(pol)
            weights = MetricWeights(tuple(w)[:k]) if w is not None else None
            for comp in config.comparators:
                base = {
                    "n_units": n_units, "trial": trial, "seed": tseed, "rho": rho, "n_metrics": k,
                    "t0": t0, "policy": pi, "weights": wi, "comparator": comp,
                }
                try:
                    with warnings.catch_warnings():
                        warnings.simplefilter("ignore")
                        rep = score(forecast(sub, split, policy, weights, comp), truth, split)
                except MRSCError as exc:
                    for m in range(k):
                        records.append({**base, "metric": m, "error": type(exc).__name__})
                    continue
                for m in range(k):
                    rec = {
                        **base,
                        "metric": m,
                        "pre_mse": float(rep.pre_mse[m]),
                        "post_mse": float(rep.post_mse[m]),
                        "rmse": float(np.sqrt(rep.post_mse[m])),
                        "error": "",
                    }
                    if config.horizons:
                        with warnings.catch_warnings():
                            warnings.simplefilter("ignore")
                            mp = mape(rep.trajectories[m], truth[m], config.horizons, t0=t0)
                        for h in config.horizons:
                            rec[f"mape_h{h}"] = mp[h]
                            idx = t0 + h - 1
                            rec[f"fc_h{h}"] = float(rep.trajectories[m, idx])
                            rec[f"actual_h{h}"] = float(truth[m, idx])
                            rec[f"baseline_h{h}"] = float(baseline_full[m, idx])
                    records.append(rec)
    return records


GROUP_KEYS = ("n_units", "rho", "n_metrics", "t0", "policy", "weights", "comparator", "metric")


@dataclass
class BenchmarkResult:
    config: ExperimentConfig
    records: List[dict]
    metadata: dict = field(default_factory=dict)

    def summary(self) -> List[dict]:
        """Aggregates recomputed from the raw records, grouped by configuration, comparator and metric."""
        groups: Dict[tuple, List[dict]] = {}
        for r in self.records:
            groups.setdefault(tuple(r[k] for k in GROUP_KEYS), []).append(r)
        out = []
        for key in sorted(groups):
            recs = [r for r in groups[key] if not r.get("error")]
            row = dict(zip(GROUP_KEYS, key))
            row["n_ok"] = len(recs)
            row["n_failed"] = len(groups[key]) - len(recs)
            if recs:
                row["rmse_mean"] = float(np.mean([r["rmse"] for r in recs]))
                row["mse_train_mean"] = float(np.mean([r["pre_mse"] for r in recs]))
                row["mse_test_mean"] = float(np.mean([r["post_mse"] for r in recs]))
                for h in self.config.horizons:
                    vals = np.array([r[f"mape_h{h}"] for r in recs])
                    row[f"mape_h{h}_mean"] = float(np.nanmean(vals))
                    row[f"mape_h{h}_median"] = float(np.nanmedian(vals))
                    if len(recs) >= 2:
                        try:
                            row[f"r2_h{h}"] = r_squared(
                                [r[f"fc_h{h}"] for r in recs], [r[f"actual_h{h}"] for r in recs], [r[f"baseline_h{h}"] for r in recs]
                            )
                        except DegenerateBaseline:
                            row[f"r2_h{h}"] = None
            out.append(row)
        return out

    def lookup(self, **where) -> List[dict]:
        return [row for row in self.summary() if all(row[k] == v for k, v in where.items())]

    def write(self, out_dir: Union[str, Path]) -> Dict[str, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {"raw": out_dir / "trials.csv", "summary": out_dir / "summary.json", "plot": out_dir / "plot_long.csv"}
        fields = sorted({k for r in self.records for k in r}, key=lambda k: (k not in GROUP_KEYS, k))
        with paths["raw"].open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=fields)
            w.writeheader()
            for r in self.records:
                w.writerow(r)
        summary = self.summary()
        paths["summary"].write_text(
            json.dumps({"config": self.config.to_dict(), "metadata": self.metadata, "summary": summary}, indent=2, sort_keys=True)
        )
        with paths["plot"].open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["config", "comparator", "metric", "statistic", "value"])
            for row in summary:
                cfg = f"N={row['n_units']};rho={row['rho']};K={row['n_metrics']};t0={row['t0']};policy={row['policy']};weights={row['weights']}"
                for stat in sorted(k for k in row if k.endswith(("_mean", "_median")) or k.startswith("r2_")):
                    w.writerow([cfg, row["comparator"], row["metric"], stat, row[stat]])
        return paths


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("MRSC_THREADS", "1")))
    except ValueError:
        return 1


def run_synthetic_benchmark(config: ExperimentConfig, workers: Optional[int] = None) -> BenchmarkResult:
    """Run every trial of the sweep; failures are recorded per trial rather than raised."""
    jobs = [(n, t) for n in config.n_units_grid for t in range(config.n_trials)]
    workers = workers or _workers()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(lambda job: _run_trial(config, *job), jobs))
    else:
        chunks = [_run_trial(config, *job) for job in jobs]
    records = [r for chunk in chunks for r in chunk]
    meta = {"rng": RNG_NAME, "policies": [policy_to_dict(policy_from_dict(p)) for p in config.policy_grid]}
    return BenchmarkResult(config, records, meta)


def run_diagnostic_table(
    n_seeds: int = 20,
    seed: int = 0,
    n_units: int = 100,
    n_periods: int = 120,
    energy_threshold: float = 0.995,
    pass_ratio: float = 1.25,
) -> List[dict]:
    """Rank table on noiseless means: metric ranks, combined with shared latents, combined with distinct latents."""
    rows = []
    for s in range(n_seeds):
        tseed = _trial_seed(seed, n_units, s)
        same = generate_lvm(LvmSpec(n_units=n_units, n_periods=n_periods, noise_sd=0.0, seed=tseed))
        diff = generate_lvm(LvmSpec(n_units=n_units, n_periods=n_periods, noise_sd=0.0, share_latents=False, seed=tseed))
        rs = rank_preservation_diagnostic(ObservationTensor(same.mean_tensor, np.ones(same.mean_tensor.shape, bool)), energy_threshold, pass_ratio)
        rd = rank_preservation_diagnostic(ObservationTensor(diff.mean_tensor, np.ones(diff.mean_tensor.shape, bool)), energy_threshold, pass_ratio)
        rows.append(
            {
                "seed": tseed,
                "metric1": rs.per_metric_rank[0],
                "metric2": rs.per_metric_rank[1],
                "combined_same": rs.combined_rank,
                "combined_different": rd.combined_rank,
                "same_passed": rs.passed,
                "different_passed": rd.passed,
            }
        )
    return rows
