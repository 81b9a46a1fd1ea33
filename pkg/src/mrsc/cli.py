"""Command-line interface.

Exit codes: 0 success, 2 input error, 3 numerical failure.  Errors are
reported on stderr as a JSON object ``{"error": ..., "message": ...}``.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__
from .denoise import (
    DEFAULT_ENERGY,
    DEFAULT_PASS_RATIO,
    EnergyFraction,
    FixedRank,
    SingularValueCutoff,
    UniversalCutoff,
    policy_to_dict,
    rank_preservation_diagnostic,
)
from .errors import MRSCError
from .evaluation import COMPARATORS, ExperimentConfig, mape, run_diagnostic_table, run_synthetic_benchmark
from .ingest import load_manifest, validate_manifest
from .pipeline import observed_trajectories, run_mrsc
from .regression import MetricWeights, residual_bootstrap_band, score
from .synthgen import LvmSpec, generate_lowrank_tensor, generate_lvm, make_rng
from .tensor import mask_donors

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False, default=_jsonable)


def _jsonable(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"not JSON serialisable: {type(x).__name__}")


def _clean(obj):
    """Replace NaN/inf with None so outputs stay strict JSON."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (float, np.floating)) and not np.isfinite(obj):
        return None
    return obj


def _policy(args):
    if args.rank is not None:
        return FixedRank(args.rank)
    if args.energy is not None:
        return EnergyFraction(args.energy)
    if args.lam is not None:
        return UniversalCutoff() if args.lam == "auto" else SingularValueCutoff(float(args.lam))
    return UniversalCutoff()


def _weights(text: Optional[str], k: int) -> Optional[MetricWeights]:
    if not text:
        return None
    w = tuple(float(x) for x in text.split(","))
    if len(w) != k:
        raise MRSCError(f"--weights has {len(w)} entries for K={k} metrics")
    return MetricWeights(w)


def _add_policy_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_mutually_exclusive_group()
    g.add_argument("--rank", type=int, help="keep exactly this many singular values")
    g.add_argument("--energy", type=float, help="keep singular values up to this energy fraction")
    g.add_argument("--lambda", dest="lam", help="singular value cutoff, or 'auto' (default)")


# --------------------------------------------------------------------------- commands


def cmd_validate(args) -> int:
    report = validate_manifest(args.manifest)
    print(_dump(_clean(report)))
    return EXIT_OK if report["valid"] else EXIT_INPUT


def cmd_diagnose(args) -> int:
    ds = load_manifest(args.manifest)
    rep = rank_preservation_diagnostic(ds.tensor, args.energy, args.pass_ratio)
    out = rep.to_dict()
    out["metric_labels"] = list(ds.tensor.metric_labels)
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        spectra = list(rep.per_metric_spectra) + ([rep.combined_spectrum] if ds.tensor.n_metrics > 1 else [])
        names = list(ds.tensor.metric_labels) + (["combined"] if ds.tensor.n_metrics > 1 else [])
        length = max(len(s) for s in spectra)
        with (out_dir / "spectra.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", *names])
            for i in range(length):
                w.writerow([i + 1, *(repr(float(s[i])) if i < len(s) else "" for s in spectra)])
        (out_dir / "diagnostic.json").write_text(_dump(out))
    print(_dump(out))
    print(f"{'matrix':<24}{'effective rank':>16}", file=sys.stderr)
    for label, r in zip(ds.tensor.metric_labels, rep.per_metric_rank):
        print(f"{label:<24}{r:>16}", file=sys.stderr)
    print(f"{'combined':<24}{rep.combined_rank:>16}", file=sys.stderr)
    print(f"ratio={rep.ratio:.3f} passed={rep.passed} {rep.note}".rstrip(), file=sys.stderr)
    return EXIT_OK


def cmd_forecast(args) -> int:
    ds = load_manifest(args.manifest)
    t0 = args.t0 * args.period_scale if args.t0 is not None else None
    split = ds.split(args.treatment, t0)
    split.validate(ds.tensor)
    policy = _policy(args)
    weights = _weights(args.weights, ds.tensor.n_metrics)
    result = run_mrsc(ds.tensor, split, policy, weights)

    actual = observed_trajectories(ds.tensor, split.treatment_index)
    report = result.report
    has_post = not np.all(np.isnan(actual[:, split.t0 :]))
    if has_post:
        report = score(report, actual, split)
    if args.band:
        band = residual_bootstrap_band(result.model, result.panel, split, weights, n_boot=args.band, seed=args.seed)
        report = replace(report, band=band)

    labels = ds.tensor.metric_labels
    forecast_doc = {
        "treatment": ds.tensor.unit_labels[split.treatment_index],
        "t0": split.t0,
        "periods": list(ds.period_labels),
        "trajectories": {labels[k]: report.trajectories[k].tolist() for k in range(len(labels))},
    }
    if report.band is not None:
        forecast_doc["band"] = report.to_dict()["band"]
    summary = report.to_dict()
    summary.pop("metrics", None)
    summary.pop("band", None)
    if has_post and args.horizons:
        hs = [int(h) for h in args.horizons.split(",")]
        summary["mape"] = {
            labels[k]: {str(h): v for h, v in mape(report.trajectories[k], actual[k], hs, t0=split.t0).items()}
            for k in range(len(labels))
        }
    report_doc = {
        "treatment": forecast_doc["treatment"],
        "dims": {"n_units": ds.tensor.n_units, "n_periods": ds.tensor.n_periods, "n_metrics": ds.tensor.n_metrics},
        "policy": policy_to_dict(policy),
        "weights": list(result.control.weights.w),
        "retained_rank": result.model.retained_rank,
        "rho_hat": result.model.rho_hat,
        "spectrum": result.model.singular_values_all.tolist(),
        "control": {**result.control.to_dict(), "donors": list(result.panel.donor_labels)},
        "scores": summary,
        "scored_against": "observed post-intervention values" if has_post else None,
        "seed": args.seed,
    }
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "forecast.json").write_text(_dump(_clean(forecast_doc)))
    (out / "report.json").write_text(_dump(_clean(report_doc)))
    if args.save_model:
        result.model.save(out / "model")
    print(_dump(_clean({"out": str(out), "retained_rank": result.model.retained_rank, "post_mse": summary.get("post_mse_mean")})))
    return EXIT_OK


def cmd_benchmark(args) -> int:
    out = Path(args.out)
    if args.preset == "diagnostic-table":
        rows = run_diagnostic_table(
            n_seeds=args.trials or 20, seed=args.seed or 0, energy_threshold=args.energy, pass_ratio=args.pass_ratio
        )
        out.mkdir(parents=True, exist_ok=True)
        with (out / "diagnostic_table_trials.csv").open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
        table = [
            {"matrix": name, "median_rank": float(np.median([r[key] for r in rows]))}
            for name, key in (
                ("metric1", "metric1"),
                ("metric2", "metric2"),
                ("combined (same row and column params)", "combined_same"),
                ("combined (different row and column params)", "combined_different"),
            )
        ]
        doc = {
            "energy_threshold": args.energy,
            "pass_ratio": args.pass_ratio,
            "table": table,
            "same_passed_fraction": float(np.mean([r["same_passed"] for r in rows])),
            "different_failed_fraction": float(np.mean([not r["different_passed"] for r in rows])),
        }
        (out / "diagnostic_table.json").write_text(_dump(doc))
        for row in table:
            print(f"{row['matrix']:<46}{row['median_rank']:>8g}")
        return EXIT_OK

    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise MRSCError(f"cannot read config {args.config}: {exc}") from None
    else:
        raw = {"preset": args.preset or "smoke"}
    if args.trials is not None:
        raw["n_trials"] = args.trials
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.comparators:
        raw["comparators"] = args.comparators.split(",")
    try:
        config = ExperimentConfig.from_dict(raw)
    except TypeError as exc:
        raise MRSCError(f"bad config: {exc}") from None
    result = run_synthetic_benchmark(config)
    paths = result.write(out)
    print(f"{'N':>6} {'comparator':<24}{'metric':>7}{'rmse_mean':>12}{'mse_test':>12}")
    for row in result.summary():
        if "rmse_mean" in row:
            print(f"{row['n_units']:>6} {row['comparator']:<24}{row['metric']:>7}{row['rmse_mean']:>12.4f}{row['mse_test_mean']:>12.4f}")
    print(_dump({k: str(v) for k, v in paths.items()}), file=sys.stderr)
    return EXIT_OK


def cmd_generate(args) -> int:
    if args.lowrank:
        bundle = generate_lowrank_tensor(args.n_units + 1, args.n_periods, args.n_metrics, args.lowrank, args.seed, args.noise_sd)
    else:
        alphas = tuple(float(a) for a in args.alphas.split(","))
        spec = LvmSpec(
            n_units=args.n_units,
            n_periods=args.n_periods,
            alpha_per_metric=alphas,
            noise_sd=args.noise_sd,
            share_latents=not args.different_latents,
            seed=args.seed,
        )
        bundle = generate_lvm(spec)
    if args.rho < 1.0:
        masked = mask_donors(bundle.tensor, 0, args.rho, make_rng(args.seed, 1))
        bundle = type(bundle)(masked, bundle.mean_tensor, bundle.beta_star, {**bundle.metadata, "rho": args.rho})
    t0 = args.t0 if args.t0 is not None else max(1, args.n_periods // 2)
    manifest = bundle.export(args.out, t0)
    print(_dump({"manifest": str(manifest), "missing": bundle.tensor.n_missing}))
    return EXIT_OK


# --------------------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mrsc", description="Multi-metric robust synthetic control.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a dataset manifest and report dimensions and missingness")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("diagnose", help="rank-preservation diagnostic across metrics")
    p.add_argument("--manifest", required=True)
    p.add_argument("--energy", type=float, default=DEFAULT_ENERGY)
    p.add_argument("--pass-ratio", type=float, default=DEFAULT_PASS_RATIO)
    p.add_argument("--out", help="directory for diagnostic.json and spectra.csv")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("forecast", help="fit and forecast the treatment unit's counterfactual")
    p.add_argument("--manifest", required=True)
    p.add_argument("--treatment", help="treatment unit label (overrides manifest)")
    p.add_argument("--t0", type=int, help="intervention period (overrides manifest)")
    p.add_argument("--period-scale", type=int, default=1, help="multiply --t0 by this (e.g. 6 balls per over)")
    _add_policy_flags(p)
    p.add_argument("--weights", help="comma-separated metric weights w1,...,wK")
    p.add_argument("--horizons", help="comma-separated MAPE horizons, scored when post data exist")
    p.add_argument("--band", type=int, default=0, metavar="B", help="add a residual-bootstrap band from B resamples")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--save-model", action="store_true", help="also write model.json + model.npy")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("benchmark", help="seeded synthetic benchmark sweeps")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--preset", help="paper-5.1, smoke, noiseless-lowrank or diagnostic-table")
    src.add_argument("--config", help="JSON ExperimentConfig")
    p.add_argument("--trials", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--comparators", help=f"comma-separated subset of {','.join(COMPARATORS[:4])}")
    p.add_argument("--energy", type=float, default=DEFAULT_ENERGY, help="diagnostic-table only")
    p.add_argument("--pass-ratio", type=float, default=DEFAULT_PASS_RATIO, help="diagnostic-table only")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("generate", help="export a synthetic bundle in manifest format")
    p.add_argument("--n-units", type=int, default=100, help="donor count; the target is added as row 0")
    p.add_argument("--n-periods", type=int, default=50)
    p.add_argument("--alphas", default="0.7,0.3")
    p.add_argument("--noise-sd", type=float, default=1.0)
    p.add_argument("--different-latents", action="store_true")
    p.add_argument("--lowrank", type=int, metavar="R", help="exact rank-R tensor instead of the logistic model")
    p.add_argument("--n-metrics", type=int, default=2, help="metric count for --lowrank")
    p.add_argument("--rho", type=float, default=1.0, help="donor observation probability")
    p.add_argument("--t0", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except MRSCError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return exc.exit_code
    except (OSError, KeyError, ValueError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return EXIT_INPUT
    except (np.linalg.LinAlgError, FloatingPointError, ArithmeticError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
