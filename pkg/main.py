"""
Main entry point for MomentFit
Command-line workflows: summarize raw data, fit a summary, evaluate a fit,
and reproduce the simulation studies
"""

import argparse
import logging
import sys
import time
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import ValidationError

sys.path.append(str(Path(__file__).parent))

from config import Config
from erlang_model.erlang_core import cdf, mixture_to_dict, pdf, quantile, quantiles
from erlang_model.fitter import FitOptions, fit, weighted_modes
from erlang_model.uncertainty import density_band, quantile_band, qq_table, tvar_band
from experiments.calibration import calibrate_reflection_point
from experiments.datasets import DATASET_NAMES, DEFAULT_N_OBS, DatasetSpec, truth_distribution
from experiments.resampling import (DEFAULT_K_GRID, DEFAULT_N_GRID, ReplicateTask, ResamplingPlan,
                                    run_replicate, run_resampling)
from utils.errors import DomainError, FitFailedError, MomentFitError, SummaryParseError
from utils.logger import log_exception, setup_logger
from utils.metrics import distance_report, ks_test
from utils.serialization import read_fit, write_csv, write_fit, write_json
from utils.summary_data import partition_from_levels, read_summary, summarize_sample, write_summary

logger = logging.getLogger("momentfit")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_FIT = 3
MAX_FAILURE_SHARE = 0.10
BAND_GRID_POINTS = 200
STUDIES = ("lognormal-table", "gaussrevgamma-table", "k-sweep", "boxplots", "ks-report")


# ---------------------------------------------------------------------------
# Argument helpers

def _float_list(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _fit_options(args: argparse.Namespace) -> FitOptions:
    """FitOptions from Config defaults overridden by flags"""
    overrides = {
        "n": args.n, "r": args.order, "a_lambda": args.a_lambda,
        "b_lambda": args.b_lambda, "seed": args.seed, "max_outer": args.max_outer,
        "scale_by_n": args.scale_by_n, "hessian": args.curvature,
    }
    return FitOptions(**{k: v for k, v in overrides.items() if v is not None})


def _add_fit_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--n", type=int, help=f"Mixture size (default {Config.MIXTURE_SIZE})")
    parser.add_argument("--order", type=int, help=f"Penalty order r (default {Config.PENALTY_ORDER})")
    parser.add_argument("--a-lambda", type=float, help="Gamma prior shape on lambda")
    parser.add_argument("--b-lambda", type=float, help="Gamma prior scale on lambda (inf allowed)")
    parser.add_argument("--max-outer", type=int, help="Maximum outer iterations")
    parser.add_argument("--seed", type=int, help=f"Random seed (default {Config.SEED})")
    parser.add_argument("--curvature", choices=("expected", "observed"),
                        help="Curvature behind lambda and the bands (default expected)")
    llh = parser.add_mutually_exclusive_group()
    llh.add_argument("--scale-by-n", dest="scale_by_n", action="store_true", default=None,
                     help="Multinomial times N and moment covariance over N (default)")
    llh.add_argument("--verbatim-llh", dest="scale_by_n", action="store_false",
                     help="Loglikelihood without N factors")


def _read_sample(path: str) -> np.ndarray:
    """One value per line"""
    frame = pd.read_csv(path, header=None, comment="#")
    values = pd.to_numeric(frame.iloc[:, 0], errors="raise").to_numpy(dtype=float)
    if values.size == 0:
        raise DomainError(f"{path} holds no values")
    if np.any(~np.isfinite(values)):
        raise DomainError(f"{path} holds non-finite values")
    if np.any(values < 0):
        raise DomainError(f"{path} holds negative values; data must lie on [0, inf)")
    return values


def _out_dir(args: argparse.Namespace) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# Commands

def cmd_fit(args: argparse.Namespace) -> int:
    """Fit a summary file; writes fit.json, mixture.json, modes.csv and the optional tables"""
    options = _fit_options(args)
    summary = read_summary(args.input)
    reference = _read_sample(args.qq) if args.qq else None
    if not 0.0 <= args.level < 1.0:
        raise DomainError(f"--level must lie in [0, 1), got {args.level}")

    # Inputs are valid from here on; anything the estimator raises is a fit failure
    try:
        result = fit(summary, options)
        bands = _fit_bands(result, args.level) if args.bands else None
    except (DomainError, ValueError, ArithmeticError) as e:
        raise FitFailedError(f"{type(e).__name__}: {e}") from e

    out = _out_dir(args)
    write_fit(result, out / "fit.json", include_hessian=args.hessian)
    write_json(mixture_to_dict(result.mixture), out / "mixture.json")
    x, heights = weighted_modes(result)
    write_csv(pd.DataFrame({"x": x, "weighted_height": heights,
                            "weight": result.mixture.weights}), out / "modes.csv")
    if bands is not None:
        write_csv(bands, out / "bands.csv")
    if reference is not None:
        write_csv(qq_table(result, reference), out / "qq.csv")

    print(f"lambda: {result.lambda_!r}")
    print(f"effective_dim: {result.effective_dim!r}")
    print(f"converged: {str(result.converged).lower()} ({result.outer_iters} outer iterations)")
    return EXIT_OK


def _fit_bands(result, level: float) -> pd.DataFrame:
    upper = quantile(result.mixture, 0.999)
    frames = []
    for kind, band in (
        ("density", density_band(result, np.linspace(0.0, upper, BAND_GRID_POINTS), level)),
        ("quantile", quantile_band(result, Config.QUANTILE_LEVELS, level)),
        ("tvar", tvar_band(result, Config.QUANTILE_LEVELS, level)),
    ):
        frame = band.to_frame()
        frame.insert(0, "band", kind)
        frames.append(frame)
    return pd.concat(frames, ignore_index=True)


def cmd_summarize(args: argparse.Namespace) -> int:
    """Summarize a raw sample at empirical quantile levels; writes summary.json"""
    sample = _read_sample(args.data)
    partition = partition_from_levels(sample, args.levels)
    if args.k is not None:
        k = args.k
    elif len(Config.MOMENT_COUNTS) == partition.n_bins:
        k = Config.MOMENT_COUNTS
    else:
        k = [1] * partition.n_bins
    summary = summarize_sample(sample, partition, k)

    out = _out_dir(args)
    write_summary(summary, out / "summary.json")
    print(f"bins: {summary.n_bins}, n_obs: {summary.n_obs}")
    print("pi_hat: " + ", ".join(f"{p:.3f}" for p in summary.pi_hat))
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    """Score a fit against a raw sample (KS, QQ) and/or a named truth (distances)"""
    record = read_fit(args.fit)
    mix = record.mixture()
    sample = _read_sample(args.data) if args.data else None
    if sample is None and not args.truth:
        raise DomainError("evaluate needs --data, --truth or both")

    evaluation = {"theta": mix.scale, "n": mix.n, "mean": mix.mean()}
    if sample is not None:
        stat, pvalue = ks_test(np.sort(sample), lambda x: cdf(mix, x))
        evaluation["ks"] = {"stat": stat, "pvalue": pvalue, "n": int(sample.size)}
    if args.truth:
        truth = truth_distribution(args.truth)
        report = distance_report(
            q_fit=lambda p: quantile(mix, p), F_fit=lambda x: cdf(mix, x),
            f_fit=lambda x: pdf(mix, x), q_true=truth.ppf,
            F_true=lambda x: float(truth.cdf(x)), f_true=lambda x: float(truth.pdf(x)),
        )
        evaluation["truth"] = args.truth
        evaluation["distances"] = report.to_dict()
        evaluation["quantiles"] = {
            f"{a:g}": {"fitted": float(q), "true": truth.ppf(a)}
            for a, q in zip(Config.QUANTILE_LEVELS, quantiles(mix, Config.QUANTILE_LEVELS))
        }

    out = _out_dir(args)
    write_json(evaluation, out / "evaluation.json")
    if sample is not None:
        write_csv(qq_table(mix, sample), out / "qq.csv")
    if "ks" in evaluation:
        print(f"KS: D={evaluation['ks']['stat']:.4f} p={evaluation['ks']['pvalue']:.4f}")
    if "distances" in evaluation:
        for key in ("l2_quantile", "l2_cdf", "l1_quantile", "kl"):
            print(f"{key}: {evaluation['distances'][key]:.6g}")
    return EXIT_OK


def _ks_report(args: argparse.Namespace, options: FitOptions) -> pd.DataFrame:
    rows = []
    for name in DATASET_NAMES:
        spec = DatasetSpec(name=name, n_obs=DEFAULT_N_OBS[name], seed=args.seed)
        task = ReplicateTask(spec=spec, n_obs=spec.n_obs, k=spec.k, replicate=0,
                             alphas=tuple(Config.QUANTILE_LEVELS), fit_options=options,
                             distances=True)
        rows.append(run_replicate(task))
    return pd.DataFrame(rows)


def cmd_reproduce(args: argparse.Namespace) -> int:
    """Run one simulation study and write its CSV tables"""
    options = _fit_options(args)
    out = _out_dir(args)
    start = time.perf_counter()

    if args.study == "ks-report":
        frame = _ks_report(args, options)
        write_csv(frame, out / "ks_report.csv")
        failures, total = int((frame["error"] != "").sum()), len(frame)
    else:
        dataset = {"lognormal-table": "lognormal",
                   "gaussrevgamma-table": "gaussrevgamma"}.get(args.study, args.dataset)
        reflection_point = None
        if dataset == "gaussrevgamma":
            calibration = calibrate_reflection_point()
            reflection_point = calibration.reflection_point
            write_json({"reflection_point": calibration.reflection_point,
                        "levels": calibration.levels, "fitted": calibration.fitted,
                        "residuals": calibration.residuals, "rms": calibration.rms,
                        "failed": calibration.failed}, out / "calibration.json")
            print(f"reflection point: {reflection_point:.6f} (RMS {calibration.rms:.2e})")

        spec = DatasetSpec(name=dataset, seed=args.seed, reflection_point=reflection_point)
        if args.study == "k-sweep":
            n_grid = tuple(args.n_grid) if args.n_grid else (750,)
            k_grid = DEFAULT_K_GRID
        else:
            n_grid = tuple(args.n_grid) if args.n_grid else DEFAULT_N_GRID
            k_grid = (tuple(Config.MOMENT_COUNTS),)
        plan = ResamplingPlan(spec=spec, S=args.s, N_grid=n_grid, k_grid=k_grid,
                              fit_options=options)
        result = run_resampling(plan, jobs=args.jobs)

        write_csv(result.replicates, out / "replicates.csv")
        if args.study in ("lognormal-table", "gaussrevgamma-table"):
            write_csv(result.quantile_table, out / "quantile_table.csv")
        elif args.study == "k-sweep":
            write_csv(result.k_sweep, out / "k_sweep.csv")
        else:
            write_csv(result.boxplot_data, out / "boxplot_data.csv")
        failures, total = result.failures, len(result.replicates)

    elapsed = time.perf_counter() - start
    print(f"study: {args.study}")
    print(f"wall-clock: {elapsed:.1f}s")
    print(f"replicate failures: {failures}/{total}")
    if total and failures / total > MAX_FAILURE_SHARE:
        logger.error(f"{failures} of {total} replicates failed")
        return EXIT_FIT
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="momentfit",
        description="Penalized Erlang mixture densities from local moment summaries",
    )
    parser.add_argument("--log-level", help="Override MOMENTFIT_LOG")
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="Fit a summary.json")
    p_fit.add_argument("--input", required=True, help="Summary JSON file")
    p_fit.add_argument("--out", default=str(Config.OUT_DIR), help="Output directory")
    p_fit.add_argument("--bands", action="store_true", help="Write delta-method bands")
    p_fit.add_argument("--level", type=float, default=0.95, help="Band level")
    p_fit.add_argument("--qq", help="Reference raw sample (one value per line) for qq.csv")
    p_fit.add_argument("--hessian", action="store_true", help="Store the Hessian in fit.json")
    _add_fit_flags(p_fit)
    p_fit.set_defaults(handler=cmd_fit)

    p_sum = sub.add_parser("summarize", help="Summarize a raw sample")
    p_sum.add_argument("--data", required=True, help="Raw CSV, one value per line")
    p_sum.add_argument("--levels", type=_float_list, default=list(Config.PARTITION_LEVELS),
                       help="Comma-separated quantile levels from 0 to 1")
    p_sum.add_argument("--k", type=_int_list, help="Comma-separated moment counts per bin")
    p_sum.add_argument("--out", default=str(Config.OUT_DIR), help="Output directory")
    p_sum.set_defaults(handler=cmd_summarize)

    p_eval = sub.add_parser("evaluate", help="Score a fit.json")
    p_eval.add_argument("--fit", required=True, help="fit.json from the fit command")
    p_eval.add_argument("--data", help="Raw sample for the KS test and QQ table")
    p_eval.add_argument("--truth", choices=DATASET_NAMES, help="Named truth for distances")
    p_eval.add_argument("--out", default=str(Config.OUT_DIR), help="Output directory")
    p_eval.set_defaults(handler=cmd_evaluate)

    p_rep = sub.add_parser("reproduce", help="Run a simulation study")
    p_rep.add_argument("--study", required=True, choices=STUDIES)
    p_rep.add_argument("--dataset", choices=DATASET_NAMES, default="lognormal",
                       help="Dataset of the k-sweep and boxplots studies")
    p_rep.add_argument("--s", type=int, default=Config.REPLICATES, help="Replicates per setting")
    p_rep.add_argument("--n-grid", type=_int_list, help="Comma-separated sample sizes")
    p_rep.add_argument("--jobs", type=int, default=Config.JOBS,
                       help="Worker processes (0: available parallelism)")
    p_rep.add_argument("--out", default=str(Config.OUT_DIR), help="Output directory")
    _add_fit_flags(p_rep)
    p_rep.set_defaults(handler=cmd_reproduce)
    return parser


def _configure_logging(level: Optional[str]) -> None:
    for name in ("momentfit", "erlang_model", "experiments", "utils"):
        setup_logger(name, level=level)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments, run a command and map errors to exit codes"""
    parser = build_parser()
    args = parser.parse_args(argv)
    _configure_logging(args.log_level)

    for warning in Config.validate():
        logger.warning(f"Configuration: {warning}")
    if getattr(args, "seed", None) is None and args.command == "reproduce":
        args.seed = Config.SEED

    try:
        return args.handler(args)
    except (SummaryParseError, DomainError, ValidationError, ValueError, FileNotFoundError) as e:
        log_exception(logger, e, "Invalid input")
        return EXIT_INPUT
    except MomentFitError as e:
        log_exception(logger, e, "Fit failed")
        return EXIT_FIT


if __name__ == "__main__":
    sys.exit(main())
