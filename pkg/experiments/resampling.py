"""
Resampling studies
Replicated simulate-summarize-fit runs over sample sizes and moment counts,
with quantile tables, distance medians per moment setting and boxplot data
"""

import concurrent.futures
import logging
import math
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator

sys.path.append(str(Path(__file__).parent.parent))
from config import Config
from erlang_model.erlang_core import cdf, pdf, quantile, quantiles
from erlang_model.fitter import FitOptions, fit
from experiments.datasets import DatasetSpec, sample_dataset, truth_distribution
from utils.errors import MomentFitError
from utils.metrics import distance_report
from utils.summary_data import partition_from_levels, summarize_sample

logger = logging.getLogger(__name__)

DISTANCES = ("l2_quantile", "l2_cdf", "l1_quantile", "kl")
DEFAULT_N_GRID = (250, 500, 750, 1000, 2000)
DEFAULT_K_GRID = ((1, 1, 1, 1), (2, 2, 2, 1), (3, 3, 3, 1), (4, 4, 4, 1))


class ResamplingPlan(BaseModel):
    """Replicates x sample sizes x moment settings for one dataset"""
    model_config = ConfigDict(frozen=True)

    spec: DatasetSpec
    S: int = Field(default_factory=lambda: Config.REPLICATES, ge=2)
    N_grid: Tuple[int, ...] = DEFAULT_N_GRID
    k_grid: Tuple[Tuple[int, ...], ...] = ((4, 4, 4, 1),)
    alphas: Tuple[float, ...] = Field(default_factory=lambda: tuple(Config.QUANTILE_LEVELS))
    fit_options: FitOptions = Field(default_factory=FitOptions)
    distances: bool = True

    @field_validator("N_grid")
    @classmethod
    def _sizes(cls, v: Tuple[int, ...]) -> Tuple[int, ...]:
        if not v or any(N < 2 for N in v):
            raise ValueError("every sample size must be >= 2")
        return v

    @field_validator("k_grid")
    @classmethod
    def _settings(cls, v):
        if not v:
            raise ValueError("k_grid must not be empty")
        return v


@dataclass(frozen=True)
class ReplicateTask:
    spec: DatasetSpec
    n_obs: int
    k: Tuple[int, ...]
    replicate: int
    alphas: Tuple[float, ...]
    fit_options: FitOptions
    distances: bool


@dataclass
class ResamplingResult:
    replicates: pd.DataFrame
    quantile_table: pd.DataFrame
    k_sweep: pd.DataFrame
    boxplot_data: pd.DataFrame
    failures: int = 0
    elapsed: float = 0.0


def k_label(k: Sequence[int]) -> str:
    return "-".join(str(int(kj)) for kj in k)


def alpha_column(alpha: float) -> str:
    return f"q_{alpha:g}"


def run_replicate(task: ReplicateTask) -> Dict[str, object]:
    """
    Draw, summarize, fit and score one replicate; failures become a row
    with the error message instead of raising
    """
    row: Dict[str, object] = {
        "dataset": task.spec.name, "N": task.n_obs, "k": k_label(task.k),
        "replicate": task.replicate, "error": "",
    }
    spec = task.spec.model_copy(update={"n_obs": task.n_obs, "k": tuple(task.k)})
    try:
        sample = sample_dataset(spec, task.replicate)
        partition = partition_from_levels(sample, spec.quantile_levels)
        summary = summarize_sample(sample, partition, spec.k)
        options = task.fit_options.model_copy(update={"seed": task.fit_options.seed + task.replicate})
        result = fit(summary, options)
        mix = result.mixture
        row.update({
            "converged": result.converged,
            "lambda": result.lambda_,
            "effective_dim": result.effective_dim,
            "outer_iters": result.outer_iters,
        })
        for alpha, q in zip(task.alphas, quantiles(mix, task.alphas)):
            row[alpha_column(alpha)] = float(q)

        if task.distances:
            truth = truth_distribution(spec.name, spec.reflection_point)
            report = distance_report(
                q_fit=lambda p: quantile(mix, p), F_fit=lambda x: cdf(mix, x),
                f_fit=lambda x: pdf(mix, x),
                q_true=truth.ppf, F_true=lambda x: float(truth.cdf(x)),
                f_true=lambda x: float(truth.pdf(x)),
                sample=sample, F_fit_vec=lambda x: cdf(mix, x),
            )
            row.update(report.to_dict())
    except (MomentFitError, ValueError, ArithmeticError) as e:
        row["error"] = f"{type(e).__name__}: {e}"
    return row


def _tasks(plan: ResamplingPlan) -> List[ReplicateTask]:
    return [
        ReplicateTask(spec=plan.spec, n_obs=N, k=tuple(k), replicate=s, alphas=plan.alphas,
                      fit_options=plan.fit_options, distances=plan.distances)
        for N in plan.N_grid for k in plan.k_grid for s in range(plan.S)
    ]


def _execute(tasks: List[ReplicateTask], jobs: int) -> List[Dict[str, object]]:
    workers = jobs or os.cpu_count() or 1
    if workers == 1 or len(tasks) == 1:
        return [run_replicate(t) for t in tasks]
    # map preserves submission order, so aggregation does not depend on scheduling
    with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(run_replicate, tasks))


def quantile_table(replicates: pd.DataFrame, plan: ResamplingPlan) -> pd.DataFrame:
    """
    Mean, bias, standard deviation and RMSE of the fitted quantiles per (N, k, alpha)

    The standard deviation is the population one, so RMSE^2 = bias^2 + std^2.
    """
    truth = truth_distribution(plan.spec.name, plan.spec.reflection_point)
    ok = replicates[replicates["error"] == ""]
    rows = []
    for (N, k), group in ok.groupby(["N", "k"], sort=True):
        for alpha in plan.alphas:
            values = group[alpha_column(alpha)].to_numpy(dtype=float)
            true_q = truth.ppf(alpha)
            mean = float(values.mean())
            std = float(values.std(ddof=0))
            rows.append({
                "N": N, "k": k, "alpha": alpha, "true": true_q, "mean": mean,
                "bias": mean - true_q, "std": std,
                "rmse": math.sqrt(float(np.mean((values - true_q) ** 2))),
                "replicates": values.size,
            })
    table = pd.DataFrame(rows, columns=["N", "k", "alpha", "true", "mean", "bias", "std",
                                        "rmse", "replicates"])
    if plan.spec.name == "gaussrevgamma":
        table["reflection_point"] = truth.components[1].M
    if not table.empty and table["N"].nunique() > 1:
        # Reported, not enforced: extreme quantiles need not improve with N
        smallest, largest = table["N"].min(), table["N"].max()
        decreasing = {}
        for (k, alpha), group in table.groupby(["k", "alpha"]):
            by_n = group.set_index("N")["rmse"]
            if largest in by_n.index and smallest in by_n.index:
                decreasing[(k, alpha)] = bool(by_n[largest] < by_n[smallest])
        table["rmse_decreasing"] = [decreasing.get((k, a)) for k, a in zip(table["k"], table["alpha"])]
    return table


def k_sweep_table(replicates: pd.DataFrame) -> pd.DataFrame:
    """Median distances per moment setting, renormalized to 1 at the least informative setting"""
    ok = replicates[replicates["error"] == ""]
    present = [d for d in DISTANCES if d in ok.columns]
    if ok.empty or not present:
        return pd.DataFrame(columns=["N", "k", "replicates"] + [f"median_{d}" for d in DISTANCES])
    medians = ok.groupby(["N", "k"], sort=False)[present].median()
    medians.columns = [f"median_{d}" for d in present]
    medians["replicates"] = ok.groupby(["N", "k"], sort=False).size()
    medians = medians.reset_index()
    medians["information"] = medians["k"].map(lambda s: sum(int(v) for v in s.split("-")))
    medians = medians.sort_values(["N", "information"], kind="stable")
    for d in present:
        base = medians.groupby("N")[f"median_{d}"].transform("first")
        medians[f"relative_{d}"] = medians[f"median_{d}"] / base
    return medians.drop(columns="information").reset_index(drop=True)


def boxplot_table(replicates: pd.DataFrame) -> pd.DataFrame:
    """Long format (N, k, replicate, metric, value) for distance boxplots"""
    ok = replicates[replicates["error"] == ""]
    present = [d for d in DISTANCES if d in ok.columns]
    if ok.empty or not present:
        return pd.DataFrame(columns=["N", "k", "replicate", "metric", "value"])
    return ok.melt(id_vars=["N", "k", "replicate"], value_vars=present,
                   var_name="metric", value_name="value")


def run_resampling(plan: ResamplingPlan, jobs: Optional[int] = None) -> ResamplingResult:
    """
    Run every (N, k, replicate) of a plan and aggregate

    Args:
        plan: Resampling plan
        jobs: Worker processes (0 or None: available parallelism)

    Returns:
        ResamplingResult with per-replicate rows and the aggregate tables
    """
    tasks = _tasks(plan)
    jobs = Config.JOBS if jobs is None else jobs
    logger.info(f"Running {len(tasks)} replicates of {plan.spec.name} "
                f"(N={list(plan.N_grid)}, k={[k_label(k) for k in plan.k_grid]})")
    start = time.perf_counter()
    rows = _execute(tasks, jobs)
    elapsed = time.perf_counter() - start

    replicates = pd.DataFrame(rows)
    failures = int((replicates["error"] != "").sum())
    for message in replicates.loc[replicates["error"] != "", "error"].head(5):
        logger.warning(f"Replicate failed: {message}")
    logger.info(f"✓ {len(tasks) - failures}/{len(tasks)} replicates succeeded in {elapsed:.1f}s")

    return ResamplingResult(
        replicates=replicates,
        quantile_table=quantile_table(replicates, plan),
        k_sweep=k_sweep_table(replicates),
        boxplot_data=boxplot_table(replicates),
        failures=failures,
        elapsed=elapsed,
    )
