"""
Tests for the penalized Erlang mixture fitter
"""

import math
import sys
from pathlib import Path

import numpy as np
import pytest
from pydantic import ValidationError
from scipy import integrate

sys.path.append(str(Path(__file__).parent.parent))

from config import Config
from erlang_model.erlang_core import ErlangMixture, cdf, model_triplet, pdf, quantile
from erlang_model.fitter import (FitOptions, fit, hessian_at, inner_optimize, weighted_modes)
from erlang_model.likelihood import penalized_loglik
from erlang_model.penalty import build_penalty, mode_sequence
from utils.errors import FitFailedError, SingularHessianError
from utils.logger import setup_logger
from utils.metrics import ks_test
from utils.summary_data import (BinPartition, LocalMomentSummary, partition_from_levels,
                                summarize_sample)

logger = setup_logger('test')


def test_example_fit_quantiles(example_fit):
    """worked example with n = 50, r = 2 lands near the lognormal truth"""
    assert example_fit.converged
    assert quantile(example_fit.mixture, 0.5) == pytest.approx(1.000, abs=0.10)
    assert quantile(example_fit.mixture, 0.9) == pytest.approx(1.898, abs=0.25)
    logger.info(f"✓ Worked example fit: lambda={example_fit.lambda_:.4g}, "
                f"edf={example_fit.effective_dim:.3f}")


def test_example_fit_result_contents(example_fit):
    """Traces, curvature and diagnostics are filled in"""
    assert example_fit.mixture.n == 50
    assert example_fit.lambda_ > 0
    assert 1 <= example_fit.outer_iters <= example_fit.options.max_outer
    assert len(example_fit.objective_trace) == example_fit.outer_iters
    assert len(example_fit.lambda_trace) == example_fit.outer_iters
    assert 0.0 <= example_fit.effective_dim <= 48.0
    H = example_fit.hessian.H
    assert H.shape == (51, 51)
    np.testing.assert_allclose(H, H.T)
    assert example_fit.diagnostics["degenerate_information"] is False
    assert example_fit.diagnostics["continuous_roughness"] > 0
    assert example_fit.n_obs == 750


def test_weighted_modes(example_fit):
    """Mode locations theta (j - 1) with heights omega_j y_{j-1}"""
    x, heights = weighted_modes(example_fit)
    mix = example_fit.mixture
    np.testing.assert_allclose(x, mix.scale * np.arange(50))
    _, y = mode_sequence(50, 1.0)
    np.testing.assert_allclose(heights, mix.weights * y)


def test_fit_options_validation():
    """n must exceed r and the lambda prior must be proper enough"""
    with pytest.raises(ValidationError):
        FitOptions(n=5, r=5)
    with pytest.raises(ValidationError):
        FitOptions(n=10, r=0)
    with pytest.raises(ValidationError):
        FitOptions(n=10, r=2, b_lambda=0.0)
    options = FitOptions(n=12, r=3)
    assert options.scale_by_n is True


def test_degenerate_summary_is_penalty_dominated():
    """A single bin without moments still fits, flagged, never rougher than the start"""
    summary = LocalMomentSummary(BinPartition((0.0, math.inf)), 200, (1.0,), ((),), (0,))
    options = FitOptions(n=8, r=2, seed=4)
    result = fit(summary, options)

    assert result.diagnostics["degenerate_information"] is True
    assert result.converged
    total, _ = integrate.quad(lambda x: pdf(result.mixture, x), 0, math.inf, limit=200)
    assert total == pytest.approx(1.0, abs=1e-7)

    rng = np.random.default_rng(options.seed)
    start = np.full(8, 1 / 8) * (1 + rng.uniform(-0.1, 0.1, size=8))
    start /= start.sum()
    assert result.penalty.roughness(result.mixture.weights) <= result.penalty.roughness(start) + 1e-12


@pytest.mark.slow
def test_self_consistent_summary_is_reproduced(smooth_mixture):
    """A summary computed from a mixture's own statistics is matched by the fit"""
    edges = (0.0, 0.948, 1.885, 3.332, math.inf)
    k = (2, 2, 2, 1)
    partition = BinPartition(edges)
    triplet = model_triplet(smooth_mixture, partition, k)
    pi = triplet.pi / math.fsum(triplet.pi)
    summary = LocalMomentSummary(partition, 10 ** 6, tuple(pi),
                                 tuple(tuple(m) for m in triplet.mu), k)

    result = fit(summary, FitOptions(n=20, r=2, seed=1))
    fitted = model_triplet(result.mixture, partition, k)
    np.testing.assert_allclose(fitted.pi, triplet.pi, atol=1e-4)
    np.testing.assert_allclose(fitted.mu_vector(), triplet.mu_vector(), atol=1e-4)


def test_fit_is_deterministic(example_summary):
    """Same summary, options and seed give identical results"""
    options = FitOptions(n=10, r=2, seed=7)
    first = fit(example_summary, options)
    second = fit(example_summary, options)
    np.testing.assert_array_equal(first.mixture.weights, second.mixture.weights)
    assert first.mixture.scale == second.mixture.scale
    assert first.lambda_ == second.lambda_
    assert first.objective_trace == second.objective_trace


def test_inner_optimize_is_idempotent(example_summary):
    """Restarting at an optimum does not move away from it"""
    options = FitOptions(n=10, r=2, seed=0)
    penalty = build_penalty(10, 2)
    init = (np.full(10, 0.1), 0.3)
    mix, value = inner_optimize(example_summary, 5.0, init, options, penalty, restarts=0)
    again, value_again = inner_optimize(example_summary, 5.0, (mix.weights, mix.scale), options,
                                        penalty, restarts=0)
    assert value_again.total >= value.total - 1e-9 * (1 + abs(value.total))
    np.testing.assert_allclose(again.weights, mix.weights, atol=1e-3)
    assert again.scale == pytest.approx(mix.scale, rel=1e-3)


def test_heavy_penalty_reaches_null_space():
    """A large lambda drives omega to the direction with constant weighted modes"""
    # theta alone can match two bin proportions, so the data do not resist the penalty
    summary = LocalMomentSummary(BinPartition((0.0, 1.0, math.inf)), 100, (0.4, 0.6),
                                 ((), ()), (0, 0))
    options = FitOptions(n=6, r=1, seed=0, scale_by_n=False)
    penalty = build_penalty(6, 1)
    mix, _ = inner_optimize(summary, 1e4, (np.full(6, 1 / 6), 0.5), options, penalty,
                            restarts=0)
    _, y = mode_sequence(6, 1.0)
    null = (1 / y) / np.sum(1 / y)
    np.testing.assert_allclose(mix.weights, null, atol=1e-3)


def test_inner_optimize_fails_without_finite_start():
    """Observations where the model has no mass at any start are an error with a trace"""
    summary = LocalMomentSummary(BinPartition((0.0, 50.0, math.inf)), 10, (0.5, 0.5),
                                 ((), ()), (0, 0))
    options = FitOptions(n=5, r=1, seed=0)
    with pytest.raises(FitFailedError) as excinfo:
        inner_optimize(summary, 1.0, (np.full(5, 0.2), 1e-3), options)
    assert excinfo.value.trace


def test_hessian_hook_on_quadratic(example_summary):
    """-1/2 x'Ax has Hessian A"""
    rng = np.random.default_rng(5)
    B = rng.normal(size=(4, 4))
    A = B @ B.T + 4 * np.eye(4)
    options = FitOptions(n=3, r=1, hessian_jitter=0.0)
    mix = ErlangMixture(np.array([0.2, 0.5, 0.3]), 0.7)
    hess = hessian_at(example_summary, mix, options, gradient=lambda p: -A @ p)
    np.testing.assert_allclose(hess.H, A, rtol=1e-6)
    assert hess.jitter == 0.0
    assert hess.eta.shape == (4,)


def test_example_fit_curvature_is_positive_definite(example_fit):
    """H and H + lambda P are positive definite at the fitted mode; nothing was clipped"""
    hess = example_fit.hessian
    assert np.linalg.eigvalsh(hess.H)[0] > 0
    assert np.linalg.eigvalsh(hess.H + example_fit.lambda_ * hess.P)[0] > 0
    assert np.all(hess.tau >= 0)
    diagnostics = example_fit.diagnostics
    assert diagnostics["hessian"] == "expected"
    assert diagnostics["hessian_min_eigenvalue"] > 0
    assert diagnostics["negative_tau_clipped"] == 0
    assert diagnostics["observed_hessian_replaced"] == 0
    assert 0.0 < example_fit.effective_dim < 48.0


def test_observed_curvature_never_reaches_lambda_indefinite(example_summary):
    """An observed Hessian is used only when positive definite, otherwise flagged and replaced"""
    rng = np.random.default_rng(9)
    penalty = build_penalty(10, 2)
    observed = FitOptions(n=10, r=2, hessian="observed")
    expected = FitOptions(n=10, r=2)
    for _ in range(3):
        mix = ErlangMixture.from_raw(rng.dirichlet(np.ones(10)), float(rng.uniform(0.15, 0.4)))
        hess = hessian_at(example_summary, mix, observed, penalty)
        assert np.linalg.eigvalsh(hess.H)[0] > 0
        if hess.diagnostics.get("observed_indefinite"):
            assert "observed_min_eigenvalue" in hess.diagnostics
            np.testing.assert_allclose(hess.H, hessian_at(example_summary, mix, expected, penalty).H)


def test_indefinite_hook_is_an_error(example_summary):
    """A hooked objective with negative curvature is not silently repaired"""
    A = np.diag([2.0, 1.0, -1.0, 3.0])
    options = FitOptions(n=3, r=1, hessian_jitter=0.0)
    mix = ErlangMixture(np.array([0.2, 0.5, 0.3]), 0.7)
    with pytest.raises(SingularHessianError):
        hessian_at(example_summary, mix, options, gradient=lambda p: -A @ p)


def test_inner_solves_never_decrease_total(example_summary):
    """At fixed lambda every inner solve keeps or raises the penalized total"""
    options = FitOptions(n=10, r=2, seed=3)
    penalty = build_penalty(10, 2)
    rng = np.random.default_rng(3)
    start = ErlangMixture.from_raw(rng.dirichlet(np.ones(10)), 0.4)
    totals = [penalized_loglik(start, 5.0, example_summary, penalty).total]
    point = (start.weights, start.scale)
    for _ in range(3):
        mix, value = inner_optimize(example_summary, 5.0, point, options, penalty,
                                    restarts=1, rng=rng)
        totals.append(value.total)
        point = (mix.weights, mix.scale)
    for before, after in zip(totals, totals[1:]):
        assert after >= before - 1e-9 * (1.0 + abs(before))


@pytest.mark.slow
def test_self_consistent_quantiles(smooth_mixture):
    """Exact statistics with k = (4, 4, 4, 1) give back the reference quantiles within 2%"""
    k = (4, 4, 4, 1)
    partition = BinPartition((0.0, 0.948, 1.885, 3.332, math.inf))
    triplet = model_triplet(smooth_mixture, partition, k)
    pi = triplet.pi / math.fsum(triplet.pi)
    summary = LocalMomentSummary(partition, 10 ** 6, tuple(pi),
                                 tuple(tuple(m) for m in triplet.mu), k)

    result = fit(summary, FitOptions(n=20, r=2, seed=1))
    for p in (0.5, 0.9):
        assert quantile(result.mixture, p) == pytest.approx(quantile(smooth_mixture, p), rel=0.02)


@pytest.mark.slow
def test_fits_are_not_rejected_by_ks():
    """Seeded LogNormal(0, 0.5) samples summarized like the worked example pass KS against their fit"""
    pvalues = []
    for seed in range(10):
        draws = np.sort(np.random.default_rng(seed).lognormal(0.0, 0.5, size=750))
        partition = partition_from_levels(draws, Config.PARTITION_LEVELS)
        summary = summarize_sample(draws, partition, Config.MOMENT_COUNTS)
        result = fit(summary, FitOptions(n=50, r=2, seed=0))
        _, pvalue = ks_test(draws, lambda x: cdf(result.mixture, x))
        pvalues.append(pvalue)
    logger.info(f"✓ KS p-values: {np.round(pvalues, 3).tolist()}")
    assert sum(p > 0.05 for p in pvalues) >= 8
