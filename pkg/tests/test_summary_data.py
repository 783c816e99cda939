"""
Tests for local moment summaries and their JSON files
"""

import json
import math
import sys
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

sys.path.append(str(Path(__file__).parent.parent))

from config import Config
from utils.errors import DomainError, SummaryParseError
from utils.logger import setup_logger
from utils.summary_data import (BinPartition, LocalMomentSummary, SummaryFile, from_var_tvar,
                                parse_summary, partition_from_levels, read_summary,
                                summarize_sample, summary_record, summary_to_json,
                                write_summary)

logger = setup_logger('test')

CORE_EDGES = (0.0, 0.948, 1.885, 3.332)


def test_partition_validation():
    """Edges must start at a finite nonnegative value and increase strictly"""
    partition = BinPartition((0, 1, math.inf))
    assert partition.n_bins == 2
    assert partition.unbounded
    assert partition.last_finite_edge == 1.0

    with pytest.raises(DomainError):
        BinPartition((0.0,))
    with pytest.raises(DomainError):
        BinPartition((-1.0, 1.0))
    with pytest.raises(DomainError):
        BinPartition((0.0, 2.0, 1.0))
    with pytest.raises(DomainError):
        BinPartition((0.0, math.inf, 5.0))


def test_locate_half_open_bins():
    """Points on an edge belong to the bin that starts there"""
    partition = BinPartition((0.0, 1.0, 2.0))
    assert partition.locate([0.0, 0.999, 1.0, 1.5, 2.0]).tolist() == [0, 0, 1, 1, -1]


def test_summarize_single_point():
    """One observation in the first bin leaves the second empty"""
    summary = summarize_sample([0.5], BinPartition((0, 1, math.inf)), (1, 1))
    assert summary.pi_hat == (1.0, 0.0)
    assert summary.mu_hat == ((0.5,), (0.0,))
    logger.info("✓ Single-point summary OK")


def test_summarize_hand_sum():
    """Scaled moments divide by the full sample size"""
    summary = summarize_sample([1.0, 3.0], BinPartition((0, 2, math.inf)), (2, 1))
    assert summary.pi_hat == (0.5, 0.5)
    assert summary.mu_hat == ((0.5, 0.5), (1.5,))
    assert summary.counts.tolist() == [1.0, 1.0]
    assert summary.observed_index() == [(0, 1), (0, 2), (1, 1)]


def test_summarize_rejects_outside_points():
    """A value beyond the last finite edge is reported"""
    with pytest.raises(DomainError, match="7.5"):
        summarize_sample([0.5, 7.5], BinPartition((0, 5)), (1,))


def test_seeded_lognormal_summary_matches_direct_sums():
    """750 lognormal draws summarized at (0, .5, .9, .99, 1) against a brute-force oracle"""
    rng = np.random.default_rng(2024)
    sample = stats.lognorm(s=0.5).rvs(size=750, random_state=rng)
    partition = partition_from_levels(sample, Config.PARTITION_LEVELS)
    summary = summarize_sample(sample, partition, (4, 4, 4, 1))

    assert summary.n_bins == 4
    assert partition.edges[0] == 0.0 and math.isinf(partition.edges[-1])
    np.testing.assert_allclose(summary.pi_hat, (0.5, 0.4, 0.089, 0.011), atol=0.002)

    for j, (lo, hi) in enumerate(partition.bins()):
        for k in range(1, summary.k[j] + 1):
            direct = sum(x ** k for x in sample if lo <= x < hi) / sample.size
            assert summary.mu_hat[j][k - 1] == pytest.approx(direct, rel=1e-12)
    logger.info("✓ Seeded lognormal summary OK")


def test_summary_rejects_unnormalized_proportions():
    """Proportions must sum to one"""
    with pytest.raises(DomainError):
        LocalMomentSummary(BinPartition((0, 1, math.inf)), 10, (0.5, 0.4), ((), ()), (0, 0))


def _conditional_core() -> LocalMomentSummary:
    """The three bounded bins of the worked example, conditional on X < VaR"""
    raw = (0.5, 0.4, 0.089)
    total = sum(raw)
    moments = ((0.332, 0.235, 0.175, 0.136), (0.526, 0.719, 1.017, 1.488),
               (0.206, 0.485, 1.167, 2.874))
    return LocalMomentSummary(
        partition=BinPartition(CORE_EDGES), n_obs=742,
        pi_hat=tuple(p / total for p in raw),
        mu_hat=tuple(tuple(m / total for m in row) for row in moments),
        k=(4, 4, 4),
    )


def test_from_var_tvar_tail_bin():
    """VaR 3.332 at 0.989 with TVaR 4.364 reproduces the last row of the example"""
    summary = from_var_tvar(_conditional_core(), 0.989, 3.332, 4.364, 750)
    assert summary.k == (4, 4, 4, 1)
    assert math.isinf(summary.partition.edges[-1])
    np.testing.assert_allclose(summary.pi_hat, (0.5, 0.4, 0.089, 0.011), atol=1e-12)
    assert summary.mu_hat[3][0] == pytest.approx(0.048, abs=1e-4)
    assert summary.mu_hat[0][0] == pytest.approx(0.332, rel=1e-12)


def test_from_var_tvar_point_mass_at_var():
    """TVaR equal to VaR puts the whole tail at VaR"""
    summary = from_var_tvar(_conditional_core(), 0.95, 3.332, 3.332, 750)
    assert summary.mu_hat[-1][0] == pytest.approx(0.05 * 3.332, rel=1e-12)


def test_from_var_tvar_rejections():
    """Degenerate tails, TVaR below VaR and a core that does not end at VaR are rejected"""
    core = _conditional_core()
    with pytest.raises(DomainError):
        from_var_tvar(core, 1.0, 3.332, 4.0, 750)
    with pytest.raises(DomainError):
        from_var_tvar(core, 0.989, 3.332, 3.0, 750)
    with pytest.raises(DomainError):
        from_var_tvar(core, 0.989, 2.0, 4.0, 750)
    with pytest.raises(DomainError):
        from_var_tvar(core, 0.989, 3.5, 4.0, 750)


def test_from_var_tvar_keeps_conditional_means():
    """Rescaling moves proportions and moments together"""
    core = _conditional_core()
    summary = from_var_tvar(core, 0.989, 3.332, 4.364, 750)
    assert math.fsum(summary.pi_hat) == pytest.approx(1.0, abs=1e-12)
    for j in range(3):
        np.testing.assert_allclose(np.array(summary.mu_hat[j]) / summary.pi_hat[j],
                                   np.array(core.mu_hat[j]) / core.pi_hat[j], rtol=1e-12)
    assert summary.mu_hat[3][0] / summary.pi_hat[3] == pytest.approx(4.364, rel=1e-12)


def test_parse_worked_example():
    """The example file parses into a 4-bin summary"""
    summary = read_summary(Config.DATA_DIR / "lognormal750.json")
    assert summary.n_obs == 750
    assert summary.k == (4, 4, 4, 1)
    assert summary.partition.edges == (0.0, 0.948, 1.885, 3.332, math.inf)
    assert summary.pi_hat[0] == pytest.approx(0.5)
    assert summary.mu_hat[3] == (0.048,)
    logger.info("✓ worked example file parsed")


def _bins(*rows):
    return json.dumps({"n_obs": 10, "bins": list(rows)})


def test_parse_null_upper_only_last():
    """An infinite upper edge on an inner bin is reported with its path"""
    text = _bins({"lower": 0, "upper": None, "count": 5, "moments": []},
                 {"lower": 1, "upper": None, "count": 5, "moments": []})
    with pytest.raises(SummaryParseError) as excinfo:
        parse_summary(text)
    assert excinfo.value.path == "bins[0].upper"


def test_parse_negative_moment():
    """Negative moments fail schema validation at the moments field"""
    text = _bins({"lower": 0, "upper": 1, "count": 5, "moments": [0.1]},
                 {"lower": 1, "upper": None, "count": 5, "moments": [-0.2]})
    with pytest.raises(SummaryParseError) as excinfo:
        parse_summary(text)
    assert excinfo.value.path == "bins[1].moments"


def test_parse_non_monotone_edges():
    """Bins must chain upper to lower"""
    text = _bins({"lower": 0, "upper": 1, "count": 5, "moments": []},
                 {"lower": 2, "upper": None, "count": 5, "moments": []})
    with pytest.raises(SummaryParseError) as excinfo:
        parse_summary(text)
    assert excinfo.value.path == "bins[1].lower"


def test_parse_count_mismatch_and_mixed_mass():
    """Counts must add up to n_obs; count and pi cannot be mixed"""
    with pytest.raises(SummaryParseError):
        parse_summary(_bins({"lower": 0, "upper": 1, "count": 4, "moments": []},
                            {"lower": 1, "upper": None, "count": 5, "moments": []}))
    with pytest.raises(SummaryParseError):
        parse_summary(_bins({"lower": 0, "upper": 1, "count": 5, "moments": []},
                            {"lower": 1, "upper": None, "pi": 0.5, "moments": []}))


def test_parse_malformed_json():
    """Broken JSON is a parse error, not a crash"""
    with pytest.raises(SummaryParseError, match="malformed"):
        parse_summary('{"n_obs": 10, "bins": [')


def test_pi_form():
    """Proportions may be given instead of counts"""
    summary = parse_summary(_bins({"lower": 0, "upper": 2, "pi": 0.25, "moments": [0.1]},
                                  {"lower": 2, "upper": None, "pi": 0.75, "moments": []}))
    assert summary.pi_hat == (0.25, 0.75)
    assert summary.k == (1, 0)


def test_write_keeps_file_decimals(tmp_path):
    """Writing a parsed summary reproduces the decimals it was read with"""
    summary = read_summary(Config.DATA_DIR / "lognormal750.json")
    target = tmp_path / "summary.json"
    write_summary(summary, target)
    text = target.read_text(encoding="utf-8")
    assert "0.948" in text and "0.000" in text and '"upper": null' in text
    assert read_summary(target) == summary


def test_written_sample_summary_uses_counts():
    """Summaries of raw samples are written with integer counts"""
    summary = summarize_sample([1.0, 3.0], BinPartition((0, 2, math.inf)), (2, 1))
    data = json.loads(summary_to_json(summary))
    assert [b["count"] for b in data["bins"]] == [1, 1]
    assert data["bins"][1]["upper"] is None


def test_proportion_summary_is_written_through_record():
    """Summaries without whole counts are written as pi values via the file model"""
    summary = LocalMomentSummary(BinPartition((0.0, 1.0, math.inf)), 7, (0.25, 0.75),
                                 ((0.125, 0.0625), (2.5,)), (2, 1))
    record = summary_record(summary)
    assert isinstance(record, SummaryFile)
    assert [float(b.pi) for b in record.bins] == [0.25, 0.75]
    assert all(b.count is None for b in record.bins)

    text = summary_to_json(summary)
    data = json.loads(text)
    assert "count" not in data["bins"][0]
    assert data["bins"][1]["upper"] is None
    assert parse_summary(text) == summary
