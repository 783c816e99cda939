"""
Tests for the momentfit command line
"""

import json
import sys
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

sys.path.append(str(Path(__file__).parent.parent))

from config import Config
import main as cli
from main import EXIT_FIT, EXIT_INPUT, EXIT_OK, build_parser, main
from utils.errors import DomainError
from utils.logger import setup_logger
from utils.serialization import read_fit
from utils.summary_data import read_summary

logger = setup_logger('test')

EXAMPLE = str(Config.DATA_DIR / "lognormal750.json")


def _write_sample(path: Path, values) -> str:
    path.write_text("".join(f"{v!r}\n" for v in values), encoding="utf-8")
    return str(path)


@pytest.fixture
def lognormal_file(tmp_path):
    draws = np.random.default_rng(42).lognormal(0.0, 0.5, size=750)
    return _write_sample(tmp_path / "raw.csv", draws.tolist())


def test_fit_worked_example(tmp_path):
    """Default fit of the worked example converges and writes its outputs"""
    out = tmp_path / "out"
    assert main(["fit", "--input", EXAMPLE, "--out", str(out), "--bands"]) == EXIT_OK
    record = json.loads((out / "fit.json").read_text())
    assert record["converged"] is True
    assert len(record["weights"]) == Config.MIXTURE_SIZE
    assert record["lambda"] > 0
    bands = pd.read_csv(out / "bands.csv")
    assert set(bands["band"]) == {"density", "quantile", "tvar"}
    assert (out / "modes.csv").exists()
    mixture = json.loads((out / "mixture.json").read_text())
    assert mixture["theta"] == record["theta"]
    assert mixture["weights"] == record["weights"]
    assert read_fit(out / "fit.json").mixture().n == Config.MIXTURE_SIZE
    logger.info("✓ fit command on the worked example")


def test_fit_malformed_json(tmp_path):
    """Schema errors exit with 2 and leave nothing behind"""
    bad = tmp_path / "bad.json"
    bad.write_text("{\"n_obs\": 10, \"bins\": [", encoding="utf-8")
    out = tmp_path / "out"
    assert main(["fit", "--input", str(bad), "--out", str(out)]) == EXIT_INPUT
    assert not out.exists()


def test_estimator_domain_error_is_a_fit_failure(tmp_path, monkeypatch):
    """A DomainError raised inside the estimator exits with 3, not 2"""
    def failing_fit(summary, options):
        raise DomainError("weights left the simplex")

    monkeypatch.setattr(cli, "fit", failing_fit)
    out = tmp_path / "out"
    assert main(["fit", "--input", EXAMPLE, "--out", str(out)]) == EXIT_FIT
    assert not (out / "fit.json").exists()


def test_fit_rejects_order_not_below_n(tmp_path):
    """n must exceed the penalty order"""
    out = tmp_path / "out"
    assert main(["fit", "--input", EXAMPLE, "--out", str(out), "--n", "5", "--order", "5"]) == EXIT_INPUT
    assert not out.exists()


def test_fit_missing_input(tmp_path):
    assert main(["fit", "--input", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == EXIT_INPUT


def test_unknown_flag_is_rejected():
    """argparse refuses flags it does not know"""
    with pytest.raises(SystemExit) as excinfo:
        build_parser().parse_args(["fit", "--input", EXAMPLE, "--frobnicate"])
    assert excinfo.value.code == 2


def test_summarize_two_points(tmp_path):
    """Two observations with levels 0, 1 make a single-bin summary"""
    data = _write_sample(tmp_path / "two.csv", [0.5, 1.5])
    out = tmp_path / "out"
    assert main(["summarize", "--data", data, "--levels", "0,1", "--out", str(out)]) == EXIT_OK
    summary = read_summary(out / "summary.json")
    assert summary.n_bins == 1
    assert summary.n_obs == 2
    assert summary.pi_hat == (1.0,)


def test_summarize_lognormal_structure(tmp_path, lognormal_file):
    """Bins at the 0.5, 0.9, 0.99 sample quantiles hold the matching shares"""
    out = tmp_path / "out"
    assert main(["summarize", "--data", lognormal_file, "--levels", "0,0.5,0.9,0.99,1",
                 "--k", "4,4,4,1", "--out", str(out)]) == EXIT_OK
    summary = read_summary(out / "summary.json")
    assert summary.k == (4, 4, 4, 1)
    np.testing.assert_allclose(summary.pi_hat, [0.500, 0.400, 0.089, 0.011], atol=0.003)


def test_summarize_rejects_negative_values(tmp_path):
    data = _write_sample(tmp_path / "neg.csv", [0.5, -1.0, 2.0])
    assert main(["summarize", "--data", data, "--out", str(tmp_path / "out")]) == EXIT_INPUT


def test_summarize_then_fit(tmp_path, lognormal_file):
    """Raw data to summary to fit, twice with identical bytes"""
    out = tmp_path / "out"
    assert main(["summarize", "--data", lognormal_file, "--out", str(out)]) == EXIT_OK
    summary_path = str(out / "summary.json")

    outputs = []
    for run in ("a", "b"):
        target = tmp_path / run
        assert main(["fit", "--input", summary_path, "--out", str(target), "--n", "12",
                     "--seed", "3"]) == EXIT_OK
        outputs.append((target / "fit.json").read_bytes())
    assert outputs[0] == outputs[1]


def test_evaluate(tmp_path, lognormal_file):
    """KS against the raw sample and distances to the named truth"""
    fit_dir = tmp_path / "fit"
    assert main(["fit", "--input", EXAMPLE, "--out", str(fit_dir), "--n", "20"]) == EXIT_OK
    out = tmp_path / "eval"
    assert main(["evaluate", "--fit", str(fit_dir / "fit.json"), "--data", lognormal_file,
                 "--truth", "lognormal", "--out", str(out)]) == EXIT_OK
    evaluation = json.loads((out / "evaluation.json").read_text())
    assert 0.0 <= evaluation["ks"]["pvalue"] <= 1.0
    assert evaluation["ks"]["n"] == 750
    assert evaluation["distances"]["kl"] >= 0
    assert evaluation["quantiles"]["0.5"]["true"] == pytest.approx(1.0)
    qq = pd.read_csv(out / "qq.csv")
    assert len(qq) == 750


def test_evaluate_needs_a_reference(tmp_path):
    fit_dir = tmp_path / "fit"
    assert main(["fit", "--input", EXAMPLE, "--out", str(fit_dir), "--n", "8"]) == EXIT_OK
    assert main(["evaluate", "--fit", str(fit_dir / "fit.json"),
                 "--out", str(tmp_path / "eval")]) == EXIT_INPUT


def test_reproduce_k_sweep_smoke(tmp_path):
    """Two replicates per moment setting produce a k-sweep table"""
    out = tmp_path / "out"
    code = main(["reproduce", "--study", "k-sweep", "--s", "2", "--n-grid", "300",
                 "--n", "12", "--jobs", "1", "--out", str(out)])
    assert code == EXIT_OK
    sweep = pd.read_csv(out / "k_sweep.csv", dtype={"k": str})
    assert sweep["k"].tolist() == ["1-1-1-1", "2-2-2-1", "3-3-3-1", "4-4-4-1"]
    assert "median_kl" in sweep.columns
    replicates = pd.read_csv(out / "replicates.csv")
    assert len(replicates) == 8
