import csv
import json

import numpy as np
import pytest
from scipy import stats

from vanbayes.diagnostics import (
    binary_metrics,
    calibration_report,
    coverage_by_level,
    ks_uniform,
    log_score,
    mad_and_coverage,
    write_pit_qq,
    write_reports,
)
from vanbayes.estimator import VariationalPosterior
from vanbayes.families import DomainError


def test_binary_metrics_hand_computed():
    pip = np.array([0.9, 0.2, 0.6, 0.4])
    truth = np.array([1.0, 0.0, 0.0, 1.0])
    m = binary_metrics(pip, truth)
    ce = -(np.log(0.9) + np.log(0.8) + np.log(0.4) + np.log(0.4)) / 4
    assert m["ce"] == pytest.approx(ce, rel=1e-14)
    assert m["ca"] == 0.5
    # literal indicator average: fraction of probabilities below one half
    assert m["ca_displayed"] == 0.5
    assert m["bs"] == pytest.approx((0.01 + 0.04 + 0.36 + 0.36) / 4)


def test_binary_metrics_versions_differ():
    m = binary_metrics(np.array([0.9, 0.9, 0.1]), np.array([1.0, 1.0, 0.0]))
    assert m["ca"] == 1.0
    assert m["ca_displayed"] == pytest.approx(1 / 3)


def test_binary_metrics_clamp_keeps_entropy_finite():
    m = binary_metrics(np.array([0.0, 1.0]), np.array([1.0, 0.0]))
    assert np.isfinite(m["ce"]) and m["ce"] == pytest.approx(-np.log(1e-7))


def test_binary_metrics_validation():
    with pytest.raises(DomainError):
        binary_metrics(np.array([0.5]), np.array([0.5]))
    with pytest.raises(ValueError):
        binary_metrics(np.array([0.5, 0.5]), np.array([1.0]))


def test_ks_uniform_matches_scipy(rng):
    u = rng.random(500)
    assert ks_uniform(u) == pytest.approx(stats.kstest(u, "uniform").statistic)
    with pytest.raises(ValueError):
        ks_uniform([])


def test_mad_and_coverage_truth_shapes():
    med = np.array([1.0, 2.0, 4.0])
    lo, hi = med - 1.5, med + 1.5
    mad, cov = mad_and_coverage(med, lo, hi, 2.0)
    assert mad[0] == 1.0 and cov[0] == pytest.approx(2 / 3)
    mad, cov = mad_and_coverage(med, lo, hi, np.array([1.0, 2.0, 4.0]))
    assert mad[0] == 0.0 and cov[0] == 1.0
    med2 = np.column_stack([med, med])
    mad, cov = mad_and_coverage(med2, med2 - 1, med2 + 1, np.array([1.0, 4.0]))
    np.testing.assert_allclose(mad, [1.0, 2.0])


class _Oracle:
    """Minimal fitted-posterior stand-in: N(x, 1) given summary x."""

    family_ = VariationalPosterior(family="het_normal").family_

    def __init__(self, sd=1.0):
        self.sd = sd

    def _to_head_scale(self, y):
        return y

    def log_density(self, X, y):
        return stats.norm.logpdf(np.asarray(y), X[:, 0], self.sd)

    def pit(self, X, y, rng=None):
        return stats.norm.cdf(np.asarray(y), X[:, 0], self.sd)

    def predict(self, X):
        return X[:, 0]

    def interval(self, X, level):
        z = stats.norm.ppf(0.5 + level / 2)
        return X[:, 0] - z * self.sd, X[:, 0] + z * self.sd


@pytest.fixture
def calibrated_data(rng):
    X = rng.normal(size=(10_000, 1))
    y = X[:, 0] + rng.normal(size=10_000)
    return X, y


def test_calibrated_oracle_passes_and_halved_sd_fails(calibrated_data):
    X, y = calibrated_data
    good = calibration_report(_Oracle(), X, y, ["theta"])[0]
    bad = calibration_report(_Oracle(sd=0.5), X, y, ["theta"])[0]
    assert good.ks_stat < 0.02
    assert bad.ks_stat > 0.05
    assert good.coverage_by_level[0.9] == pytest.approx(0.9, abs=0.01)
    assert good.log_score == pytest.approx(-0.5 * np.log(2 * np.pi) - 0.5, abs=0.03)


def test_coverage_by_level(calibrated_data):
    X, y = calibrated_data
    cov = coverage_by_level(_Oracle(), X, y, levels=(0.5, 0.95))
    assert cov[0.5][0] == pytest.approx(0.5, abs=0.02)
    assert cov[0.95][0] == pytest.approx(0.95, abs=0.01)


def test_log_score_lists_offending_records(rng):
    X = rng.random((50, 1)) + 0.5
    y = rng.gamma(2.0, 1.0, size=50)
    est = VariationalPosterior("gamma", hidden=(4,), epochs=1).fit(X, y)
    y_bad = y.copy()
    y_bad[[3, 17]] = -1.0
    with pytest.raises(DomainError, match=r"\[3, 17\]"):
        log_score(est, X, y_bad)
    assert log_score(est, X, y, average=False)[0] == pytest.approx(est.log_density(X, y).sum())


def test_report_names_and_empty_validation(calibrated_data):
    X, y = calibrated_data
    with pytest.raises(ValueError, match="target names"):
        calibration_report(_Oracle(), X, y, ["a", "b"])
    with pytest.raises(ValueError, match="empty"):
        calibration_report(_Oracle(), X[:0], y[:0])


def test_report_files(calibrated_data, tmp_path):
    X, y = calibrated_data
    reports = calibration_report(_Oracle(), X[:200], y[:200], ["theta"])
    write_reports(reports, tmp_path / "r.csv", tmp_path / "r.json")
    rows = list(csv.DictReader(open(tmp_path / "r.csv")))
    metrics = {r["metric"] for r in rows}
    assert {"log_score", "ks_stat", "mad", "coverage_0.9"} <= metrics
    assert json.load(open(tmp_path / "r.json"))[0]["target"] == "theta"
    write_pit_qq(reports[0].pit, tmp_path / "qq.csv")
    qq = np.loadtxt(tmp_path / "qq.csv", delimiter=",", skiprows=1)
    assert qq.shape == (200, 2)
    assert np.all(np.diff(qq[:, 1]) >= 0)
    assert qq[0, 0] == pytest.approx(0.5 / 200)
