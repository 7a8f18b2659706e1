"""Calibration and model-comparison metrics for fitted posteriors."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from .families import DomainError

DEFAULT_LEVELS = (0.5, 0.8, 0.9, 0.95)
PIP_CLAMP = 1e-7


def _columns(a):
    a = np.asarray(a, dtype=float)
    return a.reshape(-1, 1) if a.ndim == 1 else a


def log_score(fitted, X, y, average=True):
    """Sum (or per-record average) of ``log p(gamma_v | a(Z_v))`` for each target.

    Raises :class:`DomainError` listing the offending records when a target
    value lies outside the head's support.
    """
    y2 = _columns(y)
    try:
        logp = _columns(fitted.log_density(X, y))
    except DomainError as err:
        bad = []
        for v in range(y2.shape[0]):
            try:
                fitted.family_.check_support(fitted._to_head_scale(y2[v : v + 1]))
            except DomainError:
                bad.append(v)
        raise DomainError(f"{err}; offending records {bad[:20]}") from None
    if logp.shape[0] == 0:
        raise ValueError("empty validation set")
    return logp.mean(axis=0) if average else logp.sum(axis=0)


def ks_uniform(u):
    """Two-sided Kolmogorov-Smirnov statistic of ``u`` against Uniform(0, 1)."""
    u = np.asarray(u, dtype=float).ravel()
    if u.size == 0:
        raise ValueError("no PIT values")
    return float(stats.kstest(u, "uniform").statistic)


def pit_values(fitted, X, y, rng=None):
    return _columns(fitted.pit(X, y, rng=rng))


def binary_metrics(pip, truth, clamp=PIP_CLAMP):
    """Cross entropy, classification accuracy and Brier score of inclusion probabilities.

    ``ca`` scores a prediction as correct when ``pip >= 0.5`` matches
    ``truth == 1``.  ``ca_displayed`` is the indicator average
    ``mean[truth * 1(pip < 0.5) + (1 - truth) * 1(pip < 0.5)]`` taken
    literally, which reduces to the fraction of predictions below one half.
    """
    p = np.clip(np.asarray(pip, dtype=float), clamp, 1.0 - clamp)
    g = np.asarray(truth, dtype=float)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    if not np.all((g == 0) | (g == 1)):
        raise DomainError("truth indicators must be 0 or 1")
    ce = -np.mean(g * np.log(p) + (1.0 - g) * np.log1p(-p))
    below = p < 0.5
    ca = np.mean(g * ~below + (1.0 - g) * below)
    ca_displayed = np.mean(g * below + (1.0 - g) * below)
    bs = np.mean((g - p) ** 2)
    return {"ce": float(ce), "ca": float(ca), "ca_displayed": float(ca_displayed), "bs": float(bs)}


def mad_and_coverage(median, lower, upper, truth):
    """Median absolute deviation of posterior medians from the truth and the
    fraction of intervals ``[lower, upper]`` containing it (per column).

    ``truth`` is a scalar, one value per column, or one value per replicate."""
    median, lower, upper = _columns(median), _columns(lower), _columns(upper)
    truth = np.asarray(truth, dtype=float)
    if truth.ndim == 1 and truth.shape[0] == median.shape[0]:
        truth = truth[:, None]
    truth = np.broadcast_to(truth, median.shape)
    mad = np.median(np.abs(median - truth), axis=0)
    cover = np.mean((lower <= truth) & (truth <= upper), axis=0)
    return mad, cover


def coverage_by_level(fitted, X, y, levels=DEFAULT_LEVELS):
    y2 = _columns(y)
    out = {}
    for level in levels:
        lo, hi = fitted.interval(X, level)
        out[level] = np.mean((_columns(lo) <= y2) & (y2 <= _columns(hi)), axis=0)
    return out


@dataclass
class CalibrationReport:
    target: str
    n: int
    log_score: float
    log_score_sum: float
    ks_stat: float
    coverage_by_level: dict
    mad: float
    pit: np.ndarray = field(repr=False, default=None)
    binary: dict | None = None

    def rows(self):
        """Tidy ``(target, metric, value)`` rows."""
        out = [(self.target, "n", self.n), (self.target, "log_score", self.log_score),
               (self.target, "log_score_sum", self.log_score_sum), (self.target, "ks_stat", self.ks_stat),
               (self.target, "mad", self.mad)]
        out += [(self.target, f"coverage_{level:g}", c) for level, c in self.coverage_by_level.items()]
        if self.binary:
            out += [(self.target, k, v) for k, v in self.binary.items()]
        return out

    def to_dict(self):
        d = asdict(self)
        d.pop("pit")
        d["coverage_by_level"] = {f"{k:g}": v for k, v in self.coverage_by_level.items()}
        return d


def calibration_report(fitted, X, y, target_names=None, levels=DEFAULT_LEVELS, rng=None):
    """One :class:`CalibrationReport` per target column of a fitted posterior."""
    y2 = _columns(y)
    if y2.shape[0] == 0:
        raise ValueError("empty validation set")
    names = list(target_names) if target_names is not None else [f"target{j}" for j in range(y2.shape[1])]
    if len(names) != y2.shape[1]:
        raise ValueError(f"{len(names)} target names for {y2.shape[1]} target columns")
    ls = log_score(fitted, X, y, average=True)
    pit = pit_values(fitted, X, y, rng=rng)
    cov = coverage_by_level(fitted, X, y, levels)
    med = _columns(fitted.predict(X))
    mad = np.median(np.abs(med - y2), axis=0)
    binary = None
    reports = []
    for j, name in enumerate(names):
        if fitted.family_.name == "bernoulli_logit":
            pip = _columns(fitted.predict_params(X)["prob"])[:, j]
            binary = binary_metrics(pip, y2[:, j])
        reports.append(CalibrationReport(
            target=name, n=int(y2.shape[0]), log_score=float(ls[j]), log_score_sum=float(ls[j] * y2.shape[0]),
            ks_stat=ks_uniform(pit[:, j]), coverage_by_level={k: float(v[j]) for k, v in cov.items()},
            mad=float(mad[j]), pit=pit[:, j], binary=binary,
        ))
    return reports


def write_reports(reports, csv_path, json_path=None):
    """Write tidy metric rows to CSV and, optionally, the reports as JSON."""
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["target", "metric", "value"])
        for r in reports:
            for row in r.rows():
                w.writerow([row[0], row[1], repr(float(row[2]))])
    if json_path is not None:
        with open(json_path, "w") as fh:
            json.dump([r.to_dict() for r in reports], fh, indent=1)


def write_pit_qq(pit, path):
    """Sorted PIT values next to uniform plotting positions ``(i - 0.5) / V``."""
    u = np.sort(np.asarray(pit, dtype=float).ravel())
    theo = (np.arange(1, u.size + 1) - 0.5) / u.size
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["theoretical", "pit"])
        for a, b in zip(theo, u):
            w.writerow([repr(float(a)), repr(float(b))])
