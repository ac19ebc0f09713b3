"""Offline metrics: log-loss, relative information gain, AUC, calibration.

Natural logs throughout. Probabilities are clamped to ``[1e-7, 1 - 1e-7]``
before any log is taken.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from raremtl.nn import PROB_EPS, bce, clamp_prob


class UndefinedMetricError(ValueError):
    pass


def _arrays(c, p) -> tuple[np.ndarray, np.ndarray]:
    c = np.asarray(c, dtype=np.float64).ravel()
    p = np.asarray(p, dtype=np.float64).ravel()
    if c.shape != p.shape:
        raise ValueError(f"labels {c.shape} and predictions {p.shape} differ in length")
    if c.size == 0:
        raise UndefinedMetricError("no records")
    return c, p


def entropy(gamma: float) -> float:
    return float(-gamma * np.log(gamma) - (1.0 - gamma) * np.log1p(-gamma))


def log_loss(c, p) -> float:
    c, p = _arrays(c, p)
    return float(bce(p, c).mean())


def rig(c, p) -> float:
    """``1 - logloss / H(gamma)`` where gamma is the observed positive rate."""
    c, p = _arrays(c, p)
    gamma = float(c.mean())
    if not 0.0 < gamma < 1.0:
        raise UndefinedMetricError(f"RIG undefined for base rate {gamma} (zero-entropy denominator)")
    return 1.0 - float(bce(p, c).mean()) / entropy(gamma)


def auc(c, p) -> float:
    """Mann-Whitney AUC with average ranks for ties."""
    c, p = _arrays(c, p)
    pos = c > 0.5
    n_pos = int(pos.sum())
    n_neg = c.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    ranks = rankdata(p, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class MetricReport:
    label: str
    n: int
    gamma: float
    mean_log_loss: float
    rig: float
    auc: float
    calibration_ratio: float

    def to_dict(self) -> dict:
        return asdict(self)


def report(c, p, label: str = "") -> MetricReport:
    c, p = _arrays(c, p)
    gamma = float(c.mean())
    try:
        r = rig(c, p)
    except UndefinedMetricError as exc:
        raise UndefinedMetricError(f"{label or 'report'}: rig: {exc}") from exc
    try:
        a = auc(c, p)
    except UndefinedMetricError as exc:
        raise UndefinedMetricError(f"{label or 'report'}: auc: {exc}") from exc
    return MetricReport(
        label=label,
        n=int(c.size),
        gamma=gamma,
        mean_log_loss=float(bce(p, c).mean()),
        rig=r,
        auc=a,
        calibration_ratio=float(clamp_prob(p).mean() / gamma),
    )


RELATIVE_FIELDS = ("mean_log_loss", "rig", "auc", "calibration_ratio")


def relative(rep: MetricReport, baseline: MetricReport) -> dict[str, float]:
    """``metric / baseline - 1`` for each metric (a fraction; 0.0408 means +4.08%)."""
    return {f: getattr(rep, f) / getattr(baseline, f) - 1.0 for f in RELATIVE_FIELDS}


def format_pct(delta: float, digits: int = 2) -> str:
    """0.0408 -> '+4.08%'; -0.02 with digits=1 -> '-2.0%'."""
    s = f"{delta * 100:+.{digits}f}%"
    if s.startswith("-") and float(s[1:-1]) == 0.0:
        s = "+" + s[1:]
    return s


__all__ = [
    "PROB_EPS", "UndefinedMetricError", "MetricReport", "entropy", "log_loss", "rig", "auc", "report",
    "relative", "format_pct",
]
