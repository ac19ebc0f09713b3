"""Hard/soft task assignment from time-decayed historical CVR.

A setup is *soft* when its decayed CVR exceeds ``alpha`` and *hard*
otherwise. Setups with too little decayed traffic fall back to a static
category prior. Day-to-day label changes go through a hysteresis band plus a
dwell counter so that borderline setups do not flap.
"""

from __future__ import annotations

import csv
import enum
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)


class Task(str, enum.Enum):
    HARD = "Hard"
    SOFT = "Soft"


class Source(str, enum.Enum):
    STATS = "Stats"
    CATEGORY_PRIOR = "CategoryPrior"


DEFAULT_CATEGORY_PRIOR = {
    "Purchase": "Hard",
    "Signup": "Hard",
    "Lead": "Hard",
    "PageView": "Soft",
    "VideoView": "Soft",
}


@dataclass
class AssignmentConfig:
    alpha: float = 0.01
    decay_lambda: float = 0.9
    window_days: int = 28
    min_clicks: float = 200.0
    hysteresis_band: tuple[float, float] | None = None  # default (0.8*alpha, 1.25*alpha)
    dwell_days: int = 3
    online_alpha_factor: float = 0.8
    stabilization: bool = True
    category_prior: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_CATEGORY_PRIOR))

    def __post_init__(self):
        if self.hysteresis_band is None:
            self.hysteresis_band = (0.8 * self.alpha, 1.25 * self.alpha)
        self.hysteresis_band = tuple(self.hysteresis_band)
        self.validate()

    def validate(self) -> None:
        lo, hi = self.hysteresis_band
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must be in (0,1), got {self.alpha}")
        if not 0.0 < self.decay_lambda <= 1.0:
            raise ValueError("decay_lambda must be in (0,1]")
        if not lo <= self.alpha <= hi:
            raise ValueError(f"hysteresis band {self.hysteresis_band} must contain alpha={self.alpha}")
        if self.dwell_days < 1 or self.window_days < 1:
            raise ValueError("dwell_days and window_days must be >= 1")
        if not 0.0 < self.online_alpha_factor <= 1.0:
            raise ValueError("online_alpha_factor must be in (0,1]")
        for cat, lab in self.category_prior.items():
            Task(lab)

    @property
    def online_threshold(self) -> float:
        return self.alpha * self.online_alpha_factor

    @property
    def effective_band(self) -> tuple[float, float]:
        return self.hysteresis_band if self.stabilization else (self.alpha, self.alpha)

    @property
    def effective_dwell(self) -> int:
        return self.dwell_days if self.stabilization else 1

    @classmethod
    def from_dict(cls, d: Mapping) -> "AssignmentConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown assignment keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SetupStats:
    """Per-day click/conversion counts of one setup, keyed by day index."""

    setup_id: int
    clicks: dict[int, int] = field(default_factory=dict)
    conversions: dict[int, int] = field(default_factory=dict)

    def add(self, day: int, clicks: int, conversions: int) -> None:
        if conversions > clicks or clicks < 0 or conversions < 0:
            raise ValueError(f"setup {self.setup_id} day {day}: {conversions} conversions / {clicks} clicks")
        self.clicks[day] = self.clicks.get(day, 0) + clicks
        self.conversions[day] = self.conversions.get(day, 0) + conversions

    def decayed(self, as_of_day: int, cfg: AssignmentConfig) -> tuple[float, float]:
        """Decayed ``(clicks, conversions)`` over the window ending at ``as_of_day``."""
        dc = dv = 0.0
        for day, n in self.clicks.items():
            age = as_of_day - day
            if 0 <= age < cfg.window_days:
                w = cfg.decay_lambda**age
                dc += w * n
                dv += w * self.conversions.get(day, 0)
        return dc, dv


def decayed_cvr(stats: SetupStats, as_of_day: int, cfg: AssignmentConfig) -> float | None:
    """Decayed conversions / decayed clicks, or ``None`` when decayed clicks < ``min_clicks``."""
    dc, dv = stats.decayed(as_of_day, cfg)
    if dc <= 0 or dc < cfg.min_clicks:
        return None
    return dv / dc


def prior_label(category: str | None, cfg: AssignmentConfig) -> Task:
    lab = cfg.category_prior.get(category) if category is not None else None
    if lab is None:
        logger.warning("no category prior for %r; defaulting to Hard", category)
        return Task.HARD
    return Task(lab)


def classify(cvr: float | None, category: str | None, cfg: AssignmentConfig,
             threshold: float | None = None) -> tuple[Task, Source]:
    threshold = cfg.alpha if threshold is None else threshold
    if cvr is None:
        return prior_label(category, cfg), Source.CATEGORY_PRIOR
    return (Task.SOFT if cvr > threshold else Task.HARD), Source.STATS


@dataclass(frozen=True)
class TaskAssignment:
    setup_id: int
    label: Task
    raw_label: Task
    days_pending_flip: int = 0
    source: Source = Source.STATS
    decayed_cvr: float | None = None
    decayed_clicks: float = 0.0
    as_of_day: int = -1


def stabilize(prev: TaskAssignment, raw: Task, cvr: float | None, cfg: AssignmentConfig) -> tuple[Task, int]:
    """Return the new ``(label, days_pending_flip)``.

    The label flips only after ``dwell_days`` consecutive evaluations in which
    the raw label disagrees with it *and* the CVR lies beyond the hysteresis
    band on the new label's side. Agreement, or a disagreement from inside the
    band, resets the counter.
    """
    if raw == prev.label or cvr is None:
        return prev.label, 0
    lo, hi = cfg.effective_band
    beyond = cvr > hi if raw is Task.SOFT else cvr <= lo
    if not beyond:
        return prev.label, 0
    pending = prev.days_pending_flip + 1
    if pending >= cfg.effective_dwell:
        return raw, 0
    return prev.label, pending


@dataclass
class AssignmentResult:
    assignments: dict[int, TaskAssignment]
    online_threshold: float
    skipped_rows: int = 0


def daily_counts(setup_id, day, converted) -> tuple[dict[int, SetupStats], int]:
    """Aggregate raw rows into per-setup daily stats; malformed rows are skipped and counted."""
    setup_id = np.asarray(setup_id, dtype=np.int64)
    day = np.asarray(day, dtype=np.int64)
    converted = np.asarray(converted)
    ok = (day >= 0) & (setup_id >= 0) & ((converted == 0) | (converted == 1))
    skipped = int((~ok).sum())
    if skipped:
        logger.warning("skipped %d malformed log rows", skipped)
    sid, d, c = setup_id[ok], day[ok], converted[ok].astype(np.int64)
    stats: dict[int, SetupStats] = {}
    if sid.size == 0:
        return stats, skipped
    keys = np.stack([sid, d], axis=1)
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.ravel()
    n_clicks = np.bincount(inv, minlength=len(uniq))
    n_conv = np.bincount(inv, weights=c, minlength=len(uniq)).astype(np.int64)
    for (s, dd), nc, nv in zip(uniq.tolist(), n_clicks.tolist(), n_conv.tolist()):
        stats.setdefault(s, SetupStats(s)).add(dd, nc, nv)
    return stats, skipped


def assign_step(stats: Mapping[int, SetupStats], as_of_day: int, cfg: AssignmentConfig,
                categories: Mapping[int, str] | None = None,
                prev: Mapping[int, TaskAssignment] | None = None) -> dict[int, TaskAssignment]:
    """One evaluation: classify every setup and stabilize against ``prev``."""
    categories = categories or {}
    prev = prev or {}
    out = {}
    for sid in sorted(set(stats) | set(prev)):
        st = stats.get(sid)
        if st is None:
            dc, dv = 0.0, 0.0
        else:
            dc, dv = st.decayed(as_of_day, cfg)
        cvr = dv / dc if dc > 0 and dc >= cfg.min_clicks else None
        raw, source = classify(cvr, categories.get(sid), cfg)
        p = prev.get(sid)
        if p is None:
            label, pending = raw, 0
        else:
            label, pending = stabilize(p, raw, cvr, cfg)
        out[sid] = TaskAssignment(sid, label, raw, pending, source, cvr, dc, as_of_day)
    return out


def assign_all(log, as_of_day: int, cfg: AssignmentConfig, prev: Mapping[int, TaskAssignment] | None = None,
               categories: Mapping[int, str] | None = None) -> AssignmentResult:
    """Assign every setup seen in ``log`` (rows with ``day <= as_of_day``) at ``as_of_day``.

    ``log`` is any object with ``setup_id``, ``day`` and ``converted`` arrays.
    """
    if len(log.setup_id) == 0:
        return AssignmentResult({}, cfg.online_threshold)
    mask = np.asarray(log.day) <= as_of_day
    stats, skipped = daily_counts(np.asarray(log.setup_id)[mask], np.asarray(log.day)[mask],
                                  np.asarray(log.converted)[mask])
    return AssignmentResult(assign_step(stats, as_of_day, cfg, categories, prev), cfg.online_threshold, skipped)


def assign_daily(log, first_day: int, last_day: int, cfg: AssignmentConfig,
                 categories: Mapping[int, str] | None = None) -> tuple[AssignmentResult, list[dict[int, TaskAssignment]]]:
    """Run one stabilized evaluation per day from ``first_day`` to ``last_day`` inclusive.

    Returns the final result and the per-day history.
    """
    stats, skipped = daily_counts(log.setup_id, log.day, log.converted)
    history = []
    prev: dict[int, TaskAssignment] = {}
    for day in range(first_day, last_day + 1):
        visible = {}
        for sid, st in stats.items():
            days = [d for d in st.clicks if d <= day]
            if days:
                visible[sid] = SetupStats(sid, {d: st.clicks[d] for d in days},
                                          {d: st.conversions[d] for d in days})
        prev = assign_step(visible, day, cfg, categories, prev)
        history.append(prev)
    return AssignmentResult(prev, cfg.online_threshold, skipped), history


def label_series(cvrs: Sequence[float | None], cfg: AssignmentConfig, initial: Task | None = None,
                 category: str | None = None) -> list[Task]:
    """Stabilized labels for one setup given its daily decayed-CVR series."""
    labels = []
    prev = None
    for day, cvr in enumerate(cvrs):
        raw, source = classify(cvr, category, cfg)
        if prev is None:
            label, pending = (initial or raw), 0
        else:
            label, pending = stabilize(prev, raw, cvr, cfg)
        prev = TaskAssignment(0, label, raw, pending, source, cvr, 0.0, day)
        labels.append(label)
    return labels


def count_flips(labels: Iterable[Task]) -> int:
    labels = list(labels)
    return sum(a != b for a, b in zip(labels, labels[1:]))


def task_labels(setup_ids, assignments: Mapping[int, TaskAssignment], cfg: AssignmentConfig,
                categories: Mapping[int, str] | None = None) -> np.ndarray:
    """Boolean ``is_hard`` per event; unassigned setups use the category prior."""
    categories = categories or {}
    uniq, inv = np.unique(np.asarray(setup_ids), return_inverse=True)
    hard = np.empty(len(uniq), dtype=bool)
    for k, sid in enumerate(uniq.tolist()):
        a = assignments.get(sid)
        lab = a.label if a is not None else prior_label(categories.get(sid), cfg)
        hard[k] = lab is Task.HARD
    return hard[inv.ravel()]


ASSIGNMENT_COLUMNS = ("setup_id", "label", "raw_label", "decayed_cvr", "decayed_clicks", "source", "as_of_day",
                      "days_pending_flip")


def write_assignments(assignments: Mapping[int, TaskAssignment], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ASSIGNMENT_COLUMNS)
        for sid in sorted(assignments):
            a = assignments[sid]
            w.writerow([a.setup_id, a.label.value, a.raw_label.value,
                        "" if a.decayed_cvr is None else repr(a.decayed_cvr), repr(a.decayed_clicks),
                        a.source.value, a.as_of_day, a.days_pending_flip])


def read_assignments(path: Path) -> dict[int, TaskAssignment]:
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            sid = int(r["setup_id"])
            out[sid] = TaskAssignment(
                sid, Task(r["label"]), Task(r["raw_label"]), int(r.get("days_pending_flip") or 0),
                Source(r["source"]), float(r["decayed_cvr"]) if r["decayed_cvr"] else None,
                float(r["decayed_clicks"]), int(r["as_of_day"]),
            )
    return out


__all__ = [
    "Task", "Source", "AssignmentConfig", "SetupStats", "TaskAssignment", "AssignmentResult", "decayed_cvr",
    "classify", "prior_label", "stabilize", "assign_all", "assign_step", "assign_daily", "label_series",
    "count_flips", "task_labels", "write_assignments", "read_assignments",
]
