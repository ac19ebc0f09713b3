"""Synthetic click/conversion log with known ground truth.

The conversion logit of a click is

    logit(base_cvr) + shared_scale * phi(features) + task_scale * psi_task(features)

where ``phi`` is one feature-effect function common to every setup and
``psi_task`` is drawn separately for frequent and rare setups. ``phi`` is the
structure a multi-task model can transfer from frequent to rare conversions.
It mixes additive per-value effects with pairwise feature interactions, so a
shared hidden representation has something to learn beyond the embeddings.

Clicks are stored column-wise in :class:`ClickLog`; :class:`ClickEvent` is the
row view used by the per-event APIs and the JSONL format.
"""

from __future__ import annotations

import csv
import enum
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from raremtl.nn import sigmoid


class ConfigError(ValueError):
    pass


class Category(str, enum.Enum):
    PURCHASE = "Purchase"
    SIGNUP = "Signup"
    PAGEVIEW = "PageView"
    VIDEOVIEW = "VideoView"
    LEAD = "Lead"


HARD_CATEGORIES = (Category.PURCHASE, Category.SIGNUP, Category.LEAD)
SOFT_CATEGORIES = (Category.PAGEVIEW, Category.VIDEOVIEW)

# Categorical click features and vocabulary sizes. Index 0 is reserved for
# out-of-vocabulary values, so the generator emits 1..vocab-1.
DEFAULT_FEATURES = {"user_segment": 501, "site": 1001, "ad_format": 51, "device": 6}

# The advertiser's (possibly wrong) conversion-category tag is logged as one
# more categorical feature; it carries no effect of its own in the generator.
CATEGORY_FEATURE = "category"
CATEGORY_INDEX = {c.value: i + 1 for i, c in enumerate(Category)}
ADVERTISER_FEATURE = "advertiser_id"


@dataclass(frozen=True)
class ConversionSetup:
    setup_id: int
    advertiser_id: int
    category: str
    base_cvr: float
    daily_budget: float
    value_per_conversion: float
    is_hard: bool  # generator ground truth, never read by models

    def __post_init__(self):
        if not 0.0 < self.base_cvr < 1.0:
            raise ConfigError(f"setup {self.setup_id}: base_cvr {self.base_cvr} not in (0,1)")
        if self.daily_budget <= 0:
            raise ConfigError(f"setup {self.setup_id}: daily_budget must be > 0")


@dataclass(frozen=True)
class ClickEvent:
    event_id: int
    day: int
    seq: int
    features: dict[str, int]
    setup_id: int
    advertiser_id: int
    converted: bool
    true_pcvr: float = float("nan")


@dataclass
class GeneratorConfig:
    n_advertisers: int = 100
    setups_per_advertiser: int = 2
    n_days: int = 30
    clicks_per_day: int = 20_000
    features: dict[str, int] = field(default_factory=lambda: dict(DEFAULT_FEATURES))
    soft_cvr_range: tuple[float, float] = (0.05, 0.40)
    hard_cvr_range: tuple[float, float] = (0.0005, 0.008)
    hard_setup_fraction: float = 0.5
    shared_effect_scale: float = 1.0
    task_specific_effect_scale: float = 0.5
    task_effect_correlation: float = 0.0
    shared_interaction_weight: float = 0.5
    category_noise: float = 0.1
    activity_sigma: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if min(self.n_advertisers, self.setups_per_advertiser, self.n_days, self.clicks_per_day) < 1:
            raise ConfigError("counts must be >= 1")
        slo, shi = self.soft_cvr_range
        hlo, hhi = self.hard_cvr_range
        if not (0 < hlo <= hhi < 1 and 0 < slo <= shi < 1):
            raise ConfigError("CVR ranges must lie in (0,1) with lo <= hi")
        if hhi >= slo:
            raise ConfigError(f"hard_cvr_range {self.hard_cvr_range} must lie below soft_cvr_range {self.soft_cvr_range}")
        if self.shared_effect_scale < 0 or self.task_specific_effect_scale < 0:
            raise ConfigError("effect scales must be >= 0")
        if not -1.0 <= self.task_effect_correlation <= 1.0:
            raise ConfigError("task_effect_correlation must lie in [-1,1]")
        if not 0.0 <= self.shared_interaction_weight <= 1.0:
            raise ConfigError("shared_interaction_weight must lie in [0,1]")
        if not 0.0 <= self.hard_setup_fraction <= 1.0 or not 0.0 <= self.category_noise <= 1.0:
            raise ConfigError("fractions must lie in [0,1]")
        for name, vocab in self.features.items():
            if vocab < 2:
                raise ConfigError(f"feature {name!r}: vocab must be >= 2 (index 0 is reserved)")

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        d = dict(d)
        for key in ("soft_cvr_range", "hard_cvr_range"):
            if key in d:
                d[key] = tuple(d[key])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown generator keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["soft_cvr_range"] = list(self.soft_cvr_range)
        d["hard_cvr_range"] = list(self.hard_cvr_range)
        return d


@dataclass
class ClickLog:
    """Column-wise click log in canonical (day, seq) order."""

    event_id: np.ndarray
    day: np.ndarray
    seq: np.ndarray
    features: np.ndarray  # (n, n_features) int64
    feature_names: tuple[str, ...]
    setup_id: np.ndarray
    advertiser_id: np.ndarray
    converted: np.ndarray  # int8
    true_pcvr: np.ndarray  # generator-only

    def __len__(self) -> int:
        return len(self.event_id)

    def take(self, idx) -> "ClickLog":
        return ClickLog(
            self.event_id[idx], self.day[idx], self.seq[idx], self.features[idx], self.feature_names,
            self.setup_id[idx], self.advertiser_id[idx], self.converted[idx], self.true_pcvr[idx],
        )

    def model_inputs(self) -> np.ndarray:
        """Logged categorical features plus the advertiser id as the last column."""
        return np.column_stack([self.features, self.advertiser_id])

    def event(self, i: int) -> ClickEvent:
        return ClickEvent(
            event_id=int(self.event_id[i]),
            day=int(self.day[i]),
            seq=int(self.seq[i]),
            features={n: int(v) for n, v in zip(self.feature_names, self.features[i])},
            setup_id=int(self.setup_id[i]),
            advertiser_id=int(self.advertiser_id[i]),
            converted=bool(self.converted[i]),
            true_pcvr=float(self.true_pcvr[i]),
        )

    def events(self) -> Iterator[ClickEvent]:
        for i in range(len(self)):
            yield self.event(i)

    @classmethod
    def from_events(cls, events: Sequence[ClickEvent], feature_names: Sequence[str]) -> "ClickLog":
        feature_names = tuple(feature_names)
        n = len(events)
        feats = np.zeros((n, len(feature_names)), dtype=np.int64)
        for i, e in enumerate(events):
            for j, name in enumerate(feature_names):
                feats[i, j] = e.features.get(name, 0)
        return cls(
            np.array([e.event_id for e in events], dtype=np.int64),
            np.array([e.day for e in events], dtype=np.int64),
            np.array([e.seq for e in events], dtype=np.int64),
            feats,
            feature_names,
            np.array([e.setup_id for e in events], dtype=np.int64),
            np.array([e.advertiser_id for e in events], dtype=np.int64),
            np.array([e.converted for e in events], dtype=np.int8),
            np.array([e.true_pcvr for e in events], dtype=np.float64),
        )

    @classmethod
    def concat(cls, logs: Sequence["ClickLog"]) -> "ClickLog":
        return cls(
            *(np.concatenate([getattr(l, f) for l in logs]) for f in ("event_id", "day", "seq")),
            np.concatenate([l.features for l in logs]),
            logs[0].feature_names,
            *(np.concatenate([getattr(l, f) for l in logs])
              for f in ("setup_id", "advertiser_id", "converted", "true_pcvr")),
        )


def log_features(cfg: GeneratorConfig) -> list[tuple[str, int]]:
    """(name, vocab) of the feature columns stored in the log."""
    return list(cfg.features.items()) + [(CATEGORY_FEATURE, len(CATEGORY_INDEX) + 1)]


def model_schema(cfg: GeneratorConfig) -> list[tuple[str, int]]:
    """Feature (name, vocab) pairs the model embeds, in ``model_inputs`` column order."""
    return log_features(cfg) + [(ADVERTISER_FEATURE, cfg.n_advertisers + 1)]


def _logit(p):
    return np.log(p) - np.log1p(-p)


@dataclass
class _World:
    setups: list[ConversionSetup]
    activity: np.ndarray
    shared: list[np.ndarray]
    factors: list[np.ndarray]
    task: dict[bool, list[np.ndarray]]


def _build_world(cfg: GeneratorConfig) -> _World:
    rng = np.random.default_rng([cfg.seed, 0])
    n_setups = cfg.n_advertisers * cfg.setups_per_advertiser
    vocabs = list(cfg.features.values())
    # Per-value effects, normalised so phi and psi have unit variance.
    norm = 1.0 / math.sqrt(len(vocabs))
    shared = [rng.standard_normal(v) * norm for v in vocabs]
    soft = [rng.standard_normal(v) * norm for v in vocabs]
    rho = cfg.task_effect_correlation
    hard = [rho * s + math.sqrt(1.0 - rho * rho) * rng.standard_normal(len(s)) * norm for s in soft]
    task = {False: soft, True: hard}
    # Per-value factors for the pairwise interaction part of phi; own stream so
    # the rest of the world does not depend on it.
    frng = np.random.default_rng([cfg.seed, 2])
    factors = [frng.standard_normal(v) for v in vocabs]

    # Advertiser activity is heavy-tailed so a few advertisers dominate spend.
    adv_activity = rng.lognormal(0.0, cfg.activity_sigma, size=cfg.n_advertisers)
    setups = []
    activity = np.empty(n_setups)
    for k in range(n_setups):
        adv = k // cfg.setups_per_advertiser
        hard = bool(rng.random() < cfg.hard_setup_fraction)
        lo, hi = cfg.hard_cvr_range if hard else cfg.soft_cvr_range
        base = float(math.exp(rng.uniform(math.log(lo), math.log(hi))))
        pool = HARD_CATEGORIES if hard else SOFT_CATEGORIES
        if rng.random() < cfg.category_noise:
            pool = SOFT_CATEGORIES if hard else HARD_CATEGORIES
        category = pool[int(rng.integers(len(pool)))].value
        share = float(rng.uniform(0.5, 1.5))
        activity[k] = adv_activity[adv] * share
        value = float(rng.uniform(0.5, 2.0) / base)  # advertisers value rare actions more
        setups.append((k + 1, adv + 1, category, base, value, hard))
    activity /= activity.sum()

    out = []
    for (sid, aid, cat, base, value, hard), act in zip(setups, activity):
        expected_spend = act * cfg.clicks_per_day * base * value
        budget = float(expected_spend * rng.uniform(0.4, 1.2))
        out.append(ConversionSetup(sid, aid, cat, base, budget, value, hard))
    return _World(out, activity, shared, factors, task)


def _shared_effect(cfg: GeneratorConfig, world: _World, feats: np.ndarray) -> np.ndarray:
    additive = sum(eff[feats[:, j]] for j, eff in enumerate(world.shared))
    w = cfg.shared_interaction_weight
    if w == 0 or len(world.factors) < 2:
        return additive
    f = [b[feats[:, j]] for j, b in enumerate(world.factors)]
    pairs = [(j, k) for j in range(len(f)) for k in range(j + 1, len(f))]
    inter = sum(f[j] * f[k] for j, k in pairs) / math.sqrt(len(pairs))
    return math.sqrt(1.0 - w) * additive + math.sqrt(w) * inter


def _generate_day(cfg: GeneratorConfig, world: _World, day: int) -> ClickLog:
    rng = np.random.default_rng([cfg.seed, 1, day])
    n = cfg.clicks_per_day
    setups = world.setups
    sidx = rng.choice(len(setups), size=n, p=world.activity)
    feats = np.column_stack([rng.integers(1, v, size=n) for v in cfg.features.values()])
    category = np.array([CATEGORY_INDEX[s.category] for s in setups])[sidx]
    base = np.array([s.base_cvr for s in setups])[sidx]
    hard = np.array([s.is_hard for s in setups])[sidx]
    phi = _shared_effect(cfg, world, feats)
    psi_hard = sum(eff[feats[:, j]] for j, eff in enumerate(world.task[True]))
    psi_soft = sum(eff[feats[:, j]] for j, eff in enumerate(world.task[False]))
    psi = np.where(hard, psi_hard, psi_soft)
    logit = _logit(base) + cfg.shared_effect_scale * phi + cfg.task_specific_effect_scale * psi
    if cfg.shared_effect_scale == 0 and cfg.task_specific_effect_scale == 0:
        pcvr = base.copy()
    else:
        pcvr = sigmoid(logit)
    converted = (rng.random(n) < pcvr).astype(np.int8)
    seq = np.arange(n, dtype=np.int64)
    return ClickLog(
        event_id=day * n + seq,
        day=np.full(n, day, dtype=np.int64),
        seq=seq,
        features=np.column_stack([feats, category]).astype(np.int64),
        feature_names=tuple(name for name, _ in log_features(cfg)),
        setup_id=np.array([s.setup_id for s in setups], dtype=np.int64)[sidx],
        advertiser_id=np.array([s.advertiser_id for s in setups], dtype=np.int64)[sidx],
        converted=converted,
        true_pcvr=pcvr,
    )


def generate(cfg: GeneratorConfig) -> tuple[list[ConversionSetup], ClickLog]:
    """Generate setups and a click log; fully determined by ``cfg``.

    Each day draws from its own seed derived from ``(cfg.seed, day)``, so days
    can be produced independently.
    """
    cfg.validate()
    world = _build_world(cfg)
    log = ClickLog.concat([_generate_day(cfg, world, d) for d in range(cfg.n_days)])
    return world.setups, log


def split(log: ClickLog, train_fraction: float) -> tuple[ClickLog, ClickLog]:
    """Time-ordered split: the first ``round(fraction * n_days)`` days train, the rest evaluate."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError("train_fraction must be in (0,1)")
    days = np.unique(log.day)
    if len(days) < 2:
        raise ConfigError("all events fall on one day; generate more days to split by time")
    n_train = min(max(int(round(train_fraction * len(days))), 1), len(days) - 1)
    cutoff = days[n_train - 1]
    mask = log.day <= cutoff
    return log.take(np.flatnonzero(mask)), log.take(np.flatnonzero(~mask))


# -- serialization -----------------------------------------------------------

def event_to_json(e: ClickEvent) -> str:
    return json.dumps({
        "event_id": e.event_id,
        "day": e.day,
        "seq": e.seq,
        "setup_id": e.setup_id,
        "advertiser_id": e.advertiser_id,
        "features": e.features,
        "converted": int(e.converted),
        "true_pcvr": e.true_pcvr,
    }, separators=(",", ":"))


def write_log(log: ClickLog, path: Path) -> None:
    names = log.feature_names
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        buf = io.StringIO()
        for i in range(len(log)):
            feats = ",".join(f'"{n}":{int(v)}' for n, v in zip(names, log.features[i]))
            buf.write(
                f'{{"event_id":{int(log.event_id[i])},"day":{int(log.day[i])},"seq":{int(log.seq[i])},'
                f'"setup_id":{int(log.setup_id[i])},"advertiser_id":{int(log.advertiser_id[i])},'
                f'"features":{{{feats}}},"converted":{int(log.converted[i])},'
                f'"true_pcvr":{float(log.true_pcvr[i])!r}}}\n'
            )
            if i % 50_000 == 49_999:
                fh.write(buf.getvalue())
                buf = io.StringIO()
        fh.write(buf.getvalue())


def read_log(path: Path, feature_names: Sequence[str]) -> tuple[ClickLog, int]:
    """Parse a JSONL log. Returns ``(log, n_malformed_lines_skipped)``."""
    events = []
    skipped = 0
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                events.append(ClickEvent(
                    event_id=int(d["event_id"]), day=int(d["day"]), seq=int(d["seq"]),
                    features={k: int(v) for k, v in d["features"].items()},
                    setup_id=int(d["setup_id"]), advertiser_id=int(d["advertiser_id"]),
                    converted=bool(int(d["converted"])), true_pcvr=float(d.get("true_pcvr", "nan")),
                ))
            except (ValueError, KeyError, TypeError, AttributeError):
                skipped += 1
    return ClickLog.from_events(events, feature_names), skipped


SETUP_COLUMNS = ("setup_id", "advertiser_id", "category", "base_cvr", "daily_budget",
                 "value_per_conversion", "is_hard")


def write_setups(setups: Sequence[ConversionSetup], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SETUP_COLUMNS)
        for s in setups:
            w.writerow([s.setup_id, s.advertiser_id, s.category, repr(s.base_cvr), repr(s.daily_budget),
                        repr(s.value_per_conversion), int(s.is_hard)])


def read_setups(path: Path) -> list[ConversionSetup]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            ConversionSetup(int(r["setup_id"]), int(r["advertiser_id"]), r["category"], float(r["base_cvr"]),
                            float(r["daily_budget"]), float(r["value_per_conversion"]), bool(int(r["is_hard"])))
            for r in csv.DictReader(fh)
        ]


def write_schema(cfg: GeneratorConfig, path: Path) -> None:
    schema = {
        "event_fields": ["event_id", "day", "seq", "setup_id", "advertiser_id", "features", "converted",
                         "true_pcvr"],
        "generator_only_fields": ["true_pcvr"],
        "features": [{"name": n, "vocab_size": v} for n, v in log_features(cfg)],
        "model_features": [{"name": n, "vocab_size": v} for n, v in model_schema(cfg)],
        "oov_index": 0,
        "setup_columns": list(SETUP_COLUMNS),
    }
    path.write_text(json.dumps(schema, indent=2) + "\n", encoding="utf-8")


def read_schema(path: Path) -> dict:
    return json.loads(path.read_text(encoding="utf-8"))


def log_digest(log: ClickLog) -> str:
    h = hashlib.sha256()
    for arr in (log.event_id, log.day, log.seq, log.features, log.setup_id, log.advertiser_id, log.converted,
                log.true_pcvr):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
