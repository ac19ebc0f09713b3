"""Budget-split A/B simulation of control vs variant CVR models.

Each arm gets half of every advertiser's daily budget and bids
``pCVR * target_cpa`` on each click. By default the click costs the bid; with
``pricing="market"`` the arm only wins clicks whose market price is at or below
its bid and pays that price. Market prices, conversion draws and (in split
mode) arm membership come from a hash of ``(seed, event_id)``, so both arms see
identical random numbers and identical models make identical decisions.

Spend and conversions are pooled per advertiser over the setups of the
reported segment. CPA ratio (variant / control) and conversion ratio are
aggregated as a median, a spend-weighted geometric mean, nested high-spend
groups and a pooled total.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np

from raremtl.assignment import AssignmentConfig, Task, TaskAssignment, prior_label
from raremtl.metrics import format_pct
from raremtl.synth import ClickLog, ConversionSetup

logger = logging.getLogger(__name__)

GROUP_SHARES = {"Group I": 0.30, "Group II": 0.50, "Group III": 0.70}
TABLE_ROWS = ("Median", "Spend-Weighted", "Group I", "Group II", "Group III")


class ReportError(ValueError):
    pass


class Scorer(Protocol):
    def predict_log(self, log: ClickLog) -> np.ndarray: ...


class ModelScorer:
    """Adapts anything with ``predict(x_idx) -> p`` (e.g. an ``InferenceModel``)."""

    def __init__(self, model):
        self.model = model

    def predict_log(self, log: ClickLog) -> np.ndarray:
        return np.asarray(self.model.predict(log.model_inputs()), dtype=np.float64)


class ConstantScorer:
    def __init__(self, p: float):
        self.p = float(p)

    def predict_log(self, log: ClickLog) -> np.ndarray:
        return np.full(len(log), self.p)


class OracleScorer:
    """Reads the generator's true pCVR; only meaningful on synthetic logs."""

    def predict_log(self, log: ClickLog) -> np.ndarray:
        return np.asarray(log.true_pcvr, dtype=np.float64)


@dataclass
class SimConfig:
    router_threshold: float = 0.008
    seed: int = 0
    n_days: int | None = None  # first n days of the log; None = all
    traffic_mode: str = "paired"  # "paired": both arms see every click; "split": hash-alternated
    pricing: str = "bid"  # "bid": cost = bid; "market": win iff bid >= market price, pay the price
    market_price_sigma: float = 0.75
    market_price_scale: float = 1.0
    segment: str = "hard"  # "hard" | "soft" | "all"

    def validate(self) -> None:
        if self.traffic_mode not in ("paired", "split"):
            raise ValueError(f"traffic_mode must be 'paired' or 'split', got {self.traffic_mode!r}")
        if self.pricing not in ("bid", "market"):
            raise ValueError(f"pricing must be 'bid' or 'market', got {self.pricing!r}")
        if self.n_days is not None and self.n_days < 1:
            raise ValueError("n_days must be >= 1")
        if self.segment not in ("hard", "soft", "all"):
            raise ValueError(f"segment must be hard/soft/all, got {self.segment!r}")
        if not 0 < self.router_threshold < 1:
            raise ValueError("router_threshold must be in (0,1)")
        if self.market_price_sigma < 0 or self.market_price_scale <= 0:
            raise ValueError("market price parameters must be positive")

    @classmethod
    def from_dict(cls, d: Mapping) -> "SimConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown simulation keys: {sorted(unknown)}")
        return cls(**d)


# -- routing ------------------------------------------------------------------

@dataclass
class RouteCounts:
    hard: int = 0
    soft: int = 0
    unassigned: int = 0


def route(assignment: TaskAssignment | None, threshold: float, category: str | None = None,
          cfg: AssignmentConfig | None = None) -> Task:
    """Hard path iff the setup's decayed CVR is at or below the online threshold.

    Without usable statistics the setup keeps its stabilized label; an
    unassigned setup falls back to the category prior.
    """
    if assignment is None:
        return prior_label(category, cfg or AssignmentConfig())
    if assignment.decayed_cvr is None:
        return assignment.label
    return Task.HARD if assignment.decayed_cvr <= threshold else Task.SOFT


def route_setups(setups: Sequence[ConversionSetup], assignments: Mapping[int, TaskAssignment], threshold: float,
                 cfg: AssignmentConfig | None = None) -> tuple[dict[int, Task], RouteCounts]:
    counts = RouteCounts()
    out = {}
    for s in setups:
        a = assignments.get(s.setup_id)
        if a is None:
            counts.unassigned += 1
        out[s.setup_id] = route(a, threshold, s.category, cfg)
        if out[s.setup_id] is Task.HARD:
            counts.hard += 1
        else:
            counts.soft += 1
    return out, counts


# -- common random numbers ----------------------------------------------------------

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (x + np.uint64(0x9E3779B97F4A7C15)) & _MASK
        z = ((z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & _MASK
        z = ((z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & _MASK
        return z ^ (z >> np.uint64(31))


def event_uniforms(seed: int, event_id, stream: int) -> np.ndarray:
    """Uniforms in [0,1) that depend only on ``(seed, event_id, stream)``."""
    eid = np.asarray(event_id, dtype=np.int64).astype(np.uint64)
    with np.errstate(over="ignore"):
        key = _splitmix64(np.uint64(seed & 0xFFFFFFFF) * np.uint64(0x100000001B3) + np.uint64(stream))
        h = _splitmix64(eid ^ key)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def _norm_ppf(u: np.ndarray) -> np.ndarray:
    from scipy.special import ndtri

    return ndtri(np.clip(u, 1e-12, 1 - 1e-12))


# -- outcomes --------------------------------------------------------------------

@dataclass
class AdvertiserOutcome:
    """One advertiser's result, pooled over its setups in the reported segment."""

    advertiser_id: int
    spend_control: float
    spend_variant: float
    conversions_control: int
    conversions_variant: int
    clicks_control: int = 0
    clicks_variant: int = 0
    setup_ids: tuple[int, ...] = ()

    @property
    def cpa_control(self) -> float | None:
        return self.spend_control / self.conversions_control if self.conversions_control else None

    @property
    def cpa_variant(self) -> float | None:
        return self.spend_variant / self.conversions_variant if self.conversions_variant else None

    @property
    def cpa_ratio(self) -> float | None:
        c, v = self.cpa_control, self.cpa_variant
        if c is None or v is None or c <= 0:
            return None
        return v / c

    @property
    def conversion_ratio(self) -> float | None:
        if not self.conversions_control or not self.conversions_variant:
            return None
        return self.conversions_variant / self.conversions_control

    @property
    def defined(self) -> bool:
        return self.cpa_ratio is not None and self.conversion_ratio is not None

    @property
    def total_spend(self) -> float:
        return self.spend_control + self.spend_variant

    def to_dict(self) -> dict:
        d = asdict(self)
        d["setup_ids"] = list(self.setup_ids)
        d.update(cpa_ratio=self.cpa_ratio, conversion_ratio=self.conversion_ratio)
        return d


def spend_weighted_geomean(outcomes: Sequence[AdvertiserOutcome], metric: str) -> float:
    """``exp(sum s_i ln m_i / sum s_j)`` with ``s_i`` the control-arm spend."""
    spends = []
    logs = []
    for o in outcomes:
        m = getattr(o, metric)
        if m is None or m <= 0:
            raise ValueError(f"{metric} of advertiser {o.advertiser_id} is {m}; must be > 0")
        spends.append(o.spend_control)
        logs.append(math.log(m))
    total = math.fsum(spends)
    if total <= 0:
        raise ValueError("total spend must be > 0")
    return math.exp(math.fsum(s * l for s, l in zip(spends, logs)) / total)


def geomean(values: Sequence[float], weights: Sequence[float]) -> float:
    """Plain-number version of the spend-weighted geometric mean."""
    if any(v <= 0 for v in values):
        raise ValueError("values must be > 0")
    total = math.fsum(weights)
    if total <= 0:
        raise ValueError("weights must sum to > 0")
    return math.exp(math.fsum(w * math.log(v) for v, w in zip(values, weights)) / total)


def segment_groups(spends: Sequence[float], shares: Mapping[str, float] = GROUP_SHARES) -> dict[str, list[int]]:
    """Indices of the minimal top-spend prefixes reaching each share of total spend.

    Indices are returned in descending-spend order (ties by position).
    """
    order = sorted(range(len(spends)), key=lambda i: (-spends[i], i))
    total = math.fsum(spends)
    out = {}
    for name, share in shares.items():
        target = share * total * (1 - 1e-12)
        cum = 0.0
        members = []
        for i in order:
            members.append(i)
            cum += spends[i]
            if cum >= target:
                break
        out[name] = members
    return out


def _pooled(outcomes: Sequence[AdvertiserOutcome]) -> tuple[float | None, float | None]:
    sc = math.fsum(o.spend_control for o in outcomes)
    sv = math.fsum(o.spend_variant for o in outcomes)
    cc = sum(o.conversions_control for o in outcomes)
    cv = sum(o.conversions_variant for o in outcomes)
    if cc == 0 or cv == 0 or sc <= 0:
        return None, None
    return (sv / cv) / (sc / cc), cv / cc


@dataclass
class AbReport:
    outcomes: list[AdvertiserOutcome]
    aggregates: dict[str, dict[str, float | None]] = field(default_factory=dict)
    groups: dict[str, list[int]] = field(default_factory=dict)
    excluded: int = 0
    segment: str = "hard"
    routing: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "segment": self.segment,
            "excluded": self.excluded,
            "routing": self.routing,
            "aggregates": self.aggregates,
            "groups": self.groups,
            "outcomes": [o.to_dict() for o in self.outcomes],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def table(self) -> str:
        lines = [f"{'Metric Type':<16}{'CPA Ratio':>12}{'Conversion ratio':>20}"]
        for row in (*TABLE_ROWS, "Pooled"):
            agg = self.aggregates.get(row)
            if agg is None:
                continue
            cells = ["n/a" if agg[k] is None else format_pct(agg[k] - 1.0, 1)
                     for k in ("cpa_ratio", "conversion_ratio")]
            lines.append(f"{row:<16}{cells[0]:>12}{cells[1]:>20}")
        lines.append(f"excluded advertisers (undefined ratios): {self.excluded}")
        return "\n".join(lines) + "\n"


def aggregate(outcomes: Sequence[AdvertiserOutcome], segment: str = "hard", routing: dict | None = None) -> AbReport:
    """Median, spend-weighted and group views over defined advertisers, plus a pooled row over all.

    The per-advertiser views are ``None`` when no advertiser has both ratios
    defined; only a segment with no pooled ratio either is an error.
    """
    defined = [o for o in outcomes if o.defined]
    cpa, conv = _pooled(outcomes)
    if not defined and cpa is None:
        raise ReportError("no advertiser has defined CPA and conversion ratios, pooled or individually")
    none = {"cpa_ratio": None, "conversion_ratio": None}
    aggs: dict[str, dict[str, float | None]] = {"Median": dict(none), "Spend-Weighted": dict(none)}
    if defined:
        aggs["Median"] = {
            "cpa_ratio": float(np.median([o.cpa_ratio for o in defined])),
            "conversion_ratio": float(np.median([o.conversion_ratio for o in defined])),
        }
        aggs["Spend-Weighted"] = {
            "cpa_ratio": spend_weighted_geomean(defined, "cpa_ratio"),
            "conversion_ratio": spend_weighted_geomean(defined, "conversion_ratio"),
        }
    groups = {}
    groups_idx = segment_groups([o.total_spend for o in defined]) if defined else {k: [] for k in GROUP_SHARES}
    for name, idx in groups_idx.items():
        members = [defined[i] for i in idx]
        g_cpa, g_conv = _pooled(members) if members else (None, None)
        aggs[name] = {"cpa_ratio": g_cpa, "conversion_ratio": g_conv}
        groups[name] = [o.advertiser_id for o in members]
    aggs["Pooled"] = {"cpa_ratio": cpa, "conversion_ratio": conv}
    return AbReport(list(outcomes), aggs, groups, len(outcomes) - len(defined), segment, routing or {})


# -- simulation --------------------------------------------------------------------

def _serve(order, adv, day, cost, eligible, budget, converted, setup_idx, n_setups):
    """Replay one arm in time order; returns per-setup (spend, conversions, clicks)."""
    spend = np.zeros(n_setups)
    conv = np.zeros(n_setups, dtype=np.int64)
    clicks = np.zeros(n_setups, dtype=np.int64)
    remaining = {}
    for i in order:
        if not eligible[i]:
            continue
        key = (adv[i], day[i])
        left = remaining.get(key, budget[adv[i]])
        if cost[i] > left:
            continue
        remaining[key] = left - cost[i]
        s = setup_idx[i]
        spend[s] += cost[i]
        clicks[s] += 1
        conv[s] += converted[i]
    return spend, conv, clicks


def run_ab(log: ClickLog, setups: Sequence[ConversionSetup], assignments: Mapping[int, TaskAssignment],
           control: Scorer, variant: Scorer, cfg: SimConfig, soft_model: Scorer | None = None,
           assignment_cfg: AssignmentConfig | None = None) -> AbReport:
    """Simulate the budget-split test over ``log`` and aggregate the chosen segment.

    The control arm scores every click with ``control``. The variant arm routes
    hard setups to ``variant`` and soft setups to ``soft_model`` (defaults to
    ``control``). Each advertiser's daily budget is the sum of its setups'
    budgets; each arm gets exactly half.
    """
    cfg.validate()
    soft_model = soft_model or control
    if cfg.n_days is not None:
        days = np.unique(log.day)[:cfg.n_days]
        log = log.take(np.flatnonzero(np.isin(log.day, days)))
    by_id = {s.setup_id: s for s in setups}
    unknown = set(np.unique(log.setup_id).tolist()) - set(by_id)
    if unknown:
        raise ValueError(f"log references unknown setups: {sorted(unknown)[:5]}")
    routes, counts = route_setups(setups, assignments, cfg.router_threshold, assignment_cfg)

    sids = sorted(by_id)
    pos = {sid: k for k, sid in enumerate(sids)}
    setup_idx = np.array([pos[s] for s in log.setup_id.tolist()], dtype=np.int64)
    target_cpa = np.array([by_id[s].value_per_conversion for s in sids])[setup_idx]
    hard_setup = np.array([routes[s] is Task.HARD for s in sids], dtype=bool)[setup_idx]

    half_budget: dict[int, float] = {}
    for s in setups:
        half_budget[s.advertiser_id] = half_budget.get(s.advertiser_id, 0.0) + s.daily_budget / 2.0

    converted = (event_uniforms(cfg.seed, log.event_id, 2) < log.true_pcvr).astype(np.int64)
    p_control = control.predict_log(log)
    p_variant = np.where(hard_setup, variant.predict_log(log), soft_model.predict_log(log))

    if cfg.traffic_mode == "paired":
        in_control = in_variant = np.ones(len(log), dtype=bool)
    else:
        in_variant = event_uniforms(cfg.seed, log.event_id, 3) < 0.5
        in_control = ~in_variant

    if cfg.pricing == "market":
        base_cvr = np.array([by_id[s].base_cvr for s in sids])[setup_idx]
        sigma = cfg.market_price_sigma
        z = _norm_ppf(event_uniforms(cfg.seed, log.event_id, 1))
        price = cfg.market_price_scale * target_cpa * base_cvr * np.exp(sigma * z - 0.5 * sigma * sigma)

    order = np.lexsort((log.seq, log.day)).tolist()
    adv = log.advertiser_id.tolist()
    day = log.day.tolist()
    conv_l = converted.tolist()
    sidx_l = setup_idx.tolist()
    results = []
    for p, mask in ((p_control, in_control), (p_variant, in_variant)):
        bid = p * target_cpa
        if cfg.pricing == "market":
            eligible, cost = mask & (bid >= price), price
        else:
            eligible, cost = mask, bid
        results.append(_serve(order, adv, day, cost.tolist(), eligible.tolist(), half_budget, conv_l, sidx_l,
                              len(sids)))
    (sc, cc, kc), (sv, cv, kv) = results

    per_adv: dict[int, list[int]] = {}
    for k, sid in enumerate(sids):
        if cfg.segment != "all" and (routes[sid] is Task.HARD) != (cfg.segment == "hard"):
            continue
        per_adv.setdefault(by_id[sid].advertiser_id, []).append(k)
    outcomes = []
    for a, ks in sorted(per_adv.items()):
        outcomes.append(AdvertiserOutcome(
            a, math.fsum(sc[ks]), math.fsum(sv[ks]), int(cc[ks].sum()), int(cv[ks].sum()),
            int(kc[ks].sum()), int(kv[ks].sum()), tuple(sids[k] for k in ks),
        ))
    if counts.unassigned:
        logger.info("%d setups had no assignment and were routed by category prior", counts.unassigned)
    return aggregate(outcomes, cfg.segment, asdict(counts))


OUTCOME_COLUMNS = ("advertiser_id", "setup_ids", "spend_control", "spend_variant", "conversions_control",
                   "conversions_variant", "clicks_control", "clicks_variant", "cpa_ratio", "conversion_ratio")


def write_outcomes(report: AbReport, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(OUTCOME_COLUMNS)
        for o in report.outcomes:
            d = o.to_dict()
            row = []
            for c in OUTCOME_COLUMNS:
                v = d[c]
                if c == "setup_ids":
                    v = " ".join(map(str, v))
                elif v is None:
                    v = ""
                elif isinstance(v, float):
                    v = repr(v)
                row.append(v)
            w.writerow(row)
