import numpy as np
import pytest

from raremtl.synth import (
    ClickLog,
    ConfigError,
    GeneratorConfig,
    generate,
    log_digest,
    read_log,
    read_setups,
    split,
    write_log,
    write_setups,
)


def small(**kw):
    kw.setdefault("n_advertisers", 6)
    kw.setdefault("n_days", 4)
    kw.setdefault("clicks_per_day", 2000)
    return GeneratorConfig(**kw)


def test_degenerate_generator_is_constant_per_setup():
    setups, log = generate(small(shared_effect_scale=0.0, task_specific_effect_scale=0.0))
    base = {s.setup_id: s.base_cvr for s in setups}
    expected = np.array([base[s] for s in log.setup_id])
    assert np.array_equal(log.true_pcvr, expected)


def test_empirical_cvr_within_binomial_bounds():
    setups, log = generate(GeneratorConfig(n_advertisers=20, n_days=10, clicks_per_day=20000, seed=3))
    for s in setups:
        m = log.setup_id == s.setup_id
        n = int(m.sum())
        if n < 100:
            continue
        mean_p = log.true_pcvr[m].mean()
        # variance of a sum of independent Bernoullis with heterogeneous p
        sd = np.sqrt((log.true_pcvr[m] * (1 - log.true_pcvr[m])).sum()) / n
        assert abs(log.converted[m].mean() - mean_p) <= 3 * sd + 1e-12, s.setup_id


def test_magnitudes_cover_both_regimes():
    setups, _ = generate(GeneratorConfig(n_advertisers=100, n_days=2, clicks_per_day=1000, seed=0))
    soft = [s.base_cvr for s in setups if not s.is_hard]
    hard = [s.base_cvr for s in setups if s.is_hard]
    assert all(0.05 <= v <= 0.40 for v in soft)
    assert all(0.0005 <= v <= 0.008 for v in hard)
    assert max(soft) > 0.30
    assert min(hard) < 0.001


def test_features_within_vocab_and_converted_binary():
    cfg = small(seed=1)
    _, log = generate(cfg)
    vocabs = list(cfg.features.values())
    for j, v in enumerate(vocabs):
        assert log.features[:, j].min() >= 1
        assert log.features[:, j].max() < v
    assert set(np.unique(log.converted)) <= {0, 1}


def test_infeasible_ranges_rejected():
    with pytest.raises(ConfigError):
        generate(small(soft_cvr_range=(0.001, 0.2)))
    with pytest.raises(ConfigError):
        generate(small(shared_effect_scale=-1.0))
    with pytest.raises(ConfigError):
        generate(small(hard_cvr_range=(0.0, 0.01)))


def test_split_by_days():
    _, log = generate(small(n_days=10, clicks_per_day=200))
    train, ev = split(log, 0.8)
    assert sorted(set(train.day.tolist())) == list(range(8))
    assert sorted(set(ev.day.tolist())) == [8, 9]
    assert len(train) + len(ev) == len(log)
    assert not set(train.event_id.tolist()) & set(ev.event_id.tolist())
    again = split(log, 0.8)
    assert np.array_equal(again[0].event_id, train.event_id)


def test_split_single_day_errors():
    _, log = generate(small(n_days=1))
    with pytest.raises(ConfigError, match="more days"):
        split(log, 0.5)


def test_deterministic_byte_identical(tmp_path):
    _, a = generate(small(seed=7))
    _, b = generate(small(seed=7))
    _, c = generate(small(seed=8))
    assert log_digest(a) == log_digest(b) != log_digest(c)
    write_log(a, tmp_path / "a.jsonl")
    write_log(b, tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_log_and_setup_roundtrip(tmp_path):
    setups, log = generate(small(n_days=2, clicks_per_day=300))
    write_log(log, tmp_path / "log.jsonl")
    with open(tmp_path / "log.jsonl", "a") as fh:
        fh.write("{not json\n")
    back, skipped = read_log(tmp_path / "log.jsonl", log.feature_names)
    assert skipped == 1
    assert log_digest(back) == log_digest(log)
    write_setups(setups, tmp_path / "s.csv")
    assert read_setups(tmp_path / "s.csv") == setups


def test_event_view_matches_columns():
    _, log = generate(small(n_days=1, clicks_per_day=50))
    events = list(log.events())
    back = ClickLog.from_events(events, log.feature_names)
    assert log_digest(back) == log_digest(log)
