import json
import math

import numpy as np
import pytest

from raremtl.metrics import auc
from raremtl.model import (
    ConfigError,
    InferenceModel,
    ModelConfig,
    MtlNetwork,
    fit,
    layer_sweep_configs,
    load_checkpoint,
    minibatch_loss,
    prune_to_inference,
    save_checkpoint,
    sweep,
    train,
    weight_sweep_configs,
)
from raremtl.nn import sigmoid

FEATURES = [("a", 7), ("b", 5), ("c", 4)]


def config(**kw):
    kw.setdefault("features", FEATURES)
    kw.setdefault("embedding_dim", 3)
    kw.setdefault("shared_dense_width", 8)
    kw.setdefault("tower_layer_widths", (4, 1))
    return ModelConfig(**kw)


def random_batch(n, seed=0):
    rng = np.random.default_rng(seed)
    x = np.column_stack([rng.integers(0, v, n) for _, v in FEATURES])
    return x, rng.integers(0, 2, n), rng.random(n) < 0.5


def test_zero_init_output_predicts_half():
    net = MtlNetwork.build(config(zero_init_output=True))
    ps, ph = net.predict(random_batch(5)[0])
    assert np.all(ps == 0.5) and np.all(ph == 0.5)


def test_tied_towers_give_identical_predictions():
    net = MtlNetwork.build(config(tie_tower_init=True))
    ps, ph = net.predict(random_batch(20)[0])
    assert np.array_equal(ps, ph)


def test_forward_matches_layer_composition():
    net = MtlNetwork.build(config(num_cross_layers=2, num_shared_dense_layers=2))
    x = random_batch(6, 3)[0]
    for row, (ps, ph) in zip(x, zip(*net.predict(x))):
        x0 = np.concatenate([t.table[i] for t, i in zip(net.embeddings, row)])
        xl = x0
        for cl in net.shared_cross:
            xl = x0 * float(xl @ cl.weight) + cl.bias + xl
        h = xl
        for d in net.shared_dense:
            h = np.maximum(d.weight @ h + d.bias, 0.0)

        def tower(layers, h):
            for i, l in enumerate(layers):
                h = l.weight @ h + l.bias
                if i < len(layers) - 1:
                    h = np.maximum(h, 0.0)
            return 1 / (1 + math.exp(-h[0]))

        assert tower(net.tower_soft, h) == pytest.approx(ps, rel=1e-12)
        assert tower(net.tower_hard, h) == pytest.approx(ph, rel=1e-12)


def test_oov_index_maps_to_zero_row():
    net = MtlNetwork.build(config())
    x = np.array([[99, 1, 1], [0, 1, 1]])
    ps, ph = net.predict(x)
    assert ps[0] == ps[1] and ph[0] == ph[1]


def test_loss_hand_example():
    net = MtlNetwork.build(config(zero_init_output=True))
    for t in (net.tower_soft, net.tower_hard):
        t[-1].bias[:] = math.log(0.8 / 0.2)
    x = random_batch(2)[0]
    lb = minibatch_loss(net, x, [1, 1], [True, False], 0.5, 0.5)
    assert lb.loss_total == pytest.approx(-math.log(0.8), abs=1e-5)
    assert lb.loss_total == pytest.approx(0.22314, abs=1e-5)


def test_loss_linear_in_task_weights():
    net = MtlNetwork.build(config())
    x, c, h = random_batch(40, 1)
    a = minibatch_loss(net, x, c, h, 0.3, 0.2)
    b = minibatch_loss(net, x, c, h, 0.6, 0.4)
    assert b.loss_total == pytest.approx(2 * a.loss_total, rel=1e-12)


def test_absent_task_contributes_zero():
    net = MtlNetwork.build(config())
    x, c, _ = random_batch(10)
    lb = minibatch_loss(net, x, c, np.zeros(10, bool), 0.5, 0.5)
    assert lb.loss_hard == 0.0 and lb.n_hard == 0


def test_task_isolation_of_gradients():
    net = MtlNetwork.build(config())
    x, c, _ = random_batch(16)
    net.loss_and_grads(x, c, np.ones(16, bool), 1.0, 0.0)
    assert all(not np.any(g) for l in net.tower_soft for g in l.grads.values())
    assert any(np.any(g) for l in net.tower_hard for g in l.grads.values())
    net.loss_and_grads(x, c, np.zeros(16, bool), 0.5, 0.5)
    assert all(not np.any(g) for l in net.tower_hard for g in l.grads.values())


def test_loss_and_grads_matches_minibatch_loss():
    net = MtlNetwork.build(config())
    x, c, h = random_batch(32, 2)
    assert net.loss_and_grads(x, c, h, 0.7, 0.3).loss_total == pytest.approx(
        minibatch_loss(net, x, c, h, 0.7, 0.3).loss_total, rel=1e-12)


def test_rejects_zero_weight_sum():
    with pytest.raises(ConfigError):
        MtlNetwork.build(config(w_hard=0.0, w_soft=0.0))


def test_training_deterministic_and_zero_epochs_noop():
    x, c, h = random_batch(300, 4)
    a = fit(config(epochs=2, batch_size=32), x, c, h)
    b = fit(config(epochs=2, batch_size=32), x, c, h)
    assert a.fingerprint() == b.fingerprint()
    net = MtlNetwork.build(config(epochs=0))
    before = net.fingerprint()
    train(net, x, c, h)
    assert net.fingerprint() == before


def test_separable_toy_learns():
    rng = np.random.default_rng(0)
    n = 4000
    x = np.column_stack([rng.integers(1, v, n) for _, v in FEATURES])
    c = (x[:, 0] >= 4).astype(int)
    h = rng.random(n) < 0.5
    net = fit(config(epochs=5, batch_size=64, learning_rate=1e-2), x, c, h)
    ps, ph = net.predict(x)
    assert auc(c[h], ph[h]) > 0.95
    assert auc(c[~h], ps[~h]) > 0.95


def test_pruned_model_bit_exact_and_smaller(tmp_path):
    x, c, h = random_batch(400, 5)
    net = fit(config(epochs=1, batch_size=50, num_cross_layers=2), x, c, h)
    inf = prune_to_inference(net)
    probe = random_batch(5000, 6)[0]
    assert np.array_equal(inf.predict(probe), net.predict(probe)[1])
    soft_params = sum(l.num_params() for l in net.tower_soft)
    assert inf.num_params() == net.num_params() - soft_params
    save_checkpoint(inf, tmp_path / "inf.json")
    d = json.loads((tmp_path / "inf.json").read_text())
    assert not any(k.startswith("tower_soft") for k in d["params"])
    assert d["provenance"] == net.fingerprint()
    back = load_checkpoint(tmp_path / "inf.json")
    assert isinstance(back, InferenceModel)
    assert np.array_equal(back.predict(probe), inf.predict(probe))


def test_pruning_is_independent_of_later_training():
    x, c, h = random_batch(200, 7)
    net = fit(config(epochs=1), x, c, h)
    inf = prune_to_inference(net)
    probe = random_batch(50, 8)[0]
    ref = inf.predict(probe)
    train(net, x, c, h, config(epochs=1, seed=3))
    assert np.array_equal(inf.predict(probe), ref)


def test_full_checkpoint_roundtrip(tmp_path):
    net = fit(config(epochs=1), *random_batch(100))
    save_checkpoint(net, tmp_path / "m.json")
    back = load_checkpoint(tmp_path / "m.json")
    assert back.fingerprint() == net.fingerprint()
    with pytest.raises(ValueError, match="inference"):
        InferenceModel.from_dict(json.loads((tmp_path / "m.json").read_text()))


def test_sweep_shapes_and_relative_baseline():
    tr = random_batch(300, 9)
    ev = random_batch(300, 10)
    base = config(epochs=1, batch_size=64)
    rows = sweep(weight_sweep_configs(base, ((0.5, 0.5), (0.8, 0.2))), tr, ev)
    assert [r.config_id for r in rows] == ["hard_only", "w0.5_0.5", "w0.8_0.2"]
    assert rows[0].rig_rel == 0.0 and rows[0].auc_rel == 0.0
    assert (rows[1].w_hard, rows[1].w_soft) == (0.5, 0.5)
    layers = layer_sweep_configs(base, (1, 2))
    assert [c.num_shared_dense_layers for c in layers.values()] == [0, 1, 2]
    # depth is conserved: layers move from the towers into the trunk
    assert {c.num_shared_dense_layers + len(c.tower_layer_widths) for c in layers.values()} == {4}
    assert layers["embeddings_only"].num_cross_layers == 0
    assert layers["shared2"].tower_layer_widths == base.tower_layer_widths


def test_sigmoid_of_bias_prior():
    x, c, h = random_batch(200, 11)
    net = MtlNetwork.build(config(epochs=1))
    train(net, x, c, h)
    # output bias started at the task prior logit and moved only a little
    assert abs(sigmoid(net.tower_hard[-1].bias[0]) - c[h].mean()) < 0.2
