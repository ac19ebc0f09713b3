"""Shared-trunk two-tower network for hard/soft conversion prediction.

Layout: embeddings -> cross layers -> shared dense layers -> {soft tower,
hard tower}. Both towers read the same trunk output and have the same
shape. Each training example contributes only to the loss of its own task:

    loss = w_soft * mean_bce(soft examples) + w_hard * mean_bce(hard examples)

For serving the network is pruned to the trunk plus the hard tower.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from raremtl import metrics
from raremtl.nn import (
    Activation,
    Adam,
    CrossLayer,
    DenseLayer,
    EmbeddingTable,
    NumericError,
    bce,
    embed_concat,
    sigmoid,
)

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "raremtl-checkpoint"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    features: list[tuple[str, int]] = field(default_factory=list)  # (name, vocab) incl. OOV slot 0
    embedding_dim: int = 8
    num_cross_layers: int = 1
    num_shared_dense_layers: int = 1
    shared_dense_width: int = 64
    tower_layer_widths: tuple[int, ...] = (32, 1)
    w_hard: float = 0.5
    w_soft: float = 0.5
    learning_rate: float = 1e-3
    batch_size: int = 512
    epochs: int = 4
    seed: int = 0
    tie_tower_init: bool = False
    zero_init_output: bool = False
    output_bias_from_prior: bool = True
    validation_fraction: float = 0.1  # trailing share of training rows used to pick the best epoch

    def __post_init__(self):
        self.features = [(str(n), int(v)) for n, v in self.features]
        self.tower_layer_widths = tuple(int(w) for w in self.tower_layer_widths)

    def validate(self) -> None:
        if not self.features:
            raise ConfigError("model config has no features")
        if self.w_hard < 0 or self.w_soft < 0 or self.w_hard > 1 or self.w_soft > 1:
            raise ConfigError("task weights must lie in [0,1]")
        if self.w_hard + self.w_soft <= 0:
            raise ConfigError("w_hard + w_soft must be > 0")
        if not self.tower_layer_widths or self.tower_layer_widths[-1] != 1:
            raise ConfigError("tower_layer_widths must end in a width-1 logit")
        if self.num_shared_dense_layers < 0 or self.num_cross_layers < 0:
            raise ConfigError("layer counts must be >= 0")
        if self.embedding_dim < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("embedding_dim and batch_size must be >= 1, epochs >= 0")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ConfigError("validation_fraction must be in [0,1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["features"] = [list(f) for f in self.features]
        d["tower_layer_widths"] = list(self.tower_layer_widths)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LossBreakdown:
    loss_total: float
    loss_soft: float
    loss_hard: float
    n_soft: int
    n_hard: int


def _trunk(embeddings, cross, shared_dense, x_idx, record: bool = False) -> np.ndarray:
    x0 = embed_concat(embeddings, x_idx, record=record)
    xl = x0
    for layer in cross:
        xl = layer.forward(x0, xl) if record else layer.apply(x0, xl)
    h = xl
    for layer in shared_dense:
        h = layer.forward(h) if record else layer.apply(h)
    return h


def _tower(layers, h, record: bool = False) -> np.ndarray:
    for layer in layers:
        h = layer.forward(h) if record else layer.apply(h)
    return h[:, 0]


def encode(features: Sequence[tuple[str, int]], x_idx) -> np.ndarray:
    """Clip raw categorical indices to the schema; anything out of range becomes OOV index 0."""
    x = np.array(x_idx, dtype=np.int64, ndmin=2, copy=True)
    for j, (_, vocab) in enumerate(features):
        col = x[:, j]
        col[(col < 0) | (col >= vocab)] = 0
    return x


class MtlNetwork:
    def __init__(self, config: ModelConfig, embeddings, shared_cross, shared_dense, tower_soft, tower_hard):
        self.config = config
        self.embeddings: list[EmbeddingTable] = embeddings
        self.shared_cross: list[CrossLayer] = shared_cross
        self.shared_dense: list[DenseLayer] = shared_dense
        self.tower_soft: list[DenseLayer] = tower_soft
        self.tower_hard: list[DenseLayer] = tower_hard
        shapes = lambda t: [l.weight.shape for l in t]  # noqa: E731
        if shapes(tower_soft) != shapes(tower_hard):
            raise ConfigError("soft and hard towers must have identical shapes")

    @classmethod
    def build(cls, config: ModelConfig) -> "MtlNetwork":
        config.validate()
        seed = config.seed
        rng = np.random.default_rng([seed, 0])
        embeddings = [EmbeddingTable.init(n, v, config.embedding_dim, rng) for n, v in config.features]
        width = config.embedding_dim * len(config.features)
        cross = [CrossLayer.init(width, rng, f"shared_cross/{i}") for i in range(config.num_cross_layers)]
        dense = []
        for i in range(config.num_shared_dense_layers):
            dense.append(DenseLayer.init(width, config.shared_dense_width, Activation.RELU, rng, f"shared_dense/{i}"))
            width = config.shared_dense_width

        def tower(prefix: str, tower_rng):
            layers = []
            n_in = width
            widths = config.tower_layer_widths
            for i, n_out in enumerate(widths):
                last = i == len(widths) - 1
                layers.append(DenseLayer.init(n_in, n_out, Activation.IDENTITY if last else Activation.RELU,
                                              tower_rng, f"{prefix}/{i}", zero=last and config.zero_init_output))
                n_in = n_out
            return layers

        soft_seed = [seed, 1]
        hard_seed = [seed, 1] if config.tie_tower_init else [seed, 2]
        return cls(config, embeddings, cross, dense, tower("tower_soft", np.random.default_rng(soft_seed)),
                   tower("tower_hard", np.random.default_rng(hard_seed)))

    # -- structure --------------------------------------------------------
    def layers(self):
        return [*self.embeddings, *self.shared_cross, *self.shared_dense, *self.tower_soft, *self.tower_hard]

    def trunk_layers(self):
        return [*self.embeddings, *self.shared_cross, *self.shared_dense]

    def num_params(self) -> int:
        return sum(l.num_params() for l in self.layers())

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {f"{l.name}/{k}": v for l in self.layers() for k, v in l.params().items()}

    # -- inference --------------------------------------------------------
    def predict(self, x_idx) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(p_soft, p_hard)`` for a batch of raw feature indices."""
        x = encode(self.config.features, x_idx)
        h = _trunk(self.embeddings, self.shared_cross, self.shared_dense, x)
        return sigmoid(_tower(self.tower_soft, h)), sigmoid(_tower(self.tower_hard, h))

    def forward_event(self, event) -> tuple[float, float]:
        ps, ph = self.predict(event_indices(self.config.features, event)[None, :])
        return float(ps[0]), float(ph[0])

    # -- training ---------------------------------------------------------
    def loss_and_grads(self, x_idx, c, is_hard, w_hard: float, w_soft: float) -> LossBreakdown:
        """Forward + backward on one minibatch; gradients land in each layer's ``grads``."""
        x = encode(self.config.features, x_idx)
        c = np.asarray(c, dtype=np.float64)
        is_hard = np.asarray(is_hard, dtype=bool)
        n_hard = int(is_hard.sum())
        n_soft = len(c) - n_hard
        h = _trunk(self.embeddings, self.shared_cross, self.shared_dense, x, record=True)
        grad_h = np.zeros_like(h)
        losses = {}
        for task_hard, tower, w, n_task in ((False, self.tower_soft, w_soft, n_soft),
                                            (True, self.tower_hard, w_hard, n_hard)):
            mask = is_hard if task_hard else ~is_hard
            if n_task == 0 or w == 0:
                if n_task:
                    p = sigmoid(_tower(tower, h[mask]))
                    losses[task_hard] = float(bce(p, c[mask]).mean())
                else:
                    losses[task_hard] = 0.0
                for layer in tower:
                    layer.zero_grads()
                continue
            z = _tower(tower, h, record=True)
            p = sigmoid(z)
            losses[task_hard] = float(bce(p[mask], c[mask]).mean())
            dz = np.where(mask, (p - c) * (w / n_task), 0.0)
            g = dz[:, None]
            for layer in reversed(tower):
                g = layer.backward(g)
            grad_h += g
        g = grad_h
        for layer in reversed(self.shared_dense):
            g = layer.backward(g)
        g0 = np.zeros_like(g)
        for layer in reversed(self.shared_cross):
            gx0, g = layer.backward(g)
            g0 += gx0
        g = g + g0
        offset = 0
        for table in self.embeddings:
            table.backward(g[:, offset:offset + table.dim])
            offset += table.dim
        total = w_soft * losses[False] + w_hard * losses[True]
        return LossBreakdown(total, losses[False], losses[True], n_soft, n_hard)

    def copy(self) -> "MtlNetwork":
        return MtlNetwork.from_dict(self.to_dict())

    # -- serialization ----------------------------------------------------
    def to_dict(self) -> dict:
        return _checkpoint("mtl", self.config, self.layers(), provenance=None)

    @classmethod
    def from_dict(cls, d: dict) -> "MtlNetwork":
        _check_checkpoint(d, "mtl")
        config = ModelConfig.from_dict(d["config"])
        net = cls.build(config)
        _load_params(net.layers(), d["params"])
        return net

    def fingerprint(self) -> str:
        return _fingerprint(self.layers())


def event_indices(features: Sequence[tuple[str, int]], event) -> np.ndarray:
    """Raw feature indices of one ``ClickEvent`` in schema order; unknown names map to OOV."""
    out = []
    for name, _ in features:
        if name in ("setup_id", "advertiser_id"):
            out.append(getattr(event, name))
        else:
            out.append(event.features.get(name, 0))
    return np.array(out, dtype=np.int64)


def minibatch_loss(net: MtlNetwork, x_idx, c, is_hard, w_hard: float, w_soft: float) -> LossBreakdown:
    """Task-masked weighted loss of one batch (no gradient side effects)."""
    c = np.asarray(c, dtype=np.float64)
    is_hard = np.asarray(is_hard, dtype=bool)
    if c.size == 0:
        raise ValueError("empty batch")
    p_soft, p_hard = net.predict(x_idx)
    n_hard = int(is_hard.sum())
    n_soft = c.size - n_hard
    l_hard = float(bce(p_hard[is_hard], c[is_hard]).mean()) if n_hard else 0.0
    l_soft = float(bce(p_soft[~is_hard], c[~is_hard]).mean()) if n_soft else 0.0
    return LossBreakdown(w_soft * l_soft + w_hard * l_hard, l_soft, l_hard, n_soft, n_hard)


def _logit(p: float) -> float:
    p = min(max(p, 1e-6), 1 - 1e-6)
    return math.log(p / (1 - p))


def _selection_loss(net: MtlNetwork, validation, config: ModelConfig) -> float:
    """Hard-task validation log loss (the served task); weighted total if no hard rows."""
    lb = minibatch_loss(net, *validation, config.w_hard, config.w_soft)
    return lb.loss_hard if lb.n_hard else lb.loss_total


def train(net: MtlNetwork, x_idx, c, is_hard, config: ModelConfig | None = None,
          validation=None) -> tuple[MtlNetwork, list[LossBreakdown]]:
    """Minibatch Adam training in place. Returns ``(net, per-epoch loss history)``.

    Shuffling is seeded from ``config.seed`` so identical inputs give
    bit-identical parameters. With ``validation=(x, c, is_hard)`` the
    parameters of the epoch with the lowest validation loss are restored at
    the end.
    """
    config = config or net.config
    config.validate()
    x = encode(net.config.features, x_idx)
    c = np.asarray(c, dtype=np.float64)
    is_hard = np.asarray(is_hard, dtype=bool)
    n = len(c)
    if n == 0:
        raise ValueError("empty training set")
    if config.epochs == 0:
        return net, []
    n_hard = int(is_hard.sum())
    if (n_hard == 0 and config.w_hard > 0) or (n_hard == n and config.w_soft > 0):
        logger.warning("training set contains only %s examples", "soft" if n_hard == 0 else "hard")
    if config.output_bias_from_prior:
        for tower, mask in ((net.tower_soft, ~is_hard), (net.tower_hard, is_hard)):
            if mask.any():
                tower[-1].bias[:] = _logit(float(c[mask].mean()))
    layers = net.layers()
    opt = Adam(layers, learning_rate=config.learning_rate)
    rng = np.random.default_rng([config.seed, 3])
    history = []
    bs = config.batch_size
    best = None
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        sums = np.zeros(2)
        counts = np.zeros(2, dtype=np.int64)
        for b, start in enumerate(range(0, n, bs)):
            idx = order[start:start + bs]
            lb = net.loss_and_grads(x[idx], c[idx], is_hard[idx], config.w_hard, config.w_soft)
            if not math.isfinite(lb.loss_total):
                raise NumericError(f"non-finite loss at epoch {epoch} batch {b}")
            try:
                opt.step()
            except NumericError as exc:
                raise NumericError(f"epoch {epoch} batch {b}: {exc}") from exc
            sums += (lb.loss_soft * lb.n_soft, lb.loss_hard * lb.n_hard)
            counts += (lb.n_soft, lb.n_hard)
        l_soft = sums[0] / counts[0] if counts[0] else 0.0
        l_hard = sums[1] / counts[1] if counts[1] else 0.0
        history.append(LossBreakdown(config.w_soft * l_soft + config.w_hard * l_hard, float(l_soft),
                                     float(l_hard), int(counts[0]), int(counts[1])))
        logger.info("epoch %d: loss %.6f (soft %.6f, hard %.6f)", epoch, history[-1].loss_total, l_soft, l_hard)
        if validation is not None:
            v = _selection_loss(net, validation, config)
            if best is None or v < best[0]:
                best = (v, epoch, {k: a.copy() for k, a in net.param_arrays().items()})
    if best is not None:
        for k, a in net.param_arrays().items():
            a[...] = best[2][k]
        logger.info("restored epoch %d (validation loss %.6f)", best[1], best[0])
    return net, history


class InferenceModel:
    """Trunk plus the hard tower only; predictions equal the full network's ``p_hard``."""

    def __init__(self, config: ModelConfig, embeddings, shared_cross, shared_dense, tower, provenance: str):
        self.config = config
        self.embeddings = embeddings
        self.shared_cross = shared_cross
        self.shared_dense = shared_dense
        self.tower = tower
        self.provenance = provenance

    def layers(self):
        return [*self.embeddings, *self.shared_cross, *self.shared_dense, *self.tower]

    def num_params(self) -> int:
        return sum(l.num_params() for l in self.layers())

    def predict(self, x_idx) -> np.ndarray:
        x = encode(self.config.features, x_idx)
        h = _trunk(self.embeddings, self.shared_cross, self.shared_dense, x)
        return sigmoid(_tower(self.tower, h))

    def predict_event(self, event) -> float:
        return float(self.predict(event_indices(self.config.features, event)[None, :])[0])

    def to_dict(self) -> dict:
        return _checkpoint("inference", self.config, self.layers(), provenance=self.provenance)

    @classmethod
    def from_dict(cls, d: dict) -> "InferenceModel":
        _check_checkpoint(d, "inference")
        config = ModelConfig.from_dict(d["config"])
        full = MtlNetwork.build(config)
        model = cls(config, full.embeddings, full.shared_cross, full.shared_dense, full.tower_hard,
                    d.get("provenance", ""))
        _load_params(model.layers(), d["params"])
        return model


def prune_to_inference(net: MtlNetwork, provenance: str | None = None) -> InferenceModel:
    def clone(layer):
        if isinstance(layer, EmbeddingTable):
            return EmbeddingTable(layer.feature, layer.vocab_size, layer.dim, layer.table.copy())
        if isinstance(layer, CrossLayer):
            return CrossLayer(layer.weight.copy(), layer.bias.copy(), layer.name)
        return DenseLayer(layer.weight.copy(), layer.bias.copy(), layer.activation, layer.name)

    return InferenceModel(
        net.config,
        [clone(l) for l in net.embeddings],
        [clone(l) for l in net.shared_cross],
        [clone(l) for l in net.shared_dense],
        [clone(l) for l in net.tower_hard],
        provenance if provenance is not None else net.fingerprint(),
    )


# -- checkpoints ------------------------------------------------------------

def _fingerprint(layers) -> str:
    h = hashlib.sha256()
    for l in layers:
        for k, v in l.params().items():
            h.update(f"{l.name}/{k}{v.shape}".encode())
            h.update(np.ascontiguousarray(v).tobytes())
    return h.hexdigest()


def _checkpoint(kind: str, config: ModelConfig, layers, provenance: str | None) -> dict:
    d = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "seed": config.seed,
        "config": config.to_dict(),
        "params": {
            f"{l.name}/{k}": {"shape": list(v.shape), "data": v.ravel().tolist()}
            for l in layers for k, v in l.params().items()
        },
    }
    if provenance is not None:
        d["provenance"] = provenance
    return d


def _check_checkpoint(d: dict, kind: str) -> None:
    if d.get("format") != CHECKPOINT_FORMAT or d.get("kind") != kind:
        raise ValueError(f"not a {kind!r} checkpoint (format={d.get('format')!r}, kind={d.get('kind')!r})")


def _load_params(layers, params: dict) -> None:
    for l in layers:
        for k, arr in l.params().items():
            key = f"{l.name}/{k}"
            if key not in params:
                raise ValueError(f"checkpoint missing parameter block {key!r}")
            block = params[key]
            if tuple(block["shape"]) != arr.shape:
                raise ValueError(f"{key}: shape {block['shape']} != {arr.shape}")
            arr[...] = np.asarray(block["data"], dtype=np.float64).reshape(arr.shape)


def save_checkpoint(model: MtlNetwork | InferenceModel, path: Path) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), sort_keys=True, separators=(",", ":")) + "\n",
                          encoding="utf-8")


def load_checkpoint(path: Path) -> MtlNetwork | InferenceModel:
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    if d.get("kind") == "inference":
        return InferenceModel.from_dict(d)
    return MtlNetwork.from_dict(d)


# -- experiments ------------------------------------------------------------

@dataclass
class SweepRow:
    config_id: str
    w_hard: float
    w_soft: float
    shared_layers: int
    rig: float
    auc: float
    rig_rel: float = 0.0
    auc_rel: float = 0.0


def holdout(n: int, fraction: float) -> tuple[np.ndarray, np.ndarray]:
    """Indices of the leading and trailing parts of ``n`` time-ordered rows."""
    n_val = int(round(n * fraction))
    if fraction > 0 and (n_val == 0 or n_val == n):
        raise ConfigError(f"validation_fraction {fraction} leaves an empty split of {n} rows")
    return np.arange(n - n_val), np.arange(n - n_val, n)


def fit(config: ModelConfig, x_idx, c, is_hard) -> MtlNetwork:
    """Build and train; the trailing ``validation_fraction`` of rows picks the epoch."""
    net = MtlNetwork.build(config)
    x = np.asarray(x_idx)
    c = np.asarray(c)
    is_hard = np.asarray(is_hard, dtype=bool)
    if config.validation_fraction > 0:
        tr, va = holdout(len(c), config.validation_fraction)
        train(net, x[tr], c[tr], is_hard[tr], config, validation=(x[va], c[va], is_hard[va]))
    else:
        train(net, x, c, is_hard, config)
    return net


def fit_single_task(config: ModelConfig, x_idx, c) -> MtlNetwork:
    """One-task baseline: every event is treated as one task with a single BCE."""
    cfg = replace(config, w_hard=1.0, w_soft=0.0)
    return fit(cfg, x_idx, c, np.ones(len(c), dtype=bool))


def evaluate_hard(model, x_idx, c, is_hard, label: str = "") -> metrics.MetricReport:
    """Metrics of the hard-task prediction restricted to hard events."""
    is_hard = np.asarray(is_hard, dtype=bool)
    x = np.asarray(x_idx)[is_hard]
    if isinstance(model, MtlNetwork):
        p = model.predict(x)[1]
    else:
        p = model.predict(x)
    return metrics.report(np.asarray(c)[is_hard], p, label)


def _sweep_one(args):
    config_id, config, train_data, eval_data = args
    net = fit(config, *train_data)
    rep = evaluate_hard(net, *eval_data, label=config_id)
    return SweepRow(config_id, config.w_hard, config.w_soft, config.num_shared_dense_layers, rep.rig, rep.auc)


def sweep(configs: Sequence[ModelConfig] | Mapping[str, ModelConfig], train_data, eval_data,
          baseline: str | int = 0, workers: int = 1) -> list[SweepRow]:
    """Train and evaluate every config; RIG/AUC reported relative to the ``baseline`` row.

    ``train_data`` and ``eval_data`` are ``(x_idx, converted, is_hard)`` triples.
    """
    if isinstance(configs, Mapping):
        items = list(configs.items())
    else:
        items = [(f"c{i}", c) for i, c in enumerate(configs)]
    if not items:
        raise ValueError("sweep needs at least one config")
    for cid, cfg in items:
        try:
            cfg.validate()
        except ConfigError as exc:
            raise ConfigError(f"config {cid}: {exc}") from exc
    jobs = [(cid, cfg, train_data, eval_data) for cid, cfg in items]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_one, jobs))
    else:
        rows = [_sweep_one(j) for j in jobs]
    base = rows[baseline] if isinstance(baseline, int) else next(r for r in rows if r.config_id == baseline)
    for r in rows:
        r.rig_rel = r.rig / base.rig - 1.0
        r.auc_rel = r.auc / base.auc - 1.0
    return rows


SWEEP_WEIGHTS = ((0.2, 0.8), (0.5, 0.5), (0.6, 0.4), (0.7, 0.3), (0.8, 0.2), (0.9, 0.1))
SWEEP_SHARED_LAYERS = (1, 2, 3, 4)


def weight_sweep_configs(base: ModelConfig, weights=SWEEP_WEIGHTS) -> dict[str, ModelConfig]:
    """Hard-only baseline row ``(1.0, 0.0)`` followed by the given weight pairs."""
    out = {"hard_only": replace(base, w_hard=1.0, w_soft=0.0)}
    for wh, ws in weights:
        out[f"w{wh:g}_{ws:g}"] = replace(base, w_hard=wh, w_soft=ws)
    return out


def layer_sweep_configs(base: ModelConfig, counts=SWEEP_SHARED_LAYERS) -> dict[str, ModelConfig]:
    """Move hidden layers from the towers into the shared trunk at fixed total depth.

    The total depth is ``max(counts)`` dense layers of ``shared_dense_width``.
    With ``k`` shared, each tower keeps ``depth - k`` of them in front of its
    own ``tower_layer_widths``. The first row shares only the embeddings (no
    cross or dense layers in the trunk) and is the relative baseline.
    """
    depth = max(counts)
    width = base.shared_dense_width

    def split(k: int, cross: int) -> ModelConfig:
        tower = (width,) * (depth - k) + tuple(base.tower_layer_widths)
        return replace(base, num_shared_dense_layers=k, num_cross_layers=cross, tower_layer_widths=tower)

    out = {"embeddings_only": split(0, 0)}
    for k in counts:
        out[f"shared{k}"] = split(k, base.num_cross_layers)
    return out
