"""Dense-matrix neural network kernels with hand-written gradients.

Everything is float64 numpy. Layers cache their last forward inputs so that
``backward`` can produce parameter gradients; calling ``backward`` before any
``forward`` raises :class:`StateError`.

All forward/backward methods accept either a single vector (1-D) or a batch
(2-D, one row per example).
"""

from __future__ import annotations

import enum
import math
from typing import Iterable, Sequence

import numpy as np

PROB_EPS = 1e-7


class ShapeError(ValueError):
    pass


class StateError(RuntimeError):
    pass


class NumericError(ArithmeticError):
    pass


class Activation(str, enum.Enum):
    RELU = "relu"
    IDENTITY = "identity"
    SIGMOID = "sigmoid"


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def clamp_prob(p):
    return np.clip(p, PROB_EPS, 1.0 - PROB_EPS)


def bce(p, c):
    """Elementwise binary cross-entropy in nats, with ``p`` clamped."""
    p = clamp_prob(np.asarray(p, dtype=np.float64))
    c = np.asarray(c, dtype=np.float64)
    return -(c * np.log(p) + (1.0 - c) * np.log1p(-p))


def _as_batch(x, width: int, what: str) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != width:
        raise ShapeError(f"{what}: expected width {width}, got shape {x.shape}")
    return x, single


class Layer:
    """Base class: named parameter arrays plus matching gradient arrays."""

    name: str

    def params(self) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def zero_grads(self) -> None:
        self.grads = {k: np.zeros_like(v) for k, v in self.params().items()}

    def num_params(self) -> int:
        return sum(v.size for v in self.params().values())


class EmbeddingTable(Layer):
    def __init__(self, feature: str, vocab_size: int, dim: int, table: np.ndarray | None = None):
        if vocab_size < 1 or dim < 1:
            raise ShapeError(f"embedding {feature!r}: vocab_size and dim must be >= 1")
        self.name = f"embedding/{feature}"
        self.feature = feature
        self.vocab_size = vocab_size
        self.dim = dim
        if table is None:
            table = np.zeros((vocab_size, dim))
        table = np.asarray(table, dtype=np.float64)
        if table.shape != (vocab_size, dim):
            raise ShapeError(f"embedding {feature!r}: table shape {table.shape} != {(vocab_size, dim)}")
        self.table = table
        self._idx = None
        self.zero_grads()

    @classmethod
    def init(cls, feature: str, vocab_size: int, dim: int, rng: np.random.Generator) -> "EmbeddingTable":
        return cls(feature, vocab_size, dim, rng.uniform(-0.05, 0.05, size=(vocab_size, dim)))

    def params(self):
        return {"table": self.table}

    def check(self, idx: np.ndarray) -> None:
        bad = (idx < 0) | (idx >= self.vocab_size)
        if np.any(bad):
            raise IndexError(
                f"feature {self.feature!r}: index {int(idx[bad][0])} out of vocabulary [0, {self.vocab_size})"
            )

    def apply(self, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.int64)
        self.check(idx)
        return self.table[idx]

    def forward(self, idx) -> np.ndarray:
        out = self.apply(idx)
        self._idx = np.asarray(idx, dtype=np.int64)
        return out

    def backward(self, grad_out: np.ndarray) -> None:
        if self._idx is None:
            raise StateError(f"{self.name}: backward called before forward")
        g = np.zeros_like(self.table)
        np.add.at(g, self._idx, grad_out)
        self.grads = {"table": g}


class DenseLayer(Layer):
    def __init__(self, weight, bias, activation: Activation | str = Activation.RELU, name: str = "dense"):
        self.weight = np.asarray(weight, dtype=np.float64)
        self.bias = np.asarray(bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"{name}: weight {self.weight.shape} / bias {self.bias.shape} inconsistent")
        self.activation = Activation(activation)
        self.name = name
        self._x = None
        self._out = None
        self.zero_grads()

    @classmethod
    def init(cls, n_in: int, n_out: int, activation, rng: np.random.Generator, name: str = "dense",
             zero: bool = False) -> "DenseLayer":
        if zero:
            w = np.zeros((n_out, n_in))
        else:
            limit = math.sqrt(6.0 / n_in)  # He-uniform
            w = rng.uniform(-limit, limit, size=(n_out, n_in))
        return cls(w, np.zeros(n_out), activation, name)

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def _apply(self, x: np.ndarray) -> np.ndarray:
        z = x @ self.weight.T + self.bias
        if self.activation is Activation.RELU:
            return np.maximum(z, 0.0)
        if self.activation is Activation.SIGMOID:
            return sigmoid(z)
        return z

    def apply(self, x) -> np.ndarray:
        """Forward pass without recording anything (safe for shared read-only use)."""
        x, single = _as_batch(x, self.n_in, self.name)
        out = self._apply(x)
        return out[0] if single else out

    def forward(self, x) -> np.ndarray:
        x, single = _as_batch(x, self.n_in, self.name)
        out = self._apply(x)
        self._x, self._out = x, out
        return out[0] if single else out

    def backward(self, grad_out) -> np.ndarray:
        if self._x is None:
            raise StateError(f"{self.name}: backward called before forward")
        g, single = _as_batch(grad_out, self.n_out, self.name)
        if self.activation is Activation.RELU:
            g = g * (self._out > 0.0)
        elif self.activation is Activation.SIGMOID:
            g = g * self._out * (1.0 - self._out)
        self.grads = {"weight": g.T @ self._x, "bias": g.sum(axis=0)}
        gx = g @ self.weight
        return gx[0] if single else gx


class CrossLayer(Layer):
    """Deep & Cross layer: ``x0 * (w . xl) + b + xl``."""

    def __init__(self, weight, bias, name: str = "cross"):
        self.weight = np.asarray(weight, dtype=np.float64)
        self.bias = np.asarray(bias, dtype=np.float64)
        if self.weight.ndim != 1 or self.bias.shape != self.weight.shape:
            raise ShapeError(f"{name}: weight {self.weight.shape} / bias {self.bias.shape} inconsistent")
        self.name = name
        self._x0 = None
        self._xl = None
        self.zero_grads()

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator, name: str = "cross") -> "CrossLayer":
        limit = math.sqrt(6.0 / dim)
        return cls(rng.uniform(-limit, limit, size=dim), np.zeros(dim), name)

    @property
    def dim(self) -> int:
        return self.weight.shape[0]

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def _inputs(self, x0, xl):
        x0, single = _as_batch(x0, self.dim, self.name)
        xl, _ = _as_batch(xl, self.dim, self.name)
        if x0.shape != xl.shape:
            raise ShapeError(f"{self.name}: x0 {x0.shape} vs xl {xl.shape}")
        return x0, xl, single

    def _apply(self, x0: np.ndarray, xl: np.ndarray) -> np.ndarray:
        return x0 * (xl @ self.weight)[:, None] + self.bias + xl

    def apply(self, x0, xl) -> np.ndarray:
        x0, xl, single = self._inputs(x0, xl)
        out = self._apply(x0, xl)
        return out[0] if single else out

    def forward(self, x0, xl) -> np.ndarray:
        x0, xl, single = self._inputs(x0, xl)
        out = self._apply(x0, xl)
        self._x0, self._xl = x0, xl
        return out[0] if single else out

    def backward(self, grad_out) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(grad_x0, grad_xl)``."""
        if self._x0 is None:
            raise StateError(f"{self.name}: backward called before forward")
        g, single = _as_batch(grad_out, self.dim, self.name)
        gs = np.einsum("ij,ij->i", g, self._x0)
        self.grads = {"weight": gs @ self._xl, "bias": g.sum(axis=0)}
        gx0 = g * (self._xl @ self.weight)[:, None]
        gxl = g + gs[:, None] * self.weight
        if single:
            return gx0[0], gxl[0]
        return gx0, gxl


def embed_concat(tables: Sequence[EmbeddingTable], indices, record: bool = False) -> np.ndarray:
    """Look up one index per table and concatenate the rows.

    ``indices`` is either one index per table (returns a vector) or an
    ``(n, n_tables)`` integer matrix (returns an ``(n, sum(dims))`` matrix).
    With ``record=True`` the lookups are cached for a later backward pass.
    """
    idx = np.asarray(indices, dtype=np.int64)
    single = idx.ndim == 1
    if single:
        idx = idx[None, :]
    if idx.shape[1] != len(tables):
        raise ShapeError(f"expected {len(tables)} indices per example, got {idx.shape[1]}")
    out = np.concatenate([(t.forward if record else t.apply)(idx[:, j]) for j, t in enumerate(tables)], axis=1)
    return out[0] if single else out


def cross_forward(layer: CrossLayer, x0, xl) -> np.ndarray:
    return layer.apply(x0, xl)


def dense_forward(layer: DenseLayer, x) -> np.ndarray:
    return layer.apply(x)


class Adam:
    """Bias-corrected Adam over a fixed list of layers, updating in place."""

    def __init__(self, layers: Iterable[Layer], learning_rate: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, epsilon: float = 1e-8):
        if learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        self.layers = list(layers)
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step_count = 0
        self.m = {(l.name, k): np.zeros_like(v) for l in self.layers for k, v in l.params().items()}
        self.v = {key: np.zeros_like(a) for key, a in self.m.items()}

    def step(self) -> None:
        for layer in self.layers:
            for k, g in layer.grads.items():
                if not np.all(np.isfinite(g)):
                    raise NumericError(f"non-finite gradient in layer {layer.name!r} ({k})")
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**t
        c2 = 1.0 - b2**t
        for layer in self.layers:
            params = layer.params()
            for k, g in layer.grads.items():
                m = self.m[(layer.name, k)]
                v = self.v[(layer.name, k)]
                m *= b1
                m += (1.0 - b1) * g
                v *= b2
                v += (1.0 - b2) * (g * g)
                params[k] -= self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.epsilon)
