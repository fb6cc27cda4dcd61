"""Dense reverse-mode differentiation and the small classifiers built on it.

The tape is deliberately tiny: a :class:`Tensor` records its parents and a
closure that pushes the upstream gradient back to them. Only the operations
the classifiers need are provided.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, NumericError, PreconditionError


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_backward", "requires_grad")

    def __init__(self, data, parents: Sequence["Tensor"] = (), backward: Callable | None = None,
                 requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = tuple(parents)
        self._backward = backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in self._parents)

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape})"

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        self.grad = g if self.grad is None else self.grad + g

    def backward(self, seed=None):
        """Propagate d(self)/d(leaf) into every leaf's ``grad``."""
        order, seen = [], set()

        def visit(node):
            stack = [(node, False)]
            while stack:
                cur, done = stack.pop()
                if done:
                    order.append(cur)
                    continue
                if id(cur) in seen:
                    continue
                seen.add(id(cur))
                stack.append((cur, True))
                for p in cur._parents:
                    if p.requires_grad and id(p) not in seen:
                        stack.append((p, False))

        visit(self)
        self.grad = np.ones_like(self.data) if seed is None else np.asarray(seed, dtype=np.float64)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operations -------------------------------------------------------

    def __matmul__(self, other: "Tensor") -> "Tensor":
        if self.data.ndim != 2 or other.data.ndim != 2 or self.shape[1] != other.shape[0]:
            raise DimensionError(f"matmul shapes {self.shape} and {other.shape} do not align")
        out = Tensor(self.data @ other.data, (self, other))

        def back(g):
            self._accumulate(g @ other.data.T)
            other._accumulate(self.data.T @ g)

        out._backward = back
        return out

    def __add__(self, other: "Tensor") -> "Tensor":
        out = Tensor(self.data + other.data, (self, other))

        def back(g):
            self._accumulate(_unbroadcast(g, self.shape))
            other._accumulate(_unbroadcast(g, other.shape))

        out._backward = back
        return out

    def tanh(self) -> "Tensor":
        y = np.tanh(self.data)
        out = Tensor(y, (self,))
        out._backward = lambda g: self._accumulate(g * (1.0 - y * y))
        return out

    def relu(self) -> "Tensor":
        mask = self.data > 0
        out = Tensor(np.where(mask, self.data, 0.0), (self,))
        out._backward = lambda g: self._accumulate(g * mask)
        return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def weighted_cross_entropy(logits: Tensor, y: np.ndarray, weights: np.ndarray) -> Tensor:
    """Scalar ``(1/n) sum_i w_i * CE_i`` with a log-sum-exp forward pass."""
    n = logits.shape[0]
    logp = log_softmax(logits.data)
    rows = np.arange(n)
    per_sample = -logp[rows, y]
    out = Tensor(np.dot(weights, per_sample) / n, (logits,))

    def back(g):
        p = np.exp(logp)
        p[rows, y] -= 1.0
        logits._accumulate(g * (weights / n)[:, None] * p)

    out._backward = back
    return out


# --------------------------------------------------------------------------
# parameters and models


@dataclass(frozen=True)
class ParameterVector:
    """Flat float64 parameters plus a ``(name, shape, offset)`` layout."""

    values: np.ndarray
    layout: tuple = field(default=())

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1:
            raise DimensionError("parameter values must be a flat vector")
        object.__setattr__(self, "values", v)
        expected = 0
        for name, shape, offset in self.layout:
            if offset != expected:
                raise DimensionError(f"layout entry {name!r} starts at {offset}, expected {expected}")
            expected += int(np.prod(shape, dtype=np.int64))
        if self.layout and expected != v.size:
            raise DimensionError(f"layout covers {expected} values but vector has {v.size}")

    def __len__(self):
        return self.values.size

    def unflatten(self) -> dict[str, np.ndarray]:
        out = {}
        for name, shape, offset in self.layout:
            size = int(np.prod(shape, dtype=np.int64))
            out[name] = self.values[offset:offset + size].reshape(shape)
        return out

    @classmethod
    def flatten(cls, arrays: dict[str, np.ndarray], layout) -> "ParameterVector":
        parts = [np.asarray(arrays[name], dtype=np.float64).reshape(-1) for name, _, _ in layout]
        return cls(np.concatenate(parts) if parts else np.zeros(0), tuple(layout))

    def with_values(self, values) -> "ParameterVector":
        return ParameterVector(np.asarray(values, dtype=np.float64), self.layout)

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    num_classes: int
    hidden_dims: tuple = ()
    activation: str = "tanh"

    def __post_init__(self):
        if self.num_classes < 2:
            raise PreconditionError("num_classes must be at least 2")
        if self.input_dim < 1:
            raise PreconditionError("input_dim must be at least 1")
        if self.activation not in ("tanh", "relu"):
            raise PreconditionError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))

    @property
    def widths(self):
        return (self.input_dim, *self.hidden_dims, self.num_classes)

    def layout(self):
        entries, offset = [], 0
        widths = self.widths
        for k in range(len(widths) - 1):
            for name, shape in ((f"W{k}", (widths[k], widths[k + 1])), (f"b{k}", (widths[k + 1],))):
                entries.append((name, shape, offset))
                offset += int(np.prod(shape))
        return tuple(entries)

    @property
    def num_params(self):
        layout = self.layout()
        name, shape, offset = layout[-1]
        return offset + int(np.prod(shape))

    def zeros(self) -> ParameterVector:
        return ParameterVector(np.zeros(self.num_params), self.layout())

    def init(self, rng: np.random.Generator, scale: float = 1.0) -> ParameterVector:
        """Glorot-style normal weights, zero biases."""
        arrays = {}
        for name, shape, _ in self.layout():
            if name.startswith("W"):
                std = scale * np.sqrt(2.0 / (shape[0] + shape[1]))
                arrays[name] = rng.normal(0.0, std, size=shape)
            else:
                arrays[name] = np.zeros(shape)
        return ParameterVector.flatten(arrays, self.layout())


@dataclass(frozen=True)
class Prediction:
    logits: np.ndarray
    probs: np.ndarray

    @property
    def confidence(self):
        return self.probs.max(axis=1)


def _check_inputs(model: ModelSpec, theta: ParameterVector, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise DimensionError(f"expected inputs of shape (n, {model.input_dim}), got {X.shape}")
    if len(theta) != model.num_params or (theta.layout and theta.layout != model.layout()):
        raise DimensionError("parameter layout does not match the model")
    return X


def _build_graph(model: ModelSpec, theta: ParameterVector, X: np.ndarray):
    params = {name: Tensor(arr, requires_grad=True) for name, arr in
              ParameterVector(theta.values, model.layout()).unflatten().items()}
    h = Tensor(X)
    depth = len(model.widths) - 1
    for k in range(depth):
        h = h @ params[f"W{k}"] + params[f"b{k}"]
        if k < depth - 1:
            h = h.tanh() if model.activation == "tanh" else h.relu()
    return h, params


def _softmax(logits):
    return np.exp(log_softmax(logits))


def forward(model: ModelSpec, theta: ParameterVector, X) -> Prediction:
    X = _check_inputs(model, theta, X)
    logits, _ = _build_graph(model, theta, X)
    z = logits.data
    if not np.all(np.isfinite(z)):
        raise NumericError("non-finite logits in forward pass")
    return Prediction(logits=z, probs=_softmax(z))


def per_sample_losses(model: ModelSpec, theta: ParameterVector, X, y) -> np.ndarray:
    pred = forward(model, theta, X)
    logp = log_softmax(pred.logits)
    y = np.asarray(y, dtype=np.int64)
    return -logp[np.arange(len(y)), y]


def loss_and_grad(model: ModelSpec, theta: ParameterVector, X, y, sample_weights=None):
    """Weighted mean cross-entropy and its exact gradient.

    ``sample_weights`` must be nonnegative; callers normalise them to mean one.
    ``None`` is the same as all-ones, bitwise.
    """
    X = _check_inputs(model, theta, X)
    y = np.asarray(y, dtype=np.int64)
    n = X.shape[0]
    if n == 0:
        raise PreconditionError("empty batch")
    if y.shape != (n,):
        raise DimensionError("labels must be a vector matching the batch")
    if sample_weights is None:
        w = np.ones(n)
    else:
        w = np.asarray(sample_weights, dtype=np.float64)
        if w.shape != (n,):
            raise DimensionError("sample_weights must match the batch size")
        if np.any(w < 0):
            raise PreconditionError("sample_weights must be nonnegative")
    logits, params = _build_graph(model, theta, X)
    if not np.all(np.isfinite(logits.data)):
        raise NumericError("non-finite logits in forward pass")
    loss = weighted_cross_entropy(logits, y, w)
    loss.backward()
    layout = model.layout()
    grads = {}
    for name, shape, _ in layout:
        g = params[name].grad
        grads[name] = np.zeros(shape) if g is None else g
    grad = ParameterVector.flatten(grads, layout)
    value = float(loss.data)
    if not np.isfinite(value) or not np.all(np.isfinite(grad.values)):
        raise NumericError("non-finite loss or gradient")
    return value, grad


def apply_perturbation(theta: ParameterVector, eps: ParameterVector) -> ParameterVector:
    """Return ``theta + eps`` as a new vector."""
    if len(theta) != len(eps) or (theta.layout and eps.layout and theta.layout != eps.layout):
        raise DimensionError("perturbation layout does not match parameters")
    return theta.with_values(theta.values + eps.values)
