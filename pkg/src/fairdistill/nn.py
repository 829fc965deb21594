"""Small reverse-mode autodiff engine for feed-forward nets, float64 throughout.

A :class:`Tape` records every op applied to its :class:`Var` nodes; one call to
:meth:`Tape.backward` propagates a scalar loss back to the parameters that
were registered with :meth:`Tape.param`. A tape is single-use.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import NonFiniteActivation, NonFiniteGradient, NonFiniteLoss, ShapeMismatch, StaleTape

ACTIVATIONS = ("relu", "identity", "sigmoid")
CHECKPOINT_FORMAT = "fairdistill-mlp"
CHECKPOINT_VERSION = 1


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Var:
    __slots__ = ("tape", "value", "grad", "_backward", "requires_grad")

    def __init__(self, tape, value, requires_grad=False):
        self.tape = tape
        self.value = value
        self.grad = None
        self._backward = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def _accum(self, g):
        self.grad = g if self.grad is None else self.grad + g

    # arithmetic ---------------------------------------------------------
    def __add__(self, other):
        other = self.tape.lift(other)
        out = self.tape._node(self.value + other.value, (self, other))

        def back(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g, other.shape))
        out._backward = back
        return out

    __radd__ = __add__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-self.tape.lift(other))

    def __rsub__(self, other):
        return self.tape.lift(other) - self

    def __mul__(self, other):
        other = self.tape.lift(other)
        out = self.tape._node(self.value * other.value, (self, other))

        def back(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g * other.value, self.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g * self.value, other.shape))
        out._backward = back
        return out

    __rmul__ = __mul__

    def __matmul__(self, other):
        other = self.tape.lift(other)
        if self.value.shape[-1] != other.value.shape[0]:
            raise ShapeMismatch(f"{self.value.shape} @ {other.value.shape}")
        out = self.tape._node(self.value @ other.value, (self, other))

        def back(g):
            if self.requires_grad:
                self._accum(g @ other.value.T)
            if other.requires_grad:
                other._accum(self.value.T @ g)
        out._backward = back
        return out

    def __getitem__(self, key):
        out = self.tape._node(self.value[key], (self,))

        def back(g):
            if not self.requires_grad:
                return
            full = np.zeros_like(self.value)
            np.add.at(full, key, g)
            self._accum(full)
        out._backward = back
        return out

    def sum(self, axis=None, keepdims=False):
        out = self.tape._node(np.sum(self.value, axis=axis, keepdims=keepdims), (self,))

        def back(g):
            if not self.requires_grad:
                return
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accum(np.broadcast_to(g, self.shape).copy())
        out._backward = back
        return out

    def mean(self, axis=None, keepdims=False):
        n = self.value.size if axis is None else self.value.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)


def _unary(x: Var, value, local_grad) -> Var:
    out = x.tape._node(value, (x,))

    def back(g):
        if x.requires_grad:
            x._accum(g * local_grad())
    out._backward = back
    return out


def relu(x: Var) -> Var:
    return _unary(x, np.maximum(x.value, 0.0), lambda: (x.value > 0).astype(np.float64))


def sigmoid(x: Var) -> Var:
    v = _sigmoid(x.value)
    return _unary(x, v, lambda: v * (1.0 - v))


def exp(x: Var) -> Var:
    v = np.exp(x.value)
    return _unary(x, v, lambda: v)


def log(x: Var) -> Var:
    return _unary(x, np.log(x.value), lambda: 1.0 / x.value)


def absolute(x: Var) -> Var:
    return _unary(x, np.abs(x.value), lambda: np.sign(x.value))


def square(x: Var) -> Var:
    return _unary(x, x.value ** 2, lambda: 2.0 * x.value)


def softplus(x: Var) -> Var:
    return _unary(x, np.logaddexp(0.0, x.value), lambda: _sigmoid(x.value))


def huber(x: Var, delta: float) -> Var:
    """Elementwise Huber: r^2/2 inside ``delta``, ``delta (|r| - delta/2)`` outside."""
    a = np.abs(x.value)
    inside = a <= delta
    v = np.where(inside, 0.5 * x.value ** 2, delta * (a - 0.5 * delta))
    return _unary(x, v, lambda: np.where(inside, x.value, delta * np.sign(x.value)))


def pairwise_distances(z: Var) -> Var:
    """Euclidean distance matrix between the rows of ``z``.

    The gradient at coincident rows (zero distance) is taken as 0.
    """
    diff = z.value[:, None, :] - z.value[None, :, :]
    d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    out = z.tape._node(d, (z,))

    def back(g):
        if not z.requires_grad:
            return
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(d > 0, (g + g.T) / d, 0.0)
        z._accum(np.einsum("ij,ijk->ik", w, diff))
    out._backward = back
    return out


def concat(parts) -> Var:
    """Column-wise concatenation of tape variables and/or constants."""
    tape = next(p.tape for p in parts if isinstance(p, Var))
    parts = [tape.lift(p) for p in parts]
    widths = np.cumsum([0] + [p.shape[1] for p in parts])
    out = tape._node(np.hstack([p.value for p in parts]), parts)

    def back(g):
        for p, a, b in zip(parts, widths[:-1], widths[1:]):
            if p.requires_grad:
                p._accum(g[:, a:b])
    out._backward = back
    return out


def clamp_min(x: Var, lo: float) -> Var:
    return _unary(x, np.maximum(x.value, lo), lambda: (x.value > lo).astype(np.float64))


def _sigmoid(v):
    return np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))), np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))


class Tape:
    """Records ops for one forward pass; :meth:`backward` may be called once."""

    def __init__(self):
        self._nodes: list[Var] = []
        self._params: list[Var] = []
        self._consumed = False

    def _node(self, value, parents) -> Var:
        if self._consumed:
            raise StaleTape("tape already consumed by backward(); re-run the forward pass")
        out = Var(self, value, requires_grad=any(p.requires_grad for p in parents))
        self._nodes.append(out)
        return out

    def lift(self, x) -> Var:
        if isinstance(x, Var):
            return x
        return Var(self, np.asarray(x, dtype=np.float64))

    def constant(self, x) -> Var:
        return Var(self, np.asarray(x, dtype=np.float64))

    def param(self, array: np.ndarray) -> Var:
        v = Var(self, array, requires_grad=True)
        self._params.append(v)
        return v

    def backward(self, loss: Var) -> list[np.ndarray]:
        """Gradients of scalar ``loss`` for every registered parameter, in registration order."""
        if self._consumed:
            raise StaleTape("backward() already called on this tape")
        if loss.value.size != 1:
            raise ShapeMismatch("loss must be a scalar")
        if not np.isfinite(loss.value).all():
            raise NonFiniteLoss(f"loss = {loss.value}")
        self._consumed = True
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self._nodes):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)
        grads = []
        for p in self._params:
            g = np.zeros_like(p.value) if p.grad is None else p.grad
            if not np.isfinite(g).all():
                raise NonFiniteGradient("non-finite gradient")
            grads.append(g)
        # drop references so the graph can be collected
        self._nodes = []
        return grads


@dataclass
class Dense:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "identity"


class Mlp:
    """Stack of dense layers; ``weight`` has shape (in, out)."""

    def __init__(self, layers: list[Dense]):
        for a, b in zip(layers, layers[1:]):
            if a.weight.shape[1] != b.weight.shape[0]:
                raise ShapeMismatch("adjacent layer widths do not chain")
        for l in layers:
            if l.activation not in ACTIVATIONS:
                raise ValueError(f"unknown activation {l.activation!r}")
            if l.bias.shape != (l.weight.shape[1],):
                raise ShapeMismatch("bias width does not match weight")
        self.layers = layers

    @classmethod
    def init(cls, sizes: list[int], rng: np.random.Generator, hidden="relu", output="identity") -> "Mlp":
        """He-uniform weights, zero biases."""
        layers = []
        for i, (a, b) in enumerate(zip(sizes, sizes[1:])):
            bound = np.sqrt(6.0 / a)
            act = output if i == len(sizes) - 2 else hidden
            layers.append(Dense(rng.uniform(-bound, bound, size=(a, b)), np.zeros(b), act))
        return cls(layers)

    @property
    def input_width(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def output_width(self) -> int:
        return self.layers[-1].weight.shape[1]

    def params(self) -> list[np.ndarray]:
        out = []
        for l in self.layers:
            out += [l.weight, l.bias]
        return out

    def set_params(self, params: list[np.ndarray]) -> None:
        for l, (w, b) in zip(self.layers, zip(params[::2], params[1::2])):
            l.weight, l.bias = w, b

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def copy(self) -> "Mlp":
        return Mlp([Dense(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers])

    def apply(self, tape: Tape, x, track=True) -> Var:
        """Forward pass on the tape; parameters are registered when ``track``."""
        h = tape.lift(x)
        if h.shape[-1] != self.input_width:
            raise ShapeMismatch(f"input width {h.shape[-1]} != {self.input_width}")
        for l in self.layers:
            w = tape.param(l.weight) if track else tape.constant(l.weight)
            b = tape.param(l.bias) if track else tape.constant(l.bias)
            h = h @ w + b
            if l.activation == "relu":
                h = relu(h)
            elif l.activation == "sigmoid":
                h = sigmoid(h)
        return h

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for p in self.params():
            h.update(np.ascontiguousarray(p).tobytes())
        return h.hexdigest()

    def to_dict(self) -> dict:
        return {"layers": [{"weight": l.weight.tolist(), "bias": l.bias.tolist(),
                            "activation": l.activation} for l in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "Mlp":
        return cls([Dense(np.asarray(l["weight"], dtype=np.float64).reshape(len(l["weight"]), -1),
                          np.asarray(l["bias"], dtype=np.float64), l["activation"])
                    for l in d["layers"]])


def forward(net: Mlp, batch) -> np.ndarray:
    """Plain numpy forward pass (no tape)."""
    h = np.asarray(batch, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != net.input_width:
        raise ShapeMismatch(f"batch shape {h.shape} vs input width {net.input_width}")
    for l in net.layers:
        h = h @ l.weight + l.bias
        if l.activation == "relu":
            h = np.maximum(h, 0.0)
        elif l.activation == "sigmoid":
            h = _sigmoid(h)
    if not np.isfinite(h).all():
        raise NonFiniteActivation("non-finite activation in forward pass")
    return h


@dataclass
class GaussianHead:
    mu: np.ndarray
    log_var: np.ndarray

    @classmethod
    def split(cls, out: np.ndarray) -> "GaussianHead":
        k = out.shape[-1] // 2
        return cls(out[..., :k], out[..., k:])


def reparam_sample(head, noise):
    """``mu + exp(log_var / 2) * noise``; works on arrays or tape variables."""
    mu, log_var = (head.mu, head.log_var) if isinstance(head, GaussianHead) else head
    if isinstance(mu, Var):
        if np.shape(noise) != mu.shape:
            raise ShapeMismatch("noise shape differs from mu")
        return mu + exp(log_var * 0.5) * noise
    if np.shape(noise) != np.shape(mu):
        raise ShapeMismatch("noise shape differs from mu")
    return mu + np.exp(0.5 * log_var) * noise


class Adam:
    """Adaptive-moment optimizer with bias correction."""

    def __init__(self, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.lr, self.betas, self.eps = lr, betas, eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
        if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
            raise ShapeMismatch("params and grads do not match")
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        b1, b2 = self.betas
        self.t += 1
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            m_hat = self.m[i] / (1 - b1 ** self.t)
            v_hat = self.v[i] / (1 - b2 ** self.t)
            out.append(p - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))
        return out


def adam_step(params, grads, state: Adam | None = None, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
    """Functional wrapper: returns ``(new_params, state)``."""
    state = state or Adam(lr, betas, eps)
    return state.step(params, grads), state


def save_checkpoint(path, nets: dict[str, Mlp], latent_dim: int, meta: dict | None = None) -> str:
    """Write nets as JSON (format documented in README); returns the file's sha256."""
    doc = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "latent_dim": int(latent_dim),
           "meta": meta or {}, "nets": {k: v.to_dict() for k, v in nets.items()}}
    text = json.dumps(doc, sort_keys=True)
    Path(path).write_text(text, encoding="utf-8")
    return hashlib.sha256(text.encode()).hexdigest()


def load_checkpoint(path) -> tuple[dict[str, Mlp], int, dict]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a version {CHECKPOINT_VERSION} {CHECKPOINT_FORMAT} checkpoint")
    return {k: Mlp.from_dict(v) for k, v in doc["nets"].items()}, doc["latent_dim"], doc["meta"]
