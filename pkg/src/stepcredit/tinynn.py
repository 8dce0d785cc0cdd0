"""Small feedforward networks with hand-written gradients and Adam/AdamW.

Everything is float64.  ``MlpNet.forward`` accepts a single feature vector or
a batch (rows are samples) and caches what ``backward`` needs.

Parameter files use a flat little-endian layout::

    b"TNN1" | uint32 header length | UTF-8 JSON header | float64 params

The JSON header carries ``layer_dims``, ``activation`` and any extra metadata;
the parameters follow as W0, b0, W1, b1, ... each flattened in C order, with
``W_i`` of shape ``(layer_dims[i], layer_dims[i + 1])``.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import UsageError

_MAGIC = b"TNN1"


class MlpNet:
    """Fully connected net: hidden layers use ``activation``, the output is linear."""

    def __init__(
        self,
        layer_dims: list[int] | tuple[int, ...],
        activation: str = "tanh",
        rng: np.random.Generator | None = None,
        zero_init: bool = False,
    ):
        if len(layer_dims) < 2:
            raise UsageError("layer_dims needs at least an input and an output size")
        if activation not in ("tanh", "relu"):
            raise UsageError(f"unknown activation {activation!r}")
        self.layer_dims = [int(d) for d in layer_dims]
        self.activation = activation
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(self.layer_dims[:-1], self.layer_dims[1:]):
            if zero_init:
                w = np.zeros((fan_in, fan_out))
            else:
                limit = math.sqrt(6.0 / (fan_in + fan_out))
                w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            self.weights.append(w)
            self.biases.append(np.zeros(fan_out))
        self._cache: tuple | None = None

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def num_params(self) -> int:
        return sum(p.size for p in self.params())

    def copy(self) -> MlpNet:
        net = MlpNet.__new__(MlpNet)
        net.layer_dims = list(self.layer_dims)
        net.activation = self.activation
        net.weights = [w.copy() for w in self.weights]
        net.biases = [b.copy() for b in self.biases]
        net._cache = None
        return net

    def load_params(self, other: MlpNet) -> None:
        for dst, src in zip(self.params(), other.params()):
            dst[...] = src

    def _act(self, z: np.ndarray) -> np.ndarray:
        return np.tanh(z) if self.activation == "tanh" else np.maximum(z, 0.0)

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise UsageError(f"expected input width {self.in_dim}, got shape {x.shape}")
        inputs, pre = [], []
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            z = h @ w + b
            if i < last:
                pre.append(z)
                h = self._act(z)
            else:
                h = z
        self._cache = (inputs, pre, single)
        return h[0] if single else h

    def backward(self, upstream: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        """Gradients of ``sum(upstream * output)`` w.r.t. params and input.

        Parameter gradients are returned in ``params()`` order.
        """
        if self._cache is None:
            raise UsageError("backward() called before forward()")
        inputs, pre, single = self._cache
        g = np.asarray(upstream, dtype=np.float64)
        if single:
            g = g[None, :]
        if g.shape != (inputs[0].shape[0], self.out_dim):
            raise UsageError(f"upstream gradient shape {g.shape} does not match output")
        grads: list[np.ndarray] = [None] * (2 * len(self.weights))  # type: ignore[list-item]
        for i in range(len(self.weights) - 1, -1, -1):
            grads[2 * i] = inputs[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.weights[i].T
            if i > 0:
                z = pre[i - 1]
                if self.activation == "tanh":
                    g = g * (1.0 - np.tanh(z) ** 2)
                else:
                    g = g * (z > 0.0)
        return grads, (g[0] if single else g)

    def flat_params(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def set_flat_params(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        offset = 0
        for p in self.params():
            p[...] = flat[offset:offset + p.size].reshape(p.shape)
            offset += p.size
        if offset != flat.size:
            raise UsageError("flat parameter vector has the wrong length")

    def is_finite(self) -> bool:
        return all(np.isfinite(p).all() for p in self.params())


def save_net(net: MlpNet, path: str | Path, meta: dict[str, Any] | None = None) -> None:
    header = {"layer_dims": net.layer_dims, "activation": net.activation, "meta": meta or {}}
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(net.flat_params().astype("<f8").tobytes())


def load_net(path: str | Path) -> tuple[MlpNet, dict[str, Any]]:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise UsageError(f"{path}: not a parameter file")
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8:8 + hlen].decode())
    net = MlpNet(header["layer_dims"], header["activation"], zero_init=True)
    net.set_flat_params(np.frombuffer(raw[8 + hlen:], dtype="<f8"))
    return net, header.get("meta", {})


def net_digest(net: MlpNet) -> str:
    import hashlib

    return hashlib.sha256(net.flat_params().astype("<f8").tobytes()).hexdigest()[:16]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_logprob(logits: np.ndarray, index: int) -> tuple[float, np.ndarray]:
    """Log-probability of ``index`` under softmax(logits) and its gradient w.r.t. logits."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= index < logits.shape[-1]:
        raise UsageError(f"index {index} out of range for {logits.shape[-1]} logits")
    logp = log_softmax(logits)
    grad = -np.exp(logp)
    grad[index] += 1.0
    return float(logp[index]), grad


def mse_loss(pred: float, target: float) -> tuple[float, float]:
    diff = pred - target
    return diff * diff, 2.0 * diff


def grad_norm(grads: list[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads))


def clip_grad_norm(grads: list[np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their global norm is at most ``max_norm``."""
    norm = grad_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            g *= scale
    return norm


@dataclass
class Optimizer:
    """Adam (L2 folded into the gradient) or AdamW (decoupled decay).

    ``schedule="cosine"`` scales the learning rate by
    ``0.5 * (1 + cos(pi * step / total_steps))``.
    """

    kind: str = "adam"
    learning_rate: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    schedule: str = "constant"
    total_steps: int = 0
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.kind not in ("adam", "adamw"):
            raise UsageError(f"unknown optimizer {self.kind!r}")
        if self.schedule not in ("constant", "cosine"):
            raise UsageError(f"unknown schedule {self.schedule!r}")
        if self.schedule == "cosine" and self.total_steps <= 0:
            raise UsageError("cosine schedule needs total_steps > 0")

    def lr_multiplier(self, step: int | None = None) -> float:
        if self.schedule == "constant":
            return 1.0
        step = self.step_count if step is None else step
        frac = min(step, self.total_steps) / self.total_steps
        return 0.5 * (1.0 + math.cos(math.pi * frac))

    def step(self, net: MlpNet, grads: list[np.ndarray]) -> None:
        params = net.params()
        if len(grads) != len(params):
            raise UsageError("gradient list does not match parameters")
        for i, g in enumerate(grads):
            if not np.isfinite(g).all():
                raise FloatingPointError(
                    f"non-finite gradient in parameter {i} (shape {g.shape}) at step {self.step_count}"
                )
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        lr = self.learning_rate * self.lr_multiplier()
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if self.kind == "adam" and self.weight_decay:
                g = g + self.weight_decay * p
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.kind == "adamw" and self.weight_decay:
                p -= lr * self.weight_decay * p
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def optimizer_step(net: MlpNet, grads: list[np.ndarray], opt: Optimizer) -> None:
    opt.step(net, grads)
