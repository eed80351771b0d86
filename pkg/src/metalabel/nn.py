"""MLP parameters, the three training losses, and first-order optimizers.

Losses are built from engine ops, so their gradients (and gradients of those
gradients) come from the same reverse-mode machinery. Optimizers work on raw
float64 arrays: parameter updates are ordinary numerics, never differentiated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import (
    Tensor,
    clip_min,
    linear,
    log,
    mul,
    relu,
    sum_all,
)

PROB_FLOOR = 1e-12  # clamp applied inside losses only, never to stored labels


class ShapeError(ValueError):
    """Dimension mismatch between data and parameters."""


# ---------------------------------------------------------------------------
# parameters


@dataclass
class Mlp:
    """Dense network parameters: rectifier hidden layers, identity output.

    `layers[i]` is a (weight, bias) pair with weight (in, out) and bias
    (1, out); consecutive layers chain and the last output width is the
    class count.
    """

    layers: list[tuple[Tensor, Tensor]]

    def __post_init__(self):
        for i in range(len(self.layers) - 1):
            w_out = self.layers[i][0].shape[1]
            w_in = self.layers[i + 1][0].shape[0]
            if w_out != w_in:
                raise ShapeError(f"layer {i} outputs {w_out} but layer {i + 1} expects {w_in}")
        for i, (w, b) in enumerate(self.layers):
            if b.shape != (1, w.shape[1]):
                raise ShapeError(f"layer {i} bias shape {b.shape}, want (1, {w.shape[1]})")

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[1]

    @property
    def n_params(self) -> int:
        return sum(w.value.size + b.value.size for w, b in self.layers)

    def params(self) -> list[Tensor]:
        """Flat parameter list: layer order, weight before bias."""
        out = []
        for w, b in self.layers:
            out.append(w)
            out.append(b)
        return out

    def with_params(self, flat: list[Tensor]) -> "Mlp":
        if len(flat) != 2 * len(self.layers):
            raise ShapeError("parameter list length mismatch")
        return Mlp([(flat[2 * i], flat[2 * i + 1]) for i in range(len(self.layers))])

    def copy(self) -> "Mlp":
        return Mlp([(Tensor(w.value.copy()), Tensor(b.value.copy())) for w, b in self.layers])

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Returns (logits, hidden): hidden is the activation feeding the
        output layer (the input itself for a single-layer net)."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.shape[1] != self.in_dim:
            raise ShapeError(f"input width {x.shape[1]} does not match layer 0 ({self.in_dim})")
        h = x
        for w, b in self.layers[:-1]:
            h = relu(linear(h, w, b))
        w, b = self.layers[-1]
        logits = linear(h, w, b)
        return logits, h


def init_mlp(sizes: list[int], rng: np.random.Generator) -> Mlp:
    """Scaled-uniform init: weights U(-s, s) with s = sqrt(6/(fan_in+fan_out)),
    biases zero."""
    if len(sizes) < 2:
        raise ShapeError("need at least input and output widths")
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        s = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-s, s, size=(fan_in, fan_out))
        layers.append((Tensor(w), Tensor(np.zeros((1, fan_out)))))
    return Mlp(layers)


# ---------------------------------------------------------------------------
# losses


def _check_probs(p: Tensor, name: str) -> None:
    if p.value.ndim != 2:
        raise ShapeError(f"{name} must be a matrix of row distributions")
    if np.any(p.value <= 0.0):
        raise ValueError(f"{name} must be strictly positive")


def check_soft_labels(probs: np.ndarray, *, tol: float = 1e-9) -> None:
    """Validate the soft-label contract: rows on the open simplex."""
    p = np.asarray(probs)
    if p.ndim != 2:
        raise ShapeError("soft labels must be a matrix")
    if np.any(p <= 0.0) or np.any(p >= 1.0):
        raise ValueError("soft-label entries must lie strictly in (0, 1)")
    err = np.abs(p.sum(axis=1) - 1.0).max()
    if err > tol:
        raise ValueError(f"soft-label rows must sum to 1 (max deviation {err:.3g})")


def check_one_hot(y: np.ndarray, n_classes: int | None = None) -> None:
    y = np.asarray(y)
    if y.ndim != 2 or (n_classes is not None and y.shape[1] != n_classes):
        raise ShapeError("labels must be a one-hot matrix")
    ok = np.all((y == 0.0) | (y == 1.0)) and np.all(y.sum(axis=1) == 1.0)
    if not ok:
        raise ValueError("labels must be one-hot rows")


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ShapeError("class labels must be a flat index array")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError("class index out of range")
    out = np.zeros((labels.shape[0], n_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def cce_loss(probs: Tensor, y_onehot: np.ndarray) -> Tensor:
    """Batch-mean categorical cross-entropy against one-hot targets."""
    _check_probs(probs, "probs")
    check_one_hot(y_onehot, probs.shape[1])
    n = probs.shape[0]
    picked = mul(Tensor(np.asarray(y_onehot, dtype=np.float64)), log(probs))
    return sum_all(picked) * (-1.0 / n)


def kl_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Batch-mean KL(pred row || target row); prediction in the first slot.

    Entries are floored at PROB_FLOOR inside the computation only; callers'
    arrays are never mutated.
    """
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    target = target if isinstance(target, Tensor) else Tensor(target)
    _check_probs(pred, "pred")
    _check_probs(target, "target")
    if pred.shape != target.shape:
        raise ShapeError(f"pred {pred.shape} vs target {target.shape}")
    n = pred.shape[0]
    p = clip_min(pred, PROB_FLOOR)
    q = clip_min(target, PROB_FLOOR)
    return sum_all(mul(p, log(p) - log(q))) * (1.0 / n)


def entropy_loss(probs: Tensor) -> Tensor:
    """Batch-mean Shannon entropy of prediction rows; pressure toward
    single-class peaks when minimized."""
    probs = probs if isinstance(probs, Tensor) else Tensor(probs)
    _check_probs(probs, "probs")
    n = probs.shape[0]
    p = clip_min(probs, PROB_FLOOR)
    return sum_all(mul(p, log(p))) * (-1.0 / n)


# ---------------------------------------------------------------------------
# optimizers


class SgdMomentum:
    """Momentum SGD: v <- momentum*v + g, p <- p - lr*v, with classic L2
    coupling (g includes weight_decay*p)."""

    kind = "sgd-momentum"

    def __init__(self, shapes: list[tuple[int, ...]], lr: float, momentum: float = 0.9,
                 weight_decay: float = 1e-4):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = [np.zeros(s) for s in shapes]
        self.step_count = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
        if len(params) != len(self.buffers) or len(grads) != len(self.buffers):
            raise ShapeError("optimizer buffer count mismatch")
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            if p.shape != self.buffers[i].shape or g.shape != p.shape:
                raise ShapeError(f"optimizer shape mismatch at slot {i}")
            g = g + self.weight_decay * p
            self.buffers[i] = self.momentum * self.buffers[i] + g
            out.append(p - self.lr * self.buffers[i])
        self.step_count += 1
        return out

    def state(self) -> dict:
        return {
            "kind": self.kind,
            "lr": self.lr,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "step_count": self.step_count,
            "buffers": [b.copy() for b in self.buffers],
        }

    def load_state(self, state: dict) -> None:
        self.lr = state["lr"]
        self.momentum = state["momentum"]
        self.weight_decay = state["weight_decay"]
        self.step_count = state["step_count"]
        self.buffers = [np.asarray(b, dtype=np.float64).copy() for b in state["buffers"]]


class Adam:
    """Adaptive-moment optimizer with bias correction; weight decay coupled
    into the gradient (classic L2), decays 0.9/0.999, epsilon 1e-8."""

    kind = "adam"

    def __init__(self, shapes: list[tuple[int, ...]], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 1e-4):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.step_count = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
        if len(params) != len(self.m) or len(grads) != len(self.m):
            raise ShapeError("optimizer buffer count mismatch")
        self.step_count += 1
        t = self.step_count
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            if p.shape != self.m[i].shape or g.shape != p.shape:
                raise ShapeError(f"optimizer shape mismatch at slot {i}")
            g = g + self.weight_decay * p
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            m_hat = self.m[i] / (1.0 - self.beta1 ** t)
            v_hat = self.v[i] / (1.0 - self.beta2 ** t)
            out.append(p - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))
        return out

    def state(self) -> dict:
        return {
            "kind": self.kind,
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "weight_decay": self.weight_decay,
            "step_count": self.step_count,
            "m": [b.copy() for b in self.m],
            "v": [b.copy() for b in self.v],
        }

    def load_state(self, state: dict) -> None:
        self.lr = state["lr"]
        self.beta1 = state["beta1"]
        self.beta2 = state["beta2"]
        self.eps = state["eps"]
        self.weight_decay = state["weight_decay"]
        self.step_count = state["step_count"]
        self.m = [np.asarray(b, dtype=np.float64).copy() for b in state["m"]]
        self.v = [np.asarray(b, dtype=np.float64).copy() for b in state["v"]]


def make_optimizer(kind: str, shapes: list[tuple[int, ...]], lr: float,
                   weight_decay: float = 1e-4):
    if kind == "sgd-momentum":
        return SgdMomentum(shapes, lr=lr, weight_decay=weight_decay)
    if kind in ("adam", "adaptive-moment"):
        return Adam(shapes, lr=lr, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer kind {kind!r}")
