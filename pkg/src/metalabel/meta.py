"""Soft-label generation and the two-level training steps.

The generator is a single dense layer + softmax over frozen features. Its
update differentiates the meta objective through a one-step virtual SGD
update of the classifier, i.e. a gradient is pushed through a gradient.
A second, analytically assembled route for the same gradient (per-sample
gradient inner products against a constant meta-gradient) is kept alongside
as a cross-check; it must agree with the unrolled route to float precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import GradError, Tensor, grad, linear, no_grad, relu, softmax, sum_all, mul
from .nn import Mlp, cce_loss, check_one_hot, entropy_loss, kl_loss

EXTRACTOR_MODES = ("penultimate", "logits")


@dataclass
class FeatureExtractor:
    """Frozen copy of a trained classifier used as an encoder.

    "penultimate" drops the output layer and returns the last hidden
    activation; "logits" keeps the whole network and returns its pre-softmax
    output. Immutable after creation: built from deep copies.
    """

    layers: list[tuple[Tensor, Tensor]]
    mode: str
    in_dim: int

    @classmethod
    def from_classifier(cls, net: Mlp, mode: str = "penultimate") -> "FeatureExtractor":
        if mode not in EXTRACTOR_MODES:
            raise ValueError(f"extractor mode must be one of {EXTRACTOR_MODES}")
        frozen = net.copy()
        kept = frozen.layers[:-1] if mode == "penultimate" else frozen.layers
        return cls(layers=kept, mode=mode, in_dim=net.in_dim)

    @property
    def n_features(self) -> int:
        if not self.layers:
            return self.in_dim
        return self.layers[-1][0].shape[1]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        """Encode rows of x; deterministic, never differentiated."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"extractor expects (N, {self.in_dim}) input, got {x.shape}")
        with no_grad():
            h = Tensor(x)
            if self.mode == "penultimate":
                for w, b in self.layers:
                    h = relu(linear(h, w, b))
                return h.value
            for w, b in self.layers[:-1]:
                h = relu(linear(h, w, b))
            w, b = self.layers[-1]
            return linear(h, w, b).value


def extract_features(extractor: FeatureExtractor, x: np.ndarray) -> np.ndarray:
    return extractor(x)


@dataclass
class SoftLabeler:
    """Single dense layer + softmax mapping features to soft labels."""

    weight: Tensor  # (F, C)
    bias: Tensor    # (1, C)

    @classmethod
    def zeros(cls, n_features: int, n_classes: int) -> "SoftLabeler":
        # zero init makes the initial labels uniform over classes
        return cls(Tensor(np.zeros((n_features, n_classes))),
                   Tensor(np.zeros((1, n_classes))))

    @property
    def n_classes(self) -> int:
        return self.weight.shape[1]

    def params(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def soft_labels(self, v) -> Tensor:
        """Row distributions over classes for feature rows v. Differentiable
        with respect to (weight, bias) when recording is on."""
        v = v if isinstance(v, Tensor) else Tensor(v)
        if v.shape[1] != self.weight.shape[0]:
            raise ValueError(
                f"feature width {v.shape[1]} does not match generator ({self.weight.shape[0]})")
        return softmax(linear(v, self.weight, self.bias))

    def with_params(self, weight: Tensor, bias: Tensor) -> "SoftLabeler":
        return SoftLabeler(weight, bias)


def generate_soft_labels(labeler: SoftLabeler, v) -> Tensor:
    return labeler.soft_labels(v)


@dataclass
class MetaStepReport:
    meta_loss: float
    grad_phi_norm: float
    mean_similarity: float

    def __post_init__(self):
        vals = (self.meta_loss, self.grad_phi_norm, self.mean_similarity)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError(f"non-finite meta step report: {vals}")


# ---------------------------------------------------------------------------
# the three iteration steps


def _virtual(theta: Mlp, x, y_hat: Tensor, inner_lr: float):
    """One plain SGD step on the soft-label classification loss, kept
    differentiable with respect to whatever y_hat depends on.

    Returns (theta_hat, loss, inner_grads)."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    logits, _ = theta.forward(x)
    loss = kl_loss(softmax(logits), y_hat)
    inner_grads = grad(loss, theta.params(), create_graph=True)
    for g in inner_grads:
        if not np.all(np.isfinite(g.value)):
            raise ValueError("non-finite gradient in virtual update")
    updated = [p - inner_lr * g for p, g in zip(theta.params(), inner_grads)]
    return theta.with_params(updated), loss, inner_grads


def virtual_update(theta: Mlp, x, y_hat: Tensor, inner_lr: float = 1.0) -> Mlp:
    """Hypothetical classifier parameters after one unit-coefficient SGD step
    on the batch-mean KL against the generated labels. No momentum, no weight
    decay; never committed to the live classifier."""
    theta_hat, _, _ = _virtual(theta, x, y_hat, inner_lr)
    return theta_hat


def meta_loss(theta_hat: Mlp, meta_x, meta_y_onehot: np.ndarray) -> Tensor:
    """Batch-mean cross-entropy of the virtually updated classifier on a
    clean meta batch."""
    check_one_hot(meta_y_onehot, theta_hat.out_dim)
    mx = meta_x if isinstance(meta_x, Tensor) else Tensor(meta_x)
    logits, _ = theta_hat.forward(mx)
    return cce_loss(softmax(logits), meta_y_onehot)


def meta_step(labeler: SoftLabeler, theta: Mlp, x: np.ndarray, v: np.ndarray,
              meta_x: np.ndarray, meta_y_onehot: np.ndarray, *,
              inner_lr: float, optimizer) -> tuple[SoftLabeler, MetaStepReport]:
    """Update the generator by the gradient of the meta loss through the
    virtual update (the second-order path). The classifier is not modified.

    The optimizer's learning rate is the meta step size. Raises GradError if
    the recorded graph does not connect the meta loss back to the generator
    (there is no silent first-order fallback).
    """
    if len(meta_x) != len(x):
        raise ValueError(f"meta batch size {len(meta_x)} != train batch size {len(x)}")
    y_hat = labeler.soft_labels(v)
    theta_hat, _, inner_grads = _virtual(theta, x, y_hat, inner_lr)
    l_meta = meta_loss(theta_hat, meta_x, meta_y_onehot)
    targets = labeler.params() + theta_hat.params()
    try:
        grads = grad(l_meta, targets)
    except GradError as e:
        raise GradError(f"second-order path unavailable: {e}") from e
    phi_grads, that_grads = grads[:2], grads[2:]

    # batch-mean similarity: <grad of train loss, grad of meta loss at theta_hat>
    mean_sim = sum(float(np.vdot(a.value, b.value))
                   for a, b in zip(inner_grads, that_grads))
    gnorm = float(np.sqrt(sum(float(np.vdot(g.value, g.value)) for g in phi_grads)))

    new_w, new_b = optimizer.step([p.value for p in labeler.params()],
                                  [g.value for g in phi_grads])
    report = MetaStepReport(meta_loss=l_meta.item(), grad_phi_norm=gnorm,
                           mean_similarity=mean_sim)
    return labeler.with_params(Tensor(new_w), Tensor(new_b)), report


def conventional_step(theta: Mlp, labeler: SoftLabeler, x: np.ndarray,
                      v: np.ndarray, lam: float, optimizer, *,
                      use_entropy: bool = True) -> tuple[Mlp, float, float]:
    """Momentum-SGD step of the classifier on regenerated soft labels.

    Labels come from the freshly updated generator and act as constants;
    the loss is the KL classification term plus (optionally) the entropy
    term that keeps predictions peaked. Returns (theta', L_c, L_e).
    """
    with no_grad():
        y_hat = labeler.soft_labels(v)
    logits, _ = theta.forward(Tensor(x))
    probs = softmax(logits)
    l_c = kl_loss(probs, Tensor(y_hat.value))
    l_e = entropy_loss(probs) if use_entropy else Tensor(0.0)
    total = l_c + l_e if use_entropy else l_c
    if not np.isfinite(total.value):
        raise ValueError("non-finite classifier loss")
    grads = grad(total, theta.params())
    optimizer.lr = lam
    new_vals = optimizer.step([p.value for p in theta.params()],
                              [g.value for g in grads])
    new_theta = theta.with_params([Tensor(val) for val in new_vals])
    return new_theta, l_c.item(), l_e.item()


# ---------------------------------------------------------------------------
# diagnostic / cross-check route


def similarity_matrix(theta: Mlp, theta_hat: Mlp, x: np.ndarray, y_hat: Tensor,
                      meta_x: np.ndarray, meta_y_onehot: np.ndarray) -> np.ndarray:
    """S[i, j] = inner product of train sample i's classification-loss
    gradient (at theta) with meta sample j's cross-entropy gradient (at
    theta_hat), gradients flattened layer by layer, weight before bias.

    Diagnostic only; quadratic in batch size."""
    n_b = x.shape[0]
    g_train = _train_grad_rows(theta, x, y_hat, create_graph=False)
    g_meta = _meta_grad_rows(theta_hat, meta_x, meta_y_onehot)
    s = np.zeros((n_b, meta_x.shape[0]))
    for i, gi in enumerate(g_train):
        flat_i = np.concatenate([g.value.ravel() for g in gi])
        for j, gj in enumerate(g_meta):
            s[i, j] = float(flat_i @ gj)
    return s


def _train_grad_rows(theta: Mlp, x: np.ndarray, y_hat: Tensor, *, create_graph: bool):
    """Per-sample gradients of the soft-label classification loss wrt theta."""
    rows = []
    params = theta.params()
    for i in range(x.shape[0]):
        logits, _ = theta.forward(Tensor(x[i:i + 1]))
        # one-row slice of y_hat that keeps the generator dependency
        sel = np.zeros((1, x.shape[0]))
        sel[0, i] = 1.0
        y_row = Tensor(sel) @ y_hat
        loss = kl_loss(softmax(logits), y_row)
        rows.append(grad(loss, params, create_graph=create_graph))
    return rows


def _meta_grad_rows(theta_hat: Mlp, meta_x: np.ndarray, meta_y_onehot: np.ndarray):
    """Per-sample meta-loss gradients at theta_hat, flattened, as constants."""
    out = []
    frozen = theta_hat.with_params([p.detach() for p in theta_hat.params()])
    for j in range(meta_x.shape[0]):
        logits, _ = frozen.forward(Tensor(meta_x[j:j + 1]))
        loss = cce_loss(softmax(logits), meta_y_onehot[j:j + 1])
        gj = grad(loss, frozen.params())
        out.append(np.concatenate([g.value.ravel() for g in gj]))
    return out


def meta_grad_via_similarity(labeler: SoftLabeler, theta: Mlp, x: np.ndarray,
                             v: np.ndarray, meta_x: np.ndarray,
                             meta_y_onehot: np.ndarray, *,
                             inner_lr: float = 1.0) -> list[np.ndarray]:
    """Generator gradient assembled from per-sample gradient similarities.

    Builds S[i, j] with the meta-side gradients held constant, sums the
    per-train-sample mean similarity, differentiates that scalar with
    respect to the generator, and rescales. Must equal the unrolled
    second-order gradient up to float roundoff.
    """
    n_b = x.shape[0]
    y_hat = labeler.soft_labels(v)
    g_train = _train_grad_rows(theta, x, y_hat, create_graph=True)
    theta_hat, _, _ = _virtual(theta, x, y_hat, inner_lr)
    g_meta = _meta_grad_rows(theta_hat, meta_x, meta_y_onehot)
    mean_meta = np.mean(np.stack(g_meta, axis=0), axis=0)

    # sum_i mean_j S_ij, with S built against constant meta gradients
    total = Tensor(0.0)
    offsets = np.cumsum([0] + [p.value.size for p in theta.params()])
    for gi in g_train:
        for k, g in enumerate(gi):
            const = mean_meta[offsets[k]:offsets[k + 1]].reshape(g.shape)
            total = total + sum_all(mul(g, Tensor(const)))
    phi_grads = grad(total, labeler.params())
    scale = -inner_lr / n_b
    return [scale * g.value for g in phi_grads]
