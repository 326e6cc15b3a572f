"""Fully-connected classifier with a contrastive projection head.

All parameters live in one flat float64 vector so that gradients from
different losses can be compared, projected and combined coordinate-wise.
The architecture is fixed: a ReLU MLP encoder, a linear classifier on the
encoder features, and a 2-layer MLP projection head whose output is
renormalized to the unit sphere.

Layout of the flat vector (row-vector convention, ``x @ W + b``):

    encoder:    W/b for input_dim -> hidden_dims... -> feature_dim
    classifier: W/b for feature_dim -> num_classes
    head:       W/b for feature_dim -> head_hidden_dim -> key_dim

Every operation here is a pure function of its inputs.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

KEY_NORM_EPS = 1e-12


class TrainingDivergenceError(RuntimeError):
    """Raised when a gradient step would apply non-finite values."""


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description; the parameter count is a pure function of it."""

    input_dim: int
    hidden_dims: tuple[int, ...]
    feature_dim: int
    num_classes: int
    head_hidden_dim: int
    key_dim: int

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, self.feature_dim, self.num_classes,
                self.head_hidden_dim, self.key_dim) + self.hidden_dims
        if any(d < 1 for d in dims):
            raise ValueError(f"all dimensions must be >= 1, got {self}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")

    def layer_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        """Named parameter blocks in flat-vector order."""
        shapes = []
        enc_dims = (self.input_dim,) + self.hidden_dims + (self.feature_dim,)
        for i, (din, dout) in enumerate(zip(enc_dims[:-1], enc_dims[1:])):
            shapes.append((f"enc{i}_W", (din, dout)))
            shapes.append((f"enc{i}_b", (dout,)))
        shapes.append(("cls_W", (self.feature_dim, self.num_classes)))
        shapes.append(("cls_b", (self.num_classes,)))
        shapes.append(("head0_W", (self.feature_dim, self.head_hidden_dim)))
        shapes.append(("head0_b", (self.head_hidden_dim,)))
        shapes.append(("head1_W", (self.head_hidden_dim, self.key_dim)))
        shapes.append(("head1_b", (self.key_dim,)))
        return shapes

    @property
    def param_count(self) -> int:
        return _layout(self)[-1]

    @property
    def num_encoder_layers(self) -> int:
        return len(self.hidden_dims) + 1


@lru_cache(maxsize=None)
def _layout(spec: ModelSpec):
    """(names, shapes, offsets, total size) of the flat vector, cached."""
    names, shapes, offsets = [], [], []
    total = 0
    for name, shape in spec.layer_shapes():
        names.append(name)
        shapes.append(shape)
        offsets.append(total)
        total += int(np.prod(shape))
    return tuple(names), tuple(shapes), tuple(offsets), total


@dataclass
class ParamVector:
    """Flat model parameters; length always equals ``spec.param_count``."""

    values: np.ndarray
    spec: ModelSpec

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or self.values.size != self.spec.param_count:
            raise ValueError(
                f"parameter vector must have length {self.spec.param_count}, "
                f"got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("parameter vector contains non-finite entries")

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.spec)


@dataclass
class Batch:
    """A matrix of inputs plus optional integer labels (None = unlabeled)."""

    inputs: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] < 1:
            raise ValueError(f"inputs must be a non-empty matrix, got {self.inputs.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.inputs.shape[0],):
                raise ValueError("labels must have one entry per input row")

    def __len__(self) -> int:
        return self.inputs.shape[0]


def init_params(spec: ModelSpec, seed: int) -> ParamVector:
    """Seeded symmetric init: every block ~ U[-sqrt(6/(fan_in+fan_out)), +...].

    Biases use their layer's bound too; nonzero biases also keep ReLU
    preactivations away from exactly 0 for dead rows, which matters for
    finite-difference gradient checks.
    """
    rng = np.random.default_rng(seed)
    names, shapes, offsets, total = _layout(spec)
    flat = np.empty(total)
    bound = 0.0
    for name, shape, offset in zip(names, shapes, offsets):
        size = int(np.prod(shape))
        if name.endswith("_W"):
            fan_in, fan_out = shape
            bound = np.sqrt(6.0 / (fan_in + fan_out))
        flat[offset:offset + size] = rng.uniform(-bound, bound, size)
    return ParamVector(flat, spec)


def _views(spec: ModelSpec, flat: np.ndarray) -> dict[str, np.ndarray]:
    """Per-block views into a flat vector (reshaped contiguous slices)."""
    names, shapes, offsets, _ = _layout(spec)
    return {name: flat[offset:offset + int(np.prod(shape))].reshape(shape)
            for name, shape, offset in zip(names, shapes, offsets)}


def unpack(params: ParamVector) -> dict[str, np.ndarray]:
    """Views into the flat parameter vector, keyed by block name."""
    return _views(params.spec, params.values)


def zero_grad(spec: ModelSpec) -> np.ndarray:
    return np.zeros(spec.param_count)





# ---------------------------------------------------------------------------
# forward passes (with caches for backprop)


def _encoder_forward(p: dict[str, np.ndarray], spec: ModelSpec, X: np.ndarray):
    """Returns (features, cache); every encoder layer is linear + ReLU."""
    cache = []
    H = X
    for i in range(spec.num_encoder_layers):
        Z = H @ p[f"enc{i}_W"] + p[f"enc{i}_b"]
        cache.append((H, Z))
        H = np.maximum(Z, 0.0)
    return H, cache


def _encoder_backward(p, spec, cache, dF, gv):
    dH = dF
    for i in reversed(range(spec.num_encoder_layers)):
        H_prev, Z = cache[i]
        dZ = dH * (Z > 0.0)  # convention: dReLU(0) = 0
        gv[f"enc{i}_W"] += H_prev.T @ dZ
        gv[f"enc{i}_b"] += dZ.sum(axis=0)
        dH = dZ @ p[f"enc{i}_W"].T
    return dH


def _head_forward(p, F: np.ndarray):
    Z1 = F @ p["head0_W"] + p["head0_b"]
    A1 = np.maximum(Z1, 0.0)
    U = A1 @ p["head1_W"] + p["head1_b"]
    return U, (F, Z1, A1)


def _head_backward(p, cache, dU, gv):
    F, Z1, A1 = cache
    gv["head1_W"] += A1.T @ dU
    gv["head1_b"] += dU.sum(axis=0)
    dA1 = dU @ p["head1_W"].T
    dZ1 = dA1 * (Z1 > 0.0)
    gv["head0_W"] += F.T @ dZ1
    gv["head0_b"] += dZ1.sum(axis=0)
    return dZ1 @ p["head0_W"].T


def forward(params: ParamVector, inputs: np.ndarray):
    """Run encoder + classifier; returns (features, logits)."""
    X = np.asarray(inputs, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.spec.input_dim:
        raise ValueError(
            f"inputs must be (batch, {params.spec.input_dim}), got {X.shape}")
    p = unpack(params)
    F, _ = _encoder_forward(p, params.spec, X)
    logits = F @ p["cls_W"] + p["cls_b"]
    return F, logits


def _normalize_rows(U: np.ndarray):
    """Unit-normalize rows; near-zero rows get a tiny epsilon added first."""
    U = np.array(U, dtype=np.float64, copy=True)
    norms = np.linalg.norm(U, axis=1)
    degenerate = norms < KEY_NORM_EPS
    if np.any(degenerate):
        warnings.warn(
            f"{int(degenerate.sum())} projection-head output(s) were numerically "
            "zero; nudged by epsilon before normalization", RuntimeWarning)
        U[degenerate] += KEY_NORM_EPS
        norms = np.linalg.norm(U, axis=1)
    return U / norms[:, None], U, norms


def project_key(params: ParamVector, features: np.ndarray) -> np.ndarray:
    """Map encoder features through the projection head onto the unit sphere."""
    F = np.asarray(features, dtype=np.float64)
    if F.ndim != 2 or F.shape[1] != params.spec.feature_dim:
        raise ValueError(
            f"features must be (batch, {params.spec.feature_dim}), got {F.shape}")
    p = unpack(params)
    U, _ = _head_forward(p, F)
    keys, _, _ = _normalize_rows(U)
    return keys


def softmax(logits: np.ndarray) -> np.ndarray:
    Z = logits - logits.max(axis=1, keepdims=True)  # overflow safety
    E = np.exp(Z)
    return E / E.sum(axis=1, keepdims=True)


def _check_labels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(
            f"labels must be in [0, {num_classes}), got range "
            f"[{labels.min()}, {labels.max()}]")
    return labels


def ce_loss(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean cross-entropy, computed in log space."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = _check_labels(labels, logits.shape[1])
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return float(-log_probs[np.arange(len(labels)), labels].mean())


def ce_loss_and_grad(params: ParamVector, batch: Batch):
    """Cross-entropy on a labeled batch and its exact flat gradient."""
    if batch.labels is None:
        raise ValueError("cross-entropy needs a labeled batch")
    spec = params.spec
    labels = _check_labels(batch.labels, spec.num_classes)
    p = unpack(params)
    F, cache = _encoder_forward(p, spec, batch.inputs)
    logits = F @ p["cls_W"] + p["cls_b"]
    loss = ce_loss(logits, labels)

    n = len(batch)
    dlogits = softmax(logits)
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n

    grad = zero_grad(spec)
    gv = _views(spec, grad)
    gv["cls_W"] += F.T @ dlogits
    gv["cls_b"] += dlogits.sum(axis=0)
    dF = dlogits @ p["cls_W"].T
    _encoder_backward(p, spec, cache, dF, gv)
    return loss, grad


def keys_with_grad_cache(params: ParamVector, X: np.ndarray):
    """Forward pass to unit keys, keeping every cache needed for backprop."""
    p = unpack(params)
    F, enc_cache = _encoder_forward(p, params.spec, X)
    U, head_cache = _head_forward(p, F)
    keys, U_eff, norms = _normalize_rows(U)
    return keys, (p, enc_cache, head_cache, keys, norms)


def backprop_keys(params: ParamVector, cache, dkeys: np.ndarray, grad: np.ndarray):
    """Accumulate d(loss)/d(theta) into ``grad`` given d(loss)/d(keys)."""
    p, enc_cache, head_cache, keys, norms = cache
    # q = u/|u|  =>  dU = (dq - (dq.q) q) / |u|
    dU = (dkeys - (dkeys * keys).sum(axis=1, keepdims=True) * keys) / norms[:, None]
    gv = _views(params.spec, grad)
    dF = _head_backward(p, head_cache, dU, gv)
    _encoder_backward(p, params.spec, enc_cache, dF, gv)


def sgd_step(params: ParamVector, grad: np.ndarray, lr: float) -> ParamVector:
    """Plain gradient step; refuses non-finite gradients."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.values.shape:
        raise ValueError(f"gradient length {grad.shape} != P {params.values.shape}")
    if not np.all(np.isfinite(grad)):
        raise TrainingDivergenceError("non-finite gradient entries; refusing step")
    if lr < 0:
        raise ValueError("learning rate must be >= 0")
    return ParamVector(params.values - lr * grad, params.spec)


def finite_difference_gradient(loss_fn, params: ParamVector, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar loss over every coordinate.

    Independent oracle used by the test suite; O(2P) loss evaluations.
    """
    base = params.values
    grad = np.empty(base.size)
    work = base.copy()
    for i in range(base.size):
        orig = work[i]
        work[i] = orig + step
        f_plus = loss_fn(ParamVector(work.copy(), params.spec))
        work[i] = orig - step
        f_minus = loss_fn(ParamVector(work.copy(), params.spec))
        work[i] = orig
        grad[i] = (f_plus - f_minus) / (2.0 * step)
    return grad
