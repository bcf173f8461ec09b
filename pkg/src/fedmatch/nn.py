"""Flat-parameter MLP substrate with analytic gradients.

Every model is a fully-connected net whose weights and biases live in one
flat float64 vector.  Keeping parameters flat lets the rest of the package
treat aggregation, delta-coding and the sigma/psi additive split as plain
vector arithmetic, independent of layer structure.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

# Floor applied to probabilities before any logarithm.
PROB_FLOOR = 1e-12

# Learning-rate schedule: divide by 3 after 5 consecutive non-improving
# validation losses.
LR_DECAY_FACTOR = 3.0
LR_PATIENCE = 5

_ACTIVATIONS = ("tanh", "relu")


@dataclass(frozen=True)
class ModelArch:
    """Layer widths (input dim, hidden dims..., class count) and nonlinearity."""

    layer_dims: tuple[int, ...]
    activation: str = "tanh"

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) < 2:
            raise ValueError("need at least input and output dimensions")
        if any(d <= 0 for d in dims):
            raise ValueError(f"layer dims must be positive, got {dims}")
        if dims[-1] < 2:
            raise ValueError("need at least 2 classes")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def n_classes(self) -> int:
        return self.layer_dims[-1]

    @property
    def n_params(self) -> int:
        dims = self.layer_dims
        return sum((fan_in + 1) * fan_out for fan_in, fan_out in zip(dims, dims[1:]))


@dataclass(frozen=True)
class ParamVector:
    """Flat weight vector tied to an architecture."""

    values: np.ndarray
    arch: ModelArch

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise ValueError("parameter vector must be one-dimensional")
        if values.shape[0] != self.arch.n_params:
            raise ValueError(
                f"expected {self.arch.n_params} parameters, got {values.shape[0]}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("parameter vector contains non-finite values")
        object.__setattr__(self, "values", values)

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.arch)


@dataclass(frozen=True)
class ProbDist:
    """Batch of categorical distributions, one simplex row per instance."""

    rows: np.ndarray

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.float64)
        if rows.ndim != 2:
            raise ValueError("probability matrix must be two-dimensional")
        if np.any(rows <= 0.0) or np.any(rows > 1.0):
            raise ValueError("probabilities must lie in (0, 1]")
        if np.any(np.abs(rows.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("rows must sum to 1 within 1e-9")
        object.__setattr__(self, "rows", rows)

    @property
    def n_rows(self) -> int:
        return self.rows.shape[0]

    @property
    def n_classes(self) -> int:
        return self.rows.shape[1]


@dataclass(frozen=True)
class OptimState:
    """Learning rate plus the plateau bookkeeping that drives its decay."""

    lr: float
    patience_counter: int = 0
    best_val_loss: Optional[float] = None

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.patience_counter < 0:
            raise ValueError("patience counter must be non-negative")


def init_params(arch: ModelArch, rng: np.random.Generator) -> ParamVector:
    """Variance-scaled weight init (std 1/sqrt(fan_in)), zero biases."""
    chunks = []
    for fan_in, fan_out in zip(arch.layer_dims, arch.layer_dims[1:]):
        w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=fan_in * fan_out)
        chunks.append(w)
        chunks.append(np.zeros(fan_out))
    return ParamVector(np.concatenate(chunks), arch)


def zero_params(arch: ModelArch) -> ParamVector:
    return ParamVector(np.zeros(arch.n_params), arch)


def _unpack_flat(arch: ModelArch, flat: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    layers = []
    offset = 0
    for fan_in, fan_out in zip(arch.layer_dims, arch.layer_dims[1:]):
        w = flat[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        b = flat[offset : offset + fan_out]
        offset += fan_out
        layers.append((w, b))
    return layers


def unpack_params(params: ParamVector) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a flat vector into per-layer (weight matrix, bias) views."""
    return _unpack_flat(params.arch, params.values)


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(z)
    return np.maximum(z, 0.0)


def _activate_grad(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    return (z > 0.0).astype(np.float64)


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    # keep rows strictly positive so downstream logs stay finite
    return np.maximum(probs, 1e-300)


def _forward_cached(params: ParamVector, batch: np.ndarray):
    """Forward pass returning softmax rows plus per-layer caches for backprop."""
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("batch must be a 2-D feature matrix")
    if x.shape[1] != params.arch.input_dim:
        raise ValueError(
            f"batch has {x.shape[1]} features, arch expects {params.arch.input_dim}"
        )
    layers = unpack_params(params)
    caches = []
    a = x
    for i, (w, b) in enumerate(layers):
        z = a @ w + b
        caches.append((a, z))
        if i < len(layers) - 1:
            a = _activate(z, params.arch.activation)
    probs = _softmax(caches[-1][1])
    return probs, caches


def _backward_from_dlogits(
    params: ParamVector, caches, dlogits: np.ndarray
) -> np.ndarray:
    """Backprop a gradient at the logits down to a flat parameter gradient."""
    layers = unpack_params(params)
    grad = np.zeros(params.arch.n_params)
    grad_layers = _unpack_flat(params.arch, grad)
    g = dlogits
    for i in reversed(range(len(layers))):
        a_in, _ = caches[i]
        gw, gb = grad_layers[i]
        gw += a_in.T @ g
        gb += g.sum(axis=0)
        if i > 0:
            w, _ = layers[i]
            _, z_prev = caches[i - 1]
            g = (g @ w.T) * _activate_grad(z_prev, params.arch.activation)
    return grad


def forward(params: ParamVector, batch: np.ndarray) -> ProbDist:
    """Softmax predictions for a feature batch. Pure and deterministic."""
    probs, _ = _forward_cached(params, batch)
    return ProbDist(probs)


def cross_entropy(targets: np.ndarray, preds: ProbDist) -> float:
    """Mean over rows of -sum_c target_c * ln(pred_c), preds floored at 1e-12."""
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != preds.rows.shape:
        raise ValueError(
            f"targets shape {targets.shape} != predictions shape {preds.rows.shape}"
        )
    if targets.shape[0] == 0:
        return 0.0
    logq = np.log(np.maximum(preds.rows, PROB_FLOOR))
    return float(-(targets * logq).sum(axis=1).mean())


def kl_divergence(p: ProbDist, q: ProbDist) -> float:
    """Mean over rows of KL(p || q) with q floored at 1e-12."""
    if p.rows.shape != q.rows.shape:
        raise ValueError(f"shape mismatch {p.rows.shape} vs {q.rows.shape}")
    logq = np.log(np.maximum(q.rows, PROB_FLOOR))
    logp = np.log(p.rows)
    return float((p.rows * (logp - logq)).sum(axis=1).mean())


def one_hot(dist: ProbDist) -> np.ndarray:
    """Argmax per row as one-hot vectors; ties go to the lowest class index."""
    out = np.zeros_like(dist.rows)
    out[np.arange(dist.n_rows), dist.rows.argmax(axis=1)] = 1.0
    return out


def one_hot_labels(labels: Sequence[int], n_classes: int) -> np.ndarray:
    """Class indices to a one-hot matrix."""
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], n_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def ce_value_and_grad(
    params: ParamVector, batch: np.ndarray, targets: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its flat parameter gradient."""
    targets = np.asarray(targets, dtype=np.float64)
    probs, caches = _forward_cached(params, batch)
    if targets.shape != probs.shape:
        raise ValueError(
            f"targets shape {targets.shape} != predictions shape {probs.shape}"
        )
    n = probs.shape[0]
    value = float(-(targets * np.log(np.maximum(probs, PROB_FLOOR))).sum(axis=1).mean())
    dlogits = (probs - targets) / n
    return value, _backward_from_dlogits(params, caches, dlogits)


def kl_value_and_grad(
    params: ParamVector, batch: np.ndarray, reference: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean KL(reference || model) and its gradient through the model side only."""
    ref = reference.rows if isinstance(reference, ProbDist) else np.asarray(reference)
    probs, caches = _forward_cached(params, batch)
    if ref.shape != probs.shape:
        raise ValueError(f"reference shape {ref.shape} != predictions {probs.shape}")
    n = probs.shape[0]
    logq = np.log(np.maximum(probs, PROB_FLOOR))
    logp = np.log(np.maximum(ref, PROB_FLOOR))
    value = float((ref * (logp - logq)).sum(axis=1).mean())
    dlogits = (probs - ref) / n
    return value, _backward_from_dlogits(params, caches, dlogits)


LOSS_SPECS = ("cross_entropy", "kl_to_reference", "l1", "squared_l2")


def gradient(loss_spec: str, params, batch=None, target=None) -> np.ndarray:
    """Analytic gradient for one of the supported loss shapes.

    cross_entropy     mean CE of forward(params, batch) against one-hot target
    kl_to_reference   mean KL(target || forward(params, batch)), model side only
    l1                sign subgradient of ||params||_1 (params may be raw array)
    squared_l2        d/d(params) of ||target - params||^2
    """
    if loss_spec == "cross_entropy":
        _, g = ce_value_and_grad(params, batch, target)
        return g
    if loss_spec == "kl_to_reference":
        _, g = kl_value_and_grad(params, batch, target)
        return g
    if loss_spec == "l1":
        vec = params.values if isinstance(params, ParamVector) else np.asarray(params)
        return np.sign(vec)
    if loss_spec == "squared_l2":
        vec = params.values if isinstance(params, ParamVector) else np.asarray(params)
        ref = target.values if isinstance(target, ParamVector) else np.asarray(target)
        if vec.shape != ref.shape:
            raise ValueError("squared_l2 requires equal-length vectors")
        return 2.0 * (vec - ref)
    raise ValueError(f"unknown loss spec {loss_spec!r}, expected one of {LOSS_SPECS}")


def lr_step(state: OptimState, val_loss: float) -> OptimState:
    """Plateau schedule: counter resets on improvement, lr /= 3 at 5 misses."""
    if not np.isfinite(val_loss):
        raise ValueError("validation loss must be finite")
    if state.best_val_loss is None or val_loss < state.best_val_loss:
        return OptimState(state.lr, 0, float(val_loss))
    counter = state.patience_counter + 1
    if counter >= LR_PATIENCE:
        return OptimState(state.lr / LR_DECAY_FACTOR, 0, state.best_val_loss)
    return OptimState(state.lr, counter, state.best_val_loss)
