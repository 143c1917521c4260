"""Dense ReLU classifier with hand-rolled reverse-mode gradients.

Everything runs in float64. The network maps feature rows to class logits;
softmax and its vector-Jacobian product live here as well, so loss code can
stay in probability space and hand gradients back through
``softmax_vjp`` -> ``backward``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class NonFiniteError(RuntimeError):
    """A NaN/Inf appeared where the training path cannot continue."""


@dataclass
class ModelParams:
    """Weights and biases of a dense ReLU net: hidden layers, then a linear head."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def n_classes(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.input_dim, *(w.shape[1] for w in self.weights))

    def copy(self) -> "ModelParams":
        return ModelParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def all_finite(self) -> bool:
        return all(np.isfinite(w).all() for w in self.weights) and all(
            np.isfinite(b).all() for b in self.biases
        )


@dataclass
class GradientSet:
    """One gradient tensor per parameter tensor, shape-congruent with its model."""

    d_weights: list[np.ndarray]
    d_biases: list[np.ndarray]

    def add_scaled(self, other: "GradientSet", scale: float = 1.0) -> "GradientSet":
        for dw, ow in zip(self.d_weights, other.d_weights):
            dw += scale * ow
        for db, ob in zip(self.d_biases, other.d_biases):
            db += scale * ob
        return self

    def all_finite(self) -> bool:
        return all(np.isfinite(g).all() for g in self.d_weights) and all(
            np.isfinite(g).all() for g in self.d_biases
        )

    def max_abs(self) -> float:
        parts = [np.abs(g).max(initial=0.0) for g in self.d_weights]
        parts += [np.abs(g).max(initial=0.0) for g in self.d_biases]
        return float(max(parts))


@dataclass
class ForwardCache:
    """Per-layer inputs and hidden ReLU masks from one forward pass."""

    inputs: list[np.ndarray]
    relu_masks: list[np.ndarray]


def init_mlp(input_dim: int, hidden: tuple[int, ...], n_classes: int, rng) -> ModelParams:
    """Seeded uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)] per layer."""
    if input_dim < 1 or n_classes < 2:
        raise ValueError(f"bad architecture: input_dim={input_dim}, n_classes={n_classes}")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    sizes = (input_dim, *hidden, n_classes)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return ModelParams(weights, biases)


def _check_input(params: ModelParams, features: np.ndarray) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError(f"features must be a non-empty [B, D] matrix, got shape {x.shape}")
    if x.shape[1] != params.input_dim:
        raise ValueError(
            f"feature dim {x.shape[1]} does not match model input dim {params.input_dim}"
        )
    return x


def _check_logits(logits: np.ndarray) -> np.ndarray:
    if not np.isfinite(logits).all():
        raise NonFiniteError("non-finite logits; parameters or inputs have diverged")
    return logits


def forward(params: ModelParams, features: np.ndarray) -> np.ndarray:
    """Logits for a batch of feature rows."""
    x = _check_input(params, features)
    n_layers = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        x = x @ w
        x += b
        if i < n_layers - 1:
            np.maximum(x, 0.0, out=x)
    return _check_logits(x)


def forward_cached(params: ModelParams, features: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Forward pass that keeps what ``backward`` needs."""
    x = _check_input(params, features)
    inputs, relu_masks = [], []
    n_layers = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(x)
        z = x @ w
        z += b
        if i < n_layers - 1:
            relu_masks.append(z > 0.0)
            np.maximum(z, 0.0, out=z)
        x = z
    return _check_logits(x), ForwardCache(inputs, relu_masks)


def backward(params: ModelParams, cache: ForwardCache, output_grad: np.ndarray) -> GradientSet:
    """Parameter gradients of a scalar loss, given its gradient w.r.t. the logits."""
    n_layers = len(params.weights)
    if len(cache.inputs) != n_layers or len(cache.relu_masks) != n_layers - 1:
        raise ValueError("cache does not match model: wrong number of layers")
    for x, w in zip(cache.inputs, params.weights):
        if x.shape[1] != w.shape[0]:
            raise ValueError("cache does not match model: layer shape mismatch")
    delta = np.asarray(output_grad, dtype=np.float64)
    batch = cache.inputs[0].shape[0]
    if delta.shape != (batch, params.n_classes):
        raise ValueError(
            f"output_grad shape {delta.shape} does not match logits ({batch}, {params.n_classes})"
        )
    d_weights: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    d_biases: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    for i in range(n_layers - 1, -1, -1):
        d_weights[i] = cache.inputs[i].T @ delta
        d_biases[i] = delta.sum(axis=0)
        if i > 0:
            delta = delta @ params.weights[i].T
            delta *= cache.relu_masks[i - 1]
    return GradientSet(d_weights, d_biases)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max-subtraction; accepts a single vector too."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.isfinite(z).all():
        raise ValueError("softmax input contains non-finite values")
    squeeze = z.ndim == 1
    if squeeze:
        z = z[None, :]
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)
    return p[0] if squeeze else p


def softmax_vjp(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. softmax outputs back to the logits."""
    p = np.asarray(probs, dtype=np.float64)
    d = np.asarray(dprobs, dtype=np.float64)
    if p.shape != d.shape:
        raise ValueError(f"probs shape {p.shape} != grad shape {d.shape}")
    inner = (d * p).sum(axis=-1, keepdims=True)
    return p * (d - inner)


def cosine_lr(t: int, total_iters: int, base_lr: float) -> float:
    """Cosine-decayed learning rate: base_lr * cos(7*pi*t / (16*total))."""
    if total_iters < 1:
        raise ValueError(f"total_iters must be >= 1, got {total_iters}")
    if not 0 <= t <= total_iters:
        raise ValueError(f"iteration {t} outside [0, {total_iters}]")
    return base_lr * math.cos(7.0 * math.pi * t / (16.0 * total_iters))


@dataclass
class OptimizerState:
    """SGD-with-momentum buffers plus the cosine schedule bookkeeping."""

    velocity_w: list[np.ndarray]
    velocity_b: list[np.ndarray]
    base_lr: float
    momentum: float
    t: int
    total_iters: int


def init_optimizer(
    params: ModelParams, base_lr: float, momentum: float, total_iters: int
) -> OptimizerState:
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must be in [0, 1), got {momentum}")
    if base_lr <= 0.0:
        raise ValueError(f"base_lr must be positive, got {base_lr}")
    if total_iters < 1:
        raise ValueError(f"total_iters must be >= 1, got {total_iters}")
    return OptimizerState(
        velocity_w=[np.zeros_like(w) for w in params.weights],
        velocity_b=[np.zeros_like(b) for b in params.biases],
        base_lr=base_lr,
        momentum=momentum,
        t=0,
        total_iters=total_iters,
    )


def sgd_step(
    params: ModelParams, grads: GradientSet, state: OptimizerState
) -> tuple[ModelParams, OptimizerState]:
    """v <- momentum*v + g; theta <- theta - lr_t * v. Mutates params/state in place."""
    for w, dw, vw in zip(params.weights, grads.d_weights, state.velocity_w):
        if w.shape != dw.shape or w.shape != vw.shape:
            raise ValueError(f"gradient shape {dw.shape} incongruent with parameter {w.shape}")
    if not grads.all_finite():
        raise NonFiniteError(
            f"non-finite gradient at iteration {state.t} (max |g| = {grads.max_abs()})"
        )
    lr = cosine_lr(state.t, state.total_iters, state.base_lr)
    for w, dw, vw in zip(params.weights, grads.d_weights, state.velocity_w):
        vw *= state.momentum
        vw += dw
        w -= lr * vw
    for b, db, vb in zip(params.biases, grads.d_biases, state.velocity_b):
        vb *= state.momentum
        vb += db
        b -= lr * vb
    state.t += 1
    if not params.all_finite():
        raise NonFiniteError(f"non-finite parameters after optimizer step {state.t}")
    return params, state


def save_params(params: ModelParams, path) -> None:
    arrays = {}
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        arrays[f"w{i}"] = w
        arrays[f"b{i}"] = b
    np.savez(path, n_layers=len(params.weights), **arrays)


def load_params(path) -> ModelParams:
    with np.load(path) as data:
        n = int(data["n_layers"])
        weights = [data[f"w{i}"] for i in range(n)]
        biases = [data[f"b{i}"] for i in range(n)]
    return ModelParams(weights, biases)
