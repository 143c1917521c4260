"""Shared test helpers: parameter flattening and the central finite-difference
gradient oracle every loss is checked against."""

from __future__ import annotations

import numpy as np

from cgmatch import nn


def flatten_params(params: nn.ModelParams) -> np.ndarray:
    parts = []
    for w, b in zip(params.weights, params.biases):
        parts.append(w.ravel())
        parts.append(b.ravel())
    return np.concatenate(parts)


def unflatten_params(vector: np.ndarray, template: nn.ModelParams) -> nn.ModelParams:
    weights, biases = [], []
    pos = 0
    for w, b in zip(template.weights, template.biases):
        weights.append(vector[pos : pos + w.size].reshape(w.shape).copy())
        pos += w.size
        biases.append(vector[pos : pos + b.size].reshape(b.shape).copy())
        pos += b.size
    return nn.ModelParams(weights, biases)


def flatten_grads(grads: nn.GradientSet) -> np.ndarray:
    parts = []
    for dw, db in zip(grads.d_weights, grads.d_biases):
        parts.append(dw.ravel())
        parts.append(db.ravel())
    return np.concatenate(parts)


def central_differences(loss_fn, params: nn.ModelParams, step: float = 1e-5) -> np.ndarray:
    """Independent gradient oracle: central differences over every parameter."""
    theta = flatten_params(params)
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        bumped = theta.copy()
        bumped[i] = theta[i] + step
        hi = loss_fn(unflatten_params(bumped, params))
        bumped[i] = theta[i] - step
        lo = loss_fn(unflatten_params(bumped, params))
        grad[i] = (hi - lo) / (2.0 * step)
    return grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
