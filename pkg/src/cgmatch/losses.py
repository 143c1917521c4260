"""Training objectives: supervised CE, the fixed-threshold consistency
baseline, easy-set CE, two-view GCE on the ambiguous set, and the quadratic
ramp for the ambiguous weight.

Every loss has a gradient companion returning d(loss)/d(probabilities) with
the same shape as the probability matrix it differentiates; zeros everywhere
a sample does not participate. Pseudo-label indices and selection masks are
constants as far as gradients are concerned. Probabilities are clamped to
[EPS, 1] before any log or power.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import NonFiniteError
from .selection import Partition

EPS = 1e-12


def _picked(probs: np.ndarray, rows: np.ndarray, labels: np.ndarray) -> np.ndarray:
    return probs[rows, labels]


def supervised_ce(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean cross-entropy of the true labels under `probs` rows."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.shape[0] != labels.shape[0]:
        raise ValueError("probs and labels are misaligned")
    if labels.size and (labels.min() < 0 or labels.max() >= probs.shape[1]):
        raise ValueError("label outside class range")
    picked = np.clip(probs[np.arange(labels.size), labels], EPS, 1.0)
    return float(-np.log(picked).mean())


def supervised_ce_grad(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.size
    grad = np.zeros_like(probs)
    picked = probs[np.arange(n), labels]
    live = picked >= EPS  # clamped entries stop contributing
    grad[np.arange(n), labels] = np.where(live, -1.0 / (n * np.clip(picked, EPS, 1.0)), 0.0)
    return grad


def fixmatch_unsup(probs_weak: np.ndarray, probs_strong: np.ndarray, tau: float) -> float:
    """Confidence-filtered consistency loss: CE of the weak-view argmax under
    the strong view, counted only where top weak confidence strictly exceeds
    `tau`, averaged over the whole batch."""
    pw = np.asarray(probs_weak, dtype=np.float64)
    ps = np.asarray(probs_strong, dtype=np.float64)
    if pw.shape != ps.shape:
        raise ValueError("weak/strong batches are misaligned")
    n = pw.shape[0]
    if n == 0:
        return 0.0
    mask = pw.max(axis=1) > tau
    pseudo = pw.argmax(axis=1)
    picked = np.clip(ps[np.arange(n), pseudo], EPS, 1.0)
    return float((mask * -np.log(picked)).sum() / n)


def fixmatch_unsup_grad(probs_weak: np.ndarray, probs_strong: np.ndarray, tau: float) -> np.ndarray:
    """Gradient w.r.t. the strong-view probabilities (the weak view only
    supplies the detached pseudo-labels and the mask)."""
    pw = np.asarray(probs_weak, dtype=np.float64)
    ps = np.asarray(probs_strong, dtype=np.float64)
    n = pw.shape[0]
    grad = np.zeros_like(ps)
    if n == 0:
        return grad
    mask = pw.max(axis=1) > tau
    pseudo = pw.argmax(axis=1)
    picked = ps[np.arange(n), pseudo]
    live = mask & (picked >= EPS)
    grad[np.arange(n), pseudo] = np.where(
        live, -1.0 / (n * np.clip(picked, EPS, 1.0)), 0.0
    )
    return grad


def easy_ce(part: Partition, probs_strong: np.ndarray) -> float:
    """Mean CE of the attached pseudo-labels under the strong view, over the
    easy set only. Zero (with zero gradient) when the set is empty."""
    if part.n_easy == 0:
        return 0.0
    ps = np.asarray(probs_strong, dtype=np.float64)
    picked = np.clip(_picked(ps, part.easy_rows, part.easy_labels), EPS, 1.0)
    return float(-np.log(picked).mean())


def easy_ce_grad(part: Partition, probs_strong: np.ndarray) -> np.ndarray:
    ps = np.asarray(probs_strong, dtype=np.float64)
    grad = np.zeros_like(ps)
    n = part.n_easy
    if n == 0:
        return grad
    picked = _picked(ps, part.easy_rows, part.easy_labels)
    live = picked >= EPS
    grad[part.easy_rows, part.easy_labels] = np.where(
        live, -1.0 / (n * np.clip(picked, EPS, 1.0)), 0.0
    )
    return grad


def _gce_term(picked: np.ndarray, q: float) -> np.ndarray:
    return (1.0 - np.clip(picked, EPS, 1.0) ** q) / q


def ambiguous_gce(
    part: Partition, probs_weak: np.ndarray, probs_strong: np.ndarray, q: float
) -> float:
    """Generalized cross-entropy over the ambiguous set, summing a weak-view
    and a strong-view term per sample. Both views are live model outputs."""
    if not 0.0 < q <= 1.0:
        raise ValueError(f"gce exponent must be in (0, 1], got {q}")
    if part.n_ambiguous == 0:
        return 0.0
    pw = np.asarray(probs_weak, dtype=np.float64)
    ps = np.asarray(probs_strong, dtype=np.float64)
    picked_w = _picked(pw, part.ambiguous_rows, part.ambiguous_labels)
    picked_s = _picked(ps, part.ambiguous_rows, part.ambiguous_labels)
    return float((_gce_term(picked_w, q) + _gce_term(picked_s, q)).mean())


def _gce_grad_into(grad: np.ndarray, probs: np.ndarray, part: Partition, q: float) -> None:
    picked = _picked(probs, part.ambiguous_rows, part.ambiguous_labels)
    live = picked >= EPS
    # d/dp (1 - p^q)/q = -p^(q-1)
    grad[part.ambiguous_rows, part.ambiguous_labels] = np.where(
        live, -np.clip(picked, EPS, 1.0) ** (q - 1.0) / part.n_ambiguous, 0.0
    )


def ambiguous_gce_grads(
    part: Partition,
    probs_weak: np.ndarray,
    probs_strong: np.ndarray,
    q: float,
    detach_weak: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients w.r.t. (weak, strong) probabilities. `detach_weak` cuts the
    weak-view path for ablations; the default differentiates both views."""
    pw = np.asarray(probs_weak, dtype=np.float64)
    ps = np.asarray(probs_strong, dtype=np.float64)
    grad_w = np.zeros_like(pw)
    grad_s = np.zeros_like(ps)
    if part.n_ambiguous == 0:
        return grad_w, grad_s
    if not detach_weak:
        _gce_grad_into(grad_w, pw, part, q)
    _gce_grad_into(grad_s, ps, part, q)
    return grad_w, grad_s


def ambiguous_weight(t: int, warmup_iters: int, total_iters: int) -> float:
    """Quadratic ramp of the ambiguous-loss weight: 0 at the end of warm-up,
    1 at the final iteration."""
    if warmup_iters >= total_iters:
        raise ValueError(f"warmup_iters {warmup_iters} must be < total_iters {total_iters}")
    if t < warmup_iters:
        raise ValueError(f"ambiguous weight undefined during warm-up (t={t} < {warmup_iters})")
    if t > total_iters:
        raise ValueError(f"iteration {t} outside schedule (total {total_iters})")
    frac = (t - warmup_iters) / (total_iters - warmup_iters)
    return frac * frac


@dataclass
class LossBreakdown:
    """Per-iteration loss components and their weights."""

    supervised: float
    easy: float
    ambiguous: float
    easy_weight: float
    ambiguous_weight: float
    total: float
    n_easy: int
    n_ambiguous: int


def total_loss(
    supervised: float,
    easy: float,
    ambiguous: float,
    easy_weight: float,
    ambiguous_weight: float,
    n_easy: int = 0,
    n_ambiguous: int = 0,
) -> LossBreakdown:
    total = supervised + easy_weight * easy + ambiguous_weight * ambiguous
    breakdown = LossBreakdown(
        supervised=float(supervised),
        easy=float(easy),
        ambiguous=float(ambiguous),
        easy_weight=float(easy_weight),
        ambiguous_weight=float(ambiguous_weight),
        total=float(total),
        n_easy=n_easy,
        n_ambiguous=n_ambiguous,
    )
    if not np.isfinite(total):
        raise NonFiniteError(f"non-finite loss: {breakdown}")
    return breakdown
