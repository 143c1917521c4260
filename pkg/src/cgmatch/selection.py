"""Dynamic thresholds and the three-way easy/ambiguous/hard batch partition.

Per batch: easy = confidence at or above the confidence threshold; ambiguous =
below it but with a count-gap at or above the gap threshold; hard = the rest.
Both thresholds track exponential moving averages of per-batch means; the
self-adaptive variant scales the confidence threshold per class.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

GLOBAL_EMA = "global_ema"
SELF_ADAPTIVE = "self_adaptive"
FIXED = "fixed"
MODES = (GLOBAL_EMA, SELF_ADAPTIVE, FIXED)


def clamp_threshold(value: float, lo: float, hi: float) -> float:
    if lo > hi:
        raise ValueError(f"bad clamp range: {lo} > {hi}")
    return min(hi, max(lo, value))


@dataclass
class ThresholdState:
    """Confidence and count-gap thresholds, updated once per iteration.

    Thresholds start unset and are seeded with the first batch's means, after
    which they follow the EMA recurrence. In fixed mode the confidence
    threshold stays pinned at `fixed_conf`.
    """

    mode: str = GLOBAL_EMA
    momentum: float = 0.999
    conf_threshold: float | None = None
    gap_threshold: float | None = None
    conf_clamp: tuple[float, float] | None = None
    fixed_conf: float | None = None
    mean_conf_ema: float | None = field(default=None, repr=False)  # self-adaptive only
    class_prob_ema: np.ndarray | None = field(default=None, repr=False)  # self-adaptive only

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown thresholding mode {self.mode!r}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.conf_clamp is not None:
            lo, hi = self.conf_clamp
            if lo > hi:
                raise ValueError(f"bad clamp range: {lo} > {hi}")
        if self.mode == FIXED:
            if self.fixed_conf is None:
                raise ValueError("fixed mode needs fixed_conf")
            self.conf_threshold = self._clamped(self.fixed_conf)

    def _clamped(self, value: float) -> float:
        if self.conf_clamp is None:
            return value
        return clamp_threshold(value, *self.conf_clamp)

    @property
    def ready(self) -> bool:
        if self.gap_threshold is None:
            return False
        if self.mode == SELF_ADAPTIVE:
            return self.mean_conf_ema is not None
        return self.conf_threshold is not None


def batch_means(max_probs: np.ndarray, gaps: np.ndarray) -> tuple[float, float]:
    """Mean top-probability and mean count-gap over one unlabeled batch."""
    max_probs = np.asarray(max_probs, dtype=np.float64)
    gaps = np.asarray(gaps, dtype=np.float64)
    if max_probs.size == 0:
        raise ValueError("cannot take batch means of an empty batch")
    if max_probs.shape != gaps.shape:
        raise ValueError(f"misaligned arrays: {max_probs.shape} vs {gaps.shape}")
    return float(max_probs.mean()), float(gaps.mean())


def _ema(prev: float | None, current: float, momentum: float) -> float:
    if prev is None:
        return current
    return momentum * prev + (1.0 - momentum) * current


def ema_update(state: ThresholdState, mean_conf: float, mean_gap: float) -> ThresholdState:
    """Move both thresholds toward the batch means (global / fixed modes)."""
    if not 0.0 <= mean_conf <= 1.0:
        raise ValueError(f"mean confidence {mean_conf} outside [0, 1]")
    if mean_gap < 0.0:
        raise ValueError(f"mean count-gap {mean_gap} is negative")
    if state.mode != FIXED:
        state.conf_threshold = state._clamped(_ema(state.conf_threshold, mean_conf, state.momentum))
    state.gap_threshold = _ema(state.gap_threshold, mean_gap, state.momentum)
    return state


def sat_thresholds(state: ThresholdState, probs: np.ndarray) -> np.ndarray:
    """Self-adaptive update: track an EMA of the batch mean confidence and of
    the batch mean probability per class, then scale the global threshold by
    each class's relative EMA probability. Returns the per-class thresholds."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise ValueError("probs must be a non-empty [B, K] matrix")
    if not np.allclose(probs.sum(axis=1), 1.0, atol=1e-6):
        raise ValueError("probability rows must sum to 1")
    mean_conf = float(probs.max(axis=1).mean())
    state.mean_conf_ema = _ema(state.mean_conf_ema, mean_conf, state.momentum)
    batch_class_mean = probs.mean(axis=0)
    if state.class_prob_ema is None:
        state.class_prob_ema = batch_class_mean
    else:
        state.class_prob_ema = (
            state.momentum * state.class_prob_ema + (1.0 - state.momentum) * batch_class_mean
        )
    return class_conf_thresholds(state)


def class_conf_thresholds(state: ThresholdState) -> np.ndarray:
    """Current per-class confidence thresholds under self-adaptive mode."""
    if state.mean_conf_ema is None or state.class_prob_ema is None:
        raise ValueError("self-adaptive state not initialized yet")
    scaled = (state.class_prob_ema / state.class_prob_ema.max()) * state.mean_conf_ema
    if state.conf_clamp is not None:
        lo, hi = state.conf_clamp
        scaled = np.clip(scaled, lo, hi)
    return scaled


def update_thresholds(
    state: ThresholdState, probs: np.ndarray, max_probs: np.ndarray, gaps: np.ndarray
) -> tuple[float, float]:
    """One per-iteration threshold update; returns the batch means it used."""
    mean_conf, mean_gap = batch_means(max_probs, gaps)
    if state.mode == SELF_ADAPTIVE:
        sat_thresholds(state, probs)
        state.gap_threshold = _ema(state.gap_threshold, mean_gap, state.momentum)
    else:
        ema_update(state, mean_conf, mean_gap)
    return mean_conf, mean_gap


@dataclass
class Partition:
    """Disjoint easy/ambiguous/hard assignment of one unlabeled batch, with
    the pseudo-label attached to every selected sample."""

    ids: np.ndarray
    easy_rows: np.ndarray
    ambiguous_rows: np.ndarray
    hard_rows: np.ndarray
    easy_labels: np.ndarray
    ambiguous_labels: np.ndarray

    @property
    def easy(self) -> list[tuple[int, int]]:
        return [
            (int(i), int(l)) for i, l in zip(self.ids[self.easy_rows], self.easy_labels)
        ]

    @property
    def ambiguous(self) -> list[tuple[int, int]]:
        return [
            (int(i), int(l))
            for i, l in zip(self.ids[self.ambiguous_rows], self.ambiguous_labels)
        ]

    @property
    def hard(self) -> list[int]:
        return [int(i) for i in self.ids[self.hard_rows]]

    @property
    def n_easy(self) -> int:
        return self.easy_rows.size

    @property
    def n_ambiguous(self) -> int:
        return self.ambiguous_rows.size

    @property
    def n_hard(self) -> int:
        return self.hard_rows.size


def _membership_masks(
    max_probs: np.ndarray, pseudo_labels: np.ndarray, gaps: np.ndarray, state: ThresholdState
) -> tuple[np.ndarray, np.ndarray]:
    if state.mode == SELF_ADAPTIVE:
        thr = class_conf_thresholds(state)[pseudo_labels]
    else:
        thr = state.conf_threshold
    easy = max_probs >= thr
    ambiguous = ~easy & (gaps >= state.gap_threshold)
    return easy, ambiguous


def partition(
    batch_ids, max_probs, pseudo_labels, gaps, state: ThresholdState
) -> Partition:
    """Split one batch by the current thresholds. Inclusion is >= on both the
    confidence and the count-gap test, strict < otherwise."""
    ids = np.asarray(batch_ids, dtype=np.int64)
    max_probs = np.asarray(max_probs, dtype=np.float64)
    pseudo_labels = np.asarray(pseudo_labels, dtype=np.int64)
    gaps = np.asarray(gaps, dtype=np.float64)
    if not (ids.shape == max_probs.shape == pseudo_labels.shape == gaps.shape):
        raise ValueError("batch arrays are misaligned")
    if not state.ready:
        raise ValueError("threshold state not initialized; update thresholds first")
    easy_mask, ambiguous_mask = _membership_masks(max_probs, pseudo_labels, gaps, state)
    hard_mask = ~easy_mask & ~ambiguous_mask
    easy_rows = np.flatnonzero(easy_mask)
    ambiguous_rows = np.flatnonzero(ambiguous_mask)
    return Partition(
        ids=ids,
        easy_rows=easy_rows,
        ambiguous_rows=ambiguous_rows,
        hard_rows=np.flatnonzero(hard_mask),
        easy_labels=pseudo_labels[easy_rows],
        ambiguous_labels=pseudo_labels[ambiguous_rows],
    )


def tag_subsets(
    max_probs, pseudo_labels, gaps, state: ThresholdState
) -> np.ndarray:
    """Evaluation-side labeling of arbitrary samples by the partition rule."""
    max_probs = np.asarray(max_probs, dtype=np.float64)
    pseudo_labels = np.asarray(pseudo_labels, dtype=np.int64)
    gaps = np.asarray(gaps, dtype=np.float64)
    easy_mask, ambiguous_mask = _membership_masks(max_probs, pseudo_labels, gaps, state)
    tags = np.full(max_probs.shape, "hard", dtype=object)
    tags[ambiguous_mask] = "ambiguous"
    tags[easy_mask] = "easy"
    return tags
