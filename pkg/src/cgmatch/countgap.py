"""Per-sample cumulative pseudo-label tallies and the count-gap statistic.

Each unlabeled sample owns one queue of K non-negative integers, incremented
whenever the sample is pseudo-labeled. The count-gap of a queue is the gap
between its largest and second-largest entries; tied maxima give 0. Queues
only ever accumulate once initialized.
"""

from __future__ import annotations

import numpy as np


def count_gap(counts) -> int | np.ndarray:
    """Largest minus second-largest tally. Accepts one queue (1-D) or a
    stack of queues (2-D, one per row)."""
    arr = np.asarray(counts)
    k = arr.shape[-1]
    if k < 2:
        raise ValueError("count-gap needs at least two classes")
    top2 = np.partition(arr, k - 2, axis=-1)[..., -2:]
    gap = top2[..., -1] - top2[..., -2]
    if arr.ndim == 1:
        return int(gap)
    return gap


class CountTracker:
    """Count queues for a fixed roster of unlabeled sample ids."""

    def __init__(self, sample_ids, n_classes: int):
        if n_classes < 2:
            raise ValueError(f"need at least 2 classes, got {n_classes}")
        ids = np.asarray(sample_ids, dtype=np.int64)
        if ids.size != np.unique(ids).size:
            raise ValueError("sample ids must be unique")
        self.sample_ids = ids
        self.n_classes = n_classes
        self.counts = np.zeros((ids.size, n_classes), dtype=np.int64)
        # contiguous ids get an arithmetic fast path; anything else a dict
        lo = int(ids.min()) if ids.size else 0
        if ids.size and np.array_equal(ids, np.arange(lo, lo + ids.size)):
            self._offset: int | None = lo
            self._row_of: dict[int, int] | None = None
        else:
            self._offset = None
            self._row_of = {int(s): i for i, s in enumerate(ids)}

    def _rows(self, ids) -> np.ndarray:
        ids = np.atleast_1d(np.asarray(ids, dtype=np.int64))
        if self._offset is not None:
            rows = ids - self._offset
            bad = (rows < 0) | (rows >= self.counts.shape[0])
            if bad.any():
                raise ValueError(f"unknown unlabeled sample id {int(ids[bad][0])}")
            return rows
        try:
            return np.array([self._row_of[int(i)] for i in ids], dtype=np.int64)
        except KeyError as exc:
            raise ValueError(f"unknown unlabeled sample id {exc.args[0]}") from None

    def _check_labels(self, labels: np.ndarray) -> None:
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise ValueError(f"pseudo-label outside [0, {self.n_classes})")

    def record_prediction(self, sample_id: int, pseudo_label: int) -> None:
        row = self._rows(sample_id)[0]
        label = int(pseudo_label)
        self._check_labels(np.array([label]))
        self.counts[row, label] += 1

    def record_batch(self, ids, pseudo_labels) -> None:
        rows = self._rows(ids)
        labels = np.asarray(pseudo_labels, dtype=np.int64)
        self._check_labels(labels)
        np.add.at(self.counts, (rows, labels), 1)

    def queue_of(self, sample_id: int) -> np.ndarray:
        return self.counts[self._rows(sample_id)[0]].copy()

    def count_gaps(self, ids) -> np.ndarray:
        return count_gap(self.counts[self._rows(ids)])

    def all_gaps(self) -> np.ndarray:
        return count_gap(self.counts)

    def save(self, path) -> None:
        np.savez(path, sample_ids=self.sample_ids, counts=self.counts)

    @classmethod
    def load(cls, path) -> "CountTracker":
        with np.load(path) as data:
            tracker = cls(data["sample_ids"], int(data["counts"].shape[1]))
            tracker.counts[:] = data["counts"]
        return tracker


def warmup_initialize(
    tracker: CountTracker, prediction_log, warmup_iters: int, window: int = 1000
) -> None:
    """Rebuild every queue from the last `window` warm-up iterations of the
    prediction log: records of (iteration, ids, predicted classes). Samples
    absent from the window keep an all-zero queue."""
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    tracker.counts[:] = 0
    start = warmup_iters - window
    for t, ids, preds in prediction_log:
        if t >= warmup_iters:
            raise ValueError(f"prediction log contains post-warm-up iteration {t}")
        if t >= start:
            tracker.record_batch(ids, preds)
