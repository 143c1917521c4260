"""Seeded synthetic classification datasets with labeled/unlabeled/test splits,
plus the weak/strong stochastic augmentations used for consistency training.

The unlabeled pool's true labels ride along for evaluation-only diagnostics.
The training loop works off ``Dataset.train_view()``, which does not carry
them, so nothing on the training path can read a gold label.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np


@dataclass
class TrainView:
    """What the training loop is allowed to see: features, labels for the
    labeled pool only, and stable sample ids."""

    x_labeled: np.ndarray
    y_labeled: np.ndarray
    labeled_ids: np.ndarray
    x_unlabeled: np.ndarray
    unlabeled_ids: np.ndarray
    k: int
    d: int


@dataclass
class Dataset:
    kind: str
    k: int
    d: int
    seed: int
    feature_scale: float
    x_labeled: np.ndarray
    y_labeled: np.ndarray
    labeled_ids: np.ndarray
    x_unlabeled: np.ndarray
    unlabeled_ids: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    test_ids: np.ndarray
    _gold_unlabeled: np.ndarray = field(repr=False, default=None)  # type: ignore[assignment]

    @property
    def n_labeled(self) -> int:
        return self.x_labeled.shape[0]

    @property
    def n_unlabeled(self) -> int:
        return self.x_unlabeled.shape[0]

    @property
    def n_test(self) -> int:
        return self.x_test.shape[0]

    def train_view(self) -> TrainView:
        return TrainView(
            x_labeled=self.x_labeled,
            y_labeled=self.y_labeled,
            labeled_ids=self.labeled_ids,
            x_unlabeled=self.x_unlabeled,
            unlabeled_ids=self.unlabeled_ids,
            k=self.k,
            d=self.d,
        )

    def eval_gold(self) -> np.ndarray:
        """True labels of the unlabeled pool. Evaluation-side diagnostics only;
        never hand these to anything that feeds a parameter update."""
        return self._gold_unlabeled.copy()


def _simplex_centers(k: int, dim: int, spread: float, rng: np.random.Generator) -> np.ndarray:
    """k equidistant cluster means with circumradius `spread`, randomly oriented."""
    if dim < k - 1:
        raise ValueError(f"dim={dim} too small for {k} equidistant centers (need >= {k - 1})")
    eye = np.eye(k)
    centered = eye - eye.mean(axis=0)
    q, _ = np.linalg.qr(centered.T)
    verts = centered @ q[:, : k - 1]
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    emb = np.zeros((k, dim))
    emb[:, : k - 1] = verts
    rot, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    return spread * emb @ rot.T


def make_blobs(
    k: int,
    labels_per_class: int,
    n_unlabeled: int,
    n_test: int,
    spread: float,
    seed: int,
    dim: int | None = None,
) -> Dataset:
    """Unit-variance Gaussian clusters; class separation controlled by `spread`."""
    if k < 2:
        raise ValueError(f"need at least 2 classes, got k={k}")
    if labels_per_class < 1:
        raise ValueError(f"labels_per_class must be >= 1, got {labels_per_class}")
    if spread <= 0:
        raise ValueError(f"spread must be positive, got {spread}")
    if dim is None:
        dim = max(2, k - 1)
    rng = np.random.default_rng(seed)
    centers = _simplex_centers(k, dim, spread, rng)

    y_lab = np.repeat(np.arange(k), labels_per_class)
    x_lab = centers[y_lab] + rng.standard_normal((y_lab.size, dim))
    gold = rng.integers(0, k, n_unlabeled)
    x_unl = centers[gold] + rng.standard_normal((n_unlabeled, dim))
    y_test = rng.integers(0, k, n_test)
    x_test = centers[y_test] + rng.standard_normal((n_test, dim))

    n_l = y_lab.size
    return Dataset(
        kind="blobs",
        k=k,
        d=dim,
        seed=seed,
        feature_scale=float(spread),
        x_labeled=x_lab,
        y_labeled=y_lab.astype(np.int64),
        labeled_ids=np.arange(n_l, dtype=np.int64),
        x_unlabeled=x_unl,
        unlabeled_ids=np.arange(n_l, n_l + n_unlabeled, dtype=np.int64),
        x_test=x_test,
        y_test=y_test.astype(np.int64),
        test_ids=np.arange(n_l + n_unlabeled, n_l + n_unlabeled + n_test, dtype=np.int64),
        _gold_unlabeled=gold.astype(np.int64),
    )


def _moon_points(labels: np.ndarray, noise: float, rng: np.random.Generator) -> np.ndarray:
    angles = rng.uniform(0.0, np.pi, labels.size)
    x = np.where(labels == 0, np.cos(angles), 1.0 - np.cos(angles))
    y = np.where(labels == 0, np.sin(angles), 0.5 - np.sin(angles))
    pts = np.stack([x, y], axis=1)
    if noise > 0:
        pts = pts + noise * rng.standard_normal(pts.shape)
    return pts


def make_two_moons(
    n_labeled: int, n_unlabeled: int, n_test: int, noise: float, seed: int
) -> Dataset:
    """Two interleaved half-circle arcs; the classic 2-class shape benchmark."""
    if n_labeled < 2:
        raise ValueError(f"need at least one label per class, got n_labeled={n_labeled}")
    if noise < 0:
        raise ValueError(f"noise must be >= 0, got {noise}")
    rng = np.random.default_rng(seed)
    y_lab = (np.arange(n_labeled) % 2).astype(np.int64)
    x_lab = _moon_points(y_lab, noise, rng)
    gold = rng.integers(0, 2, n_unlabeled).astype(np.int64)
    x_unl = _moon_points(gold, noise, rng)
    y_test = rng.integers(0, 2, n_test).astype(np.int64)
    x_test = _moon_points(y_test, noise, rng)
    return Dataset(
        kind="moons",
        k=2,
        d=2,
        seed=seed,
        feature_scale=1.0,
        x_labeled=x_lab,
        y_labeled=y_lab,
        labeled_ids=np.arange(n_labeled, dtype=np.int64),
        x_unlabeled=x_unl,
        unlabeled_ids=np.arange(n_labeled, n_labeled + n_unlabeled, dtype=np.int64),
        x_test=x_test,
        y_test=y_test,
        test_ids=np.arange(
            n_labeled + n_unlabeled, n_labeled + n_unlabeled + n_test, dtype=np.int64
        ),
        _gold_unlabeled=gold,
    )


# --- augmentations -----------------------------------------------------------


@dataclass
class AugmentConfig:
    """Weak = small isotropic jitter; strong = bigger jitter plus coordinate dropout."""

    sigma_weak: float
    sigma_strong: float
    dropout_rho: float

    def __post_init__(self) -> None:
        if not 0.0 < self.sigma_weak < self.sigma_strong:
            raise ValueError(
                f"need 0 < sigma_weak < sigma_strong, got {self.sigma_weak}, {self.sigma_strong}"
            )
        if not 0.0 <= self.dropout_rho < 1.0:
            raise ValueError(f"dropout_rho must be in [0, 1), got {self.dropout_rho}")


def default_augment(feature_scale: float) -> AugmentConfig:
    return AugmentConfig(
        sigma_weak=0.05 * feature_scale,
        sigma_strong=0.25 * feature_scale,
        dropout_rho=0.2,
    )


def weak_augment(x: np.ndarray, sigma_weak: float, rng: np.random.Generator) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if sigma_weak == 0.0:
        return x.copy()
    return x + sigma_weak * rng.standard_normal(x.shape)


def strong_augment(
    x: np.ndarray, sigma_strong: float, dropout_rho: float, rng: np.random.Generator
) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = x + sigma_strong * rng.standard_normal(x.shape)
    if dropout_rho > 0.0:
        out = out * (rng.random(x.shape) >= dropout_rho)
    return out


# --- batch drawing -----------------------------------------------------------


class RngStreams(NamedTuple):
    """Independent generators per random concern, so that e.g. a supervised-only
    run consumes the labeled streams exactly like a semi-supervised one."""

    labeled_sample: np.random.Generator
    unlabeled_sample: np.random.Generator
    labeled_aug: np.random.Generator
    weak_aug: np.random.Generator
    strong_aug: np.random.Generator


def make_rng_streams(seed: int) -> RngStreams:
    return RngStreams(*(np.random.default_rng([seed, i]) for i in range(5)))


@dataclass
class Batch:
    y_labeled: np.ndarray
    x_labeled_weak: np.ndarray
    unlabeled_ids: np.ndarray
    x_unlabeled_weak: np.ndarray
    x_unlabeled_strong: np.ndarray

    @property
    def n_unlabeled(self) -> int:
        return self.unlabeled_ids.size


def draw_batch(
    view: TrainView,
    batch_labeled: int,
    ratio: int,
    aug: AugmentConfig,
    streams: RngStreams,
) -> Batch:
    """Sample a labeled batch plus ratio-times-larger unlabeled batch with
    fresh weak/strong views. Within a batch the draw is without replacement
    when the pool is big enough, with replacement otherwise."""
    n_l = view.x_labeled.shape[0]
    if n_l == 0:
        raise ValueError("labeled pool is empty")
    idx_l = streams.labeled_sample.choice(n_l, size=batch_labeled, replace=batch_labeled > n_l)
    x_lab = view.x_labeled[idx_l]
    batch_unlabeled = ratio * batch_labeled
    if batch_unlabeled > 0:
        n_u = view.x_unlabeled.shape[0]
        if n_u == 0:
            raise ValueError("unlabeled pool is empty but ratio > 0")
        idx_u = streams.unlabeled_sample.choice(
            n_u, size=batch_unlabeled, replace=batch_unlabeled > n_u
        )
        x_unl = view.x_unlabeled[idx_u]
        ids = view.unlabeled_ids[idx_u]
        x_weak = weak_augment(x_unl, aug.sigma_weak, streams.weak_aug)
        x_strong = strong_augment(x_unl, aug.sigma_strong, aug.dropout_rho, streams.strong_aug)
    else:
        ids = np.empty(0, dtype=np.int64)
        x_weak = np.empty((0, view.d))
        x_strong = np.empty((0, view.d))
    return Batch(
        y_labeled=view.y_labeled[idx_l],
        x_labeled_weak=weak_augment(x_lab, aug.sigma_weak, streams.labeled_aug),
        unlabeled_ids=ids,
        x_unlabeled_weak=x_weak,
        x_unlabeled_strong=x_strong,
    )


# --- on-disk format ----------------------------------------------------------

_FORMAT_TAG = "cgmatch-dataset v1"


def save_dataset(ds: Dataset, path) -> None:
    """Columnar text snapshot. Unlabeled rows carry their true label in the
    `label` column for evaluation-only diagnostics; loaders keep it hidden
    from the train view."""
    path = Path(path)
    lines = [f"# {_FORMAT_TAG}"]
    lines.append(
        f"# kind={ds.kind} k={ds.k} d={ds.d} seed={ds.seed} "
        f"feature_scale={ds.feature_scale!r} "
        f"n_labeled={ds.n_labeled} n_unlabeled={ds.n_unlabeled} n_test={ds.n_test}"
    )
    cols = ["id", "split", "label"] + [f"x{j}" for j in range(ds.d)]
    lines.append("\t".join(cols))

    def rows(ids, split, labels, feats):
        for i in range(ids.size):
            cells = [str(int(ids[i])), split, str(int(labels[i]))]
            cells += [repr(float(v)) for v in feats[i]]
            lines.append("\t".join(cells))

    rows(ds.labeled_ids, "labeled", ds.y_labeled, ds.x_labeled)
    rows(ds.unlabeled_ids, "unlabeled", ds._gold_unlabeled, ds.x_unlabeled)
    rows(ds.test_ids, "test", ds.y_test, ds.x_test)
    path.write_text("\n".join(lines) + "\n")


def load_dataset(path) -> Dataset:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or lines[0] != f"# {_FORMAT_TAG}":
        raise ValueError(f"{path}: not a {_FORMAT_TAG} file")
    meta = {}
    for part in lines[1].lstrip("# ").split():
        key, value = part.split("=", 1)
        meta[key] = value
    k, d = int(meta["k"]), int(meta["d"])
    store: dict[str, list] = {s: [] for s in ("labeled", "unlabeled", "test")}
    for line in lines[3:]:
        if not line:
            continue
        cells = line.split("\t")
        split = cells[1]
        store[split].append(
            (int(cells[0]), int(cells[2]), [float(v) for v in cells[3 : 3 + d]])
        )

    def unpack(split):
        recs = store[split]
        ids = np.array([r[0] for r in recs], dtype=np.int64)
        labels = np.array([r[1] for r in recs], dtype=np.int64)
        feats = np.array([r[2] for r in recs], dtype=np.float64).reshape(len(recs), d)
        return ids, labels, feats

    lab_ids, lab_y, lab_x = unpack("labeled")
    unl_ids, unl_gold, unl_x = unpack("unlabeled")
    test_ids, test_y, test_x = unpack("test")
    return Dataset(
        kind=meta["kind"],
        k=k,
        d=d,
        seed=int(meta["seed"]),
        feature_scale=float(meta["feature_scale"]),
        x_labeled=lab_x,
        y_labeled=lab_y,
        labeled_ids=lab_ids,
        x_unlabeled=unl_x,
        unlabeled_ids=unl_ids,
        x_test=test_x,
        y_test=test_y,
        test_ids=test_ids,
        _gold_unlabeled=unl_gold,
    )
