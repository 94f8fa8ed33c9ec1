"""Synthetic datasets, two-view augmentation, corruption and multiview batch
assembly.

Randomness comes only from :func:`stream`, which keys numpy's counter-based
Philox generator with a ``SeedSequence`` built from ``(seed, *path)``.
Each (epoch, batch, role) gets its own independent stream, so batches can
be rebuilt in any order without touching a shared generator.
"""

import csv
import zlib
from dataclasses import dataclass

import numpy as np

from .losses import MultiviewBatch

def stream(seed, *path):
    """Independent Philox generator for ``seed`` and an integer/str path."""
    key = [int(seed) & 0xFFFFFFFF]
    for part in path:
        if isinstance(part, str):
            part = zlib.crc32(part.encode("utf-8"))
        key.append(int(part) & 0xFFFFFFFF)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


class ParseError(ValueError):
    def __init__(self, line, message):
        self.line = line
        super().__init__(f"line {line}: {message}")


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    is_train: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.intp)
        is_train = np.asarray(self.is_train, dtype=bool)
        if X.ndim != 2 or y.shape != (X.shape[0],) or is_train.shape != y.shape:
            raise ValueError("X must be (n, d) with one label and split tag per row")
        if not np.all(np.isfinite(X)):
            raise ValueError("dataset contains non-finite entries")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "is_train", is_train)

    @property
    def num_classes(self):
        return int(self.y.max()) + 1

    @property
    def dim(self):
        return self.X.shape[1]

    def train(self):
        return self.X[self.is_train], self.y[self.is_train]

    def heldout(self):
        return self.X[~self.is_train], self.y[~self.is_train]

    def check_trainable(self):
        _, ytr = self.train()
        counts = np.bincount(ytr, minlength=self.num_classes)
        if np.any(counts < 2):
            raise ValueError(f"every class needs >= 2 training samples, got {counts.tolist()}")


def stratified_split(y, train_frac=0.8, rng=None):
    """Per-class shuffle and take the first ``train_frac`` of each class."""
    y = np.asarray(y)
    is_train = np.zeros(len(y), dtype=bool)
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        if rng is not None:
            idx = rng.permutation(idx)
        is_train[idx[: int(round(train_frac * len(idx)))]] = True
    return is_train


def make_blobs(classes, per_class, dim, separation, spread, seed):
    """Isotropic Gaussian blobs around centers on a sphere of radius ``separation``."""
    if classes < 2 or per_class < 2 or dim < 2:
        raise ValueError("need classes >= 2, per_class >= 2, dim >= 2")
    rng = stream(seed, "data")
    centers = rng.normal(size=(classes, dim))
    centers *= separation / np.linalg.norm(centers, axis=1, keepdims=True)
    y = np.repeat(np.arange(classes), per_class)
    X = centers[y] + spread * rng.normal(size=(len(y), dim))
    ds = Dataset(X, y, stratified_split(y, 0.8, rng))
    ds.check_trainable()
    return ds


def nearest_centroid_accuracy(ds):
    """Held-out accuracy of a nearest-class-mean classifier fit on the train split."""
    Xtr, ytr = ds.train()
    Xte, yte = ds.heldout()
    cents = np.stack([Xtr[ytr == c].mean(axis=0) for c in range(ds.num_classes)])
    d = ((Xte[:, None, :] - cents[None]) ** 2).sum(-1)
    return float(np.mean(np.argmin(d, axis=1) == yte))


@dataclass(frozen=True)
class AugmentSpec:
    noise_sigma: float = 0.0
    mask_prob: float = 0.0
    scale_jitter: float = 0.0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0 <= self.mask_prob <= 1:
            raise ValueError("mask_prob must be in [0, 1]")
        if self.scale_jitter < 0:
            raise ValueError("scale_jitter must be >= 0")


def augment(x, spec, rng):
    """Scale jitter, then additive Gaussian noise, then coordinate masking.

    ``x`` may be one vector or a matrix of rows (each row gets its own draw).
    """
    x = np.asarray(x, dtype=np.float64)
    X = np.atleast_2d(x)
    n, d = X.shape
    scale = rng.uniform(1 - spec.scale_jitter, 1 + spec.scale_jitter, size=(n, 1))
    out = X * scale if spec.scale_jitter else X.copy()
    if spec.noise_sigma:
        out = out + spec.noise_sigma * rng.normal(size=(n, d))
    if spec.mask_prob:
        out = np.where(rng.random(size=(n, d)) < spec.mask_prob, 0.0, out)
    return out[0] if x.ndim == 1 else out


@dataclass(frozen=True)
class MultiviewInputs:
    """``2N`` augmented inputs laid out as (view a, view b) per source."""

    X: np.ndarray
    labels: np.ndarray  # loss labels: class ids, or source ids when unlabeled
    class_labels: np.ndarray
    view_pair: np.ndarray
    source: np.ndarray

    def to_batch(self, z):
        return MultiviewBatch.build(z, self.labels, self.view_pair)


def assemble_multiview_batch(X, y, indices, spec, rng, labels=True):
    """Two augmented views of each selected sample, interleaved.

    Rows ``2k`` and ``2k + 1`` come from ``indices[k]``.  With
    ``labels=False`` the loss labels are source ids, so each anchor's only
    positive is its other view.
    """
    indices = np.asarray(indices, dtype=np.intp)
    n = len(indices)
    if n < 1 or (labels and n < 2):
        raise ValueError("supervised batches need N >= 2 source samples")
    src = np.repeat(indices, 2)
    views = augment(np.asarray(X)[src], spec, rng)
    cls = np.asarray(y)[src]
    loss_labels = cls if labels else np.repeat(np.arange(n), 2)
    return MultiviewInputs(views, loss_labels, cls, np.arange(2 * n) ^ 1, src)


def corrupt(x, severity, base_sigma, rng):
    """Additive Gaussian noise with std ``severity * base_sigma`` (severity 0 = clean)."""
    if severity not in range(0, 6):
        raise ValueError(f"severity must be an integer in 0..5, got {severity}")
    x = np.asarray(x, dtype=np.float64)
    if severity == 0:
        return x.copy()
    return x + severity * base_sigma * rng.normal(size=x.shape)


def save_csv(ds, path):
    """Write ``X`` and ``y`` (last column); the split is not stored."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for row, label in zip(ds.X, ds.y):
            fh.write(",".join(repr(float(v)) for v in row) + f",{int(label)}\n")


def load_csv(path, train_frac=0.8, seed=0):
    """Read comma-separated floats with an integer label in the last column."""
    rows, labels = [], []
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh), start=1):
            if not rec:
                raise ParseError(lineno, "empty row")
            if len(rec) < 2:
                raise ParseError(lineno, "need at least one feature and a label")
            if rows and len(rec) != len(rows[0]) + 1:
                raise ParseError(lineno, f"expected {len(rows[0]) + 1} fields, got {len(rec)}")
            try:
                feats = [float(v) for v in rec[:-1]]
                label = int(rec[-1])
            except ValueError as exc:
                raise ParseError(lineno, str(exc)) from None
            if label < 0 or not np.all(np.isfinite(feats)):
                raise ParseError(lineno, "labels must be >= 0 and features finite")
            rows.append(feats)
            labels.append(label)
    if not rows:
        raise ParseError(0, "file is empty")
    y = np.array(labels, dtype=np.intp)
    return Dataset(np.array(rows), y, stratified_split(y, train_frac, stream(seed, "data")))
