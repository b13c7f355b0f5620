"""Synthetic classification sets and CSV persistence."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

KINDS = ("two_moons", "spirals", "blobs", "blobs_shifted_ood")


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    split: np.ndarray  # "train" / "test" per row
    num_classes: int
    provenance: dict = field(default_factory=dict)
    feature_min: np.ndarray | None = None
    feature_max: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.split = np.asarray(self.split, dtype=object)
        if self.features.ndim != 2 or len(self.features) != len(self.labels) or len(self.split) != len(self.labels):
            raise DatasetError("features, labels and split must have matching rows")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError("labels out of range")
        if self.feature_min is None and len(self.features):
            self.feature_min = self.features.min(axis=0)
            self.feature_max = self.features.max(axis=0)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def part(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        mask = self.split == name
        return self.features[mask], self.labels[mask]

    @property
    def train(self) -> tuple[np.ndarray, np.ndarray]:
        return self.part("train")

    @property
    def test(self) -> tuple[np.ndarray, np.ndarray]:
        return self.part("test")

    @property
    def input_range(self) -> np.ndarray:
        return self.feature_max - self.feature_min


def _two_moons(n, noise, rng):
    n_out = n // 2
    n_in = n - n_out
    t_out = np.linspace(0, math.pi, n_out)
    t_in = np.linspace(0, math.pi, n_in)
    x = np.concatenate([np.c_[np.cos(t_out), np.sin(t_out)], np.c_[1 - np.cos(t_in), 0.5 - np.sin(t_in)]])
    y = np.r_[np.zeros(n_out, dtype=np.int64), np.ones(n_in, dtype=np.int64)]
    return x + noise * rng.standard_normal(x.shape), y, 2


def _spirals(n, noise, rng, classes=2, turns=1.5):
    y = np.arange(n) % classes
    r = rng.uniform(0.1, 1.0, size=n)
    angle = turns * 2 * math.pi * r + 2 * math.pi * y / classes
    x = np.c_[r * np.cos(angle), r * np.sin(angle)]
    return x + noise * rng.standard_normal(x.shape), y.astype(np.int64), classes


def blob_centers(classes: int = 3, radius: float = 2.0) -> np.ndarray:
    a = 2 * math.pi * np.arange(classes) / classes
    return np.c_[radius * np.cos(a), radius * np.sin(a)]


def _blobs(n, noise, rng, classes=3, offset=None):
    y = np.arange(n) % classes
    centers = blob_centers(classes)
    if offset is not None:
        centers = centers + np.asarray(offset, dtype=np.float64)
    x = centers[y] + noise * rng.standard_normal((n, 2))
    return x, y.astype(np.int64), classes


def gen_dataset(
    kind: str,
    n: int,
    noise: float,
    seed: int,
    test_fraction: float = 0.4,
    ood_offset: float | None = None,
) -> Dataset:
    """Generate a shuffled dataset with a train/test split.

    ``blobs_shifted_ood`` reuses the blob layout with every center translated by
    ``ood_offset`` (default ``10 * noise``) along the negative first axis, so the
    shifted clusters sit beyond the boundary between classes 1 and 2; all of its rows
    are tagged ``test``.
    """
    if n < 2:
        raise DatasetError("n must be >= 2")
    if noise < 0:
        raise DatasetError("noise must be >= 0")
    rng = np.random.default_rng(seed)
    if kind == "two_moons":
        x, y, c = _two_moons(n, noise, rng)
    elif kind == "spirals":
        x, y, c = _spirals(n, noise, rng)
    elif kind == "blobs":
        x, y, c = _blobs(n, noise, rng)
    elif kind == "blobs_shifted_ood":
        shift = 10 * noise if ood_offset is None else ood_offset
        x, y, c = _blobs(n, noise, rng, offset=(-shift, 0.0))
    else:
        raise DatasetError(f"unknown dataset kind {kind!r}")
    perm = rng.permutation(n)
    x, y = x[perm], y[perm]
    split = np.full(n, "train", dtype=object)
    if kind == "blobs_shifted_ood":
        split[:] = "test"
    else:
        n_test = int(round(test_fraction * n))
        split[n - n_test :] = "test"
    prov = {"generator": kind, "n": n, "noise": noise, "seed": seed}
    if kind == "blobs_shifted_ood":
        prov["offset"] = shift
    return Dataset(x, y, split, c, prov)


def save_csv(ds: Dataset, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{i}" for i in range(ds.dim)] + ["label", "split"])
        for row, label, tag in zip(ds.features, ds.labels, ds.split):
            w.writerow([format(v, ".17g") for v in row] + [int(label), tag])


def load_csv(path, num_classes: int | None = None) -> Dataset:
    """Read ``f0,...,f{d-1},label[,split]``; rows without a split are ``train``."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DatasetError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if "label" not in header:
        raise DatasetError(f"{path}: missing column 'label'")
    li = header.index("label")
    feat_cols = [i for i, h in enumerate(header) if h.startswith("f") and h[1:].isdigit()]
    if [header[i] for i in feat_cols] != [f"f{j}" for j in range(len(feat_cols))] or not feat_cols:
        raise DatasetError(f"{path}: feature columns must be f0..f{{d-1}}")
    si = header.index("split") if "split" in header else None
    feats, labels, split = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise DatasetError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
        try:
            feats.append([float(row[i]) for i in feat_cols])
            labels.append(int(row[li]))
        except ValueError as exc:
            raise DatasetError(f"{path}:{lineno}: {exc}") from None
        tag = row[si] if si is not None else "train"
        if tag not in ("train", "test"):
            raise DatasetError(f"{path}:{lineno}: bad split tag {tag!r}")
        split.append(tag)
    if not labels:
        raise DatasetError(f"{path}: dataset has no rows")
    if num_classes is None:
        num_classes = max(max(labels) + 1, 2)
    return Dataset(np.array(feats), np.array(labels), np.array(split, dtype=object), num_classes, {"source": str(path)})
