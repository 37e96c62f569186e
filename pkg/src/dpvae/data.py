"""Datasets: synthetic generators, seeded stratified splits, CSV/binary I/O."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ParameterError
from .nn import Rng

log = logging.getLogger(__name__)


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray | None = None
    record_shape: tuple | None = None
    ids: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim != 2:
            raise ParameterError(f"records must be a 2-D (n, features) array, got {self.x.shape}")
        if self.y is not None:
            self.y = np.asarray(self.y, dtype=np.int64)
            if self.y.shape != (len(self.x),):
                raise ParameterError("one label per record required")
        if self.record_shape is not None:
            self.record_shape = tuple(int(s) for s in self.record_shape)
            if math.prod(self.record_shape) != self.x.shape[1]:
                raise ParameterError(f"record shape {self.record_shape} != {self.x.shape[1]} features")
        if self.ids is None:
            self.ids = np.arange(len(self.x))
        else:
            self.ids = np.asarray(self.ids)

    def __len__(self) -> int:
        return len(self.x)

    @property
    def num_classes(self) -> int:
        return 0 if self.y is None or self.y.size == 0 else int(self.y.max()) + 1

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.x[idx], None if self.y is None else self.y[idx], self.record_shape, self.ids[idx])

    def replace_x(self, x) -> "Dataset":
        return Dataset(x, self.y, self.record_shape, self.ids)


def _part_sizes(n: int, fractions) -> list[int]:
    raw = [f * n for f in fractions]
    sizes = [int(math.floor(r)) for r in raw]
    # largest remainders get the leftover records; ties go to the earlier part
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def check_fractions(fractions) -> tuple:
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigurationError(f"split fractions must be three positive numbers summing to 1, got {fractions}")
    return fractions


def split(data: Dataset, fractions=(0.5, 0.2, 0.3), seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    """Shuffle with ``seed`` and cut into disjoint train/val/test parts.

    Labelled data is split per class so every part keeps the class mix; when
    a class has fewer records than parts, the split falls back to an
    unstratified cut.
    """
    fractions = check_fractions(fractions)
    rng = Rng(seed).child("split")
    n = len(data)
    perm = rng.permutation(n)
    parts: list[list[int]] = [[], [], []]
    stratify = data.y is not None
    if stratify:
        counts = np.bincount(data.y)
        if np.any((counts > 0) & (counts < 3)):
            log.warning("a class has fewer than 3 records; falling back to an unstratified split")
            stratify = False
    if stratify:
        # exact global sizes first, then hand each class its share of every part
        targets = _part_sizes(n, fractions)
        labels = data.y[perm]
        for c in np.unique(labels):
            members = perm[labels == c]
            sizes = _part_sizes(len(members), fractions)
            start = 0
            for k, s in enumerate(sizes):
                parts[k].extend(members[start : start + s].tolist())
                start += s
        _rebalance(parts, targets)
    else:
        sizes = _part_sizes(n, fractions)
        start = 0
        for k, s in enumerate(sizes):
            parts[k] = perm[start : start + s].tolist()
            start += s
    return tuple(data.subset(sorted(p)) for p in parts)


def _rebalance(parts: list[list[int]], targets: list[int]) -> None:
    # per-class rounding can drift from the global sizes by a few records
    for k in range(len(parts)):
        while len(parts[k]) > targets[k]:
            j = next(i for i in range(len(parts)) if len(parts[i]) < targets[i])
            parts[j].append(parts[k].pop())


def _blob_templates(classes: int, side: int, rng: Rng) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side] / (side - 1)
    templates = np.empty((classes, side, side))
    for c in range(classes):
        img = np.zeros((side, side))
        for _ in range(3):
            cy, cx = rng.uniform(0.15, 0.85, 2)
            r = rng.uniform(0.08, 0.2)
            img += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
        templates[c] = img / img.max()
    return templates


def _series_templates(classes: int, timesteps: int, channels: int, rng: Rng) -> np.ndarray:
    t = np.linspace(0.0, 1.0, timesteps)
    templates = np.empty((classes, timesteps, channels))
    for c in range(classes):
        for ch in range(channels):
            if (c + ch) % 2 == 0:
                freq = rng.uniform(1.0, 4.0) * (c + 1)
                templates[c, :, ch] = 0.7 * np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
            else:
                cut = rng.uniform(0.2, 0.8)
                level = rng.uniform(0.3, 0.8)
                templates[c, :, ch] = np.where(t < cut, -level, level)
    return templates


def synth_dataset(spec: dict, seed: int = 0) -> Dataset:
    """Labelled toy data standing in for image or sensor benchmarks.

    ``blob-images``: ``classes`` templates of Gaussian blobs on a
    ``side x side`` grid plus pixel noise, clipped to [0, 1].
    ``toy-series``: per-class sinusoid/step patterns over ``timesteps`` x
    ``channels`` plus noise, clipped to [-1, 1], flattened row-major.
    """
    spec = dict(spec)
    kind = spec.pop("generator", "blob-images")
    classes = int(spec.pop("classes", 4))
    n = int(spec.pop("n", 400))
    noise = float(spec.pop("noise", 0.1))
    rng = Rng(seed).child("synth")
    tmpl_rng = rng.child("templates")
    labels = np.arange(n) % classes
    labels = labels[rng.child("labels").permutation(n)]
    noise_rng = rng.child("noise")
    if kind == "blob-images":
        side = int(spec.pop("side", 16))
        templates = _blob_templates(classes, side, tmpl_rng)
        x = templates[labels] + noise * noise_rng.normal((n, side, side))
        x = np.clip(x, 0.0, 1.0).reshape(n, -1)
        shape = (side, side)
    elif kind == "toy-series":
        timesteps = int(spec.pop("timesteps", 50))
        channels = int(spec.pop("channels", 2))
        templates = _series_templates(classes, timesteps, channels, tmpl_rng)
        x = templates[labels] + noise * noise_rng.normal((n, timesteps, channels))
        x = np.clip(x, -1.0, 1.0).reshape(n, -1)
        shape = (timesteps, channels)
    else:
        raise ConfigurationError(f"unknown generator {kind!r}")
    if spec:
        raise ConfigurationError(f"unknown synth options: {sorted(spec)}")
    return Dataset(x, labels, shape)


def save_csv(path, data: Dataset) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        cols = [f"f{i}" for i in range(data.x.shape[1])]
        w.writerow((["label"] if data.y is not None else []) + cols)
        for i, row in enumerate(data.x):
            vals = [repr(float(v)) for v in row]
            w.writerow(([int(data.y[i])] if data.y is not None else []) + vals)


def load_csv(path, record_shape=None) -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParameterError(f"{path} is empty")
    header, body = rows[0], rows[1:]
    arr = np.array([[float(v) for v in r] for r in body], dtype=np.float64).reshape(len(body), len(header))
    if header and header[0] == "label":
        return Dataset(arr[:, 1:], arr[:, 0].astype(np.int64), record_shape)
    return Dataset(arr, None, record_shape)


def save_binary(path, data: Dataset) -> tuple[str, str]:
    """Write ``<stem>.json`` manifest and ``<stem>.bin`` little-endian f64 rows.

    With labels, each row is ``[label, features...]`` and ``label_offset`` is 0.
    """
    stem = os.fspath(path)
    if stem.endswith((".json", ".bin")):
        stem = stem.rsplit(".", 1)[0]
    block = data.x if data.y is None else np.column_stack([data.y.astype(np.float64), data.x])
    manifest = {
        "shape": list(block.shape),
        "dtype": "f64le",
        "label_offset": None if data.y is None else 0,
        "record_shape": None if data.record_shape is None else list(data.record_shape),
    }
    with open(stem + ".json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    np.ascontiguousarray(block).astype("<f8").tofile(stem + ".bin")
    return stem + ".json", stem + ".bin"


def load_binary(path) -> Dataset:
    stem = os.fspath(path)
    if stem.endswith((".json", ".bin")):
        stem = stem.rsplit(".", 1)[0]
    with open(stem + ".json") as fh:
        manifest = json.load(fh)
    if manifest.get("dtype") != "f64le":
        raise ConfigurationError(f"unsupported dtype {manifest.get('dtype')!r}")
    block = np.fromfile(stem + ".bin", dtype="<f8").astype(np.float64).reshape(manifest["shape"])
    off = manifest.get("label_offset")
    shape = manifest.get("record_shape")
    if off is None:
        return Dataset(block, None, shape)
    y = block[:, off].astype(np.int64)
    x = np.delete(block, off, axis=1)
    return Dataset(x, y, shape)


def load_dataset(path, record_shape=None) -> Dataset:
    p = os.fspath(path)
    if p.endswith(".csv"):
        return load_csv(p, record_shape)
    return load_binary(p)


def save_dataset(path, data: Dataset):
    p = os.fspath(path)
    if p.endswith(".csv"):
        save_csv(p, data)
        return (p,)
    return save_binary(p, data)
