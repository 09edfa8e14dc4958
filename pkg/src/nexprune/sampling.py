"""Datasets and scoring-batch assembly.

Three strategies build a scoring batch: uniform random draws, class-stratified
k-means representatives (the real sample nearest each per-class centroid),
and pure uniform noise over the input value range.  ``noise`` goes beyond
random/k-means sampling; it exists to probe the data-agnostic behaviour of
the scores with inputs that carry no task information at all.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .layers import DTYPE

DATASET_FORMAT = "nexprune.dataset/v1"
STRATEGIES = ("random", "kmeans", "noise", "full")


@dataclass
class Dataset:
    samples: np.ndarray
    labels: np.ndarray
    class_count: int
    name: str = "dataset"

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=DTYPE)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.samples) != len(self.labels):
            raise ValueError(f"{len(self.samples)} samples but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError("label outside [0, class_count)")

    def __len__(self):
        return len(self.labels)

    @property
    def input_shape(self):
        return tuple(self.samples.shape[1:])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.samples[idx], self.labels[idx], self.class_count, self.name)


@dataclass
class SamplingSpec:
    strategy: str = "random"
    batch_size: int = 60
    per_class_k: int | None = None
    seed: int = 0
    max_iter: int = 100
    value_range: tuple[float, float] | None = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown sampling strategy {self.strategy!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignment: np.ndarray
    objective_trace: list = field(default_factory=list)
    iterations: int = 0


def kmeans(points: np.ndarray, k: int, seed: int = 0, max_iter: int = 100) -> KMeansResult:
    """Lloyd's algorithm with seeded Forgy initialisation on distinct points.

    ``objective_trace[t]`` is the within-cluster sum of squares after the
    assignment step of iteration ``t``; it never increases.
    """
    x = np.asarray(points, dtype=np.float64).reshape(len(points), -1)
    if k < 1 or k > len(x):
        raise ValueError(f"cannot form {k} clusters from {len(x)} points")
    rng = np.random.default_rng(seed)
    _, first = np.unique(x, axis=0, return_index=True)
    pool = np.sort(first)
    if len(pool) >= k:
        init = rng.choice(pool, size=k, replace=False)
    else:
        init = np.concatenate([pool, rng.choice(len(x), size=k - len(pool), replace=False)])
    centroids = x[np.sort(init)].copy()
    assignment = None
    trace = []
    it = 0
    for it in range(1, max_iter + 1):
        d2 = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new = d2.argmin(axis=1)
        trace.append(float(d2[np.arange(len(x)), new].sum()))
        if assignment is not None and np.array_equal(new, assignment):
            break
        assignment = new
        for j in range(k):
            members = x[assignment == j]
            if len(members):
                centroids[j] = members.mean(axis=0)
    return KMeansResult(centroids, assignment, trace, it)


def kmeans_representatives(points: np.ndarray, k: int, seed: int = 0, max_iter: int = 100) -> np.ndarray:
    """Indices of the points nearest each k-means centroid, one per cluster."""
    res = kmeans(points, k, seed=seed, max_iter=max_iter)
    x = np.asarray(points, dtype=np.float64).reshape(len(points), -1)
    chosen = []
    for j in range(k):
        d = ((x - res.centroids[j]) ** 2).sum(axis=1)
        order = np.argsort(d, kind="stable")
        pick = next((int(i) for i in order if int(i) not in chosen), int(order[0]))
        chosen.append(pick)
    return np.asarray(chosen, dtype=np.int64)


def sample_batch(dataset: Dataset, spec: SamplingSpec) -> np.ndarray:
    """Assemble a scoring batch according to ``spec``."""
    rng = np.random.default_rng(spec.seed)
    n = spec.batch_size
    if spec.strategy == "full":
        return full_dataset_reference(dataset)
    if spec.strategy == "noise":
        lo, hi = spec.value_range or (float(dataset.samples.min()), float(dataset.samples.max()))
        return rng.uniform(lo, hi, size=(n,) + dataset.input_shape).astype(DTYPE)
    if spec.strategy == "random":
        if n > len(dataset):
            raise ValueError(f"batch of {n} requested from {len(dataset)} samples")
        idx = rng.choice(len(dataset), size=n, replace=False)
        return dataset.samples[idx].copy()
    # kmeans
    k = spec.per_class_k or n // dataset.class_count
    if k * dataset.class_count != n:
        raise ValueError(
            f"kmeans needs per_class_k * class_count == batch_size ({k}*{dataset.class_count} != {n})")
    picks = []
    for c in range(dataset.class_count):
        members = np.flatnonzero(dataset.labels == c)
        if len(members) < k:
            raise ValueError(f"class {c} has {len(members)} samples, fewer than per_class_k={k}")
        local = kmeans_representatives(dataset.samples[members], k, seed=spec.seed, max_iter=spec.max_iter)
        picks.append(members[local])
    return dataset.samples[np.concatenate(picks)].copy()


def full_dataset_reference(dataset: Dataset) -> np.ndarray:
    return dataset.samples


# -- synthetic data -------------------------------------------------------

def make_blobs_dataset(n: int = 2000, classes: int = 6, shape=(3, 12, 12), seed: int = 0,
                       blobs_per_class: int = 3, jitter: float = 1.2, noise: float = 0.35,
                       template_seed: int | None = None, name: str = "blobs") -> Dataset:
    """Gaussian-blob images: each class is a fixed constellation of coloured blobs.

    A sample re-draws every blob centre with ``jitter`` pixels of Gaussian
    displacement, scales its amplitude by a random factor in [0.6, 1.4] and
    adds i.i.d. pixel noise.  ``template_seed`` fixes the class templates so
    train and test splits drawn with different ``seed`` share them.
    """
    c, h, w = shape
    trng = np.random.default_rng(seed if template_seed is None else template_seed)
    centers = trng.uniform([1, 1], [h - 2, w - 2], size=(classes, blobs_per_class, 2))
    colors = trng.uniform(-1, 1, size=(classes, blobs_per_class, c))
    sigmas = trng.uniform(1.0, 2.2, size=(classes, blobs_per_class))

    rng = np.random.default_rng(seed)
    labels = np.arange(n) % classes
    rng.shuffle(labels)
    yy, xx = np.mgrid[0:h, 0:w]
    out = np.empty((n, c, h, w), dtype=np.float64)
    for i, lab in enumerate(labels):
        img = np.zeros((c, h, w))
        for b in range(blobs_per_class):
            cy, cx = centers[lab, b] + rng.normal(0, jitter, 2)
            amp = rng.uniform(0.6, 1.4)
            g = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigmas[lab, b] ** 2))
            img += amp * colors[lab, b][:, None, None] * g[None]
        out[i] = img + rng.normal(0, noise, (c, h, w))
    return Dataset(out.astype(DTYPE), labels, classes, name)


def make_train_test(n_train=2000, n_test=1000, classes=6, shape=(3, 12, 12), seed=0, **kw):
    train = make_blobs_dataset(n_train, classes, shape, seed=seed * 2 + 1, template_seed=seed, name="train", **kw)
    test = make_blobs_dataset(n_test, classes, shape, seed=seed * 2 + 2, template_seed=seed, name="test", **kw)
    return train, test


# -- file IO ---------------------------------------------------------------

def save_dataset(dataset: Dataset, path) -> Path:
    """JSON manifest plus little-endian raw blobs (float32 samples, int32 labels)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    (root / "samples.f32").write_bytes(np.ascontiguousarray(dataset.samples, dtype="<f4").tobytes())
    (root / "labels.i32").write_bytes(np.ascontiguousarray(dataset.labels, dtype="<i4").tobytes())
    manifest = {
        "format": DATASET_FORMAT,
        "name": dataset.name,
        "count": len(dataset),
        "sample_shape": list(dataset.input_shape),
        "class_count": dataset.class_count,
        "samples": "samples.f32",
        "labels": "labels.i32",
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return root


def load_dataset(path) -> Dataset:
    root = Path(path)
    if root.is_file():
        root = root.parent
    m = json.loads((root / "manifest.json").read_text())
    samples = np.frombuffer((root / m["samples"]).read_bytes(), dtype="<f4")
    labels = np.frombuffer((root / m["labels"]).read_bytes(), dtype="<i4")
    samples = samples.reshape([m["count"]] + m["sample_shape"]).astype(DTYPE)
    return Dataset(samples, labels.astype(np.int64), m["class_count"], m.get("name", root.name))


def load_labeled_binary(path, sample_shape, class_count: int, scale: float = 1 / 255.0) -> Dataset:
    """Read fixed-size records of one uint8 label byte followed by uint8 pixels (CHW order)."""
    raw = np.frombuffer(Path(path).read_bytes(), dtype=np.uint8)
    rec = 1 + int(np.prod(sample_shape))
    if raw.size % rec:
        raise ValueError(f"file size {raw.size} is not a multiple of the record size {rec}")
    raw = raw.reshape(-1, rec)
    samples = (raw[:, 1:].astype(np.float32) * scale).reshape((-1,) + tuple(sample_shape))
    return Dataset(samples, raw[:, 0].astype(np.int64), class_count, Path(path).stem)
