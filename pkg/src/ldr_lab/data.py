"""Datasets: MNIST IDX ingestion, Gaussian blobs with a Bayes oracle, batching."""

import csv
import gzip
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


class IdxConsistencyError(ValueError):
    pass


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = "dataset"
    sample_ids: np.ndarray = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.sample_ids is None:
            self.sample_ids = np.arange(len(self.labels), dtype=np.int64)
        if len(self.inputs) != len(self.labels):
            raise ValueError("inputs and labels differ in length")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def feature_shape(self):
        return tuple(self.inputs.shape[1:])


def _open(path):
    with open(path, "rb") as f:
        head = f.read(2)
    return gzip.open(path, "rb") if head == b"\x1f\x8b" else open(path, "rb")


def _read_idx(path, expected_magic):
    with _open(path) as f:
        header = f.read(4)
        if len(header) != 4:
            raise IdxFormatError(f"{path}: file too short for an IDX header")
        (magic,) = struct.unpack(">I", header)
        if magic != expected_magic:
            raise IdxFormatError(
                f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}"
            )
        ndim = magic & 0xFF
        dims = struct.unpack(f">{ndim}I", f.read(4 * ndim))
        raw = f.read()
    count = int(np.prod(dims))
    if len(raw) < count:
        raise IdxFormatError(f"{path}: {len(raw)} payload bytes, header promises {count}")
    return np.frombuffer(raw[:count], dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path, num_classes=10, name="mnist"):
    """Read an IDX image/label pair; pixels scaled to [0, 1].  Gzipped files work too."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IdxConsistencyError(
            f"{images.shape[0]} images but {labels.shape[0]} labels"
        )
    inputs = images.astype(np.float64) / 255.0
    return Dataset(inputs, labels.astype(np.int64), num_classes, name=name,
                   metadata={"images_path": str(images_path), "labels_path": str(labels_path)})


def write_idx(path, array, magic):
    """Write a uint8 array as IDX (used for fixtures and conversions)."""
    array = np.asarray(array, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(f">{array.ndim}I", *array.shape))
        f.write(array.tobytes())


def _find(directory, stem):
    for cand in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        p = os.path.join(directory, cand)
        if os.path.exists(p):
            return p
    raise FileNotFoundError(f"no {stem}[.gz] in {directory}")


def load_mnist(directory):
    """Load the standard train/test IDX files from one directory."""
    train = load_idx(_find(directory, "train-images-idx3-ubyte"),
                     _find(directory, "train-labels-idx1-ubyte"), name="mnist-train")
    test = load_idx(_find(directory, "t10k-images-idx3-ubyte"),
                    _find(directory, "t10k-labels-idx1-ubyte"), name="mnist-test")
    return train, test


def subset(dataset, n, seed):
    """First ``n`` samples after a seeded shuffle; sample ids are renumbered 0..n-1."""
    if n is None or n >= len(dataset):
        return dataset
    idx = np.random.default_rng(seed).permutation(len(dataset))[:n]
    idx.sort()
    meta = dict(dataset.metadata, subset_size=int(n), subset_seed=int(seed))
    return Dataset(dataset.inputs[idx], dataset.labels[idx], dataset.num_classes,
                   name=dataset.name, metadata=meta)


@dataclass
class BlobSpec:
    num_classes: int = 4
    means: list = None
    std: float = 0.5
    samples_per_class: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.means is None:
            # unit circle, evenly spaced
            ang = 2 * np.pi * np.arange(self.num_classes) / self.num_classes
            self.means = np.stack([np.cos(ang), np.sin(ang)], axis=1).round(12).tolist()
        m = np.asarray(self.means, dtype=np.float64)
        if m.shape != (self.num_classes, 2):
            raise ValueError(f"means must be {self.num_classes} points in R^2")
        if not self.std > 0:
            raise ValueError("std must be > 0")
        if len({tuple(r) for r in m.tolist()}) != len(m):
            raise ValueError("blob means must be distinct")
        self.means = m.tolist()


def bayes_accuracy(means, std, n_angles=1 << 16):
    """Accuracy of the nearest-mean rule for equal-prior isotropic Gaussians.

    For class i the correct region is the Voronoi cell of mean i, which is
    star-shaped about that mean.  Along direction theta the cell extends to
    R(theta) = min_j (d_ij / 2) / cos(theta - phi_ij) over neighbours with
    positive cosine; the 2-D Gaussian radial CDF is 1 - exp(-R^2 / 2 s^2),
    leaving a periodic 1-D integral over theta.
    """
    means = np.asarray(means, dtype=np.float64)
    K = len(means)
    theta = (np.arange(n_angles) + 0.5) * (2 * np.pi / n_angles)
    total = 0.0
    for i in range(K):
        reach = np.full(n_angles, np.inf)
        for j in range(K):
            if j == i:
                continue
            d = means[j] - means[i]
            half = 0.5 * math.hypot(d[0], d[1])
            cos = np.cos(theta - math.atan2(d[1], d[0]))
            with np.errstate(divide="ignore"):
                r = np.where(cos > 0, half / np.where(cos > 0, cos, 1.0), np.inf)
            reach = np.minimum(reach, r)
        mass = 1.0 - np.exp(-0.5 * (reach / std) ** 2)
        total += mass.mean()
    return float(total / K)


def make_blobs(spec: BlobSpec, seed_offset=0):
    """Sample isotropic Gaussian blobs; returns (Dataset, bayes_accuracy)."""
    rng = np.random.default_rng([spec.seed, seed_offset])
    means = np.asarray(spec.means)
    n = spec.samples_per_class
    labels = np.repeat(np.arange(spec.num_classes), n)
    x = means[labels] + spec.std * rng.standard_normal((len(labels), 2))
    order = rng.permutation(len(labels))
    ds = Dataset(x[order], labels[order], spec.num_classes, name="blobs",
                 metadata={"std": spec.std, "means": spec.means})
    return ds, bayes_accuracy(means, spec.std)


def write_blobs_csv(dataset, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["x", "y", "label"])
        for (x, y), lab in zip(dataset.inputs, dataset.labels):
            w.writerow([repr(float(x)), repr(float(y)), int(lab)])


def batches(dataset, batch_size, epoch_seed, drop_last=True):
    """Shuffle with a per-epoch seed and slice into (sample_ids, inputs, labels).

    A :class:`~ldr_lab.noise.NoisyDataset` yields its observed labels.
    """
    labels = getattr(dataset, "observed_labels", None)
    if labels is None:
        labels = dataset.labels
    n = len(labels)
    if batch_size > n:
        raise ValueError(f"batch_size {batch_size} exceeds dataset size {n}")
    order = np.random.default_rng(epoch_seed).permutation(n)
    out = []
    for s in range(0, n, batch_size):
        idx = order[s:s + batch_size]
        if drop_last and len(idx) < batch_size:
            break
        out.append((dataset.sample_ids[idx], dataset.inputs[idx], labels[idx]))
    return out
