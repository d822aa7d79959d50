"""Class-dependent label noise: corruption matrices and seeded label flipping."""

import csv
from dataclasses import dataclass, field

import numpy as np

# Standard pair flips from the noisy-label literature.
MNIST_PAIRS = {2: 7, 3: 8, 5: 6, 6: 5, 7: 1}
# truck->automobile, bird->airplane, deer->horse, cat->dog, dog->cat
CIFAR10_PAIRS = {9: 1, 2: 0, 4: 7, 3: 5, 5: 3}


@dataclass
class NoiseSpec:
    kind: str = "symmetric"
    rate: float = 0.0
    num_classes: int = 10
    seed: int = 0
    pair_map: dict = None

    def __post_init__(self):
        if self.kind not in ("symmetric", "asymmetric", "none"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if not 0 <= self.rate < 1:
            raise ValueError(f"noise rate must lie in [0, 1), got {self.rate}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.pair_map is not None:
            pm = {int(k): int(v) for k, v in dict(self.pair_map).items()}
            for src, dst in pm.items():
                if src == dst:
                    raise ValueError(f"pair_map maps class {src} to itself")
                if not (0 <= src < self.num_classes and 0 <= dst < self.num_classes):
                    raise ValueError(f"pair_map entry {src}->{dst} out of range")
            self.pair_map = pm

    def resolved_pairs(self):
        if self.pair_map is not None:
            return self.pair_map
        if self.num_classes == 10:
            return dict(MNIST_PAIRS)
        return {k: (k + 1) % self.num_classes for k in range(self.num_classes)}


@dataclass
class CorruptionMatrix:
    """entries[i, j] = P(observed = j | clean = i)."""

    entries: np.ndarray
    warnings: list = field(default_factory=list)

    @property
    def num_classes(self):
        return self.entries.shape[0]

    def dominated(self):
        """True when every row's clean class is strictly its largest entry."""
        e = self.entries
        diag = np.diag(e)
        off = e - np.diag(diag)
        return bool(np.all(diag > off.max(axis=1)))


def build_corruption_matrix(spec: NoiseSpec) -> CorruptionMatrix:
    K, eta = spec.num_classes, spec.rate
    if spec.kind == "none" or eta == 0:
        return CorruptionMatrix(np.eye(K))
    if spec.kind == "symmetric":
        m = np.full((K, K), eta / (K - 1))
        np.fill_diagonal(m, 1.0 - eta)
    else:
        m = np.eye(K)
        for src, dst in sorted(spec.resolved_pairs().items()):
            m[src, src] = 1.0 - eta
            m[src, dst] = eta
    cm = CorruptionMatrix(m)
    if not cm.dominated():
        cm.warnings.append(
            f"{spec.kind} noise at rate {eta} breaks clean-label domination for K={K}"
        )
    return cm


@dataclass
class NoisyLabels:
    observed: np.ndarray
    flip_mask: np.ndarray


def inject(labels, matrix, seed):
    """Resample each label from its corruption-matrix row (inverse CDF)."""
    labels = np.asarray(labels, dtype=np.int64)
    entries = matrix.entries if isinstance(matrix, CorruptionMatrix) else np.asarray(matrix)
    K = entries.shape[0]
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"labels must lie in [0, {K})")
    u = np.random.default_rng(seed).random(labels.size)
    cdf = np.cumsum(entries, axis=1)
    cdf[:, -1] = 1.0
    observed = np.minimum((u[:, None] >= cdf[labels]).sum(axis=1), K - 1)
    return NoisyLabels(observed=observed, flip_mask=observed != labels)


class NoisyDataset:
    """Training inputs with observed labels; clean labels sit behind
    :meth:`evaluation_labels` and never travel with training batches."""

    def __init__(self, inputs, clean_labels, observed_labels, sample_ids=None):
        self.inputs = inputs
        self.observed_labels = np.asarray(observed_labels, dtype=np.int64)
        self._clean = np.asarray(clean_labels, dtype=np.int64)
        self.sample_ids = (np.arange(len(self._clean)) if sample_ids is None
                           else np.asarray(sample_ids, dtype=np.int64))
        self.flip_mask = self.observed_labels != self._clean

    def __len__(self):
        return len(self.observed_labels)

    def evaluation_labels(self):
        return self._clean.copy()

    @property
    def flip_fraction(self):
        return float(self.flip_mask.mean()) if len(self) else 0.0


def corrupt_dataset(dataset, spec: NoiseSpec):
    """Apply ``spec`` to a clean dataset; returns (NoisyDataset, CorruptionMatrix)."""
    cm = build_corruption_matrix(spec)
    noisy = inject(dataset.labels, cm, spec.seed)
    return NoisyDataset(dataset.inputs, dataset.labels, noisy.observed, dataset.sample_ids), cm


def write_noise_audit(noisy: NoisyDataset, path):
    clean = noisy.evaluation_labels()
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["sample_id", "clean_label", "observed_label", "flipped"])
        for sid, c, o, fl in zip(noisy.sample_ids, clean, noisy.observed_labels, noisy.flip_mask):
            w.writerow([int(sid), int(c), int(o), int(fl)])
