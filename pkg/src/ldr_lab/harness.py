"""Experiment runner: config parsing, training with CE or CE+LDR, ablations, sweeps."""

import copy
import csv
import dataclasses
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields

import numpy as np

from . import __version__, kernels
from .data import BlobSpec, batches, load_mnist, make_blobs, subset
from .ldr import LD_SIGN_CONVENTION, LdrConfig, TargetStore, estimate_transition, loss_sum
from .model import Classifier, ModelConfig, OptimConfig, save_checkpoint, sgd_step
from .noise import NoiseSpec, corrupt_dataset, write_noise_audit

log = logging.getLogger(__name__)

METRIC_FIELDS = [
    "epoch", "test_accuracy", "memory_accuracy", "clean_memorization", "flipped_memorization",
    "l_nl", "l_ld", "l_m", "l_sum", "m_diag_mean", "m_offdiag_mean", "clamped",
]
SWEEP_PARAMS = ("alpha", "beta", "tau", "delta", "batch_size")


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch, last_good_epoch):
        super().__init__(f"non-finite loss in epoch {epoch}; last good epoch {last_good_epoch}")
        self.epoch = epoch
        self.last_good_epoch = last_good_epoch


def _build(cls, raw, where, **fixed):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be a JSON object")
    names = {f.name for f in fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    try:
        return cls(**{**raw, **fixed})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass
class DatasetSpec:
    name: str = "blobs"
    path: str = None
    subset: int = None
    subset_seed: int = 0
    num_classes: int = 4
    means: list = None
    std: float = 0.5
    samples_per_class: int = 1000
    test_samples_per_class: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.name not in ("blobs", "mnist"):
            raise ValueError(f"unknown dataset {self.name!r}")
        if self.name == "mnist":
            if not self.path:
                raise ValueError("mnist needs 'path' (directory holding the IDX files)")
            self.num_classes = 10


@dataclass
class RunConfig:
    dataset: DatasetSpec
    noise: NoiseSpec
    model: ModelConfig
    optim: OptimConfig
    ldr: LdrConfig
    seed: int = 0
    output_dir: str = "runs/default"

    @classmethod
    def from_dict(cls, raw):
        raw = dict(raw)
        top = {"dataset", "noise", "model", "optim", "ldr", "seed", "output_dir"}
        unknown = set(raw) - top
        if unknown:
            raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
        seed = int(raw.get("seed", 0))
        ds = _build(DatasetSpec, raw.get("dataset"), "dataset")
        K = ds.num_classes
        noise_raw = dict(raw.get("noise") or {})
        noise_raw.setdefault("seed", seed)
        noise = _build(NoiseSpec, noise_raw, "noise", num_classes=K)
        model_raw = dict(raw.get("model") or {})
        model_raw.setdefault("init_seed", seed)
        if "input_shape" not in model_raw:
            model_raw["input_shape"] = [28, 28] if ds.name == "mnist" else [2]
        if ds.name == "blobs" and "hidden_sizes" not in model_raw:
            model_raw["hidden_sizes"] = [64, 64]
        model = _build(ModelConfig, model_raw, "model", num_classes=K)
        optim = _build(OptimConfig, raw.get("optim"), "optim")
        ldr = _build(LdrConfig, raw.get("ldr"), "ldr")
        out = raw.get("output_dir", "runs/default")
        return cls(ds, noise, model, optim, ldr, seed, out)

    @classmethod
    def from_json(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["model"]["input_shape"] = list(self.model.input_shape)
        if d["noise"]["pair_map"] is not None:
            d["noise"]["pair_map"] = {str(k): v for k, v in d["noise"]["pair_map"].items()}
        d["noise"].pop("num_classes")
        d["model"].pop("num_classes")
        return d

    def replace(self, output_dir=None, seed=None, **sections):
        """Deep copy with whole sections or dotted fields swapped."""
        new = copy.deepcopy(self)
        for key, value in sections.items():
            section, _, attr = key.partition("__")
            if attr:
                setattr(getattr(new, section), attr, value)
                getattr(new, section).__post_init__()
            else:
                setattr(new, section, value)
        if seed is not None:
            new.seed = seed
            new.noise.seed = seed
            new.model.init_seed = seed
        if output_dir is not None:
            new.output_dir = output_dir
        return new


@dataclass
class EpochMetrics:
    epoch: int
    test_accuracy: float
    memory_accuracy: float
    clean_memorization: float
    flipped_memorization: float
    l_nl: float
    l_ld: float
    l_m: float
    l_sum: float
    m_diag_mean: float
    m_offdiag_mean: float
    clamped: int = 0

    def row(self):
        return [self.epoch] + [_fmt(getattr(self, k)) for k in METRIC_FIELDS[1:-1]] + [self.clamped]


def _fmt(x):
    return repr(float(x))


def load_datasets(spec: DatasetSpec):
    """Returns (train, test, bayes_accuracy or None)."""
    if spec.name == "mnist":
        train, test = load_mnist(spec.path)
        train = subset(train, spec.subset, spec.subset_seed)
        return train, test, None
    blob = BlobSpec(spec.num_classes, spec.means, spec.std, spec.samples_per_class, spec.seed)
    train, bayes = make_blobs(blob, seed_offset=0)
    test, _ = make_blobs(dataclasses.replace(blob, samples_per_class=spec.test_samples_per_class),
                         seed_offset=1)
    return train, test, bayes


def memory_accuracy(model, inputs, observed_labels):
    """Fraction of training samples whose argmax prediction equals the observed label."""
    if len(observed_labels) == 0:
        return 0.0
    return float(np.mean(model.predict(inputs) == np.asarray(observed_labels)))


def _epoch_seed(seed, epoch):
    return [int(seed), 7919, int(epoch)]


def _save_state(path, model, store, epoch):
    arrays = {"epoch": np.array(epoch), "targets": store.targets}
    for i, p in enumerate(model.params()):
        arrays[f"v{i}"] = p.value
        arrays[f"m{i}"] = p.velocity
    tmp = path + ".tmp.npz"
    np.savez(tmp, **arrays)
    os.replace(tmp, path)


def _load_state(path, model, store):
    with np.load(path) as z:
        for i, p in enumerate(model.params()):
            p.value[...] = z[f"v{i}"]
            p.velocity[...] = z[f"m{i}"]
        store.targets = z["targets"].copy()
        epoch = int(z["epoch"])
    store.epoch_counter = epoch
    return epoch


def _write_meta(path, cfg, cm, train, bayes, extra=None):
    meta = {
        "config": cfg.to_dict(),
        "library_version": __version__,
        "kernel_backend": kernels.BACKEND,
        "ld_loss_sign": LD_SIGN_CONVENTION,
        "corruption_matrix": cm.entries.tolist(),
        "noise_warnings": cm.warnings,
        "train_size": len(train),
        "dataset_metadata": {k: v for k, v in train.metadata.items()},
        "bayes_accuracy": bayes,
    }
    if extra:
        meta.update(extra)
    with open(path, "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)


def train(cfg: RunConfig, resume=False, datasets=None):
    """Train one run; returns (list of EpochMetrics, checkpoint path).

    Per-epoch metrics are appended to ``metrics.csv`` as they are computed and
    model/target state is saved each epoch, so ``resume=True`` continues an
    interrupted run from its last completed epoch with identical results.
    """
    out = cfg.output_dir
    os.makedirs(out, exist_ok=True)
    train_ds, test_ds, bayes = datasets if datasets is not None else load_datasets(cfg.dataset)
    noisy, cm = corrupt_dataset(train_ds, cfg.noise)
    for w in cm.warnings:
        log.warning(w)
    write_noise_audit(noisy, os.path.join(out, "noise_audit.csv"))
    meta_path = os.path.join(out, "run_meta.json")
    _write_meta(meta_path, cfg, cm, train_ds, bayes, {"flip_fraction": noisy.flip_fraction})

    model = Classifier(cfg.model)
    store = TargetStore(cfg.model.num_classes, len(noisy))
    params = model.params()
    opt = cfg.optim
    metrics_path = os.path.join(out, "metrics.csv")
    state_path = os.path.join(out, "state.npz")

    history, start = [], 0
    if resume and os.path.exists(state_path) and os.path.exists(metrics_path):
        start = _load_state(state_path, model, store)
        with open(metrics_path) as f:
            rows = list(csv.reader(f))[1:start + 1]
        history = [_metrics_from_row(r) for r in rows]
    with open(metrics_path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for m in history:
            w.writerow(m.row())

    flipped = noisy.flip_mask
    for epoch in range(start + 1, opt.epochs + 1):
        sums = np.zeros(6)
        n_batches, clamped = 0, 0
        for batch in batches(noisy, opt.batch_size, _epoch_seed(cfg.seed, epoch), opt.drop_last):
            terms = loss_sum(batch, model, store, cfg.ldr)
            if not math.isfinite(terms.total):
                _write_meta(meta_path, cfg, cm, train_ds, bayes,
                            {"flip_fraction": noisy.flip_fraction, "aborted_epoch": epoch,
                             "last_good_epoch": epoch - 1})
                raise TrainingDiverged(epoch, epoch - 1)
            if math.isnan(terms.m_diag_mean):
                est = estimate_transition(terms.probs)
                terms.m_diag_mean, terms.m_offdiag_mean = est.diag_mean(), est.offdiag_mean()
            sums += (terms.l_nl, terms.l_ld, terms.l_m, terms.total,
                     terms.m_diag_mean, terms.m_offdiag_mean)
            clamped += terms.clamped
            n_batches += 1
            sgd_step(params, opt.learning_rate, opt.momentum, opt.weight_decay)
        store.epoch_counter = epoch

        pred_train = model.predict(noisy.inputs)
        hit = pred_train == noisy.observed_labels
        nan = float("nan")
        m = EpochMetrics(
            epoch=epoch,
            test_accuracy=float(np.mean(model.predict(test_ds.inputs) == test_ds.labels)),
            memory_accuracy=float(hit.mean()),
            clean_memorization=float(hit[~flipped].mean()) if (~flipped).any() else nan,
            flipped_memorization=float(hit[flipped].mean()) if flipped.any() else nan,
            l_nl=sums[0] / n_batches,
            l_ld=sums[1] / n_batches if cfg.ldr.enable_ld else nan,
            l_m=sums[2] / n_batches if cfg.ldr.enable_m else nan,
            l_sum=sums[3] / n_batches,
            m_diag_mean=sums[4] / n_batches,
            m_offdiag_mean=sums[5] / n_batches,
            clamped=clamped,
        )
        history.append(m)
        with open(metrics_path, "a", newline="") as f:
            csv.writer(f, lineterminator="\n").writerow(m.row())
        _save_state(state_path, model, store, epoch)
        log.info("epoch %d test=%.4f mem=%.4f L_SUM=%.4f", epoch, m.test_accuracy,
                 m.memory_accuracy, m.l_sum)

    ckpt = os.path.join(out, "model.ldrm")
    save_checkpoint(model, ckpt)
    return history, ckpt


def _metrics_from_row(row):
    vals = [float(v) for v in row]
    return EpochMetrics(int(vals[0]), *vals[1:-1], clamped=int(vals[-1]))


def read_metrics(path):
    with open(path) as f:
        r = csv.reader(f)
        header = next(r)
        if header != METRIC_FIELDS:
            raise ValueError(f"{path}: unexpected header {header}")
        return [_metrics_from_row(row) for row in r]


# -- grids -----------------------------------------------------------------

TERM_GRID = [
    ("L_NL", dict(enable_ld=False, enable_m=False)),
    ("L_NL+L_LD", dict(enable_ld=True, enable_m=False)),
    ("L_NL+L_LD+L_M", dict(enable_ld=True, enable_m=True)),
]
TARGET_GRID = [
    ("no_temporal,no_sharpen", dict(enable_temporal=False, enable_sharpen=False)),
    ("temporal,no_sharpen", dict(enable_temporal=True, enable_sharpen=False)),
    ("temporal,sharpen", dict(enable_temporal=True, enable_sharpen=True)),
]
ABLATION_FIELDS = ["table", "variant", "enable_ld", "enable_m", "enable_temporal", "enable_sharpen",
                   "seeds", "n_ok", "mean_accuracy", "std_accuracy", "accuracies", "errors"]
SWEEP_FIELDS = ["param", "value", "seeds", "n_ok", "mean_accuracy", "std_accuracy",
                "mean_m_diag", "mean_m_offdiag", "errors"]


def ablation_variants(base_ldr: LdrConfig):
    """(table, variant, LdrConfig) rows: loss-term grid, then target-construction grid."""
    out = []
    for name, flags in TERM_GRID:
        out.append(("loss_terms", name, dataclasses.replace(base_ldr, enable_temporal=True,
                                                         enable_sharpen=True, **flags)))
    for name, flags in TARGET_GRID:
        out.append(("target_construction", name, dataclasses.replace(base_ldr, enable_ld=True, enable_m=True,
                                                         **flags)))
    return out


def _run_cell(args):
    cfg, data = args
    try:
        hist, _ = train(cfg, datasets=data)
        last = hist[-1]
        return {"acc": last.test_accuracy, "m_diag": last.m_diag_mean,
                "m_off": last.m_offdiag_mean, "error": None}
    except Exception as exc:  # a failed cell must not stop the grid
        log.error("cell %s failed: %s", cfg.output_dir, exc)
        return {"acc": None, "error": f"{type(exc).__name__}: {exc}"}


def _run_cells(cells, workers):
    if workers and workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            return list(ex.map(_run_cell, cells))
    return [_run_cell(c) for c in cells]


def _seed_list(base, seeds):
    return list(seeds) if seeds is not None else [base.seed]


def _summary(results):
    accs = [r["acc"] for r in results if r["error"] is None]
    errs = "; ".join(r["error"] for r in results if r["error"])
    mean = float(np.mean(accs)) if accs else float("nan")
    std = float(np.std(accs)) if accs else float("nan")
    return accs, mean, std, errs


def ablate(base: RunConfig, seeds=None, workers=1):
    """Ablation grid with shared seeds; writes ``ablation.csv``.

    Returns a list of (table, variant, mean accuracy, std, per-seed accuracies).
    The fully enabled variant appears in both tables but is trained once.
    """
    seeds = _seed_list(base, seeds)
    data = load_datasets(base.dataset)
    variants = ablation_variants(base.ldr)
    unique = {}
    for table, name, ldr in variants:
        unique.setdefault(_ldr_key(ldr), (name, ldr))
    keys = list(unique)
    cells, index = [], []
    for key in keys:
        name, ldr = unique[key]
        for s in seeds:
            tag = name.replace("+", "_").replace(",", "_")
            out = os.path.join(base.output_dir, "ablation", f"{tag}_s{s}")
            cells.append((base.replace(output_dir=out, seed=s, ldr=ldr), data))
            index.append(key)
    results = _run_cells(cells, workers)
    by_key = {k: [r for r, i in zip(results, index) if i == k] for k in keys}

    rows = []
    os.makedirs(base.output_dir, exist_ok=True)
    with open(os.path.join(base.output_dir, "ablation.csv"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(ABLATION_FIELDS)
        for table, name, ldr in variants:
            accs, mean, std, errs = _summary(by_key[_ldr_key(ldr)])
            w.writerow([table, name, int(ldr.enable_ld), int(ldr.enable_m), int(ldr.enable_temporal),
                        int(ldr.enable_sharpen), " ".join(map(str, seeds)), len(accs),
                        _fmt(mean), _fmt(std), " ".join(_fmt(a) for a in accs), errs])
            rows.append((table, name, mean, std, accs))
    return rows


def _ldr_key(ldr):
    # disabled L_LD makes sharpening/temporal flags irrelevant
    if not ldr.enable_ld:
        ldr = dataclasses.replace(ldr, enable_sharpen=True, enable_temporal=True)
    return tuple(sorted(dataclasses.asdict(ldr).items()))


def sweep(base: RunConfig, param, values, seeds=None, workers=1):
    """One run per (value, seed); writes ``sweep_<param>.csv`` and returns its rows."""
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"cannot sweep {param!r}; choose from {SWEEP_PARAMS}")
    seeds = list(seeds) if seeds is not None else [base.seed + i for i in range(3)]
    data = load_datasets(base.dataset)
    cells, index = [], []
    for v in values:
        for s in seeds:
            out = os.path.join(base.output_dir, f"sweep_{param}", f"{param}={v}_s{s}")
            if param == "batch_size":
                cfg = base.replace(output_dir=out, seed=s, optim__batch_size=int(v))
            else:
                cfg = base.replace(output_dir=out, seed=s, **{f"ldr__{param}": float(v)})
            cells.append((cfg, data))
            index.append(v)
    results = _run_cells(cells, workers)

    rows = []
    os.makedirs(base.output_dir, exist_ok=True)
    with open(os.path.join(base.output_dir, f"sweep_{param}.csv"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SWEEP_FIELDS)
        for v in values:
            res = [r for r, i in zip(results, index) if i == v]
            accs, mean, std, errs = _summary(res)
            ok = [r for r in res if r["error"] is None]
            md = float(np.mean([r["m_diag"] for r in ok])) if ok else float("nan")
            mo = float(np.mean([r["m_off"] for r in ok])) if ok else float("nan")
            row = [param, v, " ".join(map(str, seeds)), len(accs), _fmt(mean), _fmt(std),
                   _fmt(md), _fmt(mo), errs]
            w.writerow(row)
            rows.append(dict(zip(SWEEP_FIELDS, row)))
    return rows
