"""Acceptance suite. Each test prints one ``criterion N: PASS|FAIL`` line.

Criteria 5, 6 and 10 need the MNIST IDX files in ``$LDR_LAB_MNIST_DIR``
(default ``data/mnist``); without them they fail with a clear message.
"""

import math
import os
import time

import numpy as np
import pytest

from ldr_lab.data import batches
from ldr_lab.harness import RunConfig, ablate, load_datasets, train
from ldr_lab.ldr import LdrConfig, TargetStore, estimate_transition, loss_nl, loss_sum, objective
from ldr_lab.model import Classifier, ModelConfig, load_checkpoint, sgd_step
from ldr_lab.noise import NoiseSpec, build_corruption_matrix, corrupt_dataset, inject
from ldr_lab.numcore import grad_check, softmax_rows

MNIST_DIR = os.environ.get("LDR_LAB_MNIST_DIR",
                           os.path.join(os.path.dirname(__file__), "..", "data", "mnist"))


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail
    return emit


def test_criterion_01_gradient_fidelity(report):
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        model = Classifier(ModelConfig("mlp", (6,), [10], num_classes=5, init_seed=seed))
        batch = (np.arange(8), rng.normal(size=(8, 6)), rng.integers(0, 5, 8))
        store = TargetStore(5, 8)
        store.targets[:] = 0.6 * rng.dirichlet(np.ones(5), size=8)
        cfg = LdrConfig()
        frozen = loss_sum(batch, model, store, cfg).targets.copy()
        onehot = np.eye(5)[batch[2]]

        def f():
            return objective(model.forward(batch[1]), onehot, cfg, targets=frozen)[0].total

        worst = max(worst, grad_check(f, model.params(), step=1e-6))
    dt = time.perf_counter() - t0
    report(1, worst < 1e-4 and dt < 10, f"max rel err {worst:.2e}, {dt:.2f}s")


def test_criterion_02_transition_invariants(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        bs, K = int(rng.integers(1, 129)), int(rng.integers(2, 11))
        p = softmax_rows(rng.normal(scale=float(rng.uniform(0.1, 10)), size=(bs, K)))
        m = estimate_transition(p).matrix
        if np.any(m < 0):
            worst = math.inf
        worst = max(worst, float(np.max(np.abs(m.sum(axis=1) - 1))))
    onehot = np.eye(10)[rng.permutation(np.arange(64) % 10)]
    ident = float(np.max(np.abs(estimate_transition(onehot).matrix - np.eye(10))))
    dt = time.perf_counter() - t0
    report(2, worst <= 1e-9 and ident <= 1e-12 and dt < 5,
           f"row-sum err {worst:.1e}, identity err {ident:.1e}, {dt:.2f}s")


def test_criterion_03_ema_closed_form(report):
    t0 = time.perf_counter()
    hat = np.random.default_rng(0).dirichlet(np.ones(10), size=4)
    worst = 0.0
    for beta in (0.0, 0.6, 0.99):
        store = TargetStore(10, 4)
        for t in range(1, 51):
            out = store.update(np.arange(4), hat, beta)
            worst = max(worst, float(np.max(np.abs(out - (1 - beta ** t) * hat))))
    dt = time.perf_counter() - t0
    report(3, worst <= 1e-12 and dt < 1, f"max err {worst:.1e}, {dt:.3f}s")


def test_criterion_04_noise_statistics(report):
    t0 = time.perf_counter()
    N, K = 10000, 10
    labels = np.arange(N) % K
    ok, notes = True, []
    for eta in (0.2, 0.6):
        cm = build_corruption_matrix(NoiseSpec("symmetric", eta, K))
        obs = inject(labels, cm, seed=0)
        rate = obs.flip_mask.mean()
        band = 3 * math.sqrt(eta * (1 - eta) / N)
        ok &= abs(rate - eta) <= band
        for c in range(K):
            row = obs.observed[labels == c]
            freq = np.bincount(row, minlength=K) / len(row)
            sigma = np.sqrt(cm.entries[c] * (1 - cm.entries[c]) / len(row))
            ok &= bool(np.all(np.abs(freq - cm.entries[c]) <= 4 * sigma))
        notes.append(f"eta={eta}: flip {rate:.4f} (band {band:.4f})")
    dt = time.perf_counter() - t0
    report(4, ok and dt < 5, f"{'; '.join(notes)}, {dt:.2f}s")


def _mnist_cfg(out, eta, ce_only):
    ldr = {"enable_ld": False, "enable_m": False} if ce_only else {}
    return RunConfig.from_dict({
        "dataset": {"name": "mnist", "path": MNIST_DIR, "subset": 10000, "subset_seed": 0},
        "noise": {"kind": "symmetric", "rate": eta},
        "model": {"architecture": "mlp"},
        "optim": {"epochs": 20, "batch_size": 128, "learning_rate": 0.01,
                  "momentum": 0.9, "weight_decay": 1e-3},
        "ldr": ldr,
        "seed": 0,
        "output_dir": str(out),
    })


def _need_mnist(n, report):
    if not os.path.isdir(MNIST_DIR):
        report(n, False, f"MNIST IDX files not found in {os.path.abspath(MNIST_DIR)}; "
                         "set LDR_LAB_MNIST_DIR")


@pytest.fixture(scope="module")
def mnist_runs(tmp_path_factory):
    """Lazily trained MNIST runs shared between criteria 5, 6 and 10."""
    root = tmp_path_factory.mktemp("mnist")
    cache = {}

    def get(eta, ce_only, tag=""):
        key = (eta, ce_only, tag)
        if key not in cache:
            out = root / f"eta{eta}_{'ce' if ce_only else 'ldr'}{tag}"
            cfg = _mnist_cfg(out, eta, ce_only)
            data = load_datasets(cfg.dataset)
            t0 = time.perf_counter()
            history, _ = train(cfg, datasets=data)
            cache[key] = (history, time.perf_counter() - t0, out / "metrics.csv")
        return cache[key]
    return get


def test_criterion_05_mnist_directional(report, mnist_runs):
    _need_mnist(5, report)
    ce, t_ce, _ = mnist_runs(0.6, True)
    ldr, t_ldr, _ = mnist_runs(0.6, False)
    gap = ldr[-1].test_accuracy - ce[-1].test_accuracy
    dt = t_ce + t_ldr
    report(5, gap >= 0.15 and dt <= 900,
           f"CE {ce[-1].test_accuracy:.4f}, CE+LDR {ldr[-1].test_accuracy:.4f}, "
           f"gap {100 * gap:.1f}pp, {dt:.0f}s")


def test_criterion_06_memorization(report, mnist_runs):
    _need_mnist(6, report)
    ce, t_ce, _ = mnist_runs(0.8, True)
    ldr, t_ldr, _ = mnist_runs(0.8, False)
    ce_mem = [m.memory_accuracy for m in ce]
    ldr_mem = [m.memory_accuracy for m in ldr]
    ce_ok = ce_mem[-1] >= 0.6 and ce_mem[-1] > ce_mem[-6]
    tail = ldr_mem[-5:]
    ldr_ok = ldr_mem[-1] <= 0.35 and all(b <= a for a, b in zip(tail, tail[1:]))
    dt = t_ce + t_ldr
    report(6, ce_ok and ldr_ok and dt <= 900,
           f"CE memory {ce_mem[-6]:.4f}->{ce_mem[-1]:.4f}, CE+LDR last 5 "
           f"{[round(v, 4) for v in tail]}, {dt:.0f}s")


def test_criterion_07_ablation_ordering(report, tmp_path):
    t0 = time.perf_counter()
    cfg = RunConfig.from_dict({
        "dataset": {"name": "blobs", "num_classes": 4, "std": 0.5, "samples_per_class": 1000},
        "noise": {"kind": "symmetric", "rate": 0.4},
        "optim": {"epochs": 30},
        "seed": 0,
        "output_dir": str(tmp_path),
    })
    rows = {(t, v): mean for t, v, mean, _, _ in ablate(cfg, seeds=[0, 1, 2])}
    nl = rows[("loss_terms", "L_NL")]
    ld = rows[("loss_terms", "L_NL+L_LD")]
    full = rows[("loss_terms", "L_NL+L_LD+L_M")]
    dt = time.perf_counter() - t0
    report(7, full > ld > nl and full - nl >= 0.10 and dt <= 180,
           f"L_NL {nl:.4f}, +L_LD {ld:.4f}, full {full:.4f}, gap {full - nl:+.4f}, {dt:.0f}s")


def test_criterion_08_ablation_identity(report, tmp_path):
    t0 = time.perf_counter()
    cfg = RunConfig.from_dict({
        "dataset": {"name": "blobs", "num_classes": 4, "samples_per_class": 500},
        "noise": {"kind": "symmetric", "rate": 0.4},
        "optim": {"epochs": 5},
        "ldr": {"enable_ld": False, "enable_m": False},
        "seed": 3,
        "output_dir": str(tmp_path),
    })
    history, _ = train(cfg)

    # independent plain cross-entropy trainer
    train_ds, test_ds, _ = load_datasets(cfg.dataset)
    noisy, _ = corrupt_dataset(train_ds, cfg.noise)
    model = Classifier(cfg.model)
    K, opt = cfg.model.num_classes, cfg.optim
    same = True
    for epoch in range(1, opt.epochs + 1):
        for _, x, y in batches(noisy, opt.batch_size, [cfg.seed, 7919, epoch], opt.drop_last):
            _, g = loss_nl(model.forward(x), np.eye(K)[y])
            model.backward(g)
            sgd_step(model.params(), opt.learning_rate, opt.momentum, opt.weight_decay)
        acc = float(np.mean(model.predict(test_ds.inputs) == test_ds.labels))
        mem = float(np.mean(model.predict(noisy.inputs) == noisy.observed_labels))
        same &= acc == history[epoch - 1].test_accuracy and mem == history[epoch - 1].memory_accuracy
    ref = load_checkpoint(os.path.join(str(tmp_path), "model.ldrm"))
    same &= all(np.array_equal(a.value, b.value) for a, b in zip(ref.params(), model.params()))
    dt = time.perf_counter() - t0
    report(8, same and dt < 60, f"weights and per-epoch metrics bit-identical: {same}, {dt:.1f}s")


def test_criterion_09_clean_bayes(report, tmp_path):
    t0 = time.perf_counter()
    cfg = RunConfig.from_dict({
        "dataset": {"name": "blobs", "num_classes": 4, "std": 0.5, "samples_per_class": 1000},
        "noise": {"kind": "none", "rate": 0.0},
        "optim": {"epochs": 30},
        "seed": 0,
        "output_dir": str(tmp_path),
    })
    data = load_datasets(cfg.dataset)
    history, _ = train(cfg, datasets=data)
    acc, bayes = history[-1].test_accuracy, data[2]
    dt = time.perf_counter() - t0
    report(9, abs(acc - bayes) <= 0.02 and dt < 120,
           f"test {acc:.4f} vs Bayes {bayes:.4f}, {dt:.1f}s")


def test_criterion_10_determinism(report, mnist_runs):
    _need_mnist(10, report)
    _, _, first = mnist_runs(0.6, False)
    _, _, second = mnist_runs(0.6, False, tag="_repeat")
    same = first.read_bytes() == second.read_bytes()
    report(10, same, f"metrics.csv byte-identical: {same}")
