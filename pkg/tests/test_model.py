import json
import struct

import numpy as np
import pytest

from ldr_lab.ldr import loss_nl
from ldr_lab.model import (
    Classifier,
    Conv3x3,
    Dense,
    MaxPool2,
    ModelConfig,
    OptimConfig,
    ReLU,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
)
from ldr_lab.numcore import EvaluationError, Parameter, ShapeError, grad_check


def small_mlp(seed=0, d=6, hidden=(8,), K=3):
    return Classifier(ModelConfig("mlp", (d,), list(hidden), num_classes=K, init_seed=seed))


def test_zero_weights_give_uniform_rows():
    model = small_mlp(K=4)
    for p in model.params():
        p.value[...] = 0.0
    out = model.forward(np.random.default_rng(1).normal(size=(5, 6)))
    np.testing.assert_array_equal(out, np.full((5, 4), 0.25))


def test_forward_deterministic():
    x = np.random.default_rng(2).normal(size=(4, 6))
    a = small_mlp(seed=7).forward(x)
    b = small_mlp(seed=7).forward(x)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, small_mlp(seed=8).forward(x))


def test_rows_are_distributions():
    out = small_mlp(K=3).forward(np.random.default_rng(3).normal(size=(4, 6)))
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)


def test_input_shape_mismatch():
    with pytest.raises(ShapeError):
        small_mlp().forward(np.zeros((2, 5)))


def test_init_scale_is_fan_in_gaussian():
    model = Classifier(ModelConfig("mlp", (400,), [300], num_classes=2, init_seed=0))
    w = model.params()[0].value
    assert abs(w.std() - np.sqrt(2 / 400)) < 0.02 * np.sqrt(2 / 400)
    assert not model.params()[1].value.any()


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(num_classes=1)
    with pytest.raises(ValueError):
        ModelConfig(hidden_sizes=[0])
    with pytest.raises(ValueError):
        OptimConfig(momentum=1.0)
    with pytest.raises(ValueError):
        OptimConfig(batch_size=1)
    with pytest.raises(ValueError):
        OptimConfig(learning_rate=0)


def test_sgd_step_arithmetic():
    w = Parameter("w", np.array([1.0]))
    w.grad[...] = 0.5
    sgd_step([w], lr=0.1, momentum=0.9, weight_decay=0.0)
    assert w.velocity[0] == 0.5
    assert w.value[0] == pytest.approx(0.95, abs=1e-15)
    assert w.grad[0] == 0.0


def test_sgd_fixed_point():
    w = Parameter("w", np.array([2.5, -1.0]))
    sgd_step([w], lr=0.1, momentum=0.9, weight_decay=0.0)
    np.testing.assert_array_equal(w.value, [2.5, -1.0])


def test_sgd_two_steps_geometric():
    g, lr, mu = 0.3, 0.05, 0.9
    w = Parameter("w", np.array([1.0]))
    for _ in range(2):
        w.grad[...] = g
        sgd_step([w], lr=lr, momentum=mu, weight_decay=0.0)
    assert w.velocity[0] == pytest.approx(mu * g + g, abs=1e-15)
    assert w.value[0] == pytest.approx(1.0 - lr * g - lr * (mu * g + g), abs=1e-15)


def test_weight_decay_skips_biases():
    model = small_mlp()
    before = [p.value.copy() for p in model.params()]
    sgd_step(model.params(), lr=0.1, momentum=0.9, weight_decay=0.5)
    for p, b in zip(model.params(), before):
        if p.decay:
            np.testing.assert_allclose(p.value, b * (1 - 0.1 * 0.5), rtol=1e-15)
        else:
            np.testing.assert_array_equal(p.value, b)


def test_sgd_rejects_non_finite_gradient():
    model = small_mlp()
    model.params()[2].grad[0, 0] = np.inf
    with pytest.raises(EvaluationError, match="fc1.weight"):
        sgd_step(model.params(), 0.1, 0.9, 0.0)


@pytest.mark.parametrize("seed", range(10))
def test_single_sample_step_decreases_ce(seed):
    rng = np.random.default_rng(seed)
    model = small_mlp(seed=seed, K=4)
    x, y = rng.normal(size=(1, 6)), np.eye(4)[[rng.integers(4)]]
    before, g = loss_nl(model.forward(x), y)
    model.backward(g)
    sgd_step(model.params(), lr=1e-3, momentum=0.9, weight_decay=0.0)
    after, _ = loss_nl(model.forward(x), y)
    assert after < before


def _layer_gradcheck(layer, x, seed):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=layer.forward(x).shape)
    xp = Parameter("x", x)
    for p in layer.params():
        p.zero_grad()
    layer.forward(xp.value)
    xp.grad[...] = layer.backward(w)

    def f():
        return float(np.sum(w * layer.forward(xp.value)))

    return grad_check(f, [xp, *layer.params()], step=1e-6)


@pytest.mark.parametrize("seed", range(10))
def test_layer_backward_gradcheck(seed):
    rng = np.random.default_rng(seed)
    n, d, h = rng.integers(1, 9, size=3)
    assert _layer_gradcheck(Dense("d", d, h, rng), rng.normal(size=(n, d)), seed) < 1e-4
    # keep ReLU inputs away from the kink
    x = rng.normal(size=(n, d))
    x[np.abs(x) < 1e-3] = 0.5
    assert _layer_gradcheck(ReLU(), x, seed) < 1e-4
    img = rng.normal(size=(2, int(rng.integers(1, 3)), 6, 6))
    assert _layer_gradcheck(Conv3x3("c", img.shape[1], 3, rng), img, seed) < 1e-4
    assert _layer_gradcheck(MaxPool2(), rng.permutation(2 * 2 * 6 * 6).reshape(2, 2, 6, 6) / 7.0, seed) < 1e-4


def test_cnn2_forward_backward():
    cfg = ModelConfig("cnn2", (8, 8), [6], channels=[2, 3], num_classes=3, init_seed=1)
    model = Classifier(cfg)
    rng = np.random.default_rng(0)
    x, y = rng.random((4, 64)), np.eye(3)[[0, 1, 2, 0]]
    probs = model.forward(x)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
    _, g = loss_nl(probs, y)
    model.backward(g)

    def f():
        return loss_nl(model.forward(x), y)[0]

    assert grad_check(f, model.params(), step=1e-6) < 1e-4


def test_checkpoint_roundtrip_and_layout(tmp_path):
    model = small_mlp(seed=4)
    path = tmp_path / "m.ldrm"
    save_checkpoint(model, path)
    raw = path.read_bytes()
    assert raw[:4] == b"LDRM"
    version, n = struct.unpack("<II", raw[4:12])
    assert version == 1
    meta = json.loads(raw[12:12 + n])
    assert meta["model"]["hidden_sizes"] == [8]
    first = model.params()[0].value
    np.testing.assert_array_equal(
        np.frombuffer(raw[12 + n:12 + n + 8 * first.size], dtype="<f8").reshape(first.shape), first)
    assert len(raw) == 12 + n + 8 * sum(p.value.size for p in model.params())

    loaded = load_checkpoint(path)
    x = np.random.default_rng(0).normal(size=(3, 6))
    np.testing.assert_array_equal(loaded.forward(x), model.forward(x))


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(b"NOPE" + b"\0" * 16)
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(p)
