"""Small classifiers (MLP and a two-conv CNN) with manual backprop and SGD."""

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .numcore import EvaluationError, Parameter, ShapeError, matmul, softmax_rows, softmax_rows_backward

CHECKPOINT_MAGIC = b"LDRM"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    architecture: str = "mlp"
    input_shape: tuple = (784,)
    hidden_sizes: list = field(default_factory=lambda: [1024, 512])
    channels: list = field(default_factory=lambda: [16, 32])
    num_classes: int = 10
    init_seed: int = 0

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self.hidden_sizes = [int(h) for h in self.hidden_sizes]
        self.channels = [int(c) for c in self.channels]
        if self.architecture not in ("mlp", "cnn2"):
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if any(h < 1 for h in self.hidden_sizes) or any(d < 1 for d in self.input_shape):
            raise ValueError("layer sizes must be >= 1")
        if self.architecture == "cnn2":
            if len(self.channels) != 2 or any(c < 1 for c in self.channels):
                raise ValueError("cnn2 needs two positive channel counts")
            if len(self.hidden_sizes) != 1:
                raise ValueError("cnn2 takes exactly one hidden fc width")
            if len(self.input_shape) not in (2, 3):
                raise ValueError("cnn2 input_shape must be (H, W) or (C, H, W)")

    def to_dict(self):
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d


@dataclass
class OptimConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-3
    epochs: int = 20
    batch_size: int = 128
    drop_last: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


class Dense:
    def __init__(self, name, n_in, n_out, rng):
        w = rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_in, n_out))
        self.weight = Parameter(f"{name}.weight", w)
        self.bias = Parameter(f"{name}.bias", np.zeros(n_out), decay=False)
        self._x = None

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x):
        self._x = x
        return matmul(x, self.weight.value) + self.bias.value

    def backward(self, g, need_input_grad=True):
        self.weight.grad += matmul(self._x.T, g)
        self.bias.grad += g.sum(axis=0)
        return matmul(g, self.weight.value.T) if need_input_grad else None


class ReLU:
    def params(self):
        return []

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, g, need_input_grad=True):
        return np.where(self._mask, g, 0.0)


class Conv3x3:
    """3x3 convolution, stride 1, zero padding 1 (spatial size preserved)."""

    def __init__(self, name, c_in, c_out, rng):
        fan_in = c_in * 9
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, c_out))
        self.weight = Parameter(f"{name}.weight", w)
        self.bias = Parameter(f"{name}.bias", np.zeros(c_out), decay=False)
        self.c_in, self.c_out = c_in, c_out

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x):
        n, c, h, w = x.shape
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
        # (n, c, h, w, 3, 3) -> rows (n, h, w), columns (c, kh, kw)
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * h * w, c * 9)
        self._cols, self._shape = cols, x.shape
        out = matmul(cols, self.weight.value) + self.bias.value
        return np.ascontiguousarray(out.reshape(n, h, w, self.c_out).transpose(0, 3, 1, 2))

    def backward(self, g, need_input_grad=True):
        n, c, h, w = self._shape
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * h * w, self.c_out)
        self.weight.grad += matmul(self._cols.T, g2)
        self.bias.grad += g2.sum(axis=0)
        if not need_input_grad:
            return None
        dcols = matmul(g2, self.weight.value.T).reshape(n, h, w, c, 3, 3)
        dxp = np.zeros((n, c, h + 2, w + 2))
        for i in range(3):
            for j in range(3):
                dxp[:, :, i:i + h, j:j + w] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dxp[:, :, 1:-1, 1:-1]


class MaxPool2:
    def params(self):
        return []

    def forward(self, x):
        n, c, h, w = x.shape
        h2, w2 = h // 2, w // 2
        self._shape = x.shape
        blocks = x[:, :, :h2 * 2, :w2 * 2].reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5)
        blocks = blocks.reshape(n, c, h2, w2, 4)
        self._arg = blocks.argmax(axis=-1)
        return np.take_along_axis(blocks, self._arg[..., None], axis=-1)[..., 0]

    def backward(self, g, need_input_grad=True):
        n, c, h, w = self._shape
        h2, w2 = h // 2, w // 2
        blocks = np.zeros((n, c, h2, w2, 4))
        np.put_along_axis(blocks, self._arg[..., None], g[..., None], axis=-1)
        blocks = blocks.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2 * 2, w2 * 2)
        dx = np.zeros(self._shape)
        dx[:, :, :h2 * 2, :w2 * 2] = blocks
        return dx


class Flatten:
    def params(self):
        return []

    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, g, need_input_grad=True):
        return g.reshape(self._shape)


class Classifier:
    """Layer stack ending in a softmax; ``forward`` returns probabilities."""

    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.init_seed)
        K = config.num_classes
        layers = []
        if config.architecture == "mlp":
            sizes = [int(np.prod(config.input_shape)), *config.hidden_sizes, K]
            layers.append(Flatten())
            for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
                layers.append(Dense(f"fc{i}", a, b, rng))
                if i < len(sizes) - 2:
                    layers.append(ReLU())
        else:
            shape = config.input_shape
            c_in, h, w = (1, *shape) if len(shape) == 2 else shape
            c1, c2 = config.channels
            flat = c2 * ((h // 2) // 2) * ((w // 2) // 2)
            if flat < 1:
                raise ValueError(f"input {shape} too small for two 2x2 pools")
            layers += [Conv3x3("conv0", c_in, c1, rng), ReLU(), MaxPool2(),
                       Conv3x3("conv1", c1, c2, rng), ReLU(), MaxPool2(), Flatten(),
                       Dense("fc0", flat, config.hidden_sizes[0], rng), ReLU(),
                       Dense("fc1", config.hidden_sizes[0], K, rng)]
        self.layers = layers
        self.probs = None

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def _prepare(self, x):
        x = np.asarray(x, dtype=np.float64)
        shape = self.config.input_shape
        if self.config.architecture == "cnn2":
            if x.ndim == 2 and x.shape[1] == int(np.prod(shape)):
                x = x.reshape(x.shape[0], *shape)
            if x.ndim == 3:
                x = x[:, None]
            if x.ndim != 4 or x.shape[2:] != shape[-2:]:
                raise ShapeError(f"input shape {x.shape} does not match {shape}")
        else:
            if x.ndim < 2 or int(np.prod(x.shape[1:])) != int(np.prod(shape)):
                raise ShapeError(f"input shape {x.shape} does not match {shape}")
        return x

    def logits(self, x):
        h = self._prepare(x)
        for layer in self.layers:
            h = layer.forward(h)
        return h

    def forward(self, x):
        self.probs = softmax_rows(self.logits(x))
        return self.probs

    def backward(self, grad_probs):
        """Accumulate parameter gradients given dL/d(probabilities)."""
        g = softmax_rows_backward(self.probs, grad_probs)
        for i in range(len(self.layers) - 1, -1, -1):
            g = self.layers[i].backward(g, need_input_grad=i > 0)

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def predict(self, x, batch_size=1000):
        out = []
        for s in range(0, len(x), batch_size):
            out.append(np.argmax(self.logits(x[s:s + batch_size]), axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=int)


def sgd_step(params, lr, momentum, weight_decay):
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise EvaluationError(f"non-finite gradient in parameter {p.name}")
    for p in params:
        g = p.grad + weight_decay * p.value if p.decay else p.grad
        p.velocity *= momentum
        p.velocity += g
        p.value -= lr * p.velocity
        p.zero_grad()


def save_checkpoint(model, path):
    meta = {
        "model": model.config.to_dict(),
        "params": [[p.name, list(p.value.shape)] for p in model.params()],
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        f.write(blob)
        for p in model.params():
            f.write(p.value.astype("<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not an LDRM checkpoint (magic {magic!r})")
        version, n = struct.unpack("<II", f.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        meta = json.loads(f.read(n).decode("utf-8"))
        model = Classifier(ModelConfig(**meta["model"]))
        for p, (name, shape) in zip(model.params(), meta["params"]):
            if p.name != name or list(p.value.shape) != shape:
                raise ValueError(f"checkpoint layout mismatch at {name}")
            count = int(np.prod(shape))
            buf = f.read(8 * count)
            if len(buf) != 8 * count:
                raise ValueError(f"truncated checkpoint at {name}")
            p.value[...] = np.frombuffer(buf, dtype="<f8").reshape(shape)
    return model
