"""Dense float64 arithmetic with paired forward/backward ops.

Tensors are plain C-ordered ``numpy.float64`` arrays.  Matrix products go
through :mod:`ldr_lab.kernels`, whose reduction order is fixed, so a run
is bit-reproducible on any IEEE-754 machine regardless of BLAS.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels


class ShapeError(ValueError):
    pass


class EvaluationError(ArithmeticError):
    pass


def as_tensor(x, name="tensor"):
    """Coerce to a C-ordered float64 array and reject NaN/Inf."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise EvaluationError(f"{name} contains non-finite values")
    return arr


@dataclass
class Parameter:
    """A trainable array with its gradient and momentum buffer.

    ``decay`` marks whether weight decay applies (weights yes, biases no).
    """

    name: str
    value: np.ndarray
    decay: bool = True
    grad: np.ndarray = field(default=None, repr=False)
    velocity: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.velocity is None:
            self.velocity = np.zeros_like(self.value)
        if not (self.value.shape == self.grad.shape == self.velocity.shape):
            raise ShapeError(f"{self.name}: value/grad/velocity shapes differ")

    def zero_grad(self):
        self.grad[...] = 0.0


def matmul(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return kernels.matmul(a, b)


def matmul_backward(a, b, grad_out):
    """Vector-Jacobian products of ``a @ b``: returns (grad_a, grad_b)."""
    return matmul(grad_out, b.T), matmul(a.T, grad_out)


def softmax_rows(logits):
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got shape {z.shape}")
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_backward(probs, grad_probs):
    # J^T g for each row of p = softmax(z): p * (g - <g, p>)
    inner = np.sum(grad_probs * probs, axis=1, keepdims=True)
    return probs * (grad_probs - inner)


def grad_check(f, params, step=1e-5):
    """Largest relative error between analytic and central-difference gradients.

    ``f()`` evaluates the scalar objective at the current parameter values;
    every ``Parameter.grad`` must already hold the analytic gradient at that
    point.  Relative error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    if not 1e-7 <= step <= 1e-3:
        raise ValueError(f"step must lie in [1e-7, 1e-3], got {step}")
    worst = 0.0
    for p in params:
        flat = p.value.reshape(-1)
        analytic = p.grad.reshape(-1).copy()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f()
            flat[i] = orig - step
            lo = f()
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise EvaluationError(f"non-finite objective while perturbing {p.name}[{i}]")
            numeric = (hi - lo) / (2.0 * step)
            err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]), abs(numeric))
            worst = max(worst, err)
    return worst
