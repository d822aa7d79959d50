"""Label distribution regularization: the loss stack on top of cross-entropy.

Per mini-batch with predictions ``p`` (bs x K):

* ``L_NL``  cross-entropy against the observed (noisy) labels;
* ``M``     row-normalised Gram matrix ``p^T p``, a batch-level estimate of
  P(clean | observed);
* ``y_ld``  ``p @ M^T`` with both factors detached, sharpened by a
  temperature softmax and smoothed per sample by an EMA across epochs;
* ``L_LD``  ``mean log(1 - <target, p>)``, minimised as the inner product
  grows toward 1;
* ``L_M``   squared off-diagonal mass of ``M`` (differentiated through ``M``).

``L_SUM = L_NL + alpha * L_LD + delta * L_M``.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .numcore import ShapeError, matmul, softmax_rows

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
INNER_FLOOR = 1e-8
# Sign applied to log(1 - <target, p>); +1 means minimisation pulls p toward the target.
LD_SIGN_CONVENTION = "+log(1 - <target, p>)"


@dataclass
class LdrConfig:
    alpha: float = 2.0
    beta: float = 0.6
    tau: float = 0.1
    delta: float = 0.6
    enable_ld: bool = True
    enable_m: bool = True
    enable_sharpen: bool = True
    enable_temporal: bool = True

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be > 0")
        if not 0 <= self.beta < 1:
            raise ValueError("beta must lie in [0, 1)")
        if self.alpha < 0 or self.delta < 0:
            raise ValueError("alpha and delta must be >= 0")

    @classmethod
    def ce_only(cls):
        return cls(enable_ld=False, enable_m=False)


@dataclass
class TransitionEstimate:
    matrix: np.ndarray
    batch_size_used: int
    gram: np.ndarray = field(repr=False, default=None)
    row_sums: np.ndarray = field(repr=False, default=None)
    zero_rows: int = 0

    def diag_mean(self):
        return float(np.mean(np.diag(self.matrix)))

    def offdiag_mean(self):
        K = self.matrix.shape[0]
        return float((self.matrix.sum() - np.trace(self.matrix)) / (K * (K - 1)))


def _onehot(labels, K):
    out = np.zeros((len(labels), K))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def loss_nl(probs, onehot):
    """Cross-entropy on observed labels; returns (value, dL/dp)."""
    bs = probs.shape[0]
    clipped = np.maximum(probs, PROB_FLOOR)
    value = -float(np.sum(onehot * np.log(clipped))) / bs
    grad = np.where(probs > PROB_FLOOR, -onehot / clipped, 0.0) / bs
    return value, grad


def estimate_transition(probs):
    """Row-normalised column Gram matrix of the batch predictions."""
    probs = np.asarray(probs, dtype=np.float64)
    gram = matmul(probs.T, probs)
    row_sums = gram.sum(axis=1)
    zero = row_sums <= 0
    K = gram.shape[0]
    safe = np.where(zero, 1.0, row_sums)
    m = gram / safe[:, None]
    if np.any(zero):
        m[zero] = 1.0 / K
        log.warning("transition estimate: %d all-zero Gram rows replaced by uniform", int(zero.sum()))
    return TransitionEstimate(m, probs.shape[0], gram, row_sums, int(zero.sum()))


def transition_backward(probs, est, grad_m):
    """Pull dL/dM back through row normalisation and the Gram product to dL/dp."""
    m, s = est.matrix, est.row_sums
    # d(G_kl / s_k)/dG_kj = delta_lj / s_k - G_kl / s_k^2
    grad_g = (grad_m - np.sum(grad_m * m, axis=1, keepdims=True)) / np.where(s > 0, s, 1.0)[:, None]
    grad_g[s <= 0] = 0.0
    return matmul(probs, grad_g + grad_g.T)


def estimate_ld(probs, est):
    """Instance-specific label distribution ``p @ M^T``; a constant w.r.t. the model."""
    probs = np.asarray(probs, dtype=np.float64)
    m = est.matrix if isinstance(est, TransitionEstimate) else np.asarray(est)
    if probs.shape[1] != m.shape[1]:
        raise ShapeError(f"estimate_ld shape mismatch: {probs.shape} vs {m.shape}")
    return matmul(probs, m.T)


def sharpen(ld, tau):
    if not tau > 0:
        raise ValueError("tau must be > 0")
    return softmax_rows(np.asarray(ld, dtype=np.float64) / tau)


class TargetStore:
    """Per-sample EMA targets, all-zero until a sample is first visited."""

    def __init__(self, num_classes, num_samples=0):
        self.num_classes = num_classes
        self.targets = np.zeros((num_samples, num_classes))
        self.epoch_counter = 0

    def _ensure(self, max_id):
        if max_id >= len(self.targets):
            grown = np.zeros((max_id + 1, self.num_classes))
            grown[:len(self.targets)] = self.targets
            self.targets = grown

    def get(self, sample_ids):
        ids = np.asarray(sample_ids, dtype=np.int64)
        if ids.size:
            self._ensure(int(ids.max()))
        return self.targets[ids].copy()

    def update(self, sample_ids, sharpened, beta):
        """``t <- beta * t_prev + (1 - beta) * sharpened``; returns the new rows."""
        ids = np.asarray(sample_ids, dtype=np.int64)
        if len(np.unique(ids)) != len(ids):
            raise ValueError("duplicate sample ids in one update")
        self._ensure(int(ids.max()))
        new = beta * self.targets[ids] + (1.0 - beta) * sharpened
        self.targets[ids] = new
        return new.copy()


def update_targets(store, sample_ids, sharpened_ld, beta):
    return store.update(sample_ids, sharpened_ld, beta)


def loss_ld(probs, targets):
    """``mean log(1 - <target_i, p_i>)``; returns (value, dL/dp, n_clamped)."""
    bs = probs.shape[0]
    inner = np.sum(targets * probs, axis=1)
    gap = 1.0 - inner
    clamped = gap < INNER_FLOOR
    n_clamped = int(clamped.sum())
    if n_clamped:
        log.debug("loss_ld: %d rows clamped at the 1 - <t, p> floor", n_clamped)
    value = float(np.sum(np.log(np.where(clamped, INNER_FLOOR, gap)))) / bs
    coef = np.where(clamped, 0.0, -1.0 / np.where(clamped, 1.0, gap)) / bs
    return value, coef[:, None] * targets, n_clamped


def loss_m(est):
    """Squared off-diagonal mass of M; returns (value, dL/dM)."""
    m = est.matrix if isinstance(est, TransitionEstimate) else np.asarray(est)
    off = m - np.diag(np.diag(m))
    return float(np.sum(off * off)), 2.0 * off


def make_targets(probs, est, store, sample_ids, config):
    """Build this step's detached targets (sharpen + EMA), updating ``store``."""
    ld = estimate_ld(probs, est)
    hat = sharpen(ld, config.tau) if config.enable_sharpen else ld
    if config.enable_temporal:
        return store.update(sample_ids, hat, config.beta)
    return hat


@dataclass
class LossBreakdown:
    total: float
    l_nl: float
    l_ld: float = 0.0
    l_m: float = 0.0
    m_diag_mean: float = float("nan")
    m_offdiag_mean: float = float("nan")
    clamped: int = 0
    probs: np.ndarray = field(repr=False, default=None)
    targets: np.ndarray = field(repr=False, default=None)


def combine_terms(l_nl, l_ld, l_m, config):
    """L_NL + (alpha * L_LD + delta * L_M), skipping disabled terms."""
    reg = []
    if config.enable_ld:
        reg.append(config.alpha * l_ld)
    if config.enable_m:
        reg.append(config.delta * l_m)
    return l_nl + sum(reg) if reg else l_nl


def objective(probs, onehot, config, targets=None, est=None):
    """L_SUM and dL_SUM/dp for fixed (detached) targets.

    ``est`` is recomputed from ``probs`` when not given; the L_M gradient
    always flows through the Gram construction.
    """
    l_nl, grad = loss_nl(probs, onehot)
    l_ld, l_m, clamped = 0.0, 0.0, 0
    if config.enable_ld:
        l_ld, g_ld, clamped = loss_ld(probs, targets)
        grad = grad + config.alpha * g_ld
    if config.enable_m:
        if est is None:
            est = estimate_transition(probs)
        l_m, g_m = loss_m(est)
        grad = grad + transition_backward(probs, est, config.delta * g_m)
    total = combine_terms(l_nl, l_ld, l_m, config)
    return LossBreakdown(total, l_nl, l_ld, l_m, clamped=clamped, targets=targets), grad


def loss_sum(batch, model, store, config):
    """Forward, build targets, evaluate L_SUM and backprop into ``model``.

    ``batch`` is ``(sample_ids, inputs, observed_labels)``.  Parameter
    gradients accumulate into ``model``; the caller steps the optimizer.
    """
    sample_ids, inputs, labels = batch
    probs = model.forward(inputs)
    onehot = _onehot(labels, probs.shape[1])
    est = targets = None
    if config.enable_ld or config.enable_m:
        est = estimate_transition(probs)
    if config.enable_ld:
        targets = make_targets(probs, est, store, sample_ids, config)
    terms, grad = objective(probs, onehot, config, targets=targets, est=est)
    model.backward(grad)
    if est is not None:
        terms.m_diag_mean = est.diag_mean()
        terms.m_offdiag_mean = est.offdiag_mean()
    terms.probs = probs
    return terms
