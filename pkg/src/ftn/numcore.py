"""Seeded randomness, Adam with hard reset, and losses with analytic gradients.

All arithmetic is float64.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError

# One stream per purpose so that e.g. drawing extra reconfiguration batches
# never shifts the training data or the dropout pattern.
STREAM_INIT = 0
STREAM_DROPOUT = 1
STREAM_DATA = 2
STREAM_PERM = 3
STREAM_RECFG = 4
STREAM_EVAL = 5
STREAM_SUPPORT = 6
STREAM_FISHER = 7
STREAM_ENCODER = 8


class RngStream:
    """Counter-based random stream keyed by ``(seed, stream_id)``.

    Backed by numpy's Philox generator, so draws depend only on the key and
    the number of values consumed so far.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        if seed < 0 or stream_id < 0:
            raise ConfigError("seed and stream_id must be non-negative")
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        ss = np.random.SeedSequence([self.seed, self.stream_id])
        self.generator = np.random.Generator(np.random.Philox(ss))

    def substream(self, *key: int) -> "RngStream":
        """Independent child stream, e.g. one per task index."""
        child = RngStream.__new__(RngStream)
        child.seed = self.seed
        child.stream_id = self.stream_id
        ss = np.random.SeedSequence([self.seed, self.stream_id, *[int(k) for k in key]])
        child.generator = np.random.Generator(np.random.Philox(ss))
        return child

    def uniform(self, n, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        return rng_uniform(self, n, lo, hi)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


def rng_uniform(stream: RngStream, n, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    if not lo < hi:
        raise ConfigError(f"rng_uniform needs lo < hi, got lo={lo}, hi={hi}")
    u = stream.generator.random(n)
    out = lo + (hi - lo) * u
    # rounding can land exactly on hi for tiny intervals
    return np.minimum(out, np.nextafter(hi, lo))


@dataclass
class AdamState:
    """Adam moments for one parameter tensor.

    Moments are allocated lazily; ``None`` means all-zero.
    """

    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)
    step: int = 0

    def reset(self) -> "AdamState":
        return adam_reset(self)


def adam_step(state: AdamState, param: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Bias-corrected Adam update, in place on ``param``. No weight decay."""
    if grad.shape != param.shape:
        raise ConfigError(f"grad shape {grad.shape} != param shape {param.shape}")
    if state.m is None:
        state.m = np.zeros_like(param, dtype=np.float64)
        state.v = np.zeros_like(param, dtype=np.float64)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * grad
    state.v *= b2
    state.v += (1.0 - b2) * (grad * grad)
    m_hat = state.m / (1.0 - b1**state.step)
    v_hat = state.v / (1.0 - b2**state.step)
    param -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return param


def adam_reset(state: AdamState) -> AdamState:
    state.m = None
    state.v = None
    state.step = 0
    return state


class LossKind(str, enum.Enum):
    CROSS_ENTROPY = "cross-entropy"
    MSE = "mse"


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _check_targets(kind: LossKind, predictions: np.ndarray, targets: np.ndarray) -> np.ndarray:
    if predictions.ndim != 2 or predictions.shape[0] < 1:
        raise ConfigError(f"predictions must be [B, d_out] with B >= 1, got {predictions.shape}")
    B, d_out = predictions.shape
    targets = np.asarray(targets)
    if targets.shape[0] != B:
        raise ConfigError(f"{targets.shape[0]} targets for a batch of {B}")
    if kind is LossKind.CROSS_ENTROPY:
        if not np.issubdtype(targets.dtype, np.integer):
            raise DataError("cross-entropy needs integer class targets")
        if targets.min() < 0 or targets.max() >= d_out:
            raise DataError(f"class target outside [0, {d_out})")
        return targets
    targets = targets.astype(np.float64).reshape(B, -1)
    if targets.shape[1] != d_out:
        raise ConfigError(f"MSE targets have width {targets.shape[1]}, predictions {d_out}")
    return targets


def loss_and_grad(kind: LossKind, predictions: np.ndarray, targets) -> tuple[float, np.ndarray]:
    """Batch-mean loss and its gradient with respect to ``predictions``."""
    kind = LossKind(kind)
    targets = _check_targets(kind, predictions, targets)
    B = predictions.shape[0]
    if kind is LossKind.CROSS_ENTROPY:
        logp = log_softmax(predictions)
        rows = np.arange(B)
        loss = -logp[rows, targets].mean()
        grad = np.exp(logp)
        grad[rows, targets] -= 1.0
        grad /= B
        return float(loss), grad
    diff = predictions - targets
    loss = np.mean(diff * diff)
    grad = (2.0 / diff.size) * diff
    return float(loss), grad


def per_sample_loss_grad(kind: LossKind, predictions: np.ndarray, targets) -> np.ndarray:
    """Gradient of each sample's own loss (no 1/B), used for Fisher estimates."""
    kind = LossKind(kind)
    targets = _check_targets(kind, predictions, targets)
    if kind is LossKind.CROSS_ENTROPY:
        grad = np.exp(log_softmax(predictions))
        grad[np.arange(predictions.shape[0]), targets] -= 1.0
        return grad
    return (2.0 / predictions.shape[1]) * (predictions - targets)


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out
