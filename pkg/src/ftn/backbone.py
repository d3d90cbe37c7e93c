"""Parallel bank of independent per-neuron MLPs behind a gated linear readout.

Each of the ``H = D*D`` neurons maps the shared input to one scalar through
``L`` tanh layers of width ``d_inner`` and a linear head. The scalars pass
through (inverted) dropout, are multiplied by the gate vector and read out
by ``W_out``, which has no bias. Neuron ``k`` owns exactly the ``k``-th
slice of every tensor except ``W_out``, whose column ``k`` is tied to it.

Backward is derived by hand; a neuron with gate 0 receives gradients that
are exactly 0.0 in all its slices and in its readout column.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, UsageError
from .numcore import AdamState, LossKind, RngStream, adam_reset, adam_step, loss_and_grad, sigmoid

PARAM_NAMES = ("w_in", "b_in", "w_hid", "b_hid", "w_head", "b_head", "w_out")


@dataclass(frozen=True)
class GridSpec:
    D: int = 32
    k: int = 128
    d_in: int = 784
    d_out: int = 10
    L: int = 8
    d_inner: int = 8
    dropout_p: float = 0.2

    def __post_init__(self):
        if self.D < 1:
            raise ConfigError("grid side D must be >= 1")
        if not 1 <= self.k <= self.H:
            raise ConfigError(f"k={self.k} outside [1, H={self.H}]")
        if self.L < 1 or self.d_inner < 1 or self.d_in < 1 or self.d_out < 1:
            raise ConfigError("L, d_inner, d_in and d_out must be positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("dropout_p must lie in [0, 1)")

    @property
    def H(self) -> int:
        return self.D * self.D


@dataclass
class NeuronBank:
    grid: GridSpec
    w_in: np.ndarray  # [H, d_inner, d_in]
    b_in: np.ndarray  # [H, d_inner]
    w_hid: np.ndarray  # [H, L-1, d_inner, d_inner]
    b_hid: np.ndarray  # [H, L-1, d_inner]
    w_head: np.ndarray  # [H, d_inner]
    b_head: np.ndarray  # [H]
    w_out: np.ndarray  # [d_out, H]
    version: int = field(default=0, compare=False)

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "NeuronBank":
        return NeuronBank(self.grid, *(getattr(self, n).copy() for n in PARAM_NAMES))

    def touch(self):
        """Mark parameters as modified; invalidates outstanding caches."""
        self.version += 1

    @property
    def H(self) -> int:
        return self.grid.H


def param_shapes(grid: GridSpec) -> dict[str, tuple[int, ...]]:
    H, L, di = grid.H, grid.L, grid.d_inner
    return {
        "w_in": (H, di, grid.d_in),
        "b_in": (H, di),
        "w_hid": (H, L - 1, di, di),
        "b_hid": (H, L - 1, di),
        "w_head": (H, di),
        "b_head": (H,),
        "w_out": (grid.d_out, H),
    }


def init_model(grid: GridSpec, rng: RngStream, gain: float = 1.0) -> NeuronBank:
    """Weights uniform in +-sqrt(1/fan_in), biases zero.

    ``gain`` scales the bound of the hidden and head layers only. The input
    layer and the readout always use the plain fan-in bound.
    """
    if gain <= 0:
        raise ConfigError(f"init gain must be > 0, got {gain}")
    shapes = param_shapes(grid)
    fan_in = {"w_in": grid.d_in, "w_hid": grid.d_inner, "w_head": grid.d_inner, "w_out": grid.H}
    tensors = {}
    for name in PARAM_NAMES:
        if name in fan_in:
            a = math.sqrt(1.0 / fan_in[name])
            if name in ("w_hid", "w_head"):
                a *= gain
            tensors[name] = rng.uniform(shapes[name], -a, a)
        else:
            tensors[name] = np.zeros(shapes[name])
    return NeuronBank(grid, **tensors)


def zero_grads(model: NeuronBank) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(t) for name, t in model.tensors().items()}


# --------------------------------------------------------------------------
# forward / backward


@dataclass
class NeuronCache:
    x: np.ndarray
    acts: list  # tanh outputs per layer, each [H, B, d_inner]
    z: np.ndarray  # [B, H]


@dataclass
class ForwardCache:
    model: NeuronBank
    version: int
    neurons: NeuronCache
    keep: np.ndarray | None  # inverted-dropout multipliers [B, H], None in eval mode
    dropped: np.ndarray  # drop(z) [B, H]
    gates: np.ndarray  # [H]
    logits: np.ndarray | None  # set for the relaxed (sigmoid) forward


def neuron_outputs(model: NeuronBank, x: np.ndarray, keep_cache: bool = False):
    """Scalar outputs ``z`` of all neurons, shape [B, H].

    Returns ``(z, cache)`` when ``keep_cache`` is set.
    """
    g = model.grid
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != g.d_in:
        raise ConfigError(f"input must be [B, {g.d_in}], got {x.shape}")
    B, H, di = x.shape[0], g.H, g.d_inner
    pre = (x @ model.w_in.reshape(H * di, g.d_in).T).reshape(B, H, di)
    h = np.ascontiguousarray(pre.transpose(1, 0, 2))
    h += model.b_in[:, None, :]
    np.tanh(h, out=h)
    acts = [h]
    for layer in range(g.L - 1):
        h = np.matmul(h, model.w_hid[:, layer].transpose(0, 2, 1))
        h += model.b_hid[:, layer][:, None, :]
        np.tanh(h, out=h)
        acts.append(h)
    z = np.einsum("hbi,hi->bh", h, model.w_head) + model.b_head
    if keep_cache:
        return z, NeuronCache(x, acts, z)
    return z


def readout(model: NeuronBank, dropped: np.ndarray, gates: np.ndarray) -> np.ndarray:
    return (dropped * gates) @ model.w_out.T


def readout_backward(model: NeuronBank, dropped: np.ndarray, gates: np.ndarray, dy: np.ndarray):
    """Gradients w.r.t. ``W_out``, ``drop(z)`` and the gate vector."""
    gated = dropped * gates
    g_w_out = dy.T @ gated
    g_gated = dy @ model.w_out
    g_gates = np.einsum("bh,bh->h", g_gated, dropped)
    g_dropped = g_gated * gates
    return g_w_out, g_dropped, g_gates


def forward(
    model: NeuronBank,
    x: np.ndarray,
    gates=None,
    mode: str = "eval",
    rng: RngStream | None = None,
    logits: np.ndarray | None = None,
):
    """Masked forward pass. Returns ``(y_hat, cache)``.

    ``gates`` may be any real vector in [0, 1]^H; binary masks are the usual
    case. Passing ``logits`` instead runs the relaxed forward with
    ``gates = sigmoid(logits)`` and makes :func:`backward` report the
    gradient for the logits.
    """
    g = model.grid
    if logits is not None:
        logits = np.asarray(logits, dtype=np.float64)
        if logits.shape != (g.H,):
            raise ConfigError(f"mask logits must have length {g.H}")
        gates = sigmoid(logits)
    if gates is None:
        raise ConfigError("forward needs gates or logits")
    gates = np.asarray(gates, dtype=np.float64)
    if gates.shape != (g.H,):
        raise ConfigError(f"mask must have length {g.H}, got {gates.shape}")
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    z, ncache = neuron_outputs(model, x, keep_cache=True)
    keep = None
    dropped = z
    if mode == "train" and g.dropout_p > 0.0:
        if rng is None:
            raise ConfigError("train-mode forward needs a dropout RngStream")
        u = rng.generator.random(z.shape)
        keep = (u >= g.dropout_p) / (1.0 - g.dropout_p)
        dropped = z * keep
    y = readout(model, dropped, gates)
    cache = ForwardCache(model, model.version, ncache, keep, dropped, gates, logits)
    return y, cache


def backward(cache: ForwardCache, dy: np.ndarray):
    """Analytic gradients. Returns ``(grads, mask_grad)``.

    ``mask_grad`` is w.r.t. the logits for a relaxed forward, otherwise
    w.r.t. the gate vector.
    """
    model = cache.model
    if cache.version != model.version:
        raise UsageError("stale forward cache: model parameters changed since forward()")
    g = model.grid
    dy = np.asarray(dy, dtype=np.float64)
    if dy.shape != (cache.dropped.shape[0], g.d_out):
        raise ConfigError(f"dL/dy must be [B, {g.d_out}], got {dy.shape}")

    grads = {}
    grads["w_out"], g_dropped, g_gates = readout_backward(model, cache.dropped, cache.gates, dy)
    if cache.logits is not None:
        s = cache.gates
        mask_grad = g_gates * s * (1.0 - s)
    else:
        mask_grad = g_gates
    g_z = g_dropped if cache.keep is None else g_dropped * cache.keep
    grads.update(neuron_backward(model, cache.neurons, g_z))
    return grads, mask_grad


def neuron_backward(model: NeuronBank, nc: NeuronCache, g_z: np.ndarray) -> dict[str, np.ndarray]:
    g = model.grid
    H, di = g.H, g.d_inner
    B = g_z.shape[0]
    gz = g_z.T  # [H, B]
    h = nc.acts[-1]
    grads = {}
    grads["w_head"] = np.einsum("hb,hbi->hi", gz, h)
    grads["b_head"] = gz.sum(axis=1)
    g_h = gz[:, :, None] * model.w_head[:, None, :]
    g_w_hid = np.zeros_like(model.w_hid)
    g_b_hid = np.zeros_like(model.b_hid)
    for layer in range(g.L - 2, -1, -1):
        h = nc.acts[layer + 1]
        g_pre = g_h * (1.0 - h * h)
        h_prev = nc.acts[layer]
        g_w_hid[:, layer] = np.matmul(g_pre.transpose(0, 2, 1), h_prev)
        g_b_hid[:, layer] = g_pre.sum(axis=1)
        g_h = np.matmul(g_pre, model.w_hid[:, layer])
    grads["w_hid"] = g_w_hid
    grads["b_hid"] = g_b_hid
    h = nc.acts[0]
    g_pre = g_h * (1.0 - h * h)  # [H, B, di]
    grads["b_in"] = g_pre.sum(axis=1)
    flat = g_pre.transpose(1, 0, 2).reshape(B, H * di)
    grads["w_in"] = (flat.T @ nc.x).reshape(H, di, g.d_in)
    return grads


def per_sample_squared_grads(cache: ForwardCache, dy_each: np.ndarray) -> dict[str, np.ndarray]:
    """Sum over samples of squared per-sample gradients.

    ``dy_each[b]`` is the gradient of sample ``b``'s own loss. Every
    parameter gradient of a single sample is an outer product of a
    backpropagated signal and an activation, so its elementwise square
    factorises and the sum over samples becomes one contraction.
    """
    model = cache.model
    if cache.version != model.version:
        raise UsageError("stale forward cache: model parameters changed since forward()")
    g = model.grid
    H, di = g.H, g.d_inner
    B = dy_each.shape[0]
    nc = cache.neurons
    gated = cache.dropped * cache.gates
    out = {"w_out": (dy_each**2).T @ gated**2}
    g_dropped = (dy_each @ model.w_out) * cache.gates
    g_z = g_dropped if cache.keep is None else g_dropped * cache.keep
    # per-sample backprop signals keep the batch axis separate, so the same
    # chain as neuron_backward applies sample by sample
    gz = g_z.T
    h = nc.acts[-1]
    out["w_head"] = np.einsum("hb,hbi->hi", gz**2, h**2)
    out["b_head"] = (gz**2).sum(axis=1)
    g_h = gz[:, :, None] * model.w_head[:, None, :]
    sq_w_hid = np.zeros_like(model.w_hid)
    sq_b_hid = np.zeros_like(model.b_hid)
    for layer in range(g.L - 2, -1, -1):
        h = nc.acts[layer + 1]
        g_pre = g_h * (1.0 - h * h)
        h_prev = nc.acts[layer]
        sq_w_hid[:, layer] = np.matmul((g_pre**2).transpose(0, 2, 1), h_prev**2)
        sq_b_hid[:, layer] = (g_pre**2).sum(axis=1)
        g_h = np.matmul(g_pre, model.w_hid[:, layer])
    out["w_hid"] = sq_w_hid
    out["b_hid"] = sq_b_hid
    h = nc.acts[0]
    g_pre = g_h * (1.0 - h * h)
    out["b_in"] = (g_pre**2).sum(axis=1)
    flat = (g_pre**2).transpose(1, 0, 2).reshape(B, H * di)
    out["w_in"] = (flat.T @ nc.x**2).reshape(H, di, g.d_in)
    return out


# --------------------------------------------------------------------------
# training


def make_optimizer(model: NeuronBank, lr: float = 3e-4) -> dict[str, AdamState]:
    return {name: AdamState(lr=lr) for name in PARAM_NAMES}


def reset_optimizer(opt: dict[str, AdamState]) -> None:
    for state in opt.values():
        adam_reset(state)


def train_step(
    model: NeuronBank,
    batch,
    gates: np.ndarray,
    opt: dict[str, AdamState],
    rng: RngStream,
    loss_kind: LossKind,
    extra_grads=None,
) -> float:
    """One train-mode forward/backward and an Adam step on every model tensor.

    ``extra_grads`` (e.g. an EWC penalty gradient) is a callable returning a
    dict of gradients that get added before the update.
    """
    x, y = batch
    y_hat, cache = forward(model, x, gates, mode="train", rng=rng)
    loss, dy = loss_and_grad(loss_kind, y_hat, y)
    grads, _ = backward(cache, dy)
    if extra_grads is not None:
        for name, g in extra_grads(model).items():
            grads[name] = grads[name] + g
    for name in PARAM_NAMES:
        adam_step(opt[name], getattr(model, name), grads[name])
    model.touch()
    return loss


# --------------------------------------------------------------------------
# fingerprints and checkpoints


def param_fingerprint(model: NeuronBank, neurons) -> str:
    """SHA-256 over the selected neurons' slices and readout columns."""
    idx = sorted({int(k) for k in neurons})
    if idx and (idx[0] < 0 or idx[-1] >= model.H):
        raise ConfigError("neuron index out of range")
    h = hashlib.sha256()
    for name in PARAM_NAMES:
        t = getattr(model, name)
        for k in idx:
            piece = t[:, k] if name == "w_out" else t[k]
            h.update(np.ascontiguousarray(piece, dtype="<f8").tobytes())
    return h.hexdigest()


CHECKPOINT_MAGIC = b"FTN1"
_HEADER = struct.Struct("<4s6I")


def save_checkpoint(model: NeuronBank, path) -> None:
    g = model.grid
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CHECKPOINT_MAGIC, g.D, g.H, g.L, g.d_inner, g.d_in, g.d_out))
        for name in PARAM_NAMES:
            fh.write(np.ascontiguousarray(getattr(model, name), dtype="<f8").tobytes())


def load_checkpoint(path, k: int | None = None, dropout_p: float = 0.2) -> NeuronBank:
    """Read a checkpoint. ``k`` and dropout are not stored in the file."""
    from .errors import IngestionError

    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise IngestionError("truncated checkpoint header", path, len(raw))
    magic, D, H, L, d_inner, d_in, d_out = _HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise IngestionError(f"bad checkpoint magic {magic!r}", path, 0)
    if H != D * D:
        raise IngestionError(f"header H={H} is not D^2 for D={D}", path, 8)
    grid = GridSpec(D=D, k=k if k is not None else min(128, H), d_in=d_in, d_out=d_out,
                    L=L, d_inner=d_inner, dropout_p=dropout_p)
    offset = _HEADER.size
    tensors = {}
    for name, shape in param_shapes(grid).items():
        n = int(np.prod(shape))
        end = offset + 8 * n
        if end > len(raw):
            raise IngestionError(f"truncated tensor {name}", path, offset)
        tensors[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).reshape(shape).astype(np.float64)
        offset = end
    if offset != len(raw):
        raise IngestionError("trailing bytes after last tensor", path, offset)
    return NeuronBank(grid, **tensors)
