"""SmoothKWTA mask configurer and the static-mask variants.

A configured mask comes from three stages: a few Adam steps on cold-started
mask logits through the sigmoid-relaxed forward pass, ``T`` passes of a
uniform ``s x s`` toroidal smoothing kernel over the ``D x D`` logit grid,
and k-winner-take-all binarisation.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .backbone import GridSpec, NeuronBank, neuron_outputs, readout, readout_backward
from .errors import CapacityError, ConfigError, NumericalError, UsageError
from .numcore import AdamState, LossKind, adam_step, loss_and_grad, sigmoid


class Provenance(str, enum.Enum):
    CONFIGURED = "configured"
    FIXED_BLOCK = "fixed-block"
    SINGLE_BLOCK = "single-block"
    ALL_ONES = "all-ones"


@dataclass
class Mask:
    logits: np.ndarray
    gates: np.ndarray
    provenance: Provenance
    grid: GridSpec
    task_index: int | None = None

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.gates)

    def to_text(self) -> str:
        return "".join("1" if g else "0" for g in self.gates.astype(bool))

    @classmethod
    def from_text(cls, text: str, grid: GridSpec, provenance=Provenance.CONFIGURED, task_index=None):
        text = "".join(text.split())
        if len(text) != grid.H or set(text) - {"0", "1"}:
            raise ConfigError(f"mask text must be {grid.H} characters of 0/1")
        gates = np.frombuffer(text.encode(), dtype=np.uint8) - ord("0")
        return cls(np.zeros(grid.H), gates.astype(np.float64), Provenance(provenance), grid, task_index)


ADAPTIVE = ("ftn-fast", "ftn-slow", "kwta-only")
STATIC = ("fixed-mask", "no-mask", "ewc", "all-ones")
VARIANTS = ADAPTIVE + STATIC

# (kernel side, smoothing passes)
LATERAL = {"ftn-fast": (17, 2), "ftn-slow": (3, 15), "kwta-only": (1, 0)}


@dataclass(frozen=True)
class ConfigurerSpec:
    variant: str
    kernel_s: int = 1
    lateral_T: int = 0
    reconfig_S: int = 1
    reconfig_lr: float = 1.0
    k: int = 128
    schedule: str = "per-epoch"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if self.kernel_s < 1 or self.kernel_s % 2 == 0:
            raise ConfigError(f"kernel side must be odd and >= 1, got {self.kernel_s}")
        if self.lateral_T < 0:
            raise ConfigError("lateral_T must be >= 0")
        if self.adaptive and self.reconfig_S < 1:
            raise ConfigError("adaptive variants need reconfig_S >= 1")
        if self.schedule not in ("per-batch", "per-epoch"):
            raise ConfigError(f"schedule must be per-batch or per-epoch, got {self.schedule!r}")
        if self.k < 1:
            raise ConfigError("k must be >= 1")

    @property
    def adaptive(self) -> bool:
        return self.variant in ADAPTIVE


def variant_spec(variant: str, k: int = 128, reconfig_S: int = 1, reconfig_lr: float = 1.0,
                 schedule: str = "per-epoch") -> ConfigurerSpec:
    """Table of variants: kernel side and pass count are fixed per variant."""
    s, T = LATERAL.get(variant, (1, 0))
    return ConfigurerSpec(variant, s, T, reconfig_S, reconfig_lr, k, schedule)


def lateral_smooth(field: np.ndarray, s: int, T: int) -> np.ndarray:
    """``T`` passes of the mean over each cell's ``s x s`` toroidal neighbourhood.

    Neighbourhoods wider than the grid wrap and count cells with
    multiplicity. Shifts are summed in a fixed order, so the result is
    bitwise equivariant under circular shifts of the input.
    """
    if s < 1 or s % 2 == 0:
        raise ConfigError(f"kernel side must be odd and >= 1, got {s}")
    if T < 0:
        raise ConfigError("number of passes must be >= 0")
    out = np.array(field, dtype=np.float64)
    if out.ndim != 2 or out.shape[0] != out.shape[1]:
        raise ConfigError(f"field must be square, got {out.shape}")
    r = s // 2
    for _ in range(T):
        rows = np.zeros_like(out)
        for d in range(-r, r + 1):
            rows += np.roll(out, d, axis=0)
        acc = np.zeros_like(out)
        for d in range(-r, r + 1):
            acc += np.roll(rows, d, axis=1)
        out = acc / (s * s)
    return out


def kwta(values: np.ndarray, k: int) -> np.ndarray:
    """Binary vector with ones at the ``k`` largest values; ties go to the lower index."""
    values = np.asarray(values, dtype=np.float64)
    H = values.shape[0]
    if not 1 <= k <= H:
        raise ConfigError(f"k={k} outside [1, {H}]")
    if np.isnan(values).any():
        raise ConfigError("kwta received NaN values")
    order = np.argsort(-values, kind="stable")
    out = np.zeros(H, dtype=np.float64)
    out[order[:k]] = 1.0
    return out


def propose_logits(model: NeuronBank, X, Y, spec: ConfigurerSpec, loss: LossKind) -> np.ndarray:
    """Stage 1: ``S`` Adam steps on zero-initialised logits, fresh optimizer state.

    Neuron outputs do not depend on the mask and dropout is off, so ``z``
    is computed once and only the gated readout is repeated per step.
    """
    z = neuron_outputs(model, X)
    logits = np.zeros(model.H)
    opt = AdamState(lr=spec.reconfig_lr)
    for _ in range(spec.reconfig_S):
        gates = sigmoid(logits)
        y_hat = readout(model, z, gates)
        _, dy = loss_and_grad(loss, y_hat, Y)
        _, _, g_gates = readout_backward(model, z, gates, dy)
        adam_step(opt, logits, g_gates * gates * (1.0 - gates))
    return logits


def configure_mask(model: NeuronBank, batch, spec: ConfigurerSpec, loss: LossKind) -> Mask:
    if not spec.adaptive:
        raise UsageError(f"variant {spec.variant!r} does not configure masks; use static_mask")
    X, Y = batch
    if len(X) == 0:
        raise UsageError("configure_mask needs a non-empty batch")
    D = model.grid.D
    logits = propose_logits(model, X, Y, spec, loss)
    if not np.isfinite(logits).all():
        raise NumericalError("mask proposal produced non-finite logits")
    smoothed = lateral_smooth(logits.reshape(D, D), spec.kernel_s, spec.lateral_T).reshape(-1)
    gates = kwta(smoothed, spec.k)
    return Mask(logits, gates, Provenance.CONFIGURED, model.grid)


def static_mask(variant: str, grid: GridSpec, task_index: int) -> Mask:
    k, H = grid.k, grid.H
    gates = np.zeros(H)
    if variant == "fixed-mask":
        if (task_index + 1) * k > H:
            raise CapacityError(
                f"fixed-mask: task {task_index} needs slots [{task_index * k}, {(task_index + 1) * k}) "
                f"but the grid has only {H} ({H // k} disjoint blocks of {k})"
            )
        gates[task_index * k:(task_index + 1) * k] = 1.0
        prov = Provenance.FIXED_BLOCK
    elif variant in ("no-mask", "ewc"):
        gates[:k] = 1.0
        prov = Provenance.SINGLE_BLOCK
    elif variant == "all-ones":
        gates[:] = 1.0
        prov = Provenance.ALL_ONES
    else:
        raise UsageError(f"variant {variant!r} has no static mask")
    return Mask(np.zeros(H), gates, prov, grid, task_index)
