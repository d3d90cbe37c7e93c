"""Elastic Weight Consolidation on the shared single-block model."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backbone import PARAM_NAMES, GridSpec, NeuronBank, forward, load_checkpoint, per_sample_squared_grads, save_checkpoint
from .errors import UsageError
from .numcore import LossKind, per_sample_loss_grad


@dataclass(frozen=True)
class EwcAnchor:
    task_index: int
    theta_star: dict  # name -> snapshot at task end
    fisher: dict  # name -> diagonal Fisher estimate, >= 0
    lam: float
    grid: GridSpec

    def save(self, directory) -> None:
        """Two checkpoint-format files: parameters and Fisher diagonal."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for tag, tensors in (("theta", self.theta_star), ("fisher", self.fisher)):
            bank = NeuronBank(self.grid, **tensors)
            save_checkpoint(bank, d / f"anchor{self.task_index}_{tag}.ftn")

    @classmethod
    def load(cls, directory, task_index: int, lam: float) -> "EwcAnchor":
        d = Path(directory)
        theta = load_checkpoint(d / f"anchor{task_index}_theta.ftn")
        fisher = load_checkpoint(d / f"anchor{task_index}_fisher.ftn")
        return cls(task_index, theta.tensors(), fisher.tensors(), lam, theta.grid)


def estimate_fisher(model: NeuronBank, batches, gates: np.ndarray, loss_kind: LossKind,
                    task_index: int = 0, lam: float = 400.0) -> EwcAnchor:
    """Empirical diagonal Fisher: mean over samples of squared per-sample log-likelihood gradients.

    Evaluated without dropout. Slices of neurons whose gate is 0 get exactly
    zero gradient and hence zero Fisher.
    """
    total = {name: np.zeros_like(getattr(model, name)) for name in PARAM_NAMES}
    n = 0
    for X, Y in batches:
        if len(X) == 0:
            continue
        y_hat, cache = forward(model, X, gates, mode="eval")
        sq = per_sample_squared_grads(cache, per_sample_loss_grad(loss_kind, y_hat, Y))
        for name in PARAM_NAMES:
            total[name] += sq[name]
        n += len(X)
    if n == 0:
        raise UsageError("estimate_fisher needs at least one sample")
    fisher = {name: t / n for name, t in total.items()}
    theta = {name: getattr(model, name).copy() for name in PARAM_NAMES}
    return EwcAnchor(task_index, theta, fisher, float(lam), model.grid)


def ewc_penalty_grad(model: NeuronBank, anchors) -> tuple[float, dict]:
    """Sum over anchors of ``lam/2 * sum F (theta - theta*)^2`` and its gradient."""
    grads = {name: np.zeros_like(getattr(model, name)) for name in PARAM_NAMES}
    penalty = 0.0
    for a in anchors:
        for name in PARAM_NAMES:
            delta = getattr(model, name) - a.theta_star[name]
            weighted = a.fisher[name] * delta
            penalty += 0.5 * a.lam * float(np.sum(weighted * delta))
            grads[name] += a.lam * weighted
    return penalty, grads
