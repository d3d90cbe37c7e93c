"""Block-sequential training, stored/recovered evaluation and continual-learning metrics."""

from __future__ import annotations

import functools
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import (
    GridSpec,
    NeuronBank,
    init_model,
    make_optimizer,
    neuron_outputs,
    readout,
    reset_optimizer,
    train_step,
)
from .baselines import estimate_fisher, ewc_penalty_grad
from .config import ExperimentConfig
from .configurer import Mask, configure_mask, static_mask, variant_spec
from .errors import ConfigError, NumericalError, UsageError
from .numcore import (
    STREAM_DATA,
    STREAM_DROPOUT,
    STREAM_EVAL,
    STREAM_FISHER,
    STREAM_INIT,
    STREAM_RECFG,
    STREAM_SUPPORT,
    LossKind,
    RngStream,
)
from .tasks import (
    SyntheticSpec,
    TaskStream,
    load_mnist_idx,
    permuted_pixel_stream,
    shuffled_label_stream,
    synthetic_batch,
    synthetic_stream,
)

log = logging.getLogger(__name__)

ACCURACY = "accuracy"
MSE = "mse"


# --------------------------------------------------------------------------
# performance matrices and metrics


@dataclass
class PerfMatrix:
    """``R[i, j]``: score on task ``j`` after finishing block ``i`` (``j <= i``)."""

    R: np.ndarray
    kind: str = ACCURACY
    protocol: str = "stored"

    @classmethod
    def empty(cls, n: int, kind=ACCURACY, protocol="stored") -> "PerfMatrix":
        return cls(np.full((n, n), np.nan), kind, protocol)

    @property
    def n(self) -> int:
        return self.R.shape[0]

    def rows(self) -> list:
        return [[None if j > i else float(self.R[i, j]) for j in range(self.n)] for i in range(self.n)]

    @classmethod
    def from_rows(cls, rows, kind=ACCURACY, protocol="stored") -> "PerfMatrix":
        n = len(rows)
        R = np.full((n, n), np.nan)
        for i, row in enumerate(rows):
            for j, v in enumerate(row[: i + 1]):
                R[i, j] = np.nan if v is None else v
        return cls(R, kind, protocol)

    def to_csv(self) -> str:
        header = "stage," + ",".join(f"task{j}" for j in range(self.n))
        lines = [header]
        for i in range(self.n):
            cells = ["" if j > i else repr(float(self.R[i, j])) for j in range(self.n)]
            lines.append(f"{i}," + ",".join(cells))
        return "\n".join(lines) + "\n"


@dataclass
class MetricsReport:
    acc: float  # mean final-row score (accuracy, or MSE for regression)
    fm: float
    bwt: float
    kind: str = ACCURACY
    single_task: bool = False

    def as_dict(self) -> dict:
        return {"acc": self.acc, "fm": self.fm, "bwt": self.bwt, "kind": self.kind,
                "single_task": self.single_task}


def compute_metrics(M: PerfMatrix) -> MetricsReport:
    """ACC, forgetting measure and backward transfer from the lower triangle.

    Both score kinds use ``FM = mean_j(max_{i>=j} R[i,j] - R[N-1,j])`` and
    ``BWT = mean_j(R[N-1,j] - R[j,j])`` over prior tasks. For accuracy a
    large FM is bad and BWT should be high; for MSE the literal peak-minus-
    final reading is kept and a positive BWT means error went up.
    """
    R, N = M.R, M.n
    if N < 1:
        raise ConfigError("performance matrix is empty")
    acc = float(np.mean(R[N - 1, :N]))
    if N == 1:
        return MetricsReport(acc, 0.0, 0.0, M.kind, single_task=True)
    prior = range(N - 1)
    fm = float(np.mean([np.max(R[j:, j]) - R[N - 1, j] for j in prior]))
    bwt = float(np.mean([R[N - 1, j] - R[j, j] for j in prior]))
    return MetricsReport(acc, fm, bwt, M.kind)


def prior_final_mean(M: PerfMatrix) -> float:
    if M.n < 2:
        raise UsageError("prior-task mean needs at least two tasks")
    return float(np.mean(M.R[M.n - 1, : M.n - 1]))


def decompose_overlap_recall(stored: PerfMatrix, recovered: PerfMatrix, oracle_ref: float):
    """Split the prior-task gap to the oracle into (mask overlap, recall error).

    Signs are arranged so that positive is worse for both score kinds; the
    two components add up to the total recovered-vs-oracle gap.
    """
    if stored.n < 2 or recovered.n != stored.n:
        raise UsageError("decomposition needs two matrices of the same size with N >= 2")
    s, r = prior_final_mean(stored), prior_final_mean(recovered)
    if stored.kind == MSE:
        return s - oracle_ref, r - s
    return oracle_ref - s, s - r


def mask_overlap(m_cur, m_j) -> float:
    """Fraction of the current mask's active slots also active in ``m_j``."""
    a = np.asarray(getattr(m_cur, "gates", m_cur), dtype=np.float64)
    b = np.asarray(getattr(m_j, "gates", m_j), dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigError("masks must have equal length")
    norm = np.abs(a).sum()
    if norm == 0:
        raise UsageError("mask overlap is undefined for an all-zero current mask")
    return float(a @ b / norm)


# --------------------------------------------------------------------------
# scoring


EVAL_CHUNK = 2048


def eval_outputs(model: NeuronBank, X: np.ndarray) -> np.ndarray:
    """Eval-mode neuron outputs in fixed-size chunks (bounded memory, fixed order)."""
    parts = [neuron_outputs(model, X[i:i + EVAL_CHUNK]) for i in range(0, len(X), EVAL_CHUNK)]
    return np.concatenate(parts, axis=0)


def score(y_hat: np.ndarray, y: np.ndarray, kind: str) -> float:
    if kind == ACCURACY:
        # np.argmax returns the first maximum: ties go to the lowest class index
        return float(np.mean(np.argmax(y_hat, axis=1) == y))
    return float(np.mean((y_hat[:, 0] - y) ** 2))


def eval_stored(model, stored_masks, test_sets, kind=ACCURACY, outputs=None) -> list:
    """Score each task under the mask saved when it was trained."""
    row = []
    for j, (X, Y) in enumerate(test_sets):
        if j >= len(stored_masks) or stored_masks[j] is None:
            raise UsageError(f"no stored mask for task {j}")
        z = outputs[j] if outputs is not None else eval_outputs(model, X)
        gates = getattr(stored_masks[j], "gates", stored_masks[j])
        row.append(score(readout(model, z, gates), Y, kind))
    return row


def eval_recovered(model, spec, support_batches, test_sets, loss: LossKind, kind=ACCURACY,
                   static_masks=None, outputs=None) -> tuple[list, list]:
    """Re-run the configurer on each task's support batch, then score.

    Static variants have nothing to recover and reuse ``static_masks``.
    Returns the score row and the masks that were used.
    """
    row, masks = [], []
    for j, (X, Y) in enumerate(test_sets):
        if spec.adaptive:
            mask = configure_mask(model, support_batches[j], spec, loss)
        else:
            mask = static_masks[j]
        z = outputs[j] if outputs is not None else eval_outputs(model, X)
        row.append(score(readout(model, z, mask.gates), Y, kind))
        masks.append(mask)
    return row, masks


# --------------------------------------------------------------------------
# task suites


@dataclass
class TaskData:
    train: TaskStream
    recfg: TaskStream
    fisher: TaskStream
    support: tuple  # (X, Y) batch for the recovered protocol
    scoring: tuple  # (X, Y) held-out scoring set


@functools.lru_cache(maxsize=2)
def _mnist(data_dir: str):
    return load_mnist_idx(data_dir)


def build_tasks(cfg: ExperimentConfig, seed: int, mnist=None) -> list[TaskData]:
    tasks = []
    if cfg.experiment.startswith("synthetic"):
        kind = "regression" if cfg.is_regression else "classification"
        spec = SyntheticSpec.from_seed(seed, kind)
        for t in range(cfg.n_tasks):
            tasks.append(TaskData(
                train=synthetic_stream(spec, t, cfg.batch_train, RngStream(seed, STREAM_DATA).substream(t)),
                recfg=synthetic_stream(spec, t, cfg.batch_recfg, RngStream(seed, STREAM_RECFG).substream(t)),
                fisher=synthetic_stream(spec, t, cfg.fisher_batch_size, RngStream(seed, STREAM_FISHER).substream(t)),
                support=synthetic_batch(spec, t, cfg.support_size, RngStream(seed, STREAM_SUPPORT).substream(t)),
                scoring=synthetic_batch(spec, t, cfg.batch_eval, RngStream(seed, STREAM_EVAL).substream(t)),
            ))
        return tasks

    data = mnist if mnist is not None else _mnist(str(cfg.data_dir))
    make = shuffled_label_stream if cfg.experiment == "mnist-shuffled" else permuted_pixel_stream
    n_test = len(data.test_labels)
    if cfg.support_size >= n_test:
        raise ConfigError("support_size must be smaller than the test set")
    for t in range(cfg.n_tasks):
        train = make(data, t, seed, cfg.batch_train, RngStream(seed, STREAM_DATA).substream(t))
        recfg = make(data, t, seed, cfg.batch_recfg, RngStream(seed, STREAM_RECFG).substream(t))
        fisher = make(data, t, seed, cfg.fisher_batch_size, RngStream(seed, STREAM_FISHER).substream(t))
        # support batch comes from the test split and is excluded from scoring
        order = RngStream(seed, STREAM_SUPPORT).substream(t).generator.permutation(n_test)
        sup_idx, score_idx = np.sort(order[: cfg.support_size]), np.sort(order[cfg.support_size:])
        support = train.transform(data.test_images[sup_idx], data.test_labels[sup_idx])
        scoring = train.transform(data.test_images[score_idx], data.test_labels[score_idx])
        tasks.append(TaskData(train, recfg, fisher, support, scoring))
    return tasks


# --------------------------------------------------------------------------
# runs


@dataclass
class RunRecord:
    config: dict
    seed: int
    stored_masks: list  # per task, string of H '0'/'1' characters
    stored: PerfMatrix
    recovered: PerfMatrix
    recovered_masks: list = field(default_factory=list)  # per stage, per task
    train_loss: list = field(default_factory=list)  # last training loss per block
    wall_times: dict = field(default_factory=dict)

    @property
    def experiment(self) -> str:
        return self.config["experiment"]

    @property
    def variant(self) -> str:
        return self.config["variant"]

    def metrics(self) -> dict:
        return {"stored": compute_metrics(self.stored).as_dict(),
                "recovered": compute_metrics(self.recovered).as_dict()}

    def to_json(self, timings: bool = True) -> str:
        doc = {
            "experiment": self.experiment,
            "variant": self.variant,
            "seed": self.seed,
            "config": self.config,
            "score_kind": self.stored.kind,
            "stored_masks": self.stored_masks,
            "recovered_masks": self.recovered_masks,
            "stored": self.stored.rows(),
            "recovered": self.recovered.rows(),
            "metrics": self.metrics(),
            "train_loss": self.train_loss,
        }
        if timings:
            doc["wall_times"] = self.wall_times
        return json.dumps(doc, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunRecord":
        d = json.loads(text)
        kind = d["score_kind"]
        return cls(
            config=d["config"],
            seed=d["seed"],
            stored_masks=d["stored_masks"],
            stored=PerfMatrix.from_rows(d["stored"], kind, "stored"),
            recovered=PerfMatrix.from_rows(d["recovered"], kind, "recovered"),
            recovered_masks=d.get("recovered_masks", []),
            train_loss=d.get("train_loss", []),
            wall_times=d.get("wall_times", {}),
        )

    def grid(self) -> GridSpec:
        c = self.config
        d_in = 2 if c["experiment"].startswith("synthetic") else 784
        d_out = {"synthetic-clf": 2, "synthetic-reg": 1}.get(c["experiment"], 10)
        return GridSpec(D=c["D"], k=c["k"], d_in=d_in, d_out=d_out, L=c["L"], d_inner=c["d_inner"],
                        dropout_p=c["dropout_p"])


def grid_for(cfg: ExperimentConfig) -> GridSpec:
    return GridSpec(D=cfg.D, k=cfg.k, d_in=cfg.d_in, d_out=cfg.d_out, L=cfg.L, d_inner=cfg.d_inner,
                    dropout_p=cfg.dropout_p)


def run_block_sequential(cfg: ExperimentConfig, seed: int, mnist=None, progress=None,
                         keep_model: bool = False):
    """Train tasks one block at a time and fill both performance matrices.

    Returns the :class:`RunRecord`; with ``keep_model`` also the final
    model and the EWC anchors as ``(record, model, anchors)``.
    """
    t_start = time.perf_counter()
    grid = grid_for(cfg)
    loss_kind = LossKind.MSE if cfg.is_regression else LossKind.CROSS_ENTROPY
    kind = MSE if cfg.is_regression else ACCURACY
    spec = variant_spec(cfg.variant, cfg.k, cfg.reconfig_S, cfg.reconfig_lr, cfg.schedule)
    N = cfg.n_tasks
    if cfg.variant == "fixed-mask" and N * cfg.k > grid.H:
        # fail before any compute is spent
        static_mask("fixed-mask", grid, N - 1)

    model = init_model(grid, RngStream(seed, STREAM_INIT), cfg.init_gain)
    opt = make_optimizer(model, cfg.lr)
    dropout_rng = RngStream(seed, STREAM_DROPOUT)
    tasks = build_tasks(cfg, seed, mnist)

    stored = PerfMatrix.empty(N, kind, "stored")
    recovered = PerfMatrix.empty(N, kind, "recovered")
    stored_masks: list[Mask] = []
    recovered_masks, train_losses, block_times = [], [], []
    anchors = []
    use_ewc = cfg.variant == "ewc"
    penalty = (lambda m: ewc_penalty_grad(m, anchors)[1]) if use_ewc else None

    for t in range(N):
        t0 = time.perf_counter()
        reset_optimizer(opt)
        task = tasks[t]
        mask = None if spec.adaptive else static_mask(cfg.variant, grid, t)
        loss = math.nan
        for epoch in range(cfg.epochs):
            for step in range(cfg.steps_per_epoch):
                if spec.adaptive and (spec.schedule == "per-batch" or step == 0):
                    mask = configure_mask(model, task.recfg.next_batch(), spec, loss_kind)
                batch = task.train.next_batch()
                loss = train_step(model, batch, mask.gates, opt, dropout_rng, loss_kind,
                                  extra_grads=penalty if anchors else None)
                if not math.isfinite(loss):
                    raise NumericalError(
                        f"non-finite training loss at task {t}, epoch {epoch}, step {step}"
                    )
        mask.task_index = t
        stored_masks.append(mask)
        train_losses.append(loss)
        t1 = time.perf_counter()

        seen = tasks[: t + 1]
        scoring = [d.scoring for d in seen]
        outputs = [eval_outputs(model, X) for X, _ in scoring]
        stored_row = eval_stored(model, stored_masks, scoring, kind, outputs=outputs)
        if spec.adaptive:
            rec_row, rec_masks = eval_recovered(model, spec, [d.support for d in seen], scoring,
                                                loss_kind, kind, outputs=outputs)
        else:
            rec_row, rec_masks = list(stored_row), stored_masks[: t + 1]
        stored.R[t, : t + 1] = stored_row
        recovered.R[t, : t + 1] = rec_row
        recovered_masks.append([m.to_text() for m in rec_masks])

        if use_ewc:
            fisher_batches = [task.fisher.next_batch() for _ in range(cfg.fisher_batches)]
            anchors.append(estimate_fisher(model, fisher_batches, mask.gates, loss_kind, t, cfg.ewc_lambda))
        t2 = time.perf_counter()
        block_times.append({"train": t1 - t0, "eval": t2 - t1})
        if progress is not None:
            progress(t, stored_row[t], rec_row[t], kind)

    record = RunRecord(
        config=cfg.to_dict(),
        seed=int(seed),
        stored_masks=[m.to_text() for m in stored_masks],
        stored=stored,
        recovered=recovered,
        recovered_masks=recovered_masks,
        train_loss=[float(x) for x in train_losses],
        wall_times={"blocks": block_times, "total": time.perf_counter() - t_start},
    )
    if keep_model:
        return record, model, anchors
    return record


def record_dir(out_dir, record_or_cfg, seed=None) -> Path:
    if isinstance(record_or_cfg, RunRecord):
        exp, var, seed = record_or_cfg.experiment, record_or_cfg.variant, record_or_cfg.seed
    else:
        exp, var = record_or_cfg.experiment, record_or_cfg.variant
    return Path(out_dir) / exp / var / f"seed{seed}"


def save_record(record: RunRecord, out_dir) -> Path:
    d = record_dir(out_dir, record)
    d.mkdir(parents=True, exist_ok=True)
    (d / "record.json").write_text(record.to_json())
    (d / "stored.csv").write_text(record.stored.to_csv())
    (d / "recovered.csv").write_text(record.recovered.to_csv())
    return d


def load_records(run_dir) -> list[RunRecord]:
    paths = sorted(Path(run_dir).rglob("record.json"))
    return [RunRecord.from_json(p.read_text()) for p in paths]
