"""Aggregate RunRecords into mean +- std tables.

Reports are pure functions of the records; no model or data is touched.
"""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .errors import AggregationError
from .protocol import RunRecord, compute_metrics, decompose_overlap_recall, prior_final_mean

VARIANT_ORDER = ("no-mask", "fixed-mask", "kwta-only", "ftn-fast", "ftn-slow", "ewc", "all-ones")
# config keys that may differ between records aggregated together
_FREE_KEYS = {"variant", "seeds", "out_dir", "data_dir", "workers"}


@dataclass
class Row:
    experiment: str
    variant: str
    protocol: str
    n_seeds: int
    acc: tuple  # (mean, std)
    fm: tuple
    bwt: tuple


@dataclass
class DecompRow:
    experiment: str
    variant: str
    n_seeds: int
    oracle_ref: float
    overlap: tuple
    recall: tuple


def _mean_std(values) -> tuple:
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), float(a.std())


def _shared_config(rec: RunRecord) -> dict:
    return {k: v for k, v in rec.config.items() if k not in _FREE_KEYS}


def group_records(records) -> dict:
    if not records:
        raise AggregationError("no RunRecords found")
    by_exp = defaultdict(list)
    for r in records:
        by_exp[r.experiment].append(r)
    groups = {}
    for exp, recs in by_exp.items():
        ref = _shared_config(recs[0])
        for r in recs[1:]:
            cfg = _shared_config(r)
            if cfg != ref:
                diff = sorted(k for k in set(cfg) | set(ref) if cfg.get(k) != ref.get(k))
                raise AggregationError(
                    f"incompatible configs for experiment {exp!r} "
                    f"({r.variant} seed {r.seed} differs in: {', '.join(diff)})"
                )
        by_var = defaultdict(list)
        for r in recs:
            by_var[r.variant].append(r)
        for var, vrecs in by_var.items():
            seeds = [r.seed for r in vrecs]
            if len(set(seeds)) != len(seeds):
                raise AggregationError(f"duplicate seeds for {exp}/{var}: {sorted(seeds)}")
            groups[(exp, var)] = sorted(vrecs, key=lambda r: r.seed)
    return groups


def _order(key):
    exp, var = key
    return exp, VARIANT_ORDER.index(var) if var in VARIANT_ORDER else len(VARIANT_ORDER)


def summarize(records) -> tuple[list[Row], list[DecompRow]]:
    groups = group_records(records)
    rows, decomp = [], []
    for key in sorted(groups, key=_order):
        exp, var = key
        recs = groups[key]
        for protocol in ("recovered", "stored"):
            ms = [compute_metrics(getattr(r, protocol)) for r in recs]
            rows.append(Row(exp, var, protocol, len(recs),
                            _mean_std([m.acc for m in ms]),
                            _mean_std([m.fm for m in ms]),
                            _mean_std([m.bwt for m in ms])))
    for exp in sorted({e for e, _ in groups}):
        oracle = groups.get((exp, "fixed-mask"))
        if not oracle or oracle[0].stored.n < 2:
            continue
        ref = float(np.mean([prior_final_mean(r.stored) for r in oracle]))
        for key in sorted((k for k in groups if k[0] == exp), key=_order):
            parts = [decompose_overlap_recall(r.stored, r.recovered, ref) for r in groups[key]]
            decomp.append(DecompRow(exp, key[1], len(parts), ref,
                                    _mean_std([p[0] for p in parts]),
                                    _mean_std([p[1] for p in parts])))
    return rows, decomp


def _pm(ms: tuple, signed: bool = False) -> str:
    return f"{ms[0]:+.3f}±{ms[1]:.3f}" if signed else f"{ms[0]:.3f}±{ms[1]:.3f}"


def format_text(rows, decomp) -> str:
    out = []
    for protocol in ("recovered", "stored"):
        out.append(f"== {protocol} protocol (mean±std over seeds) ==")
        out.append(f"{'experiment':<16} {'variant':<11} {'n':>2}  {'ACC/MSE':>13} {'FM':>13} {'BWT':>14}")
        for r in rows:
            if r.protocol == protocol:
                out.append(f"{r.experiment:<16} {r.variant:<11} {r.n_seeds:>2}  {_pm(r.acc):>13} "
                           f"{_pm(r.fm):>13} {_pm(r.bwt, True):>14}")
        out.append("")
    if decomp:
        out.append("== overlap / recall decomposition vs fixed-mask oracle (prior tasks) ==")
        out.append(f"{'experiment':<16} {'variant':<11} {'oracle':>7} {'overlap':>14} {'recall':>14}")
        for d in decomp:
            out.append(f"{d.experiment:<16} {d.variant:<11} {d.oracle_ref:>7.3f} "
                       f"{_pm(d.overlap, True):>14} {_pm(d.recall, True):>14}")
        out.append("")
    return "\n".join(out)


def rows_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["experiment", "variant", "protocol", "n_seeds", "acc_mean", "acc_std", "fm_mean", "fm_std",
                "bwt_mean", "bwt_std"])
    for r in rows:
        w.writerow([r.experiment, r.variant, r.protocol, r.n_seeds, *map(repr, (*r.acc, *r.fm, *r.bwt))])
    return buf.getvalue()


def decomp_csv(decomp) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["experiment", "variant", "n_seeds", "oracle_ref", "overlap_mean", "overlap_std",
                "recall_mean", "recall_std"])
    for d in decomp:
        w.writerow([d.experiment, d.variant, d.n_seeds, repr(d.oracle_ref),
                    *map(repr, (*d.overlap, *d.recall))])
    return buf.getvalue()
