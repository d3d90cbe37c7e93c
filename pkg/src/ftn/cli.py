"""Command-line front end.

Subcommands: ``run``, ``report``, ``export-masks``, ``fetch-data``.
Exit codes: 0 success, 1 usage, 2 data, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor, as_completed
from pathlib import Path

from ._alloc import tune_allocator
from .config import ALIASES, EXPERIMENTS, format_config, load_config
from .configurer import VARIANTS
from .errors import FTNError, UsageError
from .maskio import overlay_rgb, write_pgm, write_ppm
from .protocol import load_records, run_block_sequential, save_record
from .report import decomp_csv, format_text, rows_csv, summarize
from .tasks import DEFAULT_URL_BASE, fetch_mnist

log = logging.getLogger("ftn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


def _parse_seeds(text: str):
    from .config import _seeds

    return _seeds(text)


def _progress(cfg, seed):
    metric = "mse" if cfg.is_regression else "acc"

    def emit(t, stored, recovered, kind):
        print(f"[{cfg.experiment}/{cfg.variant}/seed{seed}] block {t + 1}/{cfg.n_tasks} "
              f"current-task {metric}: stored={stored:.4f} recovered={recovered:.4f}", flush=True)

    return emit


def _run_cell(cfg, seed, out_dir):
    tune_allocator()
    record = run_block_sequential(cfg, seed, progress=_progress(cfg, seed))
    path = save_record(record, out_dir)
    return seed, cfg.variant, str(path)


def cmd_run(args) -> int:
    overrides = {"variant": args.variant, "out_dir": args.out_dir, "data_dir": args.data_dir,
                 "workers": args.workers}
    if args.seeds is not None:
        overrides["seeds"] = _parse_seeds(args.seeds)
    if args.preset is not None:
        overrides["scale"] = args.preset
    text = None
    if args.config is None:
        if args.experiment is None:
            raise UsageError("give a config file or --experiment")
        text = f"[experiment]\nname = {args.experiment}\n"
    elif args.experiment is not None:
        args.sets = [f"experiment.name={args.experiment}", *args.sets]
    cfg = load_config(args.config, overrides=overrides, sets=args.sets, text=text)
    variants = [cfg.variant] if not args.all_variants else list(args.all_variants.split(","))
    cells = [(cfg.replace(variant=v), s) for v in variants for s in cfg.seeds]
    if args.dry_run:
        print(format_config(cfg))
        print(f"# {len(cells)} cell(s): " + ", ".join(f"{c.variant}/seed{s}" for c, s in cells))
        return EXIT_OK
    out_dir = Path(cfg.out_dir)
    failures = []
    if cfg.workers <= 1 or len(cells) == 1:
        for c, s in cells:
            try:
                _, _, path = _run_cell(c, s, out_dir)
                print(f"wrote {path}")
            except FTNError as exc:
                failures.append((c.variant, s, exc))
                print(f"error in cell {c.experiment}/{c.variant}/seed{s}: {exc}", file=sys.stderr)
    else:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            futs = {pool.submit(_run_cell, c, s, out_dir): (c, s) for c, s in cells}
            for fut in as_completed(futs):
                c, s = futs[fut]
                try:
                    print(f"wrote {fut.result()[2]}")
                except FTNError as exc:
                    failures.append((c.variant, s, exc))
                    print(f"error in cell {c.experiment}/{c.variant}/seed{s}: {exc}", file=sys.stderr)
    if failures:
        return max(exc.exit_code for _, _, exc in failures)
    return EXIT_OK


def cmd_report(args) -> int:
    records = load_records(args.run_dir)
    if args.experiment:
        exp = ALIASES.get(args.experiment, args.experiment)
        records = [r for r in records if r.experiment == exp]
    rows, decomp = summarize(records)
    print(format_text(rows, decomp))
    out = Path(args.out) if args.out else Path(args.run_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.csv").write_text(rows_csv(rows))
    if decomp:
        (out / "decomposition.csv").write_text(decomp_csv(decomp))
    (out / "summary.txt").write_text(format_text(rows, decomp))
    return EXIT_OK


def cmd_export_masks(args) -> int:
    exp = ALIASES.get(args.experiment, args.experiment)
    records = [r for r in load_records(args.run_dir) if r.experiment == exp]
    if args.variant:
        records = [r for r in records if r.variant == args.variant]
    if not records:
        raise UsageError(f"no records for experiment {exp!r} under {args.run_dir}")
    out = Path(args.out) if args.out else Path(args.run_dir) / "masks"
    n = 0
    for r in records:
        D = r.config["D"]
        d = out / exp / r.variant
        d.mkdir(parents=True, exist_ok=True)
        for t, gates in enumerate(r.stored_masks):
            write_pgm(d / f"seed{r.seed}_task{t}.pgm", gates, D)
            (d / f"seed{r.seed}_task{t}.txt").write_text(gates + "\n")
            n += 1
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            rgb = overlay_rgb(r.stored_masks, D)
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
        write_ppm(d / f"seed{r.seed}_overlay.ppm", rgb)
    print(f"wrote {n} masks (PGM + text) and {len(records)} overlays under {out}")
    return EXIT_OK


def cmd_fetch_data(args) -> int:
    dest = args.data_dir or os.environ.get("FTN_DATA_DIR") or "data/mnist"
    paths = fetch_mnist(args.url_base, dest)
    for p in paths:
        print(p)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ftn", description="Functional task networks: continual-learning runs")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train and evaluate (variant, seed) cells")
    r.add_argument("config", nargs="?", help="config file (key = value with [section] headers)")
    r.add_argument("--experiment", help=f"one of {', '.join(EXPERIMENTS)} or exp1-clf/exp1-reg/exp2/exp3")
    r.add_argument("--variant", choices=VARIANTS)
    r.add_argument("--all-variants", metavar="LIST", help="comma-separated variants to run in one go")
    r.add_argument("--seeds", help="e.g. '0,1,2' or '0-7'")
    r.add_argument("--preset", choices=("full", "desk"), help="scale preset")
    r.add_argument("--out-dir")
    r.add_argument("--data-dir")
    r.add_argument("--workers", type=int)
    r.add_argument("--set", dest="sets", action="append", default=[], metavar="SECTION.KEY=VALUE")
    r.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
    r.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="aggregate RunRecords into tables")
    rep.add_argument("run_dir")
    rep.add_argument("--experiment")
    rep.add_argument("--out", help="directory for CSV output (default: run_dir)")
    rep.set_defaults(func=cmd_report)

    ex = sub.add_parser("export-masks", help="write stored masks as PGM/PPM images")
    ex.add_argument("run_dir")
    ex.add_argument("experiment")
    ex.add_argument("--variant")
    ex.add_argument("--out")
    ex.set_defaults(func=cmd_export_masks)

    f = sub.add_parser("fetch-data", help="download MNIST IDX files")
    f.add_argument("--data-dir")
    f.add_argument("--url-base", default=DEFAULT_URL_BASE)
    f.set_defaults(func=cmd_fetch_data)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    tune_allocator()
    try:
        return args.func(args)
    except FTNError as exc:
        print(f"ftn {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"ftn {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
