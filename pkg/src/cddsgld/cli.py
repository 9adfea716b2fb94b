"""Command line entry point: ``run``, ``sweep`` and ``summarize``."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .runner import (
    Cell,
    failed_count,
    grid_cells,
    load_config,
    read_results_csv,
    run_grid,
    summarize,
    summary_csv,
)


def _config(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    return cfg


def _progress(rec) -> None:
    r = rep = rec.report
    metric = f"acc={r.accuracy:.4f} ece={r.ece:.4f}" if rep.accuracy is not None else f"mean_err={r.mean_err}"
    print(f"[{rep.status}] {rep.algorithm:9s} {rep.topology:5s} snr={rep.snr_db:g} seed={rep.seed} "
          f"{metric if rep.status == 'ok' else rep.extra.get('error', '')} ({rec.duration_s:.1f}s)",
          file=sys.stderr, flush=True)


def cmd_run(args) -> int:
    cfg = _config(args)
    cell = grid_cells(cfg)[0]
    out = Path(args.out_dir or cfg.out_dir)
    records = run_grid(cfg, threads=1, out_dir=out, cells=[cell], progress=_progress)
    print(records[0].report.to_json())
    return _exit(records)


def cmd_sweep(args) -> int:
    cfg = _config(args)
    out = Path(args.out_dir or cfg.out_dir)
    records = run_grid(cfg, threads=args.threads, out_dir=out, progress=_progress)
    summ = summarize(records)
    (out / "summary.csv").write_text(summary_csv(summ))
    print(f"wrote {out / 'results.csv'} ({len(records)} cells) and {out / 'summary.csv'}")
    return _exit(records)


def cmd_summarize(args) -> int:
    res = Path(args.results_dir)
    rows = read_results_csv(res / "results.csv")
    summ = summarize(rows)
    text = summary_csv(summ)
    (Path(args.out_dir) if args.out_dir else res).mkdir(parents=True, exist_ok=True)
    ((Path(args.out_dir) if args.out_dir else res) / "summary.csv").write_text(text)
    sys.stdout.write(text)
    failed = sum(r.get("status", "ok") != "ok" for r in rows)
    if failed:
        print(f"{failed} failed cells", file=sys.stderr)
    return min(failed, 255)


def _exit(records) -> int:
    failed = failed_count(records)
    if failed:
        print(f"{failed} failed cells", file=sys.stderr)
    return min(failed, 255)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cddsgld", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("config", help="experiment config file")
        sp.add_argument("--seed", type=int, default=None, help="override the configured seeds with one seed")
        sp.add_argument("--out-dir", default=None, help="output directory (default: [run] out_dir)")
        sp.add_argument("--threads", type=int, default=1, help="worker processes for independent cells")

    sp = sub.add_parser("run", help="run the first cell of the config")
    common(sp)
    sp.set_defaults(func=cmd_run)
    sp = sub.add_parser("sweep", help="run the full algorithm x topology x SNR x seed grid")
    common(sp)
    sp.set_defaults(func=cmd_sweep)
    sp = sub.add_parser("summarize", help="mean/std curves from a results directory")
    sp.add_argument("results_dir")
    common(sp, config=False)
    sp.set_defaults(func=cmd_summarize)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - report config/IO errors as a CLI failure
        print(f"error: {exc}", file=sys.stderr)
        return 2
