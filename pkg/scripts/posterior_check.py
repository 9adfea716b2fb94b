"""Moment errors of each sampler against the closed-form conjugate posterior.

    python3 scripts/posterior_check.py [--config configs/conjugate.ini] [--out runs/conjugate]
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from cddsgld.runner import load_config, run_grid, summarize, summary_csv

ROOT = Path(__file__).resolve().parents[1]


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default=str(ROOT / "configs" / "conjugate.ini"))
    p.add_argument("--out", default=None)
    p.add_argument("--threads", type=int, default=1)
    args = p.parse_args(argv)

    cfg = load_config(args.config)
    out = Path(args.out or cfg.out_dir)
    records = run_grid(cfg, threads=args.threads, out_dir=out)
    summary = summarize(records)
    (out / "summary.csv").write_text(summary_csv(summary))
    print(f"{'algorithm':9s} {'topology':8s} {'snr':>5s} {'mean_err':>10s} {'cov_err':>10s}")
    for e in summary:
        cov = "-" if e["cov_err_mean"] is None else f"{e['cov_err_mean']:.4f}"
        print(f"{e['algorithm']:9s} {e['topology']:8s} {e['snr_db']:5g} {e['mean_err_mean']:10.4f} {cov:>10s}")
    return min(sum(r.report.status != "ok" for r in records), 255)


if __name__ == "__main__":
    sys.exit(main())
