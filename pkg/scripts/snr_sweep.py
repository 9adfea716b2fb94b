"""Accuracy and ECE versus SNR for CD-DSGLD, with Q-DSGD at the high-SNR points.

Writes ``results.csv`` and ``summary.csv`` to the output directory and prints
the curves, the three trend checks and the power-cap table that explains them.

    python3 scripts/snr_sweep.py [--config configs/snr_sweep.ini] [--out runs/snr_sweep]
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from cddsgld.runner import Cell, curve, load_config, run_grid, summarize, summary_csv, write_records
from cddsgld.topology import mixing_for

ROOT = Path(__file__).resolve().parents[1]


def cells_for(cfg, digital_from_db: float) -> list[Cell]:
    cells = []
    for topo in cfg.topologies:
        for snr in cfg.snr_db:
            for seed in cfg.seeds:
                cells.append(Cell("cd-dsgld", topo, float(snr), seed))
                if snr >= digital_from_db and "q-dsgd" in cfg.algorithms:
                    cells.append(Cell("q-dsgd", topo, float(snr), seed))
    return cells


def power_cap_table(cfg) -> list[str]:
    # alpha = beta is feasible iff rms(theta) <= sqrt(2 * eta * SNR) / w
    lines = ["per-coordinate RMS above which the transmit power limit binds:"]
    for topo in cfg.topologies:
        w = mixing_for(topo, cfg.n_agents)[1].scalar_weight
        caps = ", ".join(f"{s:g}dB={np.sqrt(2 * cfg.step_size * 10 ** (s / 10)) / w:.3f}" for s in cfg.snr_db)
        lines.append(f"  {topo:5s} w={w:.3f}: {caps}")
    return lines


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default=str(ROOT / "configs" / "snr_sweep.ini"))
    p.add_argument("--out", default=None)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--digital-from-db", type=float, default=20.0)
    args = p.parse_args(argv)

    cfg = load_config(args.config)
    out = Path(args.out or cfg.out_dir)

    def progress(rec):
        r = rec.report
        print(f"{r.algorithm:9s} {r.topology:5s} {r.snr_db:5g}dB seed={r.seed} acc={r.accuracy:.4f} "
              f"ece={r.ece:.4f} power_limited={r.extra.get('power_limited_rounds', '-')} ({rec.duration_s:.0f}s)",
              file=sys.stderr, flush=True)

    records = run_grid(cfg, threads=args.threads, cells=cells_for(cfg, args.digital_from_db), progress=progress)
    write_records(records, out)
    summary = summarize(records)
    (out / "summary.csv").write_text(summary_csv(summary))

    for topo in cfg.topologies:
        for alg in ("cd-dsgld", "q-dsgd"):
            acc, ece_ = curve(summary, alg, topo, "accuracy"), dict(curve(summary, alg, topo, "ece"))
            if acc:
                pts = ", ".join(f"{s:g}dB acc={a:.4f} ece={ece_[s]:.4f}" for s, a in acc)
                print(f"{alg:9s} {topo:5s} {pts}")
    print("\n".join(power_cap_table(cfg)))
    print(f"wrote {out / 'results.csv'} and {out / 'summary.csv'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
