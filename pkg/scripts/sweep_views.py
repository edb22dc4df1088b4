"""Mean teacher F1 and student F1 over feature views and cluster counts.

    python scripts/sweep_views.py [--config configs/two_phase.json] [--k 2 3 4] [--out runs/sweep]
                                  [--attach runs/two_phase]

Writes ``<out>/sweep.json``. With ``--attach`` the table is also copied into an
existing run directory, and that run's metrics and report are refreshed to include it.
"""

import argparse
import logging

import torch

from packd import pipeline
from packd.clustering import ViewKind
from packd.config import load_config
from packd.experiments import attach_sweep, sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/two_phase.json")
    ap.add_argument("--views", nargs="+", default=[v.value for v in ViewKind])
    ap.add_argument("--k", type=int, nargs="+", default=[2, 3, 4])
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out", default="runs/sweep")
    ap.add_argument("--attach", help="run directory whose metrics/report should include the sweep")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    torch.set_num_threads(1)

    cfg = load_config(args.config, seed=args.seed)
    rows = sweep(cfg, args.views, args.k, args.out)
    for r in rows:
        print(f"{r['view']:<26} K={r['k']}  teacher F1 {r['teacher_f1']:.4f}  student F1 {r['student_f1']:.4f}")
    if args.attach:
        attach_sweep(args.attach, rows)
        run = pipeline.Run(load_config(args.config, seed=args.seed, out=args.attach))
        pipeline.stage_eval(run)
        pipeline.stage_report(run)


if __name__ == "__main__":
    main()
