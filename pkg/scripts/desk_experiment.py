"""Three-seed desk-scale comparison of all arms on the bundled two-phase trace.

    python scripts/desk_experiment.py [--config configs/two_phase.json] [--seeds 0 1 2] [--out runs/desk]

Prints per-seed F1 for every arm, the seed medians, and whether each expected
ordering holds. A summary is written to ``<out>/summary.json``.
"""

import argparse
import logging

import torch

from packd.config import load_config
from packd.evaluation import dump_json
from packd.experiments import ordering_checks, run_seeds


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/two_phase.json")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    torch.set_num_threads(args.threads)

    summary = run_seeds(load_config(args.config), args.seeds, args.out)
    for s, r in summary["per_seed"].items():
        arms = "  ".join(f"{a}={f:.4f}" for a, f in sorted(r["arms"].items()))
        teachers = "  ".join(f"t{k}={f:.4f}" for k, f in sorted(r["teachers"].items()))
        print(f"seed {s}: {arms}  {teachers}")
    print("median: " + "  ".join(f"{a}={v:.4f}" for a, v in summary["median"].items() if v is not None))
    checks = ordering_checks(summary)
    for name, (ok, lhs, rhs) in checks.items():
        print(f"{'holds ' if ok else 'FAILS '} {name}: {lhs:.4f} vs {rhs:.4f}")
    print(f"wall time {summary['seconds']:.0f}s")
    summary["checks"] = {k: list(v) for k, v in checks.items()}
    dump_json(summary, f"{args.out}/summary.json")


if __name__ == "__main__":
    main()
