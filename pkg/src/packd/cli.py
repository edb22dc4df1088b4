"""``packd`` command line: one subcommand per pipeline stage.

Exit codes: 0 success, 2 config error, 3 missing prerequisite, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import ARMS, ConfigError, load_config
from . import pipeline

EXIT_OK, EXIT_CONFIG, EXIT_PREREQ, EXIT_RUNTIME = 0, 2, 3, 4

log = logging.getLogger("packd")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="flat JSON run config")
    common.add_argument("--out", help="run directory (overrides config / PACKD_OUT)")
    common.add_argument("--seed", type=int, help="global seed (overrides config / PACKD_SEED)")
    common.add_argument("--force", action="store_true", help="accept artifacts from a different config hash")
    common.add_argument("--arm", action="append", choices=ARMS, help="restrict to these arms (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="packd", description="Pattern-clustered distillation pipeline for "
                                "memory access prediction models.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="generate (or validate) the trace")
    sub.add_parser("cluster", parents=[common], help="k-means over the train region + dataset cache")
    t = sub.add_parser("train-teachers", parents=[common], help="one teacher per cluster")
    t.add_argument("--cluster", type=int, action="append", help="train only these cluster ids")
    sub.add_parser("distill", parents=[common], help="ensemble-distil the teachers into the student")
    sub.add_parser("baselines", parents=[common], help="student_only / teacher_only / standard_kd")
    sub.add_parser("eval", parents=[common], help="score every checkpoint into metrics.json")
    sub.add_parser("report", parents=[common], help="render report.md from metrics.json")
    sub.add_parser("all", parents=[common], help="run every stage")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = load_config(args.config, seed=args.seed, out=args.out)
        run = pipeline.Run(cfg, force=args.force)
        cmd = args.command
        if cmd == "gen":
            pipeline.stage_gen(run)
        elif cmd == "cluster":
            pipeline.stage_cluster(run)
        elif cmd == "train-teachers":
            pipeline.stage_train_teachers(run, args.cluster)
        elif cmd == "distill":
            pipeline.stage_distill(run)
        elif cmd == "baselines":
            pipeline.stage_baselines(run, args.arm)
        elif cmd == "eval":
            pipeline.stage_eval(run)
        elif cmd == "report":
            print(pipeline.stage_report(run))
        elif cmd == "all":
            pipeline.stage_all(run, args.arm)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except pipeline.PrerequisiteError as exc:
        print(f"missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_PREREQ
    except Exception as exc:  # noqa: BLE001 - surfaced as exit code 4
        log.exception("stage failed")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
