"""Multi-run experiments built on the pipeline stages: seed medians and view/K sweeps."""

from __future__ import annotations

import statistics
import time
from dataclasses import replace
from pathlib import Path

from . import pipeline
from .clustering import FeatureView
from .config import RunConfig
from .evaluation import dump_json

ORDERING_ARMS = ("teacher_only", "student_only", "standard_kd", "packd_student")


def run_seeds(cfg: RunConfig, seeds, root: str | Path) -> dict:
    """Run the full pipeline once per seed under ``root/seed_<s>`` and collect medians."""
    root = Path(root)
    per_seed = {}
    start = time.perf_counter()
    for s in seeds:
        run = pipeline.Run(cfg.with_overrides(seed=s, out=str(root / f"seed_{s}")), force=True)
        m = pipeline.stage_all(run)
        per_seed[s] = {
            "arms": {a: v["f1"] for a, v in m["arms"].items()},
            "teachers": {k: v["f1"] for k, v in m["teachers"].items()},
            "mean_teacher_f1": m["mean_teacher_f1"],
        }
    elapsed = time.perf_counter() - start

    def med(values):
        return statistics.median(values) if values else None

    medians = {a: med([r["arms"][a] for r in per_seed.values() if a in r["arms"]]) for a in ORDERING_ARMS}
    medians["mean_teacher"] = med([r["mean_teacher_f1"] for r in per_seed.values()
                                   if r["mean_teacher_f1"] is not None])
    medians["min_teacher"] = med([min(r["teachers"].values()) for r in per_seed.values() if r["teachers"]])
    return {"seeds": list(seeds), "per_seed": per_seed, "median": medians, "seconds": elapsed}


def ordering_checks(summary: dict) -> dict:
    """Qualitative orderings on seed medians, each a (holds, lhs, rhs) triple."""
    m = summary["median"]
    return {
        "clustered_teachers_vs_unclustered": (m["mean_teacher"] >= m["teacher_only"], m["mean_teacher"],
                                              m["teacher_only"]),
        "ensemble_kd_vs_standard_kd": (m["packd_student"] >= m["standard_kd"], m["packd_student"],
                                       m["standard_kd"]),
        "ensemble_kd_vs_student_only": (m["packd_student"] >= m["student_only"], m["packd_student"],
                                        m["student_only"]),
        "teacher_only_vs_student_only": (m["teacher_only"] >= m["student_only"], m["teacher_only"],
                                         m["student_only"]),
        "own_cluster_teachers_reach_0.9": (m["min_teacher"] >= 0.9, m["min_teacher"], 0.9),
    }


def sweep(cfg: RunConfig, views, ks, root: str | Path) -> list[dict]:
    """Mean teacher F1 and distilled-student F1 for every (feature view, K) pair.

    Each pair runs cluster -> teachers -> distill -> eval in its own
    directory; the trace is generated once per pair from the same recipe.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for view in views:
        for k in ks:
            c = replace(cfg, view=FeatureView(view, cfg.view.window), cluster=replace(cfg.cluster, k=k),
                        arms=("packd_student",), out=str(root / f"{view}_k{k}"))
            run = pipeline.Run(c, force=True)
            m = pipeline.stage_all(run)
            rows.append({"view": view, "k": k, "teacher_f1": m["mean_teacher_f1"],
                         "student_f1": m["arms"]["packd_student"]["f1"]})
    dump_json(rows, root / "sweep.json")
    return rows


def attach_sweep(run_dir: str | Path, rows: list[dict]) -> None:
    """Drop ``sweep.json`` next to a run so its next ``eval``/``report`` includes the sweep table."""
    dump_json(rows, Path(run_dir) / "sweep.json")
