"""Pipeline stages with on-disk handoff through a run directory.

Run directory layout::

    config.lock               resolved config + hash
    trace.txt.gz              generated trace (synthetic sources only)
    trace.json                trace provenance
    clusters.json             k-means model, SSE table, per-position labels
    plots/cluster_points.csv  page / ip / block-index / cluster scatter data
    dataset.cache             train + eval samples (rebuilt when the hash changes)
    teacher_<k>.ckpt          per-cluster teachers
    student.ckpt              ensemble-distilled student
    baseline_<arm>.ckpt       student_only / teacher_only / standard_kd
    curves/*.csv              per-epoch loss and validation F1
    metrics.json, report.md

Every artifact records the producing stage and the config hash; a stage
refuses inputs stamped with another hash unless ``force`` is set.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import clustering as cl
from .config import ConfigError, RunConfig
from .dataset import Dataset, build_dataset
from .distillation import TrainConfig, TrainResult, distill_student, make_ensemble, train_bce, train_teacher
from .evaluation import dump_json, emit_report, evaluate, compression_ratio, paper_compression
from .models import FAMILY_PRESETS, PRESETS, load_checkpoint, param_count, save_checkpoint
from .trace_io import parse_trace, split, write_trace

log = logging.getLogger(__name__)

BASELINE_ARMS = ("student_only", "teacher_only", "standard_kd")


class PrerequisiteError(RuntimeError):
    pass


class HashMismatch(ConfigError):
    pass


def _atomic_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


class Run:
    def __init__(self, cfg: RunConfig, force: bool = False):
        self.cfg = cfg
        self.dir = Path(cfg.out)
        self.force = force
        self.hash = cfg.digest()
        self._trace = None
        self._datasets = None

    def path(self, name: str) -> Path:
        return self.dir / name

    # ------------------------------------------------------------ bookkeeping
    def lock(self) -> None:
        """Create the run directory and pin the config; refuse a different one unless forced."""
        self.dir.mkdir(parents=True, exist_ok=True)
        lock = self.path("config.lock")
        if lock.exists():
            old = json.loads(lock.read_text())
            if old.get("config_hash") != self.hash and not self.force:
                raise HashMismatch(
                    f"{lock} was written for config {old.get('config_hash')}, current config is {self.hash}; "
                    "use --force to overwrite"
                )
        body = {"config_hash": self.hash, "stage": "config", "config": self.cfg.to_flat()}
        body["config"].pop("out")
        dump_json(body, lock)

    def check_hash(self, meta: dict, what: str) -> None:
        got = meta.get("config_hash")
        if got != self.hash and not self.force:
            raise HashMismatch(f"{what} was produced with config {got}, current config is {self.hash}; "
                               "rerun the producing stage or pass --force")

    def require(self, name: str, stage: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise PrerequisiteError(f"{p} is missing; run `packd {stage}` first")
        return p

    # ------------------------------------------------------------ inputs
    def trace(self):
        if self._trace is None:
            if self.cfg.trace_path is not None:
                src = Path(self.cfg.trace_path)
                if not src.exists():
                    raise ConfigError(f"trace file {src} not found")
            else:
                src = self.require("trace.txt.gz", "gen")
                self.check_hash(json.loads(self.require("trace.json", "gen").read_text()), "trace.txt.gz")
            self._trace = parse_trace(src)
        return self._trace

    def regions(self):
        return split(self.trace(), self.cfg.split)

    def clusters(self) -> dict:
        meta = json.loads(self.require("clusters.json", "cluster").read_text())
        self.check_hash(meta, "clusters.json")
        return meta

    def datasets(self) -> dict[str, Dataset]:
        if self._datasets is not None:
            return self._datasets
        cache = self.path("dataset.cache")
        clusters = self.clusters()
        if cache.exists():
            ds, meta = load_cache(cache)
            if meta.get("config_hash") == self.hash:
                self._datasets = ds
                return ds
        train, ev = self.regions()
        geo = self.cfg.geometry
        ds = {
            "train": build_dataset(train, cl.rle_decode(clusters["labels"]["train"]), self.cfg.dataset, geo),
            "eval": build_dataset(ev, cl.rle_decode(clusters["labels"]["eval"]), self.cfg.dataset, geo),
        }
        save_cache(cache, ds, self.hash)
        self._datasets = ds
        return ds

    def ckpt_meta(self, stage: str, result: TrainResult | None = None, **extra) -> dict:
        meta = {"stage": stage, "config_hash": self.hash, **extra}
        if result is not None:
            meta.update(best_f1=result.best_f1, best_epoch=result.best_epoch)
        return meta

    def load_model(self, name: str, stage: str):
        model, meta = load_checkpoint(self.require(name, stage))
        self.check_hash(meta, name)
        return model, meta

    def write_curve(self, name: str, result: TrainResult) -> None:
        d = self.path("curves")
        d.mkdir(exist_ok=True)
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=["epoch", "loss", "f1", "precision", "recall"], lineterminator="\n")
        w.writeheader()
        for row in result.curve:
            w.writerow({k: (f"{v:.8g}" if isinstance(v, float) else v) for k, v in row.items()})
        _atomic_text(d / f"{name}.csv", buf.getvalue())


# --------------------------------------------------------------------------- cache

def save_cache(path: Path, datasets: dict[str, Dataset], config_hash: str) -> None:
    arrays = {}
    for name, ds in datasets.items():
        arrays.update({f"{name}/segments": ds.segments, f"{name}/labels": ds.labels,
                       f"{name}/positions": ds.positions, f"{name}/cluster_ids": ds.cluster_ids})
    cfg = next(iter(datasets.values())).config
    meta = {"stage": "dataset", "config_hash": config_hash, "splits": sorted(datasets),
            "dataset_config": {k: getattr(cfg, k) for k in ("n", "W", "D", "p", "seg_bits", "page_filter")}}
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


def load_cache(path: Path) -> tuple[dict[str, Dataset], dict]:
    from .dataset import DatasetConfig

    with np.load(path) as z:
        meta = json.loads(z["meta"].tobytes().decode())
        cfg = DatasetConfig(**meta["dataset_config"])
        out = {name: Dataset(z[f"{name}/segments"], z[f"{name}/labels"], z[f"{name}/positions"],
                             z[f"{name}/cluster_ids"], cfg) for name in meta["splits"]}
    return out, meta


# --------------------------------------------------------------------------- stages

def stage_gen(run: Run) -> None:
    run.lock()
    cfg = run.cfg
    if cfg.synthetic is None:
        records = parse_trace(cfg.trace_path)
        info = {"source": str(cfg.trace_path), "records": len(records)}
    else:
        records = cfg.synthetic.generate(cfg.geometry)
        write_trace(records, run.path("trace.txt.gz"), header=f"synthetic {cfg.synthetic.kind} config {run.hash}")
        info = {"source": "synthetic", "records": len(records)}
    if cfg.split.total > len(records):
        raise ConfigError(f"split needs {cfg.split.total} records, trace has {len(records)}")
    dump_json({"stage": "gen", "config_hash": run.hash, **info}, run.path("trace.json"))


def stage_cluster(run: Run) -> None:
    run.lock()
    cfg = run.cfg
    train, ev = run.regions()
    fm = cl.extract_features(train, cfg.view, cfg.geometry)
    seed = cfg.seed
    sweep = []
    if cfg.cluster.k_sweep:
        sweep = cl.sweep_k(fm, cfg.cluster.k_sweep, seed=seed, n_init=cfg.cluster.restarts,
                           max_iters=cfg.cluster.max_iters)
    model = cl.kmeans_fit(fm, cfg.cluster.k, seed=seed, max_iters=cfg.cluster.max_iters,
                          n_init=cfg.cluster.restarts)
    train_labels = cl.position_labels(model, train, cfg.geometry)
    eval_labels = cl.position_labels(model, ev, cfg.geometry)
    body = {
        "stage": "cluster", "config_hash": run.hash,
        **model.to_dict(),
        "sse_table": [[k, s] for k, s in sweep],
        "cluster_sizes": {"train": np.bincount(train_labels, minlength=model.k).tolist(),
                          "eval": np.bincount(eval_labels, minlength=model.k).tolist()},
        "labels": {"train": cl.rle_encode(train_labels), "eval": cl.rle_encode(eval_labels)},
    }
    dump_json(body, run.path("clusters.json"))

    plots = run.path("plots")
    plots.mkdir(exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["page_address", "instruction_pointer", "block_index", "cluster_id"])
    w.writerows(cl.plot_rows(train, train_labels, cfg.geometry))
    _atomic_text(plots / "cluster_points.csv", buf.getvalue())
    run._datasets = None
    run.datasets()


def _teacher_cfg(run: Run, train_ds: Dataset, k: int) -> TrainConfig:
    cfg = run.cfg.teacher_train
    cfg = replace(cfg, seed=cfg.seed + k)
    if run.cfg.equalize_steps and run.cfg.cluster.k > 1:
        nk = int(np.count_nonzero(train_ds.cluster_ids == k))
        if nk:
            cfg = replace(cfg, epochs=max(1, math.ceil(cfg.epochs * len(train_ds) / nk)))
    return cfg


def stage_train_teachers(run: Run, clusters: list[int] | None = None) -> None:
    run.lock()
    ds = run.datasets()
    K = run.cfg.cluster.k
    spec = run.cfg.teacher_spec()
    for k in clusters if clusters is not None else range(K):
        if not 0 <= k < K:
            raise ConfigError(f"cluster {k} outside [0, {K})")
        tcfg = _teacher_cfg(run, ds["train"], k)
        model, result = train_teacher(ds["train"], ds["eval"], spec, tcfg, k)
        eval_n = int(np.count_nonzero(ds["eval"].cluster_ids == k))
        save_checkpoint(model, run.path(f"teacher_{k}.ckpt"),
                        run.ckpt_meta("train-teachers", result, cluster=k, epochs=tcfg.epochs, eval_samples=eval_n))
        run.write_curve(f"teacher_{k}", result)


def stage_distill(run: Run) -> None:
    run.lock()
    K = run.cfg.cluster.k
    teachers, f1s = [], []
    for k in range(K):
        m, meta = run.load_model(f"teacher_{k}.ckpt", "train-teachers")
        teachers.append(m)
        f1s.append(meta["best_f1"])
    ds = run.datasets()
    ens = make_ensemble(teachers, f1s, run.cfg.loss)
    model, result = distill_student(ens, ds["train"], ds["eval"], run.cfg.student_spec(), run.cfg.loss,
                                    run.cfg.student_train, schedule=run.cfg.schedule, tag="packd_student")
    save_checkpoint(model, run.path("student.ckpt"), run.ckpt_meta("distill", result, lambdas=ens.lambdas))
    run.write_curve("packd_student", result)


def stage_baselines(run: Run, arms=None) -> None:
    run.lock()
    cfg = run.cfg
    arms = [a for a in (arms or cfg.arms) if a in BASELINE_ARMS]
    ds = run.datasets()
    if "student_only" in arms:
        m, r = train_bce(ds["train"], ds["eval"], cfg.student_spec(), cfg.student_train, tag="student_only")
        save_checkpoint(m, run.path("baseline_student_only.ckpt"), run.ckpt_meta("baselines", r))
        run.write_curve("student_only", r)
    teacher = None
    if "teacher_only" in arms:
        teacher, r = train_bce(ds["train"], ds["eval"], cfg.teacher_spec(), cfg.teacher_train, tag="teacher_only")
        save_checkpoint(teacher, run.path("baseline_teacher_only.ckpt"), run.ckpt_meta("baselines", r))
        run.write_curve("teacher_only", r)
    if "standard_kd" in arms:
        if teacher is None:
            teacher, _ = run.load_model("baseline_teacher_only.ckpt", "baselines --arm teacher_only")
        fixed = replace(cfg.loss, lambda_mode="fixed")
        ens = make_ensemble([teacher], [0.0], fixed)
        m, r = distill_student(ens, ds["train"], ds["eval"], cfg.student_spec(), fixed, cfg.student_train,
                               {0: np.arange(len(ds["train"]))}, tag="standard_kd")
        save_checkpoint(m, run.path("baseline_standard_kd.ckpt"), run.ckpt_meta("baselines", r))
        run.write_curve("standard_kd", r)


ARM_FILES = {
    "teacher_only": "baseline_teacher_only.ckpt",
    "student_only": "baseline_student_only.ckpt",
    "standard_kd": "baseline_standard_kd.ckpt",
    "packd_student": "student.ckpt",
}


def stage_eval(run: Run) -> dict:
    run.lock()
    cfg = run.cfg
    ds = run.datasets()
    clusters = run.clusters()
    thr = cfg.student_train.threshold
    arms = {}
    for arm in cfg.arms:
        p = run.path(ARM_FILES[arm])
        if not p.exists():
            continue
        model, meta = run.load_model(ARM_FILES[arm], "eval")
        arms[arm] = {**evaluate(model, ds["eval"], threshold=thr), "params": param_count(model),
                     "best_epoch": meta.get("best_epoch")}
    teachers = {}
    for k in range(cfg.cluster.k):
        p = run.path(f"teacher_{k}.ckpt")
        if not p.exists():
            continue
        model, meta = run.load_model(p.name, "train-teachers")
        idx = np.flatnonzero(ds["eval"].cluster_ids == k)
        teachers[str(k)] = {**evaluate(model, ds["eval"], idx, thr), "eval_samples": int(len(idx)),
                            "params": param_count(model), "epochs": meta.get("epochs")}
    if teachers and "packd_student" in arms:
        lambdas = load_checkpoint(run.path("student.ckpt"))[1].get("lambdas", [])
        for k, lam in enumerate(lambdas):
            if str(k) in teachers:
                teachers[str(k)]["lambda"] = lam

    built_t = {f: param_count(PRESETS[t]) for f, (t, _) in FAMILY_PRESETS.items()}
    built_s = {f: param_count(PRESETS[s]) for f, (_, s) in FAMILY_PRESETS.items()}
    metrics = {
        "config_hash": run.hash,
        "family": cfg.family,
        "k": cfg.cluster.k,
        "view": cfg.view.kind.value,
        "seeds": [cfg.seed],
        "threshold": thr,
        "arms": arms,
        "teachers": teachers,
        "mean_teacher_f1": float(np.mean([t["f1"] for t in teachers.values()])) if teachers else None,
        "params": {"teacher": param_count(cfg.teacher_spec()), "student": param_count(cfg.student_spec())},
        "compression": {"built": compression_ratio(built_t, built_s), "published": paper_compression()},
        "sse_table": clusters.get("sse_table", []),
        "cluster_sizes": clusters.get("cluster_sizes"),
    }
    sweep = run.path("sweep.json")
    if sweep.exists():
        metrics["sweep"] = json.loads(sweep.read_text())
    dump_json(metrics, run.path("metrics.json"))
    return metrics


def stage_report(run: Run) -> str:
    metrics = json.loads(run.require("metrics.json", "eval").read_text())
    run.check_hash(metrics, "metrics.json")
    return emit_report(run.dir, run.cfg.arms)


def stage_all(run: Run, arms=None) -> dict:
    stage_gen(run)
    stage_cluster(run)
    stage_train_teachers(run)
    stage_baselines(run, arms)
    if "packd_student" in (arms or run.cfg.arms):
        stage_distill(run)
    metrics = stage_eval(run)
    stage_report(run)
    return metrics
