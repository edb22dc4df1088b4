"""Run configuration: one flat JSON file of dotted keys.

Example::

    {
      "seed": 0,
      "synthetic.kind": "multi_phase",
      "synthetic.phases": [[1, 1000, "0x401000"], [7, 1000, "0x402000"]],
      "cluster.k": 2,
      "teacher.dim": 16
    }

Unknown keys are rejected. ``PACKD_SEED`` and ``PACKD_OUT`` override the seed
and output directory.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .clustering import FeatureView
from .dataset import DatasetConfig
from .distillation import LossConfig, TrainConfig
from .models import ARCHS, ModelSpec
from .trace_io import GeometryConfig, Phase, SyntheticRecipe, TraceSplit

ARMS = ("teacher_only", "student_only", "standard_kd", "packd_student")
SCHEDULES = ("mixed", "interleaved", "sequential")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ClusterConfig:
    k: int = 2
    k_sweep: tuple = ()
    max_iters: int = 300
    restarts: int = 1


@dataclass(frozen=True)
class ArchConfig:
    dim: int
    layers: int


@dataclass
class RunConfig:
    trace_path: str | None = None
    synthetic: SyntheticRecipe | None = None
    geometry: GeometryConfig = GeometryConfig()
    split: TraceSplit = TraceSplit()
    view: FeatureView = FeatureView()
    cluster: ClusterConfig = ClusterConfig()
    dataset: DatasetConfig = DatasetConfig()
    family: str = "mixer"
    teacher: ArchConfig = ArchConfig(16, 2)
    student: ArchConfig = ArchConfig(8, 1)
    loss: LossConfig = LossConfig()
    teacher_train: TrainConfig = TrainConfig()
    student_train: TrainConfig = TrainConfig()
    # how ensemble-distillation batches are drawn from the clusters
    schedule: str = "mixed"
    # scale per-cluster teacher epochs so every teacher gets the unclustered step budget
    equalize_steps: bool = True
    arms: tuple = ARMS
    out: str = "runs/default"
    seed: int = 0

    def __post_init__(self):
        if (self.trace_path is None) == (self.synthetic is None):
            raise ConfigError("set exactly one of trace.path or synthetic.*")
        if self.family not in ARCHS:
            raise ConfigError(f"family must be one of {ARCHS}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}")
        bad = set(self.arms) - set(ARMS)
        if bad:
            raise ConfigError(f"unknown arms {sorted(bad)}")
        if self.cluster.k < 1:
            raise ConfigError("cluster.k must be >= 1")
        try:
            self.dataset.check(self.geometry)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    # ------------------------------------------------------------------ specs
    def teacher_spec(self) -> ModelSpec:
        d = self.dataset
        return ModelSpec(self.family, self.teacher.dim, self.teacher.layers, "teacher", (d.p, d.n), d.q)

    def student_spec(self) -> ModelSpec:
        d = self.dataset
        return ModelSpec(self.family, self.student.dim, self.student.layers, "student", (d.p, d.n), d.q)

    # ------------------------------------------------------------------ flat io
    def to_flat(self) -> dict:
        flat = {"seed": self.seed, "out": self.out, "family": self.family, "schedule": self.schedule,
                "equalize_steps": self.equalize_steps, "arms": list(self.arms)}
        if self.trace_path is not None:
            flat["trace.path"] = self.trace_path
        else:
            for k, v in asdict(self.synthetic).items():
                if k == "phases":
                    v = [[p.stride, p.length, p.ip] if isinstance(p, Phase) else list(p) for p in self.synthetic.phases]
                flat[f"synthetic.{k}"] = v
        for section in ("geometry", "split", "cluster", "dataset", "teacher", "student", "loss",
                        "teacher_train", "student_train"):
            for k, v in asdict(getattr(self, section)).items():
                flat[f"{section}.{k}"] = list(v) if isinstance(v, tuple) else v
        flat["view.kind"] = self.view.kind.value
        flat["view.window"] = self.view.window
        return flat

    @classmethod
    def from_flat(cls, flat: dict) -> "RunConfig":
        flat = dict(flat)
        sections = {}
        top = {}
        for key, value in flat.items():
            if "." in key:
                sec, name = key.split(".", 1)
                sections.setdefault(sec, {})[name] = value
            else:
                top[key] = value
        known_top = {"seed", "out", "family", "schedule", "equalize_steps", "arms"}
        if set(top) - known_top:
            raise ConfigError(f"unknown keys {sorted(set(top) - known_top)}")
        seed = int(top.get("seed", 0))
        kw = {k: v for k, v in top.items() if k in known_top}
        if "arms" in kw:
            kw["arms"] = tuple(kw["arms"])

        builders = {
            "geometry": GeometryConfig, "split": TraceSplit, "dataset": DatasetConfig, "loss": LossConfig,
            "cluster": ClusterConfig,
        }
        try:
            for sec, values in sections.items():
                if sec == "trace":
                    _only(values, {"path"}, "trace")
                    kw["trace_path"] = values["path"]
                elif sec == "synthetic":
                    values = dict(values)
                    values.setdefault("seed", seed)
                    if "phases" in values:
                        values["phases"] = [Phase(int(s), int(n), _int(ip)) for s, n, ip in values["phases"]]
                    for key in ("ip", "base_block"):
                        if key in values:
                            values[key] = _int(values[key])
                    kw["synthetic"] = _build(SyntheticRecipe, values, sec)
                elif sec == "view":
                    kw["view"] = _build(FeatureView, values, sec)
                elif sec in ("teacher", "student"):
                    kw[sec] = _build(ArchConfig, values, sec)
                elif sec in ("teacher_train", "student_train"):
                    values = dict(values)
                    values.setdefault("seed", seed)
                    kw[sec] = _build(TrainConfig, values, sec)
                elif sec in builders:
                    if sec == "cluster" and "k_sweep" in values:
                        values = {**values, "k_sweep": tuple(values["k_sweep"])}
                    kw[sec] = _build(builders[sec], values, sec)
                else:
                    raise ConfigError(f"unknown config section {sec!r}")
            for sec in ("teacher_train", "student_train"):
                kw.setdefault(sec, TrainConfig(seed=seed))
            return cls(**kw)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def digest(self) -> str:
        """Hash of everything that affects artifacts (the output directory does not)."""
        flat = self.to_flat()
        flat.pop("out")
        blob = json.dumps(flat, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_overrides(self, seed: int | None = None, out: str | None = None) -> "RunConfig":
        if seed is None and out is None:
            return self
        flat = self.to_flat()
        if out is not None:
            flat["out"] = str(out)
        if seed is not None:
            # re-derive every seed that followed the global one
            old = flat["seed"]
            flat["seed"] = seed
            for key in ("synthetic.seed", "teacher_train.seed", "student_train.seed"):
                if key in flat and flat[key] == old:
                    flat[key] = seed
        return RunConfig.from_flat(flat)


def _int(v) -> int:
    return int(v, 0) if isinstance(v, str) else int(v)


def _only(values: dict, allowed: set, sec: str):
    extra = set(values) - allowed
    if extra:
        raise ConfigError(f"unknown keys in {sec}: {sorted(extra)}")


def _build(cls, values: dict, sec: str):
    _only(values, {f.name for f in fields(cls)}, sec)
    return cls(**values)


def load_config(path: str | os.PathLike | None, seed: int | None = None, out: str | None = None) -> RunConfig:
    if path is None:
        raise ConfigError("--config is required")
    try:
        flat = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(flat, dict):
        raise ConfigError("config must be a JSON object")
    cfg = RunConfig.from_flat(flat)
    env_seed = os.environ.get("PACKD_SEED")
    env_out = os.environ.get("PACKD_OUT")
    seed = seed if seed is not None else (int(env_seed) if env_seed else None)
    out = out if out is not None else env_out
    return cfg.with_overrides(seed, out)
