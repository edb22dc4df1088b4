"""Micro-averaged multi-label metrics, compression accounting and run reports."""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple

import numpy as np
import torch

from .models import PAPER_PARAMS, Predictor, FAMILY_PRESETS

# Published average compression appears twice with different values.
PAPER_MEAN_COMPRESSION = (552.0, 522.0)


class Counts(NamedTuple):
    tp: int
    fp: int
    fn: int
    tn: int

    def __add__(self, other):  # merge partial counts
        return Counts(*(a + b for a, b in zip(self, other)))


def confusion_counts(labels, probs, threshold: float = 0.5) -> Counts:
    """Counts over every (sample, label) cell; a cell is predicted positive iff p > threshold."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    y = np.asarray(labels).astype(bool)
    p = np.asarray(probs)
    if y.shape != p.shape:
        raise ValueError(f"shape mismatch: labels {y.shape} vs probabilities {p.shape}")
    pred = p > threshold
    tp = int(np.count_nonzero(pred & y))
    fp = int(np.count_nonzero(pred & ~y))
    fn = int(np.count_nonzero(~pred & y))
    return Counts(tp, fp, fn, int(y.size) - tp - fp - fn)


def precision_recall_f1(counts: Counts) -> tuple[float, float, float]:
    tp, fp, fn = counts.tp, counts.fp, counts.fn
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    # 2PR/(P+R) rewritten over counts; identical value, one rounding step
    f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
    return precision, recall, f1


def metrics_dict(counts: Counts) -> dict:
    p, r, f1 = precision_recall_f1(counts)
    return {"precision": p, "recall": r, "f1": f1, "tp": counts.tp, "fp": counts.fp, "fn": counts.fn, "tn": counts.tn}


@torch.no_grad()
def predict_counts(model: Predictor, dataset, idx=None, threshold: float = 0.5, batch_size: int = 1024) -> Counts:
    """Confusion counts of ``model`` on ``dataset`` (optionally a subset of indices)."""
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    idx = np.arange(len(dataset)) if idx is None else np.asarray(idx)
    total = Counts(0, 0, 0, 0)
    for start in range(0, len(idx), batch_size):
        b = idx[start:start + batch_size]
        x = torch.from_numpy(dataset.inputs(b)).to(dtype)
        probs = torch.sigmoid(model(x)).numpy()
        total = total + confusion_counts(dataset.labels[b], probs, threshold)
    model.train(was_training)
    return total


def evaluate(model: Predictor, dataset, idx=None, threshold: float = 0.5) -> dict:
    return metrics_dict(predict_counts(model, dataset, idx, threshold))


def compression_ratio(teacher_params: Mapping[str, int], student_params: Mapping[str, int]) -> dict:
    """Per-family teacher/student parameter ratio and their arithmetic mean."""
    ratios = {}
    for fam, t in teacher_params.items():
        s = student_params[fam]
        if s <= 0:
            raise ValueError(f"student parameter count for {fam!r} must be positive")
        ratios[fam] = t / s
    return {"per_family": ratios, "mean": float(np.mean(list(ratios.values())))}


def paper_compression() -> dict:
    teachers = {fam: PAPER_PARAMS[t] for fam, (t, _) in FAMILY_PRESETS.items()}
    students = {fam: PAPER_PARAMS[s] for fam, (_, s) in FAMILY_PRESETS.items()}
    return compression_ratio(teachers, students)


# --------------------------------------------------------------------------- report

ARM_ORDER = ("teacher_only", "student_only", "standard_kd", "packd_student")


def dump_json(obj, path: str | os.PathLike) -> None:
    """Sorted-key JSON written atomically."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")
    os.replace(tmp, path)


def _fmt(x) -> str:
    return f"{x:.4f}" if isinstance(x, float) else str(x)


def _table(header: Iterable[str], rows: Iterable[Iterable]) -> list[str]:
    header = list(header)
    out = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    out += ["| " + " | ".join(_fmt(v) for v in row) + " |" for row in rows]
    return out


def render_report(metrics: dict, run_dir: Path, requested_arms: Iterable[str] = ARM_ORDER) -> str:
    lines = ["# Run report", "", f"config hash: `{metrics.get('config_hash', '?')}`", ""]
    arms = metrics.get("arms", {})
    fam = metrics.get("family", "?")
    k = metrics.get("k", "?")
    view = metrics.get("view", "?")

    lines += ["## F1 by arm", "", f"family `{fam}`, K={k}, feature view `{view}`", ""]
    rows = []
    for arm in list(requested_arms) + sorted(a for a in arms if a not in requested_arms):
        m = arms.get(arm)
        if m is None:
            rows.append((arm, "absent", "absent", "absent", "-"))
        else:
            rows.append((arm, m["precision"], m["recall"], m["f1"], m.get("params", "-")))
    lines += _table(("arm", "precision", "recall", "F1", "params"), rows) + [""]

    teachers = metrics.get("teachers", {})
    if teachers:
        lines += ["## Pattern-specific teachers (own-cluster eval)", ""]
        lines += _table(("cluster", "samples", "F1", "lambda"),
                        [(c, t.get("eval_samples", "-"), t["f1"], t.get("lambda", "-"))
                         for c, t in sorted(teachers.items(), key=lambda kv: int(kv[0]))]) + [""]

    sweep = metrics.get("sweep", [])
    if sweep:
        lines += ["## F1 by K and feature view", ""]
        lines += _table(("view", "K", "mean teacher F1", "student F1"),
                        [(s["view"], s["k"], s["teacher_f1"], s["student_f1"]) for s in sweep]) + [""]

    sse = metrics.get("sse_table", [])
    if sse:
        lines += ["## SSE versus k", ""] + _table(("k", "SSE"), [(r[0], r[1]) for r in sse]) + [""]

    comp = metrics.get("compression")
    if comp:
        lines += ["## Compression", ""]
        rows = [(f, comp["built"]["per_family"][f], comp["published"]["per_family"][f])
                for f in sorted(comp["built"]["per_family"])]
        rows.append(("mean", comp["built"]["mean"], comp["published"]["mean"]))
        lines += _table(("family", "built models", "published counts"), rows) + [""]
        a, b = PAPER_MEAN_COMPRESSION
        lines += [f"Note: the published average compression is quoted as both {a:.0f}x and {b:.0f}x; "
                  f"the published per-model counts give {comp['published']['mean']:.1f}x.", ""]

    files = sorted(str(p.relative_to(run_dir)) for p in run_dir.rglob("*")
                   if p.is_file() and p.name != "report.md" and not p.name.endswith(".tmp"))
    lines += ["## Artifacts", ""] + [f"- `{f}`" for f in files] + [""]
    return "\n".join(lines)


def emit_report(run_dir: str | os.PathLike, requested_arms: Iterable[str] = ARM_ORDER) -> str:
    """Write ``report.md`` from ``metrics.json`` in ``run_dir``; returns the markdown."""
    run_dir = Path(run_dir)
    metrics = json.loads((run_dir / "metrics.json").read_text())
    text = render_report(metrics, run_dir, tuple(requested_arms))
    tmp = run_dir / "report.md.tmp"
    tmp.write_text(text)
    os.replace(tmp, run_dir / "report.md")
    return text
