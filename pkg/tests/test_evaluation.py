import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from packd.evaluation import (PAPER_MEAN_COMPRESSION, Counts, compression_ratio, confusion_counts, dump_json,
                              emit_report, metrics_dict, paper_compression, precision_recall_f1)
from packd.models import FAMILY_PRESETS, PRESETS, param_count

from oracles import brute_force_metrics


def test_count_examples():
    assert confusion_counts([[1, 0, 1, 0]], [[0.9, 0.8, 0.2, 0.1]]) == Counts(1, 1, 1, 1)
    y = np.array([[1, 0, 1]])
    c = confusion_counts(y, y.astype(float))
    assert c.fp == 0 and c.fn == 0
    z = confusion_counts(np.zeros((2, 3)), np.zeros((2, 3)))
    assert z[:3] == (0, 0, 0) and precision_recall_f1(z) == (0.0, 0.0, 0.0)


def test_f1_examples():
    p, r, f1 = precision_recall_f1(Counts(2, 1, 1, 0))
    assert p == r == 2 / 3 and f1 == 2 / 3
    assert precision_recall_f1(Counts(0, 5, 0, 0))[2] == 0.0
    assert precision_recall_f1(Counts(0, 3, 4, 1))[2] == 0.0


@given(st.integers(1, 50))
def test_equal_p_and_r_give_f1(x):
    # tp = fp = fn gives P = R = 1/2
    assert precision_recall_f1(Counts(x, x, x, 0))[2] == 0.5


def test_threshold_validation_and_shape():
    for bad in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            confusion_counts([[1]], [[0.5]], bad)
    with pytest.raises(ValueError):
        confusion_counts([[1, 0]], [[0.5]])


@pytest.mark.parametrize("seed", range(100))
def test_metrics_match_brute_force_recount(seed):
    rng = np.random.default_rng(seed)
    shape = (int(rng.integers(1, 12)), int(rng.integers(1, 20)))
    y = (rng.random(shape) < rng.random()).astype(np.uint8)
    p = rng.random(shape)
    thr = float(rng.uniform(0.05, 0.95))
    counts, prf = brute_force_metrics(y, p, thr)
    got = confusion_counts(y, p, thr)
    assert tuple(got) == counts
    P, R, F = precision_recall_f1(got)
    assert (P, R) == prf[:2]
    assert F == pytest.approx(prf[2], rel=1e-15, abs=0)


def test_partial_counts_merge(rng):
    y = rng.integers(0, 2, (40, 8))
    p = rng.random((40, 8))
    whole = confusion_counts(y, p)
    assert confusion_counts(y[:13], p[:13]) + confusion_counts(y[13:], p[13:]) == whole


@given(st.integers(0, 10_000), st.floats(0.01, 0.98), st.floats(0.0, 0.5))
def test_threshold_monotone(seed, lo, gap):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, (6, 6))
    p = rng.random((6, 6))
    hi = min(0.99, lo + gap)
    a, b = confusion_counts(y, p, lo), confusion_counts(y, p, hi)
    assert b.tp <= a.tp and b.tn >= a.tn


def test_joint_permutation_invariance(rng):
    y = rng.integers(0, 2, (30, 5))
    p = rng.random((30, 5))
    perm = rng.permutation(30)
    assert confusion_counts(y[perm], p[perm]) == confusion_counts(y, p)


def test_metrics_dict_keys():
    d = metrics_dict(Counts(2, 1, 1, 4))
    assert set(d) == {"precision", "recall", "f1", "tp", "fp", "fn", "tn"}


# ---------------------------------------------------------------- compression

def test_published_counts_reproduce_quoted_ratios():
    ratios = paper_compression()["per_family"]
    for fam, quoted, exact in [("recurrent", 445, 445.4), ("mixer", 538, 537.3), ("residual_conv", 584, 581.6)]:
        assert abs(ratios[fam] - quoted) <= 0.01 * quoted
        assert ratios[fam] == pytest.approx(exact, abs=0.05)


def test_published_mean_and_quoted_discrepancy():
    mean = paper_compression()["mean"]
    assert mean == pytest.approx(np.mean([5302 / 11.904, 5484 / 10.206, 5423 / 9.324]), rel=1e-12)
    assert mean == pytest.approx(521.4, abs=0.05)
    assert abs(mean - PAPER_MEAN_COMPRESSION[1]) < 1 < abs(mean - PAPER_MEAN_COMPRESSION[0])


def test_built_ratios_in_band():
    t = {f: param_count(PRESETS[a]) for f, (a, _) in FAMILY_PRESETS.items()}
    s = {f: param_count(PRESETS[b]) for f, (_, b) in FAMILY_PRESETS.items()}
    out = compression_ratio(t, s)
    assert all(400 <= r <= 650 for r in out["per_family"].values())


def test_compression_identity_and_error():
    assert compression_ratio({"a": 7}, {"a": 7}) == {"per_family": {"a": 1.0}, "mean": 1.0}
    with pytest.raises(ValueError):
        compression_ratio({"a": 7}, {"a": 0})


# ---------------------------------------------------------------- report

def _metrics(arms):
    return {
        "config_hash": "h", "family": "mixer", "k": 2, "view": "past_block_delta",
        "arms": {a: {"precision": 0.5, "recall": 0.5, "f1": 0.5, "params": 10} for a in arms},
        "teachers": {"0": {"f1": 0.9, "eval_samples": 3, "lambda": 0.5}},
        "sse_table": [[2, 10.0], [3, 5.0]],
        "compression": {"built": paper_compression(), "published": paper_compression()},
    }


def test_report_rows_and_absent_arms(tmp_path):
    arms = ["teacher_only", "student_only", "standard_kd"]
    dump_json(_metrics(arms), tmp_path / "metrics.json")
    text = emit_report(tmp_path, arms)
    table = text.split("## F1 by arm")[1].split("##")[0]
    assert sum(line.startswith("| ") and "arm" not in line for line in table.splitlines()) == 3
    full = emit_report(tmp_path)
    assert "| packd_student | absent" in full
    assert "552x" in full and "522x" in full


def test_report_is_deterministic_and_lists_artifacts(tmp_path):
    dump_json(_metrics(["student_only"]), tmp_path / "metrics.json")
    (tmp_path / "curves").mkdir()
    (tmp_path / "curves" / "student_only.csv").write_text("epoch\n")
    (tmp_path / "teacher_0.ckpt").write_bytes(b"x")
    a = emit_report(tmp_path)
    b = emit_report(tmp_path)
    assert a == b == (tmp_path / "report.md").read_text()
    listed = {f for f in (p.relative_to(tmp_path).as_posix() for p in tmp_path.rglob("*") if p.is_file())
              if f != "report.md"}
    assert listed and all(f"`{f}`" in a for f in listed)


def test_dump_json_stable(tmp_path):
    obj = {"b": 1, "a": [1.5, {"z": 0, "y": None}]}
    dump_json(obj, tmp_path / "a.json")
    first = (tmp_path / "a.json").read_bytes()
    dump_json(json.loads(first), tmp_path / "a.json")
    assert (tmp_path / "a.json").read_bytes() == first
    assert first.index(b'"a"') < first.index(b'"b"')
