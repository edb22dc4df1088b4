import json
import os
import subprocess
import sys

import pytest

from packd.cli import main
from packd.config import ConfigError, RunConfig, load_config
from packd.models import load_checkpoint, state_digest

TINY = {
    "seed": 0,
    "synthetic.kind": "multi_phase",
    "synthetic.n": 1500,
    "synthetic.layout": "contiguous",
    "synthetic.phases": [[1, 100, "0x401000"], [7, 100, "0x402000"]],
    "split.skip": 100,
    "split.train": 1000,
    "split.eval": 400,
    "cluster.k": 2,
    "cluster.k_sweep": [1, 2, 3],
    "teacher.dim": 4,
    "teacher.layers": 1,
    "student.dim": 4,
    "student.layers": 1,
    "teacher_train.epochs": 1,
    "student_train.epochs": 1,
}


@pytest.fixture
def cfg_path(tmp_path):
    def make(**over):
        p = tmp_path / f"cfg_{len(list(tmp_path.glob('cfg_*')))}.json"
        p.write_text(json.dumps({**TINY, **over}))
        return str(p)
    return make


def run(cfg, out, *args):
    return main([args[0], "--config", cfg, "--out", str(out), *args[1:]])


def test_config_roundtrip_and_digest():
    cfg = RunConfig.from_flat(TINY)
    back = RunConfig.from_flat(cfg.to_flat())
    assert back.digest() == cfg.digest()
    assert cfg.with_overrides(out="elsewhere").digest() == cfg.digest()
    assert cfg.with_overrides(seed=5).digest() != cfg.digest()
    assert cfg.with_overrides(seed=5).synthetic.seed == 5


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.from_flat({**TINY, "bogus": 1})
    with pytest.raises(ConfigError):
        RunConfig.from_flat({**TINY, "teacher.width": 3})
    with pytest.raises(ConfigError):
        RunConfig.from_flat({**TINY, "family": "transformer"})
    with pytest.raises(ConfigError):
        RunConfig.from_flat({**TINY, "trace.path": "x.txt"})  # two sources
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")


def test_env_overrides(cfg_path, monkeypatch, tmp_path):
    monkeypatch.setenv("PACKD_SEED", "7")
    monkeypatch.setenv("PACKD_OUT", str(tmp_path / "envout"))
    cfg = load_config(cfg_path())
    assert cfg.seed == 7 and cfg.out == str(tmp_path / "envout")
    assert load_config(cfg_path(), seed=3).seed == 3


def test_exit_code_config_error(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["gen", "--config", str(bad)]) == 2
    bad.write_text(json.dumps({**TINY, "mystery": 1}))
    assert main(["gen", "--config", str(bad)]) == 2
    assert "config error" in capsys.readouterr().err


def test_exit_code_prerequisite(cfg_path, tmp_path, capsys):
    cfg = cfg_path()
    assert run(cfg, tmp_path / "r", "cluster") == 3
    assert "packd gen" in capsys.readouterr().err
    assert run(cfg, tmp_path / "r", "gen") == 0
    assert run(cfg, tmp_path / "r", "distill") == 3
    assert "train-teachers" in capsys.readouterr().err


def test_exit_code_runtime(cfg_path, tmp_path):
    # the split asks for more records than the trace holds
    assert run(cfg_path(**{"synthetic.n": 500}), tmp_path / "r", "gen") == 2
    assert run(cfg_path(**{"synthetic.n": 1500, "split.eval": 5}), tmp_path / "q", "all") == 4


def test_hash_mismatch_refused_unless_forced(cfg_path, tmp_path):
    out = tmp_path / "r"
    assert run(cfg_path(), out, "gen") == 0
    other = cfg_path(**{"cluster.k": 3})
    assert run(other, out, "cluster") == 2
    assert run(other, out, "cluster", "--force") == 0


def test_staged_pipeline_and_idempotency(cfg_path, tmp_path):
    cfg, out = cfg_path(), tmp_path / "r"
    assert run(cfg, out, "gen") == 0
    assert run(cfg, out, "cluster") == 0
    first = (out / "clusters.json").read_bytes()
    assert run(cfg, out, "cluster") == 0
    assert (out / "clusters.json").read_bytes() == first
    assert run(cfg, out, "train-teachers", "--cluster", "1") == 0
    assert not (out / "teacher_0.ckpt").exists() and (out / "teacher_1.ckpt").exists()
    assert run(cfg, out, "train-teachers") == 0
    digest = state_digest(load_checkpoint(out / "teacher_0.ckpt")[0])
    assert run(cfg, out, "train-teachers") == 0
    assert state_digest(load_checkpoint(out / "teacher_0.ckpt")[0]) == digest
    assert run(cfg, out, "train-teachers", "--cluster", "5") == 2
    assert run(cfg, out, "distill") == 0
    assert run(cfg, out, "baselines", "--arm", "student_only") == 0
    assert run(cfg, out, "eval") == 0
    metrics = json.loads((out / "metrics.json").read_text())
    assert set(metrics["arms"]) == {"student_only", "packd_student"}
    assert run(cfg, out, "report") == 0
    assert "| teacher_only | absent" in (out / "report.md").read_text()
    meta = json.loads((out / "config.lock").read_text())
    assert meta["stage"] == "config" and meta["config_hash"] == metrics["config_hash"]


def test_all_is_deterministic(cfg_path, tmp_path):
    cfg = cfg_path()
    assert run(cfg, tmp_path / "a", "all") == 0
    assert run(cfg, tmp_path / "b", "all") == 0
    a = (tmp_path / "a" / "metrics.json").read_bytes()
    assert a == (tmp_path / "b" / "metrics.json").read_bytes()
    m = json.loads(a)
    assert set(m["arms"]) == {"teacher_only", "student_only", "standard_kd", "packd_student"}
    assert set(m["teachers"]) == {"0", "1"} and len(m["sse_table"]) == 3
    for name in ("trace.txt.gz", "clusters.json", "dataset.cache", "student.ckpt", "report.md",
                 "plots/cluster_points.csv", "curves/packd_student.csv", "baseline_standard_kd.ckpt"):
        assert (tmp_path / "a" / name).exists(), name


def test_stages_run_in_fresh_processes(cfg_path, tmp_path):
    cfg, out = cfg_path(), tmp_path / "r"
    env = {**os.environ, "PACKD_OUT": str(out)}
    for stage in ("gen", "cluster", "train-teachers", "distill", "baselines", "eval", "report"):
        proc = subprocess.run([sys.executable, "-m", "packd", stage, "--config", cfg], env=env,
                              capture_output=True, text=True)
        assert proc.returncode == 0, (stage, proc.stderr)
    assert "## F1 by arm" in proc.stdout
    assert json.loads((out / "metrics.json").read_text())["arms"]["packd_student"]["f1"] >= 0
