import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from packd.models import (ARCHS, FAMILY_PRESETS, PAPER_PARAMS, PRESETS, ModelSpec, build_model, forward,
                          load_checkpoint, param_count, resnet_layout, save_checkpoint, state_digest)

from oracles import model_gradient_error

TINY = {a: ModelSpec(a, 4, 2, "student", (8, 10), 8) for a in ARCHS}


def test_stu_l_forwards_to_256_logits():
    m = build_model(PRESETS["Stu-L"])
    out = forward(m, np.random.default_rng(0).random((2, 8, 10)))
    assert out.shape == (2, 256)


@pytest.mark.parametrize("arch", ARCHS)
def test_zero_input_finite(arch):
    out = forward(build_model(TINY[arch]), np.zeros((3, 8, 10)))
    assert torch.isfinite(out).all() and out.shape == (3, 8)


@pytest.mark.parametrize("arch", ARCHS)
def test_seed_determinism(arch):
    assert state_digest(build_model(TINY[arch], 3)) == state_digest(build_model(TINY[arch], 3))
    assert state_digest(build_model(TINY[arch], 3)) != state_digest(build_model(TINY[arch], 4))


def test_build_does_not_touch_global_rng():
    torch.manual_seed(0)
    a = torch.rand(1)
    torch.manual_seed(0)
    build_model(TINY["mixer"], 9)
    assert torch.equal(torch.rand(1), a)


@pytest.mark.parametrize("arch", ARCHS)
def test_batch_contracts(arch):
    m = build_model(TINY[arch], 1)
    x = np.random.default_rng(1).random((5, 8, 10)).astype(np.float32)
    assert forward(m, x[:1]).shape == (1, 8)
    full = forward(m, x)
    dup = forward(m, np.concatenate([x, x[:1]]))
    assert torch.equal(dup[0], dup[-1])
    perm = [3, 0, 4, 1, 2]
    assert torch.allclose(forward(m, x[perm]), full[perm], atol=1e-6, rtol=0)
    assert m.training  # forward() restores mode


@pytest.mark.parametrize("arch", ARCHS)
def test_shape_mismatch(arch):
    m = build_model(TINY[arch])
    with pytest.raises(ValueError):
        forward(m, np.zeros((2, 10, 8)))
    with pytest.raises(ValueError):
        forward(m, np.zeros((8, 10)))


def test_spec_validation():
    with pytest.raises(ValueError):
        ModelSpec("transformer", 4, 1)
    with pytest.raises(ValueError):
        ModelSpec("mixer", 0, 1)
    with pytest.raises(ValueError):
        ModelSpec("mixer", 4, 1, role="oracle")


@given(st.integers(1, 64), st.integers(1, 300))
@settings(max_examples=30)
def test_linear_head_closed_form(h, q):
    assert param_count(torch.nn.Linear(h, q)) == h * q + q
    m = build_model(ModelSpec("mixer", h, 1, out_labels=q))
    assert param_count(m.net.head) == h * q + q


@pytest.mark.parametrize("name,band", [("Tch-L", .10), ("Tch-M", .10), ("Tch-R", .15),
                                       ("Stu-L", .10), ("Stu-M", .10), ("Stu-R", .15)])
def test_preset_counts_within_band(name, band):
    n = param_count(PRESETS[name])
    assert abs(n - PAPER_PARAMS[name]) <= band * PAPER_PARAMS[name], n


@pytest.mark.parametrize("family", ARCHS)
def test_built_compression_band(family):
    t, s = FAMILY_PRESETS[family]
    ratio = param_count(PRESETS[t]) / param_count(PRESETS[s])
    assert 400 <= ratio <= 650


def test_param_count_spec_equals_model():
    for spec in TINY.values():
        assert param_count(spec) == sum(p.numel() for p in build_model(spec).parameters())


def test_resnet_layout():
    assert resnet_layout(50) == ("bottleneck", [3, 4, 6, 3])
    assert resnet_layout(11) == ("basic", [1, 1, 1])
    assert resnet_layout(2) == ("basic", [1])
    for depth in range(1, 120):
        _, stages = resnet_layout(depth)
        assert sum(stages) == max(1, (depth - 2) // 3) or min(stages) == 1


@pytest.mark.parametrize("arch", ARCHS)
def test_checkpoint_roundtrip_bit_identical(arch, tmp_path):
    m = build_model(TINY[arch], 5)
    with torch.no_grad():
        for p in m.parameters():
            p.add_(0.01)
    x = np.random.default_rng(2).random((4, 8, 10)).astype(np.float32)
    save_checkpoint(m, tmp_path / "m.ckpt", {"config_hash": "x"})
    back, meta = load_checkpoint(tmp_path / "m.ckpt")
    assert meta == {"config_hash": "x"} and back.spec == m.spec
    assert torch.equal(forward(back, x), forward(m, x))
    assert state_digest(back) == state_digest(m)


def test_checkpoint_keeps_float64(tmp_path):
    m = build_model(TINY["residual_conv"]).double()
    save_checkpoint(m, tmp_path / "m.ckpt")
    back, _ = load_checkpoint(tmp_path / "m.ckpt")
    assert next(back.parameters()).dtype == torch.float64


@pytest.mark.parametrize("arch", ARCHS)
@pytest.mark.parametrize("seed", range(34))
def test_parameter_gradients_match_finite_differences(arch, seed):
    assert model_gradient_error(arch, seed) < 1e-4
