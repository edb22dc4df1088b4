"""Recurrent, Mixer and residual-conv predictors over ``p x n`` address matrices.

Every predictor maps a ``(batch, p, n)`` float tensor to ``(batch, q)`` raw logits.
Width (``dim``) and depth (``layers``) are the only scaling knobs; the Table-I
style presets in :data:`PRESETS` are expressed with them directly.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import torch
from torch import nn
from torchvision.models.resnet import BasicBlock, Bottleneck, conv1x1

ARCHS = ("recurrent", "mixer", "residual_conv")
# Per-step feature width fed to the LSTM stack; see RecurrentNet.
RECURRENT_STEP_FEATURES = 100


@dataclass(frozen=True)
class ModelSpec:
    arch: str
    dim: int
    layers: int
    role: str = "student"
    input_shape: tuple = (8, 10)
    out_labels: int = 256

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown arch {self.arch!r}; expected one of {ARCHS}")
        if self.dim < 1 or self.layers < 1:
            raise ValueError("dim and layers must be >= 1")
        if self.role not in ("teacher", "student"):
            raise ValueError(f"role must be teacher or student, not {self.role!r}")
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if len(self.input_shape) != 2 or min(self.input_shape) < 1:
            raise ValueError(f"input_shape must be (p, n), got {self.input_shape}")
        if self.out_labels < 1:
            raise ValueError("out_labels must be >= 1")

    def with_io(self, p: int, n: int, q: int) -> "ModelSpec":
        return replace(self, input_shape=(p, n), out_labels=q)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d


PRESETS = {
    "Tch-L": ModelSpec("recurrent", 128, 40, "teacher"),
    "Tch-M": ModelSpec("mixer", 512, 20, "teacher"),
    "Tch-R": ModelSpec("residual_conv", 30, 50, "teacher"),
    "Stu-L": ModelSpec("recurrent", 16, 1, "student"),
    "Stu-M": ModelSpec("mixer", 18, 8, "student"),
    "Stu-R": ModelSpec("residual_conv", 4, 11, "student"),
}
# published parameter counts for the presets
PAPER_PARAMS = {
    "Tch-L": 5_302_000, "Tch-M": 5_484_000, "Tch-R": 5_423_000,
    "Stu-L": 11_904, "Stu-M": 10_206, "Stu-R": 9_324,
}
FAMILY_PRESETS = {"recurrent": ("Tch-L", "Stu-L"), "mixer": ("Tch-M", "Stu-M"), "residual_conv": ("Tch-R", "Stu-R")}


class RecurrentNet(nn.Module):
    """Stacked LSTM over the ``n`` history columns.

    Each ``p``-vector is first projected to a fixed per-step width; with torch's
    two-bias LSTM this reproduces the published LSTM parameter counts.
    """

    def __init__(self, spec: ModelSpec):
        super().__init__()
        p, _ = spec.input_shape
        self.embed = nn.Linear(p, RECURRENT_STEP_FEATURES)
        self.rnn = nn.LSTM(RECURRENT_STEP_FEATURES, spec.dim, num_layers=spec.layers, batch_first=True)
        self.head = nn.Linear(spec.dim, spec.out_labels)

    def forward(self, x):
        seq = self.embed(x.transpose(1, 2))  # (B, n, features)
        _, (h, _) = self.rnn(seq)
        return self.head(h[-1])


class MixerBlock(nn.Module):
    def __init__(self, tokens: int, dim: int):
        super().__init__()
        hidden = max(1, dim // 2)
        self.norm1 = nn.LayerNorm(dim)
        self.token_mlp = nn.Sequential(nn.Linear(tokens, tokens), nn.GELU(), nn.Linear(tokens, tokens))
        self.norm2 = nn.LayerNorm(dim)
        self.channel_mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):  # (B, tokens, dim)
        x = x + self.token_mlp(self.norm1(x).transpose(1, 2)).transpose(1, 2)
        return x + self.channel_mlp(self.norm2(x))


class MixerNet(nn.Module):
    """n tokens of dimension p; token MLP hidden = n, channel MLP hidden = dim/2."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        p, n = spec.input_shape
        self.embed = nn.Linear(p, spec.dim)
        self.blocks = nn.Sequential(*[MixerBlock(n, spec.dim) for _ in range(spec.layers)])
        self.norm = nn.LayerNorm(spec.dim)
        self.head = nn.Linear(spec.dim, spec.out_labels)

    def forward(self, x):
        h = self.blocks(self.embed(x.transpose(1, 2)))
        return self.head(self.norm(h).mean(dim=1))


def resnet_layout(layers: int) -> tuple[str, list[int]]:
    """Block type and blocks per stage for a nominal depth.

    Depth counts weighted layers as in bottleneck ResNets: ``3 * blocks + 2``.
    Depths >= 50 use bottleneck blocks over four stages in ResNet-50
    proportions (3:4:6:3); shallower nets use basic blocks over at most three
    stages. Stage ``s`` has width ``dim * 2**s``.
    """
    blocks = max(1, (layers - 2) // 3)
    if layers >= 50:
        ratio = [3, 4, 6, 3]
        raw = [blocks * r / 16 for r in ratio]
        out = [max(1, int(v)) for v in raw]
        # largest remainder until the total matches
        order = sorted(range(4), key=lambda i: raw[i] - int(raw[i]), reverse=True)
        i = 0
        while sum(out) < blocks:
            out[order[i % 4]] += 1
            i += 1
        return "bottleneck", out
    stages = min(3, blocks)
    base, extra = divmod(blocks, stages)
    return "basic", [base + (1 if s >= stages - extra else 0) for s in range(stages)]


class ResidualConvNet(nn.Module):
    """1-channel ``p x n`` image -> 3x3 stem -> residual stages -> pool -> head."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        kind, stages = resnet_layout(spec.layers)
        block = Bottleneck if kind == "bottleneck" else BasicBlock
        w = spec.dim
        self.stem = nn.Sequential(
            nn.Conv2d(1, w, kernel_size=3, padding=1, bias=False), nn.BatchNorm2d(w), nn.ReLU(inplace=True)
        )
        inplanes = w
        layers = []
        for s, nblocks in enumerate(stages):
            planes = w * 2 ** s
            stride = 1 if s == 0 else 2
            down = None
            if stride != 1 or inplanes != planes * block.expansion:
                down = nn.Sequential(conv1x1(inplanes, planes * block.expansion, stride),
                                     nn.BatchNorm2d(planes * block.expansion))
            layers.append(block(inplanes, planes, stride, down))
            inplanes = planes * block.expansion
            layers += [block(inplanes, planes) for _ in range(1, nblocks)]
        self.stages = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(inplanes, spec.out_labels)

    def forward(self, x):
        h = self.stages(self.stem(x.unsqueeze(1)))
        return self.head(torch.flatten(self.pool(h), 1))


_NETS = {"recurrent": RecurrentNet, "mixer": MixerNet, "residual_conv": ResidualConvNet}


class Predictor(nn.Module):
    """A built network plus the spec and seed it came from."""

    def __init__(self, spec: ModelSpec, seed: int = 0):
        super().__init__()
        self.spec = spec
        self.seed = seed
        self.net = _NETS[spec.arch](spec)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 3 or tuple(x.shape[1:]) != self.spec.input_shape:
            raise ValueError(f"expected input (batch, {self.spec.input_shape[0]}, {self.spec.input_shape[1]}), "
                             f"got {tuple(x.shape)}")
        return self.net(x)


def build_model(spec: ModelSpec, seed: int = 0) -> Predictor:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Predictor(spec, seed)


@torch.no_grad()
def forward(model: Predictor, batch) -> torch.Tensor:
    """Inference-mode logits for a batch of ``p x n`` inputs."""
    x = torch.as_tensor(batch, dtype=next(model.parameters()).dtype)
    was_training = model.training
    model.eval()
    try:
        return model(x)
    finally:
        model.train(was_training)


def param_count(spec_or_model) -> int:
    if isinstance(spec_or_model, ModelSpec):
        with torch.device("meta"):
            spec_or_model = Predictor(spec_or_model)
    return sum(p.numel() for p in spec_or_model.parameters() if p.requires_grad)


# --------------------------------------------------------------------------- checkpoints

def state_digest(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:16]


def save_checkpoint(model: Predictor, path: str | os.PathLike, meta: dict | None = None) -> None:
    path = Path(path)
    payload = {
        "spec": model.spec.to_dict(),
        "seed": model.seed,
        "state_dict": model.state_dict(),
        "meta": meta or {},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> tuple[Predictor, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    spec = ModelSpec(**payload["spec"])
    model = build_model(spec, payload["seed"])
    model.load_state_dict(payload["state_dict"])
    dtype = next(t.dtype for t in payload["state_dict"].values() if t.is_floating_point())
    model.to(dtype)
    return model, payload["meta"]


def spec_summary(spec: ModelSpec) -> str:
    return json.dumps(spec.to_dict(), sort_keys=True)
