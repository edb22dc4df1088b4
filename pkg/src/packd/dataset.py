"""Segmented-address inputs and future-delta bitmap labels.

A sample is anchored at the *current* access ``t``. Its input is the block
addresses ``t-n+1 .. t`` (oldest first), each split into ``p`` segments; its
label marks every delta ``block(u) - block(t)`` seen in the future window
``u in (t, t+W]``.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .trace_io import GeometryConfig, TraceRecord, block_addresses


@dataclass(frozen=True)
class DatasetConfig:
    n: int = 10
    W: int = 128
    D: int = 128
    p: int = 8
    seg_bits: int = 4
    page_filter: bool = True

    def __post_init__(self):
        if self.n < 1 or self.W < 1 or self.D < 1:
            raise ValueError("n, W and D must be >= 1")
        if self.p < 1 or self.seg_bits < 1:
            raise ValueError("p and seg_bits must be >= 1")

    @property
    def m(self) -> int:
        return self.p * self.seg_bits

    @property
    def q(self) -> int:
        return 2 * self.D

    def check(self, geometry: GeometryConfig) -> None:
        if self.m > 64 - geometry.block_bits:
            raise ValueError(
                f"p*seg_bits={self.m} exceeds the {64 - geometry.block_bits} bits of a block address"
            )

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


# --------------------------------------------------------------------------- input

def raw_segments(blocks, p: int, seg_bits: int) -> np.ndarray:
    """Unscaled segments, most significant first, of the low ``p*seg_bits`` bits."""
    if p * seg_bits > 64:
        raise ValueError("p*seg_bits must be <= 64")
    b = np.asarray(blocks, dtype=np.int64).astype(np.uint64)
    mask = np.uint64((1 << seg_bits) - 1)
    shifts = np.array([(p - 1 - i) * seg_bits for i in range(p)], dtype=np.uint64)
    return ((b[..., None] >> shifts) & mask).astype(np.uint16)


def segment_address(block_address: int, p: int, seg_bits: int) -> np.ndarray:
    return raw_segments(block_address, p, seg_bits).astype(np.float64) / ((1 << seg_bits) - 1)


# --------------------------------------------------------------------------- labels

def delta_index(d: int, D: int) -> int:
    """Bit position of delta ``d``: negatives occupy ``[0, D)``, positives ``[D, 2D)``."""
    if d == 0 or abs(d) > D:
        raise ValueError(f"delta {d} outside [-{D}, -1] U [1, {D}]")
    return d + D if d < 0 else d + D - 1


def index_delta(i: int, D: int) -> int:
    if not 0 <= i < 2 * D:
        raise ValueError(f"bit index {i} outside [0, {2 * D})")
    return i - D if i < D else i - D + 1


def build_label(blocks, t: int, config: DatasetConfig, blocks_per_page: int = 64) -> np.ndarray:
    blocks = np.asarray(blocks, dtype=np.int64)
    if not 0 <= t < len(blocks) - 1:
        raise IndexError(f"position {t} has no future access in a trace of {len(blocks)}")
    label = np.zeros(config.q, dtype=np.uint8)
    fut = blocks[t + 1:t + 1 + config.W]
    d = fut - blocks[t]
    ok = (d != 0) & (np.abs(d) <= config.D)
    if config.page_filter:
        ok &= (fut // blocks_per_page) == (blocks[t] // blocks_per_page)
    d = d[ok]
    label[np.where(d < 0, d + config.D, d + config.D - 1)] = 1
    return label


def build_labels(blocks, positions, config: DatasetConfig, blocks_per_page: int = 64) -> np.ndarray:
    """Vectorized :func:`build_label` over many positions."""
    blocks = np.asarray(blocks, dtype=np.int64)
    positions = np.asarray(positions, dtype=np.int64)
    out = np.zeros((len(positions), config.q), dtype=np.uint8)
    cur = blocks[positions]
    cur_page = cur // blocks_per_page
    rows = np.arange(len(positions))
    for j in range(1, config.W + 1):
        idx = positions + j
        live = idx < len(blocks)
        if not live.any():
            break
        r = rows[live]
        fut = blocks[idx[live]]
        d = fut - cur[live]
        ok = (d != 0) & (np.abs(d) <= config.D)
        if config.page_filter:
            ok &= (fut // blocks_per_page) == cur_page[live]
        d = d[ok]
        out[r[ok], np.where(d < 0, d + config.D, d + config.D - 1)] = 1
    return out


# --------------------------------------------------------------------------- samples

@dataclass
class Sample:
    input: np.ndarray
    label: np.ndarray
    cluster_id: int
    position: int


class Dataset:
    """Model-ready samples stored compactly.

    Inputs are materialized on demand from per-access segments so the
    ``p x n`` windows are not copied ``n`` times.
    """

    def __init__(self, segments: np.ndarray, labels: np.ndarray, positions: np.ndarray,
                 cluster_ids: np.ndarray, config: DatasetConfig):
        self.segments = segments
        self.labels = labels
        self.positions = positions
        self.cluster_ids = cluster_ids
        self.config = config
        self._scale = float((1 << config.seg_bits) - 1)

    def __len__(self):
        return len(self.positions)

    def inputs(self, idx=None) -> np.ndarray:
        """``(len(idx), p, n)`` float32 matrices; column ``j`` is history access ``j``."""
        pos = self.positions if idx is None else self.positions[np.asarray(idx)]
        hist = pos[:, None] + np.arange(-self.config.n + 1, 1)
        x = self.segments[hist]  # (B, n, p)
        return (x.transpose(0, 2, 1).astype(np.float32)) / np.float32(self._scale)

    def sample(self, i: int) -> Sample:
        return Sample(self.inputs([i])[0], self.labels[i], int(self.cluster_ids[i]), int(self.positions[i]))

    def partitions(self, k: int | None = None) -> dict[int, np.ndarray]:
        """Sample indices per cluster id (ascending ids, all ids below ``k`` present)."""
        if k is None:
            k = int(self.cluster_ids.max()) + 1 if len(self) else 0
        return {c: np.flatnonzero(self.cluster_ids == c) for c in range(k)}

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.segments, self.labels[idx], self.positions[idx], self.cluster_ids[idx], self.config)

    # cache ------------------------------------------------------------------
    def save(self, path: str | os.PathLike, config_hash: str = "") -> None:
        path = Path(path)
        buf = io.BytesIO()
        np.savez(
            buf, segments=self.segments, labels=self.labels, positions=self.positions,
            cluster_ids=self.cluster_ids,
            meta=np.frombuffer(json.dumps({"config": asdict(self.config), "config_hash": config_hash,
                                           "stage": "dataset"}, sort_keys=True).encode(), dtype=np.uint8),
        )
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(buf.getvalue())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str | os.PathLike) -> tuple["Dataset", dict]:
        with np.load(path) as z:
            meta = json.loads(z["meta"].tobytes().decode())
            ds = cls(z["segments"], z["labels"], z["positions"], z["cluster_ids"], DatasetConfig(**meta["config"]))
        return ds, meta


def build_dataset(records: Sequence[TraceRecord], cluster_labels, config: DatasetConfig = DatasetConfig(),
                  geometry: GeometryConfig = GeometryConfig()) -> Dataset:
    """One sample per anchor ``t in [n-1, len-2]``: full history and at least one future access."""
    config.check(geometry)
    blocks = block_addresses(records, geometry)
    cluster_labels = np.asarray(cluster_labels, dtype=np.int64)
    if len(cluster_labels) != len(blocks):
        raise ValueError(f"{len(cluster_labels)} cluster labels for {len(blocks)} records")
    if len(blocks) < config.n + 1:
        raise ValueError(f"trace of {len(blocks)} records is too short for lookback n={config.n}")
    positions = np.arange(config.n - 1, len(blocks) - 1)
    segments = raw_segments(blocks, config.p, config.seg_bits).astype(np.uint8 if config.seg_bits <= 8 else np.uint16)
    labels = build_labels(blocks, positions, config, geometry.blocks_per_page)
    return Dataset(segments, labels, positions, cluster_labels[positions], config)
