"""Memory trace parsing, address geometry, synthetic traces and train/eval splits.

Traces are plain text, one access per line::

    # ip addr
    0x401a2b 0x7ffd8040
    401a30,7ffd8080

Fields are hex (``0x`` optional) separated by whitespace or a comma. Files may be
gzip-compressed; compression is detected from the magic bytes, not the suffix.
"""

from __future__ import annotations

import gzip
import io
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, NamedTuple, Sequence

import numpy as np

U64_MAX = (1 << 64) - 1
_GZIP_MAGIC = b"\x1f\x8b"
_SPLIT = re.compile(r"[,\s]+")


class TraceFormatError(ValueError):
    """Raised for unparseable trace content; carries the 1-based line number."""

    def __init__(self, message: str, lineno: int | None = None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


class TraceRecord(NamedTuple):
    ip: int
    addr: int


def _is_pow2(x: int) -> bool:
    return x > 0 and x & (x - 1) == 0


@dataclass(frozen=True)
class GeometryConfig:
    block_size: int = 64
    page_size: int = 4096

    def __post_init__(self):
        if not _is_pow2(self.block_size) or not _is_pow2(self.page_size):
            raise ValueError("block_size and page_size must be powers of two")
        if self.page_size % self.block_size:
            raise ValueError("page_size must be a multiple of block_size")

    @property
    def block_bits(self) -> int:
        return self.block_size.bit_length() - 1

    @property
    def blocks_per_page(self) -> int:
        return self.page_size // self.block_size

    def block_address(self, addr: int) -> int:
        return addr // self.block_size

    def page_address(self, addr: int) -> int:
        return addr // self.page_size

    def block_index(self, addr: int) -> int:
        return self.block_address(addr) % self.blocks_per_page


@dataclass(frozen=True)
class TraceSplit:
    skip: int = 1_000_000
    train: int = 8_000_000
    eval: int = 2_000_000

    def __post_init__(self):
        if min(self.skip, self.train, self.eval) < 0:
            raise ValueError("split counts must be non-negative")

    @property
    def total(self) -> int:
        return self.skip + self.train + self.eval


# --------------------------------------------------------------------------- parsing

LineDecoder = Callable[[str], "tuple[int, int] | None"]


def _parse_hex(tok: str) -> int:
    if tok[:2] in ("0x", "0X"):
        tok = tok[2:]
    if not tok:
        raise ValueError("empty field")
    value = int(tok, 16)
    if value > U64_MAX:
        raise ValueError(f"value 0x{value:x} does not fit in 64 bits")
    return value


def decode_line(line: str) -> tuple[int, int] | None:
    """Default decoder: ``ip addr`` in hex. Returns None for blank/comment lines."""
    s = line.strip()
    if not s or s.startswith("#"):
        return None
    parts = [p for p in _SPLIT.split(s) if p]
    if len(parts) != 2:
        raise ValueError(f"expected 2 fields, got {len(parts)}")
    return _parse_hex(parts[0]), _parse_hex(parts[1])


def _open_text(path: Path) -> io.TextIOBase:
    with open(path, "rb") as fh:
        magic = fh.read(2)
    if magic == _GZIP_MAGIC:
        return gzip.open(path, "rt", encoding="utf-8")
    return open(path, "r", encoding="utf-8")


def iter_trace(path: str | os.PathLike, decoder: LineDecoder | None = None) -> Iterator[TraceRecord]:
    """Stream records from a trace file in file order.

    ``decoder`` maps a raw line to ``(ip, addr)`` or None to skip it; use it to
    adapt foreign trace formats.
    """
    decoder = decoder or decode_line
    with _open_text(Path(path)) as fh:
        for lineno, line in enumerate(fh, 1):
            try:
                pair = decoder(line)
            except ValueError as exc:
                raise TraceFormatError(str(exc), lineno) from None
            if pair is None:
                continue
            ip, addr = pair
            if not (0 <= ip <= U64_MAX and 0 <= addr <= U64_MAX):
                raise TraceFormatError("value does not fit in 64 bits", lineno)
            yield TraceRecord(ip, addr)


def parse_trace(path: str | os.PathLike, decoder: LineDecoder | None = None) -> list[TraceRecord]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    records = list(iter_trace(path, decoder))
    if not records:
        raise TraceFormatError(f"trace {path} contains no records")
    return records


def write_trace(records: Iterable[TraceRecord], path: str | os.PathLike, header: str | None = None) -> None:
    """Emit records in the canonical format; gzip when the name ends in ``.gz``."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    opener = gzip.open if path.suffix == ".gz" else open
    # empty name + mtime=0 keep gzip output byte-stable
    if opener is gzip.open:
        raw = open(tmp, "wb")
        fh = io.TextIOWrapper(gzip.GzipFile(filename="", fileobj=raw, mode="wb", mtime=0), encoding="utf-8")
    else:
        raw = None
        fh = open(tmp, "w", encoding="utf-8")
    try:
        if header:
            for line in header.splitlines():
                fh.write(f"# {line}\n")
        for r in records:
            fh.write(f"0x{r.ip:x} 0x{r.addr:x}\n")
    finally:
        fh.close()
        if raw is not None:
            raw.close()
    os.replace(tmp, path)


# --------------------------------------------------------------------------- views

def to_arrays(records: Sequence[TraceRecord]) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(ips, addrs)`` as uint64 arrays."""
    if isinstance(records, np.ndarray):
        raise TypeError("expected a sequence of TraceRecord")
    ips = np.fromiter((r.ip for r in records), dtype=np.uint64, count=len(records))
    addrs = np.fromiter((r.addr for r in records), dtype=np.uint64, count=len(records))
    return ips, addrs


def block_addresses(records: Sequence[TraceRecord], geometry: GeometryConfig = GeometryConfig()) -> np.ndarray:
    """Block addresses as int64 (a 64-bit byte address shifted by >= 1 bit always fits)."""
    _, addrs = to_arrays(records)
    return (addrs >> np.uint64(geometry.block_bits)).astype(np.int64)


def deltas(records: Sequence[TraceRecord], geometry: GeometryConfig = GeometryConfig()) -> np.ndarray:
    """Signed block-address differences between consecutive records."""
    if len(records) < 2:
        raise ValueError("deltas need at least 2 records")
    return np.diff(block_addresses(records, geometry))


# --------------------------------------------------------------------------- synthetic

@dataclass(frozen=True)
class Phase:
    stride: int
    length: int
    ip: int


@dataclass
class SyntheticRecipe:
    """Serializable description of a synthetic trace.

    ``kind`` is ``stride``, ``multi_phase`` or ``random``. Multi-phase traces
    cycle through ``phases`` until ``n`` records exist.
    """

    kind: str = "multi_phase"
    n: int = 22_000
    seed: int = 0
    stride: int = 1
    base_block: int = 0
    ip: int = 0x401000
    phases: list = field(default_factory=list)
    addr_range: int = 1 << 20
    n_ips: int = 8
    layout: str = "regions"

    def generate(self, geometry: GeometryConfig = GeometryConfig()) -> list[TraceRecord]:
        return generate_synthetic(
            self.kind, self.n, self.seed, geometry=geometry, stride=self.stride,
            base_block=self.base_block, ip=self.ip,
            phases=[Phase(*p) if not isinstance(p, Phase) else p for p in self.phases],
            addr_range=self.addr_range, n_ips=self.n_ips, layout=self.layout,
        )


def generate_synthetic(
    kind: str,
    n: int,
    seed: int = 0,
    *,
    geometry: GeometryConfig = GeometryConfig(),
    stride: int = 1,
    base_block: int = 0,
    ip: int = 0x401000,
    phases: Sequence[Phase] = (),
    addr_range: int = 1 << 20,
    n_ips: int = 8,
    layout: str = "regions",
) -> list[TraceRecord]:
    """Deterministic synthetic traces.

    ``stride``: blocks ``base_block + i*stride`` under one ip.
    ``multi_phase``: phases are visited cyclically, each with a constant ip and
    stride. With ``layout="regions"`` every phase resumes its own address stream
    in a separate page-aligned region (phases differ in every feature view).
    With ``layout="contiguous"`` each visit starts 1-8 blocks past the previous
    visit's last block, so the jump at a phase boundary stays small.
    ``random``: uniform blocks in ``[0, addr_range)`` over ``n_ips`` ips.
    Byte offsets inside each block are seeded noise.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    bs = geometry.block_size

    if kind == "stride":
        if stride == 0:
            raise ValueError("stride must be nonzero")
        blocks = base_block + stride * np.arange(n, dtype=np.int64)
        ips = np.full(n, ip, dtype=np.uint64)
    elif kind == "multi_phase":
        if not phases:
            raise ValueError("multi_phase needs at least one phase")
        for ph in phases:
            if ph.stride == 0 or ph.length < 1:
                raise ValueError(f"bad phase {ph}")
        if layout not in ("regions", "contiguous"):
            raise ValueError(f"unknown multi_phase layout {layout!r}")
        bpp = geometry.blocks_per_page
        # one page-aligned region per phase, 2**14 pages apart
        cursors = [(int(rng.integers(1, 1 << 10)) + (j << 14)) * bpp for j in range(len(phases))]
        blocks = np.empty(n, dtype=np.int64)
        ips = np.empty(n, dtype=np.uint64)
        pos, j = 0, 0
        while pos < n:
            ph = phases[j % len(phases)]
            k = min(ph.length, n - pos)
            if layout == "regions":
                c = cursors[j % len(phases)]
            else:
                c = cursors[0] if pos == 0 else int(blocks[pos - 1]) + int(rng.integers(1, 9))
            blocks[pos:pos + k] = c + ph.stride * np.arange(k, dtype=np.int64)
            ips[pos:pos + k] = ph.ip
            cursors[j % len(phases)] = c + ph.stride * k
            pos += k
            j += 1
    elif kind == "random":
        blocks = rng.integers(0, addr_range, size=n, dtype=np.int64)
        ip_pool = 0x400000 + 4 * rng.integers(0, 1 << 12, size=max(1, n_ips))
        ips = ip_pool[rng.integers(0, len(ip_pool), size=n)].astype(np.uint64)
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}")

    if (blocks < 0).any():
        raise ValueError("synthetic trace produced negative block addresses")
    offsets = rng.integers(0, bs, size=n, dtype=np.int64)
    addrs = blocks * bs + offsets
    return [TraceRecord(int(i), int(a)) for i, a in zip(ips.tolist(), addrs.tolist())]


# --------------------------------------------------------------------------- split

def split(records: Sequence[TraceRecord], cfg: TraceSplit) -> tuple[Sequence[TraceRecord], Sequence[TraceRecord]]:
    if cfg.total > len(records):
        raise ValueError(
            f"split needs {cfg.total} records (skip={cfg.skip}, train={cfg.train}, "
            f"eval={cfg.eval}) but the trace has {len(records)}"
        )
    a = cfg.skip
    b = a + cfg.train
    return records[a:b], records[b:b + cfg.eval]
