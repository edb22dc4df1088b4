"""Feature extraction and k-means partitioning of memory traces."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .trace_io import GeometryConfig, TraceRecord, block_addresses, to_arrays


class ViewKind(str, enum.Enum):
    BLOCK_ADDRESS = "past_block_address"
    BLOCK_DELTA = "past_block_delta"
    INSTRUCTION_POINTER = "past_instruction_pointer"


@dataclass(frozen=True)
class FeatureView:
    kind: ViewKind = ViewKind.BLOCK_DELTA
    window: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kind", ViewKind(self.kind))
        if self.window < 1:
            raise ValueError("feature window must be >= 1")


@dataclass
class FeatureMatrix:
    """Raw feature rows plus the z-score parameters used for clustering.

    ``rows[i]`` belongs to trace index ``positions[i]``. Constant dimensions get
    ``scale = 1`` so they standardize to zeros.
    """

    rows: np.ndarray
    positions: np.ndarray
    bias: np.ndarray
    scale: np.ndarray
    view: FeatureView | None = None

    @classmethod
    def from_rows(cls, rows, positions=None, view=None, standardize=True) -> "FeatureMatrix":
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim == 1:
            rows = rows[:, None]
        if positions is None:
            positions = np.arange(len(rows))
        if standardize:
            bias, scale = standardization(rows)
        else:
            bias, scale = np.zeros(rows.shape[1]), np.ones(rows.shape[1])
        return cls(rows, np.asarray(positions), bias, scale, view)

    def standardized(self) -> np.ndarray:
        return (self.rows - self.bias) / self.scale

    def __len__(self):
        return len(self.rows)


def standardization(rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    bias = rows.mean(axis=0)
    scale = rows.std(axis=0)
    # a constant column can still show rounding-level spread; pin it to exactly zero
    const = np.ptp(rows, axis=0) == 0 if len(rows) else np.ones(rows.shape[1], bool)
    if len(rows):
        bias = np.where(const, rows[0], bias)
    scale = np.where(const | (scale <= 0), 1.0, scale)
    return bias, scale


def unstandardize(z: np.ndarray, bias: np.ndarray, scale: np.ndarray) -> np.ndarray:
    return z * scale + bias


def _view_series(records: Sequence[TraceRecord], view: FeatureView, geometry: GeometryConfig) -> np.ndarray:
    if view.kind is ViewKind.INSTRUCTION_POINTER:
        ips, _ = to_arrays(records)
        return ips.astype(np.float64)
    blocks = block_addresses(records, geometry)
    if view.kind is ViewKind.BLOCK_ADDRESS:
        return blocks.astype(np.float64)
    # delta into each position; index 0 has no predecessor and is never read
    d = np.zeros(len(blocks), dtype=np.int64)
    d[1:] = np.diff(blocks)
    return d.astype(np.float64)


def extract_features(
    records: Sequence[TraceRecord],
    view: FeatureView,
    geometry: GeometryConfig = GeometryConfig(),
    standardize: bool = True,
) -> FeatureMatrix:
    """One row per trace position ``t >= window``, most recent value last.

    Address and instruction-pointer views hold the values at ``t-window .. t-1``.
    The delta view holds the deltas *into* ``t-window+1 .. t``, i.e. the last
    ``window`` strides that led to the current access.
    """
    w = view.window
    if len(records) < w + 1:
        raise ValueError(f"trace of {len(records)} records is shorter than window+1={w + 1}")
    series = _view_series(records, view, geometry)
    positions = np.arange(w, len(series))
    shift = 1 if view.kind is ViewKind.BLOCK_DELTA else 0
    cols = [series[positions - w + j + shift] for j in range(w)]
    rows = np.stack(cols, axis=1)
    return FeatureMatrix.from_rows(rows, positions, view, standardize=standardize)


def squared_euclidean(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    diff = x - y
    return float(np.dot(diff.ravel(), diff.ravel()))


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    # exact per-centroid differences (no |x|^2 - 2xc + |c|^2 expansion) so ties stay exact
    out = np.empty((len(X), len(C)))
    for j, c in enumerate(C):
        diff = X - c
        out[:, j] = np.einsum("ij,ij->i", diff, diff)
    return out


def _assign(X: np.ndarray, C: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = _sq_dists(X, C)
    labels = d.argmin(axis=1)  # first minimum -> lowest index on ties
    return labels, d[np.arange(len(X)), labels]


def kmeans_plusplus(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    C = np.empty((k, X.shape[1]))
    C[0] = X[rng.integers(n)]
    closest = _sq_dists(X, C[:1])[:, 0]
    for i in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(n, p=closest / total))
        else:
            idx = int(rng.integers(n))
        C[i] = X[idx]
        closest = np.minimum(closest, _sq_dists(X, C[i:i + 1])[:, 0])
    return C


@dataclass
class KMeansModel:
    k: int
    centroids: np.ndarray  # standardized space
    bias: np.ndarray
    scale: np.ndarray
    sse: float
    labels: np.ndarray
    view: FeatureView | None = None
    sse_history: list = field(default_factory=list)
    n_iter: int = 0

    def transform(self, rows) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim == 1:
            rows = rows[:, None]
        if rows.shape[1] != self.centroids.shape[1]:
            raise ValueError(
                f"feature dimension {rows.shape[1]} != centroid dimension {self.centroids.shape[1]}"
            )
        return (rows - self.bias) / self.scale

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "view": None if self.view is None else {"kind": self.view.kind.value, "window": self.view.window},
            "bias": self.bias.tolist(),
            "scale": self.scale.tolist(),
            "centroids": self.centroids.tolist(),
            "sse": self.sse,
            "sse_history": list(self.sse_history),
            "n_iter": self.n_iter,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KMeansModel":
        view = None if d.get("view") is None else FeatureView(d["view"]["kind"], d["view"]["window"])
        return cls(
            k=d["k"], centroids=np.asarray(d["centroids"], dtype=np.float64),
            bias=np.asarray(d["bias"], dtype=np.float64), scale=np.asarray(d["scale"], dtype=np.float64),
            sse=d["sse"], labels=np.empty(0, dtype=np.int64), view=view,
            sse_history=list(d.get("sse_history", [])), n_iter=d.get("n_iter", 0),
        )


def _as_feature_matrix(features) -> FeatureMatrix:
    if isinstance(features, FeatureMatrix):
        return features
    return FeatureMatrix.from_rows(features, standardize=False)


def kmeans_fit(features, k: int, seed: int = 0, max_iters: int = 300, tol: float = 1e-9,
               n_init: int = 1) -> KMeansModel:
    """Lloyd's algorithm with k-means++ seeding.

    ``features`` is a FeatureMatrix (clustered in its standardized space) or a
    plain array (clustered as given). Stops when assignments stop changing, the
    relative SSE improvement drops below ``tol``, or after ``max_iters`` updates.
    With ``n_init > 1`` the best of seeds ``seed .. seed+n_init-1`` is kept.
    """
    fm = _as_feature_matrix(features)
    X = fm.standardized()
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > len(X):
        raise ValueError(f"k={k} exceeds the number of points ({len(X)})")
    if not np.isfinite(X).all():
        raise ValueError("features contain non-finite values")

    best = None
    for r in range(n_init):
        m = _lloyd(X, k, np.random.default_rng(seed + r), max_iters, tol)
        if best is None or m[2] < best[2]:
            best = m
    C, labels, sse, history, n_iter = best
    return KMeansModel(k, C, fm.bias.copy(), fm.scale.copy(), sse, labels, fm.view, history, n_iter)


def _lloyd(X, k, rng, max_iters, tol):
    C = kmeans_plusplus(X, k, rng)
    labels, dist = _assign(X, C)
    sse = float(dist.sum())
    history = [sse]
    it = 0
    for it in range(1, max_iters + 1):
        C = _update(X, labels, dist, C)
        new_labels, dist = _assign(X, C)
        new_sse = float(dist.sum())
        history.append(new_sse)
        stable = np.array_equal(new_labels, labels)
        improvement = sse - new_sse
        labels, sse = new_labels, new_sse
        if stable or improvement <= tol * max(sse, np.finfo(float).tiny):
            break
    return C, labels, sse, history, it


def _update(X, labels, dist, C):
    k = len(C)
    counts = np.bincount(labels, minlength=k)
    new = np.zeros_like(C)
    np.add.at(new, labels, X)
    nonempty = counts > 0
    new[nonempty] /= counts[nonempty, None]
    empty = np.flatnonzero(~nonempty)
    if len(empty):
        # reseed each empty centroid at the point farthest from its own centroid
        order = np.argsort(-dist, kind="stable")
        for j, idx in zip(empty, order):
            new[j] = X[idx]
    return new


def kmeans_assign(model: KMeansModel, rows) -> np.ndarray:
    """Cluster ids for raw (unstandardized) rows, via the model's stored scaling."""
    if isinstance(rows, FeatureMatrix):
        rows = rows.rows
    labels, _ = _assign(model.transform(rows), model.centroids)
    return labels


def sse(model: KMeansModel, rows) -> float:
    if isinstance(rows, FeatureMatrix):
        rows = rows.rows
    _, dist = _assign(model.transform(rows), model.centroids)
    return float(dist.sum())


def sweep_k(features, k_values: Sequence[int], seed: int = 0, n_init: int = 1, **kw) -> list[tuple[int, float]]:
    return [(int(k), kmeans_fit(features, k, seed=seed, n_init=n_init, **kw).sse) for k in k_values]


def position_labels(model: KMeansModel, records: Sequence[TraceRecord],
                    geometry: GeometryConfig = GeometryConfig()) -> np.ndarray:
    """Cluster id for every trace index; indices before the feature window get 0."""
    fm = extract_features(records, model.view, geometry, standardize=False)
    out = np.zeros(len(records), dtype=np.int64)
    out[fm.positions] = kmeans_assign(model, fm.rows)
    return out


def rle_encode(labels) -> list[list[int]]:
    labels = np.asarray(labels)
    if len(labels) == 0:
        return []
    starts = np.flatnonzero(np.diff(labels)) + 1
    starts = np.concatenate([[0], starts])
    lengths = np.diff(np.concatenate([starts, [len(labels)]]))
    return [[int(labels[s]), int(n)] for s, n in zip(starts, lengths)]


def rle_decode(runs) -> np.ndarray:
    if not runs:
        return np.empty(0, dtype=np.int64)
    vals, lens = zip(*runs)
    return np.repeat(np.asarray(vals, dtype=np.int64), lens)


def plot_rows(records: Sequence[TraceRecord], labels, geometry: GeometryConfig = GeometryConfig()):
    """(page_address, instruction_pointer, block_index, cluster_id) per access."""
    ips, addrs = to_arrays(records)
    pages = addrs >> np.uint64(geometry.page_size.bit_length() - 1)
    bidx = (addrs >> np.uint64(geometry.block_bits)) % np.uint64(geometry.blocks_per_page)
    return zip(pages.tolist(), ips.tolist(), bidx.tolist(), np.asarray(labels).tolist())
