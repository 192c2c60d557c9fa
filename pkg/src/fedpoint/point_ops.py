"""Geometry and sampling kernels over point sets.

All distance-based selections break ties towards the lowest index so that
every routine is deterministic given its inputs and random generator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels

__all__ = [
    "PointSet",
    "AugmentConfig",
    "cosine_distance",
    "knn",
    "knn_indices",
    "farthest_sample",
    "fps",
    "fcs",
    "default_start",
    "subsample",
    "augment",
]

COS_EPS = 1e-8
# compiled loops when numba is importable; the numpy paths give identical indices
USE_KERNELS = True


@dataclass(eq=False)
class PointSet:
    """One slide: ``n`` points with xyz coordinates, features and a label."""

    coords: np.ndarray
    features: np.ndarray
    label: int = 0

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise ValueError(f"coords must be (n, 3), got {self.coords.shape}")
        if self.features.ndim != 2:
            raise ValueError(f"features must be (n, d), got {self.features.shape}")
        if self.coords.shape[0] != self.features.shape[0]:
            raise ValueError(
                f"coords has {self.coords.shape[0]} rows but features has {self.features.shape[0]}"
            )
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")
        self.label = int(self.label)

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def take(self, index) -> "PointSet":
        index = np.asarray(index, dtype=np.intp)
        return PointSet(self.coords[index], self.features[index], self.label)

    def equals(self, other: "PointSet") -> bool:
        """Bitwise equality of coordinates, features and label."""
        return (
            self.label == other.label
            and self.coords.shape == other.coords.shape
            and self.features.shape == other.features.shape
            and self.coords.tobytes() == other.coords.tobytes()
            and self.features.tobytes() == other.features.tobytes()
        )


def cosine_distance(a, b) -> float:
    """``1 - a.b / max(|a| |b|, 1e-8)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"vectors must have equal length, got {a.shape} and {b.shape}")
    den = max(float(np.linalg.norm(a)) * float(np.linalg.norm(b)), COS_EPS)
    return 1.0 - float(a @ b) / den


def _constant_coords(query: np.ndarray, base_t: np.ndarray) -> np.ndarray:
    """Coordinates where every query and base value is one shared constant."""
    D = query.shape[2]
    skip = np.zeros(D, dtype=np.bool_)
    if query.size == 0:
        return skip
    for j in range(D):
        qj, bj = query[..., j], base_t[:, j]
        skip[j] = qj.min() == qj.max() == bj.min() == bj.max()
    return skip


def _sq_dists(query: np.ndarray, base: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances (B, q, n) between (B, q, D) and (B, n, D).

    Coordinates holding one shared constant contribute exactly zero and are
    skipped; the rest are summed in coordinate order.
    """
    out = np.zeros(query.shape[:2] + (base.shape[1],))
    tmp = np.empty_like(out)
    for j in range(query.shape[2]):
        qj = np.ascontiguousarray(query[..., j])
        bj = np.ascontiguousarray(base[..., j])
        if qj.size and qj.min() == qj.max() == bj.min() == bj.max():
            continue
        np.subtract(qj[:, :, None], bj[:, None, :], out=tmp)
        np.multiply(tmp, tmp, out=tmp)
        out += tmp
    return out


def knn_indices(query: np.ndarray, base: np.ndarray, k: int) -> np.ndarray:
    """Batched exact k-NN, ordered by (distance, index).

    ``query`` is (B, q, D), ``base`` is (B, n, D); returns (B, q, k).
    """
    n = base.shape[1]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must be in [1, {n}]")
    if _kernels.AVAILABLE and USE_KERNELS:
        q = np.ascontiguousarray(query, dtype=np.float64)
        base_t = np.ascontiguousarray(np.swapaxes(base, 1, 2), dtype=np.float64)
        return _kernels.knn_kernel(q, base_t, k, _constant_coords(q, base_t))
    d = _sq_dists(query, base)
    if k == n:
        return np.argsort(d, axis=-1, kind="stable")
    kth = np.partition(d, k - 1, axis=-1)[..., k - 1 : k]
    inside = d <= kth
    exact = np.count_nonzero(inside, axis=-1) == k
    sel = np.empty(d.shape[:-1] + (k,), dtype=np.intp)
    if exact.all():
        sel[...] = (np.flatnonzero(inside) % n).reshape(sel.shape)
    else:
        # rows with ties at the k-th distance keep the lowest indices
        sel[exact] = (np.flatnonzero(inside[exact]) % n).reshape(-1, k)
        sel[~exact] = np.argsort(d[~exact], axis=-1, kind="stable")[:, :k]
    order = np.argsort(np.take_along_axis(d, sel, axis=-1), axis=-1, kind="stable")
    return np.take_along_axis(sel, order, axis=-1)


def knn(base: PointSet, queries, k: int, space: str = "position") -> np.ndarray:
    """k nearest points of ``base`` for each query index; (q, k) array."""
    if k > base.n:
        raise ValueError(f"k={k} exceeds the number of points {base.n}")
    if space == "position":
        vals = base.coords
    elif space == "feature":
        vals = base.features
    else:
        raise ValueError(f"unknown space {space!r}")
    queries = _check_index(queries, base.n)
    return knn_indices(vals[queries][None], vals[None], k)[0]


def _check_index(index, n: int) -> np.ndarray:
    index = np.asarray(index, dtype=np.intp).reshape(-1)
    if index.size and (index.min() < 0 or index.max() >= n):
        raise ValueError(f"indices must lie in [0, {n})")
    if np.unique(index).size != index.size:
        raise ValueError("indices must be distinct")
    return index


def _cos_to(values: np.ndarray, norms: np.ndarray, pick: np.ndarray) -> np.ndarray:
    ar = np.arange(values.shape[0])
    anchor = values[ar, pick]
    dots = np.zeros(values.shape[:2])
    for c in range(values.shape[2]):
        dots += values[:, :, c] * anchor[:, c, None]
    den = np.maximum(norms * norms[ar, pick][:, None], COS_EPS)
    return 1.0 - dots / den


def _sq_to(values: np.ndarray, pick: np.ndarray) -> np.ndarray:
    # coordinates are accumulated in order, as in the compiled kernel
    anchor = values[np.arange(values.shape[0]), pick]
    out = np.zeros(values.shape[:2])
    for c in range(values.shape[2]):
        t = values[:, :, c] - anchor[:, c, None]
        out += t * t
    return out


def farthest_sample(values: np.ndarray, m: int, start, metric: str = "euclidean") -> np.ndarray:
    """Greedy max-min selection of ``m`` rows per batch item.

    ``values`` is (B, n, D) and ``start`` holds one starting row per batch
    item.  Each step picks the unselected row whose minimum distance to the
    selected set is largest (lowest index on ties).  ``metric`` is
    ``"euclidean"`` or ``"cosine"``.  Returns (B, m) indices.
    """
    values = np.asarray(values, dtype=np.float64)
    B, n, _ = values.shape
    if not 1 <= m <= n:
        raise ValueError(f"cannot sample m={m} from n={n} points")
    start = np.broadcast_to(np.asarray(start, dtype=np.intp), (B,))
    if start.min() < 0 or start.max() >= n:
        raise ValueError(f"start must lie in [0, {n})")
    if metric not in ("cosine", "euclidean"):
        raise ValueError(f"unknown metric {metric!r}")
    if _kernels.AVAILABLE and USE_KERNELS:
        return _kernels.farthest_kernel(np.ascontiguousarray(values), m, np.ascontiguousarray(start),
                                        metric == "cosine", COS_EPS)
    if metric == "cosine":
        sq = np.zeros((B, n))
        for c in range(values.shape[2]):
            sq += values[:, :, c] * values[:, :, c]
        norms = np.sqrt(sq)
        dist_to = lambda pick: _cos_to(values, norms, pick)  # noqa: E731
    elif metric == "euclidean":
        dist_to = lambda pick: _sq_to(values, pick)  # noqa: E731
    else:
        raise ValueError(f"unknown metric {metric!r}")
    ar = np.arange(B)
    out = np.empty((B, m), dtype=np.intp)
    out[:, 0] = start
    chosen = np.zeros((B, n), dtype=bool)
    chosen[ar, start] = True
    mind = dist_to(start)
    for t in range(1, m):
        nxt = np.where(chosen, -np.inf, mind).argmax(axis=1)
        out[:, t] = nxt
        chosen[ar, nxt] = True
        mind = np.minimum(mind, dist_to(nxt))
    return out


def fps(points: PointSet, m: int, start: int = 0) -> np.ndarray:
    """Farthest point sampling on coordinates."""
    if m > points.n:
        raise ValueError(f"m={m} exceeds the number of points {points.n}")
    return farthest_sample(points.coords[None], m, start, "euclidean")[0]


def fcs(points: PointSet, m: int | None = None, start: int = 0) -> np.ndarray:
    """Farthest cosine sampling on features; ``m`` defaults to ceil(n/4)."""
    if m is None:
        m = -(-points.n // 4)
    if m > points.n:
        raise ValueError(f"m={m} exceeds the number of points {points.n}")
    return farthest_sample(points.features[None], m, start, "cosine")[0]


def default_start(features: np.ndarray) -> np.ndarray:
    """Deterministic start row: largest feature norm, lowest index on ties.

    Accepts (n, d) or (B, n, d); returns an int or a (B,) array.
    """
    return np.argmax((features * features).sum(axis=-1), axis=-1)


def subsample(points: PointSet, n_target: int, rng: np.random.Generator) -> PointSet:
    """Uniformly pick ``n_target`` points.

    Without replacement when there are enough points; otherwise every point
    is kept once and the remainder is drawn with replacement.
    """
    if points.n == 0:
        raise ValueError("cannot subsample an empty point set")
    if n_target < 1:
        raise ValueError("n_target must be positive")
    if points.n >= n_target:
        idx = rng.choice(points.n, size=n_target, replace=False)
    else:
        extra = rng.integers(0, points.n, size=n_target - points.n)
        idx = rng.permutation(np.concatenate([np.arange(points.n), extra]))
    return points.take(idx)


@dataclass(frozen=True)
class AugmentConfig:
    """Training-time point augmentation.

    Jitter, scale and shift act on x and y only; z is a constant marker.
    Dropped points are replaced by the first point so the count is kept.
    """

    dropout: float = 0.1
    jitter_sigma: float = 0.01
    jitter_clip: float = 0.05
    scale: tuple[float, float] = (0.8, 1.25)
    shift: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.jitter_sigma < 0 or self.jitter_clip < 0:
            raise ValueError("jitter sigma and clip must be non-negative")
        lo, hi = self.scale
        if not 0 < lo <= hi:
            raise ValueError("scale range must satisfy 0 < low <= high")
        if self.shift < 0:
            raise ValueError("shift must be non-negative")

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(dropout=0.0, jitter_sigma=0.0, jitter_clip=0.0, scale=(1.0, 1.0), shift=0.0)


def augment(points: PointSet, cfg: AugmentConfig, rng: np.random.Generator) -> PointSet:
    coords = points.coords.copy()
    features = points.features
    n = points.n
    dropped = rng.random(n) < cfg.dropout
    if dropped.any():
        coords[dropped] = coords[0]
        features = features.copy()
        features[dropped] = features[0]
    noise = np.clip(cfg.jitter_sigma * rng.standard_normal((n, 2)), -cfg.jitter_clip, cfg.jitter_clip)
    scale = rng.uniform(cfg.scale[0], cfg.scale[1])
    shift = rng.uniform(-cfg.shift, cfg.shift, size=2)
    coords[:, :2] = (coords[:, :2] + noise) * scale + shift
    return PointSet(coords, features, points.label)
