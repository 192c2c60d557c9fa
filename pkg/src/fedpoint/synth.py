"""Synthetic multi-site slides, stratified splits and the on-disk dataset format.

A slide is a cloud of points in the unit square (z fixed at 1) carrying
Gaussian features plus a site-specific offset.  Positive slides contain
one to three disks where point features are pushed along a shared signal
direction.
"""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .point_ops import PointSet
from .seeding import substream

__all__ = [
    "SiteSpec",
    "DatasetSplit",
    "DatasetFormatError",
    "SiteDataset",
    "DEFAULT_SITES",
    "UNSEEN_SITES",
    "label_counts",
    "signal_direction",
    "generate_site",
    "generate_sites",
    "minority_slide",
    "split",
    "train_fraction",
    "write_slide",
    "read_slide",
    "write_site",
    "read_site",
    "write_dataset",
    "read_dataset",
]

MAGIC = b"FPTS"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHIIB")
MANIFEST = "manifest.txt"


def label_counts(n_slides: int, gamma: float) -> tuple[int, int]:
    """(negatives, positives) with positives = round(n / (1 + gamma))."""
    pos = int(math.floor(n_slides / (1.0 + gamma) + 0.5))
    neg = n_slides - pos
    if pos < 1 or neg < 1:
        raise ValueError(f"gamma={gamma} cannot be realised with {n_slides} slides")
    return neg, pos


@dataclass(frozen=True)
class SiteSpec:
    site_id: str
    n_slides: int
    gamma: float
    n_points_range: tuple[int, int] = (1200, 4000)
    site_shift: tuple[float, ...] | None = None  # drawn with norm ``shift_scale`` when None
    shift_scale: float = 0.5
    signal_strength: float = 2.0
    n_positive_clusters_range: tuple[int, int] = (1, 3)
    cluster_radius: float = 0.1
    d: int = 32
    noise_sigma: float = 1.0

    def __post_init__(self):
        if not self.gamma >= 1.0:
            raise ValueError(f"site {self.site_id}: gamma must be >= 1")
        if self.n_slides < 4:
            raise ValueError(f"site {self.site_id}: need at least 4 slides")
        lo, hi = self.n_points_range
        if not 1 <= lo <= hi:
            raise ValueError(f"site {self.site_id}: bad n_points_range {self.n_points_range}")
        clo, chi = self.n_positive_clusters_range
        if not 1 <= clo <= chi:
            raise ValueError(f"site {self.site_id}: bad n_positive_clusters_range")
        if self.cluster_radius <= 0 or self.noise_sigma < 0 or self.signal_strength < 0:
            raise ValueError(f"site {self.site_id}: radius, noise and signal must be non-negative")
        if self.d < 1:
            raise ValueError("d must be positive")
        if self.site_shift is not None and len(self.site_shift) != self.d:
            raise ValueError(f"site {self.site_id}: site_shift must have length d={self.d}")
        label_counts(self.n_slides, self.gamma)

    def with_dim(self, d: int) -> "SiteSpec":
        kw = {f: getattr(self, f) for f in self.__dataclass_fields__}
        kw["d"] = d
        if self.site_shift is not None and len(self.site_shift) != d:
            kw["site_shift"] = None
        return SiteSpec(**kw)


DEFAULT_SITES = (
    SiteSpec("A", 98, 5.7),
    SiteSpec("B", 110, 3.1),
    SiteSpec("C", 63, 1.9),
    SiteSpec("D", 64, 1.5, n_points_range=(300, 900)),
)
UNSEEN_SITES = (
    SiteSpec("E", 24, 1.1),
    SiteSpec("F", 10, 2.2),
)


def signal_direction(d: int, seed: int) -> np.ndarray:
    v = substream(seed, "data", 10_000).standard_normal(d)
    return v / np.linalg.norm(v)


def _f32(a: np.ndarray) -> np.ndarray:
    # stored as 32-bit on disk, so keep values representable
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def _slide(spec: SiteSpec, label: int, shift: np.ndarray, direction: np.ndarray, rng) -> PointSet:
    lo, hi = spec.n_points_range
    n = int(rng.integers(lo, hi + 1))
    xy = rng.random((n, 2))
    coords = np.column_stack([xy, np.ones(n)])
    feats = spec.noise_sigma * rng.standard_normal((n, spec.d)) + shift
    if label == 1:
        clo, chi = spec.n_positive_clusters_range
        r = spec.cluster_radius
        inside = np.zeros(n, dtype=bool)
        for _ in range(int(rng.integers(clo, chi + 1))):
            c = rng.uniform(r, 1.0 - r, size=2) if r < 0.5 else rng.random(2)
            inside |= ((xy - c) ** 2).sum(axis=1) <= r * r
        feats[inside] += spec.signal_strength * direction
    return PointSet(_f32(coords), _f32(feats), label)


def generate_site(spec: SiteSpec, rng: np.random.Generator, direction: np.ndarray | None = None) -> list[PointSet]:
    """Slides for one site; label order is shuffled."""
    if direction is None:
        direction = np.eye(spec.d)[0]
    direction = np.asarray(direction, dtype=np.float64)
    if direction.shape != (spec.d,):
        raise ValueError("signal direction must have length d")
    if spec.site_shift is not None:
        shift = np.asarray(spec.site_shift, dtype=np.float64)
    else:
        v = rng.standard_normal(spec.d)
        shift = spec.shift_scale * v / np.linalg.norm(v)
    neg, pos = label_counts(spec.n_slides, spec.gamma)
    labels = rng.permutation(np.r_[np.zeros(neg, dtype=int), np.ones(pos, dtype=int)])
    return [_slide(spec, int(y), shift, direction, rng) for y in labels]


def generate_sites(specs, seed: int) -> dict[str, list[PointSet]]:
    """All sites from one master seed; site ``i`` uses its own data substream."""
    specs = list(specs)
    if len({s.site_id for s in specs}) != len(specs):
        raise ValueError("site ids must be unique")
    out = {}
    for i, spec in enumerate(specs):
        out[spec.site_id] = generate_site(spec, substream(seed, "data", i), signal_direction(spec.d, seed))
    return out


def minority_slide(
    n: int,
    d: int,
    rng: np.random.Generator,
    minority: float = 0.1,
    signal_strength: float = 2.0,
    radius: float = 0.01,
    direction: np.ndarray | None = None,
) -> tuple[PointSet, np.ndarray]:
    """Slide with a small minority cluster packed inside the majority region.

    The minority points share a feature offset along ``direction`` and sit
    in a disk of ``radius`` around a random interior centre.  Returns the
    slide and the boolean minority mask.
    """
    n_min = max(1, int(round(minority * n)))
    direction = np.eye(d)[0] if direction is None else np.asarray(direction, dtype=np.float64)
    xy = rng.random((n, 2))
    centre = rng.uniform(0.25, 0.75, size=2)
    ang = rng.uniform(0, 2 * np.pi, n_min)
    rad = radius * np.sqrt(rng.random(n_min))
    xy[:n_min] = centre + np.column_stack([rad * np.cos(ang), rad * np.sin(ang)])
    feats = rng.standard_normal((n, d))
    feats[:n_min] += signal_strength * direction
    perm = rng.permutation(n)
    is_min = np.zeros(n, dtype=bool)
    is_min[:n_min] = True
    coords = np.column_stack([xy, np.ones(n)])[perm]
    return PointSet(coords, feats[perm], 1), is_min[perm]


# -- splitting ------------------------------------------------------------

@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[int, ...]
    val: tuple[int, ...]
    test: tuple[int, ...]
    seed: int

    def parts(self) -> dict[str, tuple[int, ...]]:
        return {"train": self.train, "val": self.val, "test": self.test}


def _largest_remainder(total: int, ratios: np.ndarray) -> np.ndarray:
    q = total * ratios
    out = np.floor(q).astype(int)
    rem = q - out
    for i in np.argsort(-rem, kind="stable")[: total - out.sum()]:
        out[i] += 1
    return out


def _allocate(class_sizes: list[int], ratios: np.ndarray) -> np.ndarray:
    """Integer (class, part) counts matching class sizes and overall part totals.

    Each cell stays within one slide of its proportional share.
    """
    totals = _largest_remainder(sum(class_sizes), ratios)
    quota = np.outer(class_sizes, ratios)
    cells = np.floor(quota).astype(int)
    row_left = np.array(class_sizes) - cells.sum(axis=1)
    col_left = totals - cells.sum(axis=0)
    frac = quota - cells
    order = sorted(np.ndindex(*cells.shape), key=lambda ij: (-frac[ij], ij))
    for slack in (0, 1):
        for i, j in order:
            if row_left[i] > 0 and col_left[j] > 0 and cells[i, j] < math.ceil(quota[i, j]) + slack:
                cells[i, j] += 1
                row_left[i] -= 1
                col_left[j] -= 1
    if row_left.any() or col_left.any():
        raise RuntimeError("could not balance split counts")
    return cells


def split(labels, ratios=(0.6, 0.1, 0.3), seed: int = 0) -> DatasetSplit:
    """Stratified train/val/test split of slide indices."""
    y = np.asarray([getattr(s, "label", s) for s in labels], dtype=int)
    if y.size < 4:
        raise ValueError("need at least 4 slides to split")
    r = np.asarray(ratios, dtype=np.float64)
    if r.shape != (3,) or (r < 0).any() or not math.isclose(r.sum(), 1.0):
        raise ValueError("ratios must be three non-negative numbers summing to 1")
    rng = substream(seed, "split")
    classes = [np.flatnonzero(y == c) for c in (0, 1)]
    cells = _allocate([len(c) for c in classes], r)
    parts: list[list[int]] = [[], [], []]
    for c, idx in enumerate(classes):
        idx = rng.permutation(idx)
        lo = 0
        for p in range(3):
            parts[p].extend(idx[lo : lo + cells[c, p]].tolist())
            lo += cells[c, p]
    for name, p in zip(("train", "val", "test"), parts):
        present = set(y[p].tolist()) if p else set()
        if r[("train", "val", "test").index(name)] > 0 and present != {0, 1}:
            warnings.warn(f"split seed {seed}: {name} partition lacks a class", stacklevel=2)
    return DatasetSplit(*(tuple(sorted(p)) for p in parts), seed=seed)


def train_fraction(indices, labels, fraction: float, seed: int = 0) -> tuple[int, ...]:
    """Stratified subset keeping ``fraction`` of each class (at least one per class)."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    indices = np.asarray(indices, dtype=int)
    y = np.asarray(labels, dtype=int)[indices]
    rng = substream(seed, "split", 1)
    keep = []
    for c in (0, 1):
        idx = indices[y == c]
        if idx.size == 0:
            continue
        m = max(1, int(math.floor(idx.size * fraction + 0.5)))
        keep.extend(rng.permutation(idx)[:m].tolist())
    return tuple(sorted(keep))


# -- file format ----------------------------------------------------------

class DatasetFormatError(ValueError):
    pass


def _check_f32(name: str, a: np.ndarray):
    if not np.array_equal(a.astype(np.float32).astype(np.float64), a):
        raise ValueError(f"{name} are not exactly representable as 32-bit floats")


def write_slide(path, s: PointSet) -> None:
    _check_f32("coords", s.coords)
    _check_f32("features", s.features)
    head = _HEADER.pack(MAGIC, FORMAT_VERSION, s.n, s.d, s.label)
    body = s.coords.astype("<f4").tobytes() + s.features.astype("<f4").tobytes()
    Path(path).write_bytes(head + body)


def read_slide(path) -> PointSet:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DatasetFormatError(f"{path}: truncated header")
    magic, version, n, d, label = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r}, not a slide file of a known version")
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"{path}: unsupported format version {version}")
    want = _HEADER.size + 4 * n * (3 + d)
    if len(raw) != want:
        raise DatasetFormatError(f"{path}: expected {want} bytes, found {len(raw)}")
    if label not in (0, 1):
        raise DatasetFormatError(f"{path}: invalid label {label}")
    body = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).astype(np.float64)
    return PointSet(body[: 3 * n].reshape(n, 3), body[3 * n :].reshape(n, d), int(label))


@dataclass
class SiteDataset:
    site_id: str
    slides: list[PointSet]
    meta: dict[str, str] = field(default_factory=dict)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.slides], dtype=int)

    @property
    def gamma(self) -> float:
        y = self.labels
        return (y.size - y.sum()) / y.sum() if y.sum() else math.inf


def write_site(directory, site_id: str, slides: list[PointSet], meta: dict | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for i, s in enumerate(slides):
        name = f"slide_{i:04d}.fpts"
        write_slide(directory / name, s)
        names.append(name)
    y = np.array([s.label for s in slides])
    info = {
        "format_version": str(FORMAT_VERSION),
        "site_id": site_id,
        "n_slides": str(len(slides)),
        "n_positive": str(int(y.sum())),
        "realized_gamma": repr(float((y.size - y.sum()) / y.sum())) if y.sum() else "inf",
        **{k: str(v) for k, v in (meta or {}).items()},
        "slides": ",".join(names),
    }
    (directory / MANIFEST).write_text("".join(f"{k}={v}\n" for k, v in info.items()))


def _read_manifest(path: Path) -> dict[str, str]:
    out = {}
    for ln, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        if "=" not in line:
            raise DatasetFormatError(f"{path}:{ln}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def read_site(directory) -> SiteDataset:
    directory = Path(directory)
    mpath = directory / MANIFEST
    if not mpath.is_file():
        if directory.is_dir() and not any(directory.glob("*.fpts")):
            raise DatasetFormatError(f"{directory}: no slides")
        raise DatasetFormatError(f"{directory}: missing {MANIFEST}")
    meta = _read_manifest(mpath)
    if meta.get("format_version") != str(FORMAT_VERSION):
        raise DatasetFormatError(f"{mpath}: unsupported format version {meta.get('format_version')}")
    names = [n for n in meta.get("slides", "").split(",") if n]
    if not names:
        raise DatasetFormatError(f"{directory}: no slides")
    slides = [read_slide(directory / n) for n in names]
    if str(len(slides)) != meta.get("n_slides", str(len(slides))):
        raise DatasetFormatError(f"{mpath}: slide count mismatch")
    return SiteDataset(meta.get("site_id", directory.name), slides, meta)


def write_dataset(root, sites: dict[str, list[PointSet]], meta: dict[str, dict] | None = None) -> None:
    root = Path(root)
    for sid, slides in sites.items():
        write_site(root / sid, sid, slides, (meta or {}).get(sid))


def read_dataset(root, site_ids=None) -> dict[str, SiteDataset]:
    root = Path(root)
    if site_ids is None:
        site_ids = sorted(p.name for p in root.iterdir() if (p / MANIFEST).is_file()) if root.is_dir() else []
    if not site_ids:
        raise DatasetFormatError(f"{root}: no site directories found")
    return {sid: read_site(root / sid) for sid in site_ids}
