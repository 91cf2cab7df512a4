"""
Dense 3D volumes and the primitives preprocessing is built from.

Arrays are stored as ``(depth, height, width)`` = ``(z, y, x)`` in C order,
so x is the fastest-varying index. Intensities are float32.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import BoundsError, EmptyContentError, EncodingError, ShapeError

Dims = Tuple[int, int, int]

MODALITIES = ("t1", "t1ce", "t2", "flair")
NUM_CLASSES = 4
# raw BraTS label -> contiguous internal label
LABEL_REMAP = {0: 0, 1: 1, 2: 2, 4: 3}


@dataclass(frozen=True, eq=False)
class Volume3D:
    """A single scalar volume with optional voxel spacing (mm, z/y/x order)."""

    data: np.ndarray
    spacing: Optional[Tuple[float, float, float]] = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise ShapeError(f"expected a 3D array, got shape {data.shape}")
        object.__setattr__(self, "data", data)
        if self.spacing is not None:
            object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self) -> Dims:
        return tuple(self.data.shape)


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """Per-voxel class ids in {0, 1, 2, 3}."""

    labels: np.ndarray
    spacing: Optional[Tuple[float, float, float]] = None

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3:
            raise ShapeError(f"expected a 3D array, got shape {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() >= NUM_CLASSES):
            raise EncodingError("labels must lie in {0, 1, 2, 3}")
        object.__setattr__(self, "labels", labels.astype(np.uint8, copy=False))

    @property
    def dims(self) -> Dims:
        return tuple(self.labels.shape)


@dataclass(frozen=True, eq=False)
class MultiModalVolume:
    """Four co-registered modalities ordered T1, T1ce, T2, FLAIR."""

    modalities: Tuple[Volume3D, ...]

    def __post_init__(self):
        mods = tuple(self.modalities)
        if len(mods) != 4:
            raise ShapeError(f"expected 4 modalities, got {len(mods)}")
        dims = {m.dims for m in mods}
        if len(dims) != 1:
            raise ShapeError(f"modality dims differ: {sorted(dims)}")
        object.__setattr__(self, "modalities", mods)

    @property
    def dims(self) -> Dims:
        return self.modalities[0].dims

    def stack(self) -> np.ndarray:
        """Channel-stacked ``(4, D, H, W)`` float32 array."""
        return np.stack([m.data for m in self.modalities])

    @classmethod
    def from_array(cls, arr: np.ndarray, spacing=None) -> "MultiModalVolume":
        return cls(tuple(Volume3D(a, spacing) for a in arr))

    def map(self, fn) -> "MultiModalVolume":
        return MultiModalVolume(tuple(fn(m) for m in self.modalities))

    def __getitem__(self, name: str) -> Volume3D:
        return self.modalities[MODALITIES.index(name)]


@dataclass(frozen=True)
class BoundingBox3D:
    """Inclusive ``(z, y, x)`` extents."""

    min: Tuple[int, int, int]
    max: Tuple[int, int, int]

    def __post_init__(self):
        lo = tuple(int(v) for v in self.min)
        hi = tuple(int(v) for v in self.max)
        if len(lo) != 3 or len(hi) != 3:
            raise ShapeError("bounding box corners need three coordinates")
        if any(a > b for a, b in zip(lo, hi)) or any(a < 0 for a in lo):
            raise BoundsError(f"invalid box min={lo} max={hi}")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @property
    def shape(self) -> Dims:
        return tuple(b - a + 1 for a, b in zip(self.min, self.max))

    @property
    def slices(self) -> Tuple[slice, slice, slice]:
        return tuple(slice(a, b + 1) for a, b in zip(self.min, self.max))

    def check_within(self, dims: Sequence[int]) -> None:
        if any(b >= d for b, d in zip(self.max, dims)):
            raise BoundsError(f"box max {self.max} outside volume dims {tuple(dims)}")

    def expand(self, margin: int, dims: Sequence[int]) -> "BoundingBox3D":
        """Grow every face by ``margin`` voxels, clamped to ``dims``."""
        lo = tuple(max(0, a - margin) for a in self.min)
        hi = tuple(min(d - 1, b + margin) for b, d in zip(self.max, dims))
        return BoundingBox3D(lo, hi)

    def to_dict(self) -> dict:
        return {"min": list(self.min), "max": list(self.max)}

    @classmethod
    def full(cls, dims: Sequence[int]) -> "BoundingBox3D":
        return cls((0, 0, 0), tuple(d - 1 for d in dims))


def crop(v, box: BoundingBox3D):
    """Crop a Volume3D, LabelVolume or MultiModalVolume to ``box`` (inclusive)."""
    box.check_within(v.dims)
    if isinstance(v, MultiModalVolume):
        return v.map(lambda m: crop(m, box))
    if isinstance(v, LabelVolume):
        return LabelVolume(v.labels[box.slices].copy(), v.spacing)
    return Volume3D(v.data[box.slices].copy(), v.spacing)


def nonzero_bbox(m) -> BoundingBox3D:
    """Tight box around voxels that are nonzero in any modality."""
    arr = m.stack() if isinstance(m, MultiModalVolume) else np.asarray(m.data)[None]
    mask = np.any(arr != 0, axis=0)
    if not mask.any():
        raise EmptyContentError("volume has no nonzero voxels")
    lo, hi = [], []
    for axis in range(3):
        others = tuple(a for a in range(3) if a != axis)
        idx = np.flatnonzero(mask.any(axis=others))
        lo.append(idx[0])
        hi.append(idx[-1])
    return BoundingBox3D(tuple(lo), tuple(hi))


def minmax_normalize(v: Volume3D) -> Volume3D:
    data = v.data.astype(np.float64)
    lo, hi = data.min(), data.max()
    if hi == lo:
        return Volume3D(np.zeros_like(v.data), v.spacing)
    return Volume3D(((data - lo) / (hi - lo)).astype(np.float32), v.spacing)


def zscore_normalize(v: Volume3D, nonzero_only: bool = False, eps: float = 1e-8) -> Volume3D:
    data = v.data.astype(np.float64)
    sel = data[data != 0] if nonzero_only else data
    if sel.size == 0:
        return Volume3D(np.zeros_like(v.data), v.spacing)
    mu, sigma = sel.mean(), sel.std()
    return Volume3D(((data - mu) / (sigma + eps)).astype(np.float32), v.spacing)


def interp_matrix(src: int, dst: int, dtype=np.float64) -> np.ndarray:
    """Align-corners linear interpolation weights of shape ``(dst, src)``.

    Row ``i`` samples source coordinate ``i * (src - 1) / (dst - 1)``; a
    single-voxel destination axis samples index 0.
    """
    if src < 1 or dst < 1:
        raise ShapeError("axis lengths must be >= 1")
    mat = np.zeros((dst, src), dtype=dtype)
    if dst == 1 or src == 1:
        mat[:, 0] = 1.0
        return mat
    pos = np.arange(dst) * ((src - 1) / (dst - 1))
    lo = np.minimum(np.floor(pos).astype(int), src - 2)
    frac = pos - lo
    rows = np.arange(dst)
    mat[rows, lo] = 1.0 - frac
    mat[rows, lo + 1] += frac
    return mat


def apply_separable(arr: np.ndarray, mats: Sequence[np.ndarray]) -> np.ndarray:
    """Apply one matrix per trailing spatial axis (last three axes of ``arr``)."""
    nd = arr.ndim
    out = arr
    for k, mat in enumerate(mats):
        axis = nd - 3 + k
        out = np.moveaxis(np.tensordot(mat, out, axes=([1], [axis])), 0, axis)
    return out


def resize_trilinear(v: Volume3D, target: Sequence[int]) -> Volume3D:
    target = tuple(int(t) for t in target)
    if len(target) != 3 or min(target) < 1:
        raise ShapeError(f"invalid target size {target}")
    mats = [interp_matrix(s, t) for s, t in zip(v.dims, target)]
    out = apply_separable(v.data.astype(np.float64), mats)
    return Volume3D(out.astype(np.float32), v.spacing)


def resize_nearest(l: LabelVolume, target: Sequence[int]) -> LabelVolume:
    """Nearest-neighbour label resampling on the same align-corners grid."""
    idx = []
    for s, t in zip(l.dims, target):
        if t == 1 or s == 1:
            idx.append(np.zeros(t, dtype=int))
        else:
            idx.append(np.floor(np.arange(t) * ((s - 1) / (t - 1)) + 0.5).astype(int))
    return LabelVolume(l.labels[np.ix_(*idx)], l.spacing)


def one_hot(l, num_classes: int = NUM_CLASSES) -> np.ndarray:
    """``(num_classes, D, H, W)`` float32 indicator stack."""
    labels = l.labels if isinstance(l, LabelVolume) else np.asarray(l)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise EncodingError(f"label values must be < {num_classes}")
    classes = np.arange(num_classes).reshape((-1,) + (1,) * labels.ndim)
    return (labels[None] == classes).astype(np.float32)


def remap_raw_labels(raw: np.ndarray) -> np.ndarray:
    """Map raw BraTS labels {0,1,2,4} onto {0,1,2,3}."""
    raw = np.asarray(raw)
    values = np.unique(raw)
    bad = [int(x) for x in values if int(x) not in LABEL_REMAP or x != int(x)]
    if bad:
        raise EncodingError(f"unexpected raw label values {bad}")
    lut = np.zeros(5, dtype=np.uint8)
    for k, val in LABEL_REMAP.items():
        lut[k] = val
    return lut[raw.astype(np.int64)]
