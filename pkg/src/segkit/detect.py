"""
Slice-wise tumour detection and tumour-centred cropping.

Each axial slice goes through (optional) histogram equalisation,
thresholding, square dilation, 8-connected component labelling and
small-object removal; the surviving objects' boxes are candidates. The
candidates of all slices are then folded in slice order: a candidate
replaces the incumbent only if its box area is strictly larger *and* its
box contains the incumbent's box.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import List, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .errors import ConfigError, DegenerateHistogramError, NoTumorError
from .volume import BoundingBox3D, LabelVolume, MultiModalVolume, Volume3D, crop


@dataclass(frozen=True)
class BoundingBox2D:
    """Inclusive (row, col) extents."""

    min: Tuple[int, int]
    max: Tuple[int, int]

    @property
    def area(self) -> int:
        return (self.max[0] - self.min[0] + 1) * (self.max[1] - self.min[1] + 1)

    def contains(self, other: "BoundingBox2D") -> bool:
        return (self.min[0] <= other.min[0] and self.min[1] <= other.min[1]
                and self.max[0] >= other.max[0] and self.max[1] >= other.max[1])

    def intersects(self, other: "BoundingBox2D") -> bool:
        return (self.min[0] <= other.max[0] and other.min[0] <= self.max[0]
                and self.min[1] <= other.max[1] and other.min[1] <= self.max[1])


@dataclass(frozen=True, eq=False)
class DetectedObject:
    label: int
    area: int
    bbox: BoundingBox2D
    coords: np.ndarray = field(repr=False)  # (area, 2) row/col pixel indices


@dataclass
class DetectParams:
    """Detection settings.

    ``thresh`` is applied to intensities scaled to [0, 1] (by the volume
    range, or by the equalised slice when ``equalize`` is on).
    """

    mode: str = "fixed"
    thresh: float = 0.65
    area_thresh: int = 64
    radius: int = 1
    bins: int = 256
    equalize: bool = False
    modality: str = "flair"

    def __post_init__(self):
        if self.mode not in ("fixed", "otsu"):
            raise ConfigError(f"unknown threshold mode {self.mode!r}")
        if not 0.0 <= self.thresh <= 1.0:
            raise ConfigError("thresh must lie in [0, 1]")
        if self.area_thresh < 1 or self.radius < 0 or self.bins < 2:
            raise ConfigError("need area_thresh >= 1, radius >= 0, bins >= 2")

    def to_dict(self) -> dict:
        return asdict(self)


def _bin_index(s: np.ndarray, bins: int) -> Tuple[np.ndarray, float, float]:
    lo, hi = float(s.min()), float(s.max())
    width = (hi - lo) / bins
    idx = np.floor((s.astype(np.float64) - lo) / width).astype(np.int64)
    return np.clip(idx, 0, bins - 1), lo, width


def equalize_histogram(s: np.ndarray, bins: int = 256) -> np.ndarray:
    """Map each pixel to the CDF of its bin, rescaled so min -> 0 and max -> 1."""
    s = np.asarray(s, dtype=np.float32)
    if s.size == 0 or s.min() == s.max():
        return np.zeros_like(s)
    idx, _, _ = _bin_index(s, bins)
    cdf = np.cumsum(np.bincount(idx.ravel(), minlength=bins))
    first = cdf[0]  # the minimum always lands in bin 0
    out = (cdf[idx] - first) / float(s.size - first)
    return out.astype(np.float32)


def otsu_threshold(s: np.ndarray, bins: int = 256) -> float:
    """Bin boundary maximising the between-class variance.

    Class statistics use the pixel values themselves (per-bin sums), not bin
    centres. Ties go to the lowest boundary.
    """
    s = np.asarray(s, dtype=np.float64)
    if s.size == 0 or s.min() == s.max():
        raise DegenerateHistogramError("Otsu threshold is undefined for a constant slice")
    idx, lo, width = _bin_index(s, bins)
    flat, vals = idx.ravel(), s.ravel()
    counts = np.bincount(flat, minlength=bins).astype(np.float64)
    sums = np.bincount(flat, weights=vals, minlength=bins)
    n, total = counts.sum(), sums.sum()
    n0 = np.cumsum(counts)[:-1]  # pixels in bins < k, k = 1..bins-1
    s0 = np.cumsum(sums)[:-1]
    n1 = n - n0
    valid = (n0 > 0) & (n1 > 0)
    mu0 = np.divide(s0, n0, out=np.zeros_like(s0), where=n0 > 0)
    mu1 = np.divide(total - s0, n1, out=np.zeros_like(s0), where=n1 > 0)
    between = np.where(valid, n0 * n1 * (mu0 - mu1) ** 2, -1.0)
    k = int(np.argmax(between)) + 1
    return lo + k * width


def threshold_slice(s: np.ndarray, t: float) -> np.ndarray:
    return (np.asarray(s) > t).astype(np.uint8)


def dilate(m: np.ndarray, radius: int = 1) -> np.ndarray:
    """Binary dilation by a ``(2r+1)`` square; outside the image counts as 0."""
    m = np.asarray(m, dtype=np.uint8)
    if radius <= 0:
        return m.copy()
    k = 2 * radius + 1
    padded = np.pad(m, radius)
    rows = sliding_window_view(padded, k, axis=0).max(axis=-1)
    return sliding_window_view(rows, k, axis=1).max(axis=-1).astype(np.uint8)


_EIGHT = np.ones((3, 3), dtype=bool)


def connected_components(m: np.ndarray) -> List[DetectedObject]:
    """8-connected objects, numbered by the raster position of their first pixel."""
    m = np.asarray(m)
    labels, count = ndimage.label(m != 0, structure=_EIGHT)
    if count == 0:
        return []
    flat = labels.ravel()
    ids, first = np.unique(flat, return_index=True)
    keep = ids > 0
    ids, first = ids[keep], first[keep]
    order = ids[np.argsort(first, kind="stable")]
    areas = np.bincount(flat, minlength=count + 1)
    boxes = ndimage.find_objects(labels)
    objs = []
    for rank, lab in enumerate(order, start=1):
        sl = boxes[lab - 1]
        rr, cc = np.nonzero(labels[sl] == lab)
        coords = np.stack([rr + sl[0].start, cc + sl[1].start], axis=1)
        bbox = BoundingBox2D((sl[0].start, sl[1].start), (sl[0].stop - 1, sl[1].stop - 1))
        objs.append(DetectedObject(label=rank, area=int(areas[lab]), bbox=bbox, coords=coords))
    return objs


def remove_small_objects(objs: Sequence[DetectedObject], mask: np.ndarray,
                         area_thresh: int) -> np.ndarray:
    """Clear every object with ``area < area_thresh``."""
    out = np.array(mask, dtype=np.uint8, copy=True)
    for obj in objs:
        if obj.area < area_thresh:
            out[obj.coords[:, 0], obj.coords[:, 1]] = 0
    return out


def _scale_unit(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros(v.shape, dtype=np.float32)
    return ((v - lo) / (hi - lo)).astype(np.float32)


def detect_slice(s: np.ndarray, p: DetectParams) -> List[BoundingBox2D]:
    """Candidate boxes of one slice, in component order."""
    s = np.asarray(s, dtype=np.float32)
    if p.equalize:
        s = equalize_histogram(s, p.bins)
    if p.mode == "otsu":
        try:
            t = otsu_threshold(s, p.bins)
        except DegenerateHistogramError:
            return []
    else:
        t = p.thresh
    mask = dilate(threshold_slice(s, t), p.radius)
    return [o.bbox for o in connected_components(mask) if o.area >= p.area_thresh]


@dataclass
class Detection:
    box: BoundingBox3D
    candidates: List[List[BoundingBox2D]]

    @property
    def per_slice_counts(self) -> List[int]:
        return [len(c) for c in self.candidates]

    def report(self, case: str, params: DetectParams) -> dict:
        return {"case": case, "bbox": self.box.to_dict(),
                "per_slice_candidates": self.per_slice_counts, "params": params.to_dict()}


def largest_containing(candidates: Sequence[BoundingBox2D]) -> BoundingBox2D:
    """Fold candidates in order, keeping a running incumbent.

    Starts from the first candidate; a later one replaces it only when it
    is strictly larger and contains it. Disjoint candidates therefore never
    displace the first incumbent, whatever their size.
    """
    if not candidates:
        raise NoTumorError("no candidate regions")
    best = candidates[0]
    for cand in candidates[1:]:
        if cand.area > best.area and cand.contains(best):
            best = cand
    return best


def run_detection(v, p: DetectParams) -> Detection:
    """Detect on a Volume3D (or the ``p.modality`` channel of a MultiModalVolume)."""
    if isinstance(v, MultiModalVolume):
        v = v[p.modality]
    data = v.data if isinstance(v, Volume3D) else np.asarray(v)
    # equalisation is rank-based per slice, so this scaling only matters for fixed/otsu
    scaled = _scale_unit(data)
    per_slice = [detect_slice(scaled[z], p) for z in range(scaled.shape[0])]
    flat = [b for c in per_slice for b in c]
    if not flat:
        raise NoTumorError("no slice produced a tumour candidate")
    best = largest_containing(flat)
    zs = [z for z, c in enumerate(per_slice) if any(b.intersects(best) for b in c)]
    box = BoundingBox3D((zs[0], best.min[0], best.min[1]), (zs[-1], best.max[0], best.max[1]))
    return Detection(box=box, candidates=per_slice)


def detect_tumor_volume(v, p: DetectParams) -> BoundingBox3D:
    return run_detection(v, p).box


def crop_to_tumor(m: MultiModalVolume, l: LabelVolume, box: BoundingBox3D,
                  margin: int = 0) -> Tuple[MultiModalVolume, LabelVolume]:
    """Crop all modalities and the mask to ``box`` grown by ``margin`` (clamped)."""
    box.check_within(m.dims)
    grown = box.expand(margin, m.dims)
    return crop(m, grown), crop(l, grown)
