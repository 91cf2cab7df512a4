"""Synthetic four-modality phantoms with a nested-shell tumour."""

from __future__ import annotations

from typing import Sequence, Tuple

import numpy as np

from .errors import ConfigError
from .volume import LabelVolume, MultiModalVolume, Volume3D

# Mean intensity per (tissue, modality). Tissue rows: brain, necrotic core
# (label 1), edema (label 2), enhancing ring (label 3), speck. Columns follow
# MODALITIES (t1, t1ce, t2, flair).
TISSUE_MEANS = np.array([
    [0.30, 0.25, 0.20, 0.15],
    [0.10, 0.20, 0.90, 0.90],
    [0.25, 0.30, 0.70, 0.90],
    [0.30, 0.95, 0.55, 0.95],
    [0.60, 0.60, 0.80, 0.95],
])
NOISE_SIGMA = 0.02
# shell boundaries as a fraction of the blob radius: core | ring | edema
CORE_FRACTION = 0.55
RING_FRACTION = 0.8
ASPECT_RANGE = 0.1
# minimum Chebyshev spacing between specks
SPECK_GAP = 5


def generate_phantom(seed: int, dims: Sequence[int] = (48, 48, 48), blob_radius: float = 7,
                     num_specks: int = 6, speck_max_voxels: int = 2
                     ) -> Tuple[MultiModalVolume, LabelVolume]:
    """Build a deterministic phantom pair.

    The tumour is an axis-aligned ellipsoid with semi-axes
    ``(r, r*s, r/s)``, ``s`` drawn from ``[0.9, 1.1]``, so its volume is
    ``4/3 pi r^3``. Labels from the centre outwards: 1 (core), 3 (enhancing
    ring), 2 (edema). The brain is a larger ellipsoid of low-intensity
    noise; voxels outside it are exactly zero. Specks are 1 to
    ``speck_max_voxels`` bright voxels inside the brain but away from the
    tumour, labelled 0.
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise ConfigError(f"invalid phantom dims {dims}")
    r = float(blob_radius)
    reach = int(np.ceil(r * (1 + ASPECT_RANGE))) + 2
    if r <= 0 or any(2 * reach + 1 > d for d in dims):
        raise ConfigError(f"blob radius {r} does not fit inside dims {dims}")
    rng = np.random.default_rng(seed)

    s = rng.uniform(1 - ASPECT_RANGE, 1 + ASPECT_RANGE)
    semi = np.array([r, r * s, r / s])
    centre = np.array([rng.integers(reach, d - reach) for d in dims])

    zz, yy, xx = np.meshgrid(*(np.arange(d) for d in dims), indexing="ij")
    grid = np.stack([zz, yy, xx]).astype(np.float64)
    mid = (np.array(dims) - 1) / 2.0
    brain_semi = np.array(dims) * 0.47
    brain = (((grid - mid[:, None, None, None]) / brain_semi[:, None, None, None]) ** 2).sum(0) <= 1
    rho = np.sqrt((((grid - centre[:, None, None, None]) / semi[:, None, None, None]) ** 2).sum(0))

    labels = np.zeros(dims, dtype=np.uint8)
    labels[rho <= 1] = 2
    labels[rho <= RING_FRACTION] = 3
    labels[rho <= CORE_FRACTION] = 1
    brain |= labels > 0

    tissue = np.zeros(dims, dtype=np.int64)
    tissue[labels == 1] = 1
    tissue[labels == 2] = 2
    tissue[labels == 3] = 3

    free = brain & (rho > 1.6)
    free_idx = np.flatnonzero(free)
    for _ in range(num_specks):
        if free_idx.size == 0:
            break
        start = np.unravel_index(rng.choice(free_idx), dims)
        size = int(rng.integers(1, speck_max_voxels + 1))
        axis = int(rng.integers(0, 3))
        for k in range(size):
            pos = list(start)
            pos[axis] = min(pos[axis] + k, dims[axis] - 1)
            if free[tuple(pos)]:
                tissue[tuple(pos)] = 4
        # keep later specks apart so dilation cannot merge them into a blob
        lo = [max(0, c - SPECK_GAP) for c in start]
        hi = [min(d, c + SPECK_GAP + speck_max_voxels) for c, d in zip(start, dims)]
        free[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = False
        free_idx = np.flatnonzero(free)

    noise = rng.normal(0.0, NOISE_SIGMA, size=(4,) + dims)
    mods = []
    for m in range(4):
        vol = TISSUE_MEANS[tissue, m] + noise[m]
        vol = np.where(brain, np.clip(vol, 0.01, None), 0.0)
        mods.append(Volume3D(vol.astype(np.float32), spacing=(1.0, 1.0, 1.0)))
    return MultiModalVolume(tuple(mods)), LabelVolume(labels, spacing=(1.0, 1.0, 1.0))
