"""Volumetric brain-tumour segmentation toolkit: slice-wise tumour detection,
preprocessing, an attention-gated 3D U-Net on a numpy autodiff engine, and
region-wise segmentation metrics."""

from .errors import SegkitError
from .volume import (BoundingBox3D, LabelVolume, MultiModalVolume, Volume3D, crop,
                     minmax_normalize, nonzero_bbox, one_hot, resize_trilinear,
                     zscore_normalize)

__version__ = "0.1.0"
