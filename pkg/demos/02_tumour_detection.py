"""
Slice-wise tumour detection.

Every axial slice is thresholded, dilated and split into 8-connected
objects; small objects are dropped and the rest become candidate boxes.
Folding the candidates in slice order keeps the first box unless a later
one is larger and contains it.
"""
import numpy as np

from segkit.detect import (BoundingBox2D, DetectParams, crop_to_tumor, largest_containing,
                           run_detection)
from segkit.phantom import generate_phantom

m, l = generate_phantom(seed=11, dims=(48, 48, 48), blob_radius=7, num_specks=8)
params = DetectParams(area_thresh=16)
det = run_detection(m, params)
print("candidates per slice:", det.per_slice_counts)
print("tumour box:", det.box)

blob = l.labels > 0
print(f"blob voxels inside box: {blob[det.box.slices].sum()} / {blob.sum()}")

mc, lc = crop_to_tumor(m, l, det.box, margin=params.radius)
print("cropped dims:", mc.dims, "labels kept:", np.count_nonzero(lc.labels))

# The incumbent rule in miniature. A disjoint box never displaces the first
# incumbent, however large it is.
small = BoundingBox2D((10, 10), (12, 12))
print(largest_containing([small, BoundingBox2D((30, 30), (45, 45))]))
print(largest_containing([small, BoundingBox2D((8, 8), (14, 14))]))
