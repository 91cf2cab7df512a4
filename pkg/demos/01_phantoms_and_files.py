"""
Synthetic phantoms and the on-disk formats.

A phantom is four co-registered modalities plus a label map. We write one
case as NIfTI, read it back, and dump a few axial FLAIR slices as PGM
images that any viewer can open.
"""
import os
import tempfile

import numpy as np

from segkit.dataset import load_case, scan_dataset, write_case
from segkit.formats import read_raw, write_pgm, write_raw
from segkit.phantom import generate_phantom

m, l = generate_phantom(seed=3, dims=(48, 48, 48), blob_radius=7, num_specks=6)
print("modalities:", [v.dims for v in m.modalities])
print("label counts:", np.bincount(l.labels.ravel(), minlength=4))

root = tempfile.mkdtemp()
write_case(root, "Demo_001", m, l)
print(sorted(os.listdir(os.path.join(root, "Demo_001"))))

# Scanning finds the case through its file suffixes.
entry = scan_dataset(root).cases[0]
m2, l2 = load_case(entry)
assert np.array_equal(m2.stack(), m.stack()) and np.array_equal(l2.labels, l.labels)

# VOL1 keeps a whole 4-channel stack in one file.
write_raw(m.stack(), os.path.join(root, "stack.vol"))
print("VOL1 stack:", read_raw(os.path.join(root, "stack.vol")).shape)

# Mid-tumour slices, scaled to 8 bits.
z = int(np.argmax((l.labels > 0).sum(axis=(1, 2))))
for dz in (-4, 0, 4):
    s = m["flair"].data[z + dz]
    img = np.round(255 * (s - s.min()) / (s.max() - s.min())).astype(np.uint8)
    write_pgm(img, os.path.join(root, f"flair_{z + dz:03d}.pgm"))
print("slices written to", root)
