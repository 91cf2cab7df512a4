"""
Region metrics.

The label map nests three regions: whole tumour {1,2,3}, tumour core
{1,3} and enhancing tumour {3}. A prediction is scored per region, and a
ratio with a zero denominator is reported as undefined, not as 0 or 1.
"""
import numpy as np

from segkit.metrics import aggregate, evaluate_case
from segkit.phantom import generate_phantom

_, truth = generate_phantom(seed=2, dims=(32, 32, 32), blob_radius=7, num_specks=0)

# A "prediction" that shifts the tumour by one voxel along x.
pred = np.roll(truth.labels, 1, axis=2)
probs = np.moveaxis(np.eye(4)[pred], -1, 0)
rows = evaluate_case(probs, truth, case="shifted")

# An empty case: nothing to find, nothing predicted.
empty = np.zeros((8, 8, 8), np.uint8)
rows += evaluate_case(np.moveaxis(np.eye(4)[empty], -1, 0), empty, case="empty")

for r in rows + aggregate(rows):
    print(f"{r['case']:8} {r['region']:5} dice {r['dice']:.3f}  iou {r['iou']:.3f}  "
          f"sens {r['sensitivity']:.3f}  spec {r['specificity']:.3f}  undefined {r['undefined']}")
