"""
The whole pipeline through the `segkit` command line.

preprocess -> train -> evaluate -> report on a tiny phantom dataset. Eight
epochs are far too few to segment well; the point is the file flow. The
same steps run from a shell as `segkit preprocess --config run.json` etc.
"""
import json
import os
import tempfile

from segkit.cli import run
from segkit.dataset import write_phantom_dataset

work = tempfile.mkdtemp()
write_phantom_dataset(os.path.join(work, "data"), 6, seed=0, dims=(40, 40, 40), blob_radius=7)

config = {
    "dataset_root": os.path.join(work, "data"),
    "output_dir": os.path.join(work, "out"),
    "target_size": [32, 32, 32],
    "detect": {"area_thresh": 16},
    "model": {"depth": 3, "base_channels": 4},
    "plan": {"rounds": [[4, 2], [4, 1]], "lr": 1e-3},
    "train_fraction": 0.67,
}
cfg_path = os.path.join(work, "run.json")
with open(cfg_path, "w") as fh:
    json.dump(config, fh)

for cmd in ("preprocess", "train", "evaluate"):
    code = run([cmd, "--config", cfg_path, "--seed", "1"])
    print(f"segkit {cmd} -> exit {code}")

print(sorted(os.listdir(os.path.join(work, "out"))))
