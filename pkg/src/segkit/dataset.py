"""Dataset discovery, manifests and the train/validation split."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .errors import ConfigError, EmptyDatasetError, ManifestError
from .formats import read_nifti, write_nifti
from .phantom import generate_phantom
from .volume import MODALITIES, LabelVolume, MultiModalVolume

DEFAULT_SUFFIXES = {
    "t1": "_t1.nii",
    "t1ce": "_t1ce.nii",
    "t2": "_t2.nii",
    "flair": "_flair.nii",
    "seg": "_seg.nii",
}
DEFAULT_TRAIN_FRACTION = 250 / 350


@dataclass
class CaseEntry:
    id: str
    t1: str
    t1ce: str
    t2: str
    flair: str
    seg: str
    split: Optional[str] = None

    @property
    def modality_paths(self) -> List[str]:
        return [getattr(self, m) for m in MODALITIES]


@dataclass
class DatasetManifest:
    cases: List[CaseEntry]
    seed: Optional[int] = None
    fraction: Optional[float] = None
    incomplete: Dict[str, List[str]] = field(default_factory=dict)

    def __post_init__(self):
        ids = [c.id for c in self.cases]
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        if dupes:
            raise ManifestError(f"duplicate case ids: {dupes}")

    def split_ids(self, name: str) -> List[str]:
        return [c.id for c in self.cases if c.split == name]

    def subset(self, name: str) -> List[CaseEntry]:
        return [c for c in self.cases if c.split == name]

    def to_dict(self) -> dict:
        return {
            "cases": [{"id": c.id, "t1": c.t1, "t1ce": c.t1ce, "t2": c.t2, "flair": c.flair,
                       "seg": c.seg, "split": c.split} for c in self.cases],
            "seed": self.seed,
            "fraction": self.fraction,
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        with open(path) as fh:
            doc = json.load(fh)
        try:
            cases = [CaseEntry(**c) for c in doc["cases"]]
        except (KeyError, TypeError) as exc:
            raise ManifestError(f"malformed manifest {path}: {exc}") from exc
        return cls(cases=cases, seed=doc.get("seed"), fraction=doc.get("fraction"))


def scan_dataset(root_dir, suffixes: Optional[Dict[str, str]] = None) -> DatasetManifest:
    """One entry per case folder holding every suffix in ``suffixes``.

    The case id is the file-name prefix in front of the suffix. Folders
    missing files are listed in ``manifest.incomplete`` (id -> missing keys).
    """
    suffixes = dict(DEFAULT_SUFFIXES if suffixes is None else suffixes)
    if not os.path.isdir(root_dir):
        raise EmptyDatasetError(f"{root_dir} is not a directory")
    folders = sorted(d for d in os.listdir(root_dir) if os.path.isdir(os.path.join(root_dir, d)))
    if not folders:
        raise EmptyDatasetError(f"no case folders under {root_dir}")
    cases, incomplete = [], {}
    for folder in folders:
        fdir = os.path.join(root_dir, folder)
        found, prefixes = {}, set()
        for fname in sorted(os.listdir(fdir)):
            # longest suffix first so "_t1ce.nii" is not taken for "_t1.nii"
            for key, suf in sorted(suffixes.items(), key=lambda kv: -len(kv[1])):
                if fname.endswith(suf):
                    found[key] = os.path.join(fdir, fname)
                    prefixes.add(fname[: -len(suf)])
                    break
        case_id = sorted(prefixes)[0] if len(prefixes) == 1 else folder
        missing = [k for k in suffixes if k not in found]
        if missing:
            incomplete[case_id] = missing
            continue
        cases.append(CaseEntry(id=case_id, **{k: found[k] for k in DEFAULT_SUFFIXES}))
    if not cases and not incomplete:
        raise EmptyDatasetError(f"no cases found under {root_dir}")
    manifest = DatasetManifest(cases=cases)
    manifest.incomplete = incomplete
    return manifest


def split_train_val(manifest: DatasetManifest, train_fraction: float = DEFAULT_TRAIN_FRACTION,
                    seed: int = 0) -> DatasetManifest:
    """Seeded shuffle of the sorted case ids; the first ``round(f*N)`` train.

    Depends only on the id set, the fraction and the seed.
    """
    if not 0 < train_fraction < 1:
        raise ConfigError("train_fraction must be in (0, 1)")
    ids = sorted(c.id for c in manifest.cases)
    n_train = int(math.floor(train_fraction * len(ids) + 0.5))
    perm = np.random.default_rng(seed).permutation(len(ids))
    train_ids = {ids[i] for i in perm[:n_train]}
    cases = [CaseEntry(**{**c.__dict__, "split": "train" if c.id in train_ids else "val"})
             for c in manifest.cases]
    out = DatasetManifest(cases=cases, seed=seed, fraction=train_fraction)
    out.incomplete = dict(manifest.incomplete)
    return out


def load_case(entry: CaseEntry):
    """Read the four modalities and the remapped mask of one case."""
    mods = tuple(read_nifti(p)[0] for p in entry.modality_paths)
    labels, _ = read_nifti(entry.seg, labels=True)
    return MultiModalVolume(mods), labels


def write_case(root_dir, case_id: str, m: MultiModalVolume, l: LabelVolume,
               suffixes: Optional[Dict[str, str]] = None) -> str:
    suffixes = DEFAULT_SUFFIXES if suffixes is None else suffixes
    folder = os.path.join(root_dir, case_id)
    os.makedirs(folder, exist_ok=True)
    for name, vol in zip(MODALITIES, m.modalities):
        write_nifti(vol, os.path.join(folder, case_id + suffixes[name]))
    write_nifti(l, os.path.join(folder, case_id + suffixes["seg"]))
    return folder


def write_phantom_dataset(root_dir, n_cases: int, seed: int = 0, dims=(48, 48, 48),
                          blob_radius: float = 7, num_specks: int = 6) -> List[str]:
    """Write ``n_cases`` phantoms as a BraTS-style folder tree; returns case ids."""
    ids = []
    for i in range(n_cases):
        case_id = f"Phantom_{i:03d}"
        m, l = generate_phantom(seed + i, dims, blob_radius, num_specks)
        write_case(root_dir, case_id, m, l)
        ids.append(case_id)
    return ids
