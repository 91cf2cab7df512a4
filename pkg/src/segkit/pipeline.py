"""
End-to-end pipeline: preprocess -> detect -> train -> evaluate -> report.

All commands read a :class:`RunConfig` and write into ``cfg.output_dir``::

    manifest.json             split assignment of the preprocessed cases
    preprocessed/<id>_image.vol   4 x D x H x W, normalised modalities
    preprocessed/<id>_mask.vol    1 x D x H x W, labels 0..3 as float32
    detection.json, failures.json
    checkpoint_round<k>.aunc, checkpoint.aunc, history.csv
    metrics.csv, metrics.json, report.json

Data files never contain timestamps, so reruns with the same config are
byte-identical.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .dataset import (DEFAULT_TRAIN_FRACTION, CaseEntry, DatasetManifest, load_case,
                      scan_dataset, split_train_val)
from .detect import DetectParams, crop_to_tumor, run_detection
from .errors import ConfigError, DataError, SegkitError
from .formats import load_volume, read_raw, write_pgm, write_raw
from .metrics import evaluate_case, write_report_csv, write_summary_json, aggregate
from .unet import (HISTORY_FIELDS, Checkpoint, ModelConfig, TrainPlan, load_checkpoint,
                   predict, save_checkpoint, train)
from .volume import (BoundingBox3D, crop, minmax_normalize, nonzero_bbox, resize_nearest,
                     resize_trilinear, zscore_normalize)

log = logging.getLogger("segkit")

NORMALIZERS = {
    "minmax": minmax_normalize,
    "zscore": lambda v: zscore_normalize(v, nonzero_only=True),
}


@dataclass
class RunConfig:
    dataset_root: str = "data"
    output_dir: str = "out"
    detect: DetectParams = field(default_factory=DetectParams)
    target_size: Tuple[int, int, int] = (128, 128, 128)
    normalization: str = "minmax"
    margin: int = 4
    train_fraction: float = DEFAULT_TRAIN_FRACTION
    eval_split: str = "val"
    model: ModelConfig = field(default_factory=ModelConfig)
    plan: TrainPlan = field(default_factory=TrainPlan)
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        self.target_size = tuple(int(t) for t in self.target_size)
        if len(self.target_size) != 3 or min(self.target_size) < 1:
            raise ConfigError(f"invalid target_size {self.target_size}")
        if self.normalization not in NORMALIZERS:
            raise ConfigError(f"unknown normalization {self.normalization!r}")
        if self.margin < 0 or self.threads < 1:
            raise ConfigError("margin must be >= 0 and threads >= 1")
        if self.eval_split not in ("train", "val", "all"):
            raise ConfigError(f"unknown eval_split {self.eval_split!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["target_size"] = list(self.target_size)
        d["plan"]["rounds"] = [list(r) for r in self.plan.rounds]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        try:
            if "detect" in d:
                d["detect"] = DetectParams(**d["detect"])
            if "model" in d:
                d["model"] = ModelConfig(**d["model"])
            if "plan" in d:
                d["plan"] = TrainPlan(**d["plan"])
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad config: {exc}") from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path) as fh:
                return cls.from_dict(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def with_seed(self, seed: int) -> "RunConfig":
        """Set the run, model-init and shuffle seeds together."""
        self.seed = seed
        self.model.seed = seed
        self.plan.seed = seed
        return self

    def path(self, *parts) -> str:
        return os.path.join(self.output_dir, *parts)


def _dump_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _map_cases(fn, items: Sequence, threads: int) -> list:
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _offset_box(box: BoundingBox3D, origin) -> BoundingBox3D:
    return BoundingBox3D(tuple(a + o for a, o in zip(box.min, origin)),
                         tuple(b + o for b, o in zip(box.max, origin)))


# ---------------------------------------------------------------------------
# preprocess / detect
# ---------------------------------------------------------------------------

def preprocess_case(entry: CaseEntry, cfg: RunConfig):
    """Brain crop, tumour detection, tumour crop, resize and normalise one case.

    Returns ``(image (4, D, H, W), labels (D, H, W), detection report)``;
    the report's box is in the coordinates of the original volume.
    """
    m, l = load_case(entry)
    if m.dims != l.dims:
        raise DataError(f"{entry.id}: mask dims {l.dims} differ from image dims {m.dims}")
    brain = nonzero_bbox(m)
    m, l = crop(m, brain), crop(l, brain)
    det = run_detection(m, cfg.detect)
    m, l = crop_to_tumor(m, l, det.box, cfg.margin)
    norm = NORMALIZERS[cfg.normalization]
    m = m.map(lambda v: norm(resize_trilinear(v, cfg.target_size)))
    l = resize_nearest(l, cfg.target_size)
    report = det.report(entry.id, cfg.detect)
    report["bbox"] = _offset_box(det.box, brain.min).to_dict()
    report["brain_bbox"] = brain.to_dict()
    return m.stack(), l.labels, report


def _scan(cfg: RunConfig) -> DatasetManifest:
    manifest = scan_dataset(cfg.dataset_root)
    return split_train_val(manifest, cfg.train_fraction, cfg.seed)


def _failure(entry_id: str, exc: Exception) -> dict:
    return {"case": entry_id, "error": type(exc).__name__, "message": str(exc)}


def cmd_preprocess(cfg: RunConfig) -> dict:
    """Preprocess every case into VOL1 pairs; per-case failures are isolated."""
    manifest = _scan(cfg)
    out_dir = cfg.path("preprocessed")
    os.makedirs(out_dir, exist_ok=True)

    def work(entry: CaseEntry):
        try:
            image, labels, report = preprocess_case(entry, cfg)
        except (SegkitError, OSError) as exc:
            log.warning("case %s failed: %s", entry.id, exc)
            return None, _failure(entry.id, exc)
        write_raw(image, os.path.join(out_dir, f"{entry.id}_image.vol"))
        write_raw(labels.astype(np.float32)[None], os.path.join(out_dir, f"{entry.id}_mask.vol"))
        return report, None

    results = _map_cases(work, manifest.cases, cfg.threads)
    reports = [r for r, _ in results if r is not None]
    failures = [f for _, f in results if f is not None]
    failures += [{"case": cid, "error": "IncompleteCase", "message": f"missing {missing}"}
                 for cid, missing in sorted(manifest.incomplete.items())]
    ok = {r["case"] for r in reports}
    done = DatasetManifest(cases=[c for c in manifest.cases if c.id in ok],
                           seed=manifest.seed, fraction=manifest.fraction)
    done.save(cfg.path("manifest.json"))
    _dump_json(reports, cfg.path("detection.json"))
    _dump_json(failures, cfg.path("failures.json"))
    if not reports:
        raise DataError("every case failed preprocessing")
    return {"processed": sorted(ok), "failed": [f["case"] for f in failures]}


def cmd_detect(cfg: RunConfig) -> List[dict]:
    """Run only the brain crop and tumour detection, writing detection.json."""
    manifest = scan_dataset(cfg.dataset_root)
    os.makedirs(cfg.output_dir, exist_ok=True)

    def work(entry: CaseEntry):
        try:
            m, _ = load_case(entry)
            brain = nonzero_bbox(m)
            det = run_detection(crop(m, brain), cfg.detect)
        except (SegkitError, OSError) as exc:
            return None, _failure(entry.id, exc)
        report = det.report(entry.id, cfg.detect)
        report["bbox"] = _offset_box(det.box, brain.min).to_dict()
        return report, None

    results = _map_cases(work, manifest.cases, cfg.threads)
    reports = [r for r, _ in results if r is not None]
    _dump_json(reports, cfg.path("detection.json"))
    _dump_json([f for _, f in results if f is not None], cfg.path("failures.json"))
    if not reports:
        raise DataError("no case produced a detection")
    return reports


# ---------------------------------------------------------------------------
# train / evaluate / report
# ---------------------------------------------------------------------------

def load_split(cfg: RunConfig, split: str) -> List[Tuple[str, np.ndarray, np.ndarray]]:
    path = cfg.path("manifest.json")
    if not os.path.exists(path):
        raise ConfigError(f"{path} not found; run preprocess first")
    manifest = DatasetManifest.load(path)
    cases = manifest.cases if split == "all" else manifest.subset(split)
    out = []
    for c in cases:
        img_path = cfg.path("preprocessed", f"{c.id}_image.vol")
        mask_path = cfg.path("preprocessed", f"{c.id}_mask.vol")
        if not (os.path.exists(img_path) and os.path.exists(mask_path)):
            raise ConfigError(f"preprocessed tensors for {c.id} are missing")
        out.append((c.id, read_raw(img_path), read_raw(mask_path)[0].astype(np.uint8)))
    return out


def write_history_csv(history: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HISTORY_FIELDS)
        for row in history:
            writer.writerow([row[k] if k == "epoch" else repr(float(row[k]))
                             for k in HISTORY_FIELDS])


def cmd_train(cfg: RunConfig, resume: Optional[str] = None,
              stop_after: Optional[int] = None) -> Checkpoint:
    """Train on the ``train`` split, checkpointing at the end of every round."""
    data = load_split(cfg, "train")
    if not data:
        raise ConfigError("training split is empty")
    cfg.model.check_input(data[0][1].shape[1:])
    if resume:
        ckpt = load_checkpoint(resume, cfg.model)
    else:
        ckpt = Checkpoint.initial(cfg.model)
    ends = {cfg.plan.round_end(r): r + 1 for r in range(len(cfg.plan.rounds))}

    def on_epoch(c: Checkpoint):
        if c.epoch in ends:
            save_checkpoint(c, cfg.path(f"checkpoint_round{ends[c.epoch]}.aunc"))
        log.info("epoch %d loss %.4f", c.epoch, c.history[-1]["loss"])

    train(ckpt, [(img, lab) for _, img, lab in data], cfg.plan, on_epoch=on_epoch,
          stop_after=stop_after)
    save_checkpoint(ckpt, cfg.path("checkpoint.aunc"))
    write_history_csv(ckpt.history, cfg.path("history.csv"))
    return ckpt


def cmd_evaluate(cfg: RunConfig, checkpoint: Optional[str] = None) -> dict:
    """Per-case and aggregate WT/TC/ET metrics for ``cfg.eval_split``."""
    ckpt = load_checkpoint(checkpoint or cfg.path("checkpoint.aunc"))
    data = load_split(cfg, cfg.eval_split)
    if not data:
        raise ConfigError(f"evaluation split {cfg.eval_split!r} is empty")
    model = ckpt.model
    for cid, img, _ in data:
        if img.shape[0] != model.cfg.in_channels:
            raise DataError(f"{cid}: {img.shape[0]} channels, model expects {model.cfg.in_channels}")
        try:
            model.cfg.check_input(img.shape[1:])
        except ConfigError as exc:
            raise DataError(f"{cid}: {exc}") from exc

    def work(item):
        cid, img, lab = item
        return evaluate_case(predict(model, [img])[0], lab, case=cid)

    rows = [r for case_rows in _map_cases(work, data, cfg.threads) for r in case_rows]
    write_report_csv(rows + aggregate(rows), cfg.path("metrics.csv"))
    return write_summary_json(rows, cfg.path("metrics.json"))


def cmd_report(cfg: RunConfig) -> dict:
    """Summarise metrics.json (and history.csv if present) into report.json."""
    path = cfg.path("metrics.json")
    if not os.path.exists(path):
        raise ConfigError(f"{path} not found; run evaluate first")
    with open(path) as fh:
        summary = json.load(fh)
    table = [{k: r[k] for k in ("region", "accuracy", "sensitivity", "specificity", "dice", "iou")}
             for r in summary["aggregate"]]
    report = {"cases": len(summary["cases"]), "table": table}
    hist = cfg.path("history.csv")
    if os.path.exists(hist):
        with open(hist, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if rows:
            report["final_epoch"] = {k: (int(v) if k == "epoch" else float(v))
                                     for k, v in rows[-1].items()}
    _dump_json(report, cfg.path("report.json"))
    return report


def format_report(report: dict) -> str:
    lines = [f"{'region':<8}{'accuracy':>10}{'sensitivity':>13}{'specificity':>13}"
             f"{'dice':>8}{'iou':>8}"]
    for r in report["table"]:
        vals = ["   n/a" if r[k] is None else f"{r[k]:.3f}"
                for k in ("accuracy", "sensitivity", "specificity", "dice", "iou")]
        lines.append(f"{r['region']:<8}{vals[0]:>10}{vals[1]:>13}{vals[2]:>13}"
                     f"{vals[3]:>8}{vals[4]:>8}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# slice export
# ---------------------------------------------------------------------------

AXES = {"axial": 0, "coronal": 1, "sagittal": 2, "z": 0, "y": 1, "x": 2,
        "0": 0, "1": 1, "2": 2}


def cmd_export_slices(volume_path, axis="axial", out_dir=".") -> List[str]:
    """One binary PGM per slice, scaled by the whole volume's min/max."""
    vol = load_volume(volume_path)
    ax = AXES.get(str(axis).lower())
    if ax is None:
        raise ConfigError(f"unknown axis {axis!r}")
    lo, hi = float(vol.min()), float(vol.max())
    scaled = (np.zeros(vol.shape) if hi == lo
              else np.floor((vol.astype(np.float64) - lo) / (hi - lo) * 255 + 0.5))
    scaled = scaled.astype(np.uint8)
    os.makedirs(out_dir, exist_ok=True)
    stem = os.path.basename(os.fspath(volume_path)).split(".")[0]
    width = max(3, len(str(vol.shape[ax] - 1)))
    paths = []
    for i in range(vol.shape[ax]):
        path = os.path.join(out_dir, f"{stem}_{i:0{width}d}.pgm")
        write_pgm(np.take(scaled, i, axis=ax), path)
        paths.append(path)
    return paths
