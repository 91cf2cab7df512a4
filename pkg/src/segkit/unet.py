"""
Attention-gated 3D U-Net on top of :mod:`segkit.autodiff`.

Layout of one model with ``depth`` resolution levels::

    enc0 -> pool -> enc1 -> pool -> ... -> bottleneck
                                              |
    head <- dec0 <- ... <- dec(depth-2) <-----+

Each decoder level upsamples the coarser feature map, gates the skip tensor
with it, concatenates ``[gated skip, upsampled]`` and applies two 3x3x3
convolutions. The head is a 1x1x1 convolution followed by a channel softmax.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tensor
from .errors import CheckpointError, ConfigError, ShapeError


@dataclass
class ModelConfig:
    depth: int = 4
    base_channels: int = 16
    in_channels: int = 4
    num_classes: int = 4
    gate: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.depth < 2:
            raise ConfigError("depth must be >= 2")
        if self.base_channels < 1 or self.in_channels < 1 or self.num_classes < 1:
            raise ConfigError("channel counts must be positive")

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level

    def check_input(self, spatial: Sequence[int]) -> None:
        factor = 2 ** (self.depth - 1)
        if any(s % factor for s in spatial):
            raise ConfigError(f"spatial dims {tuple(spatial)} not divisible by {factor}")


@dataclass
class TrainPlan:
    """Training schedule: ``rounds`` is a list of ``(epochs, batch_size)``."""

    rounds: List[Tuple[int, int]] = field(default_factory=lambda: [(50, 2), (50, 1)])
    lr: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        self.rounds = [tuple(int(v) for v in r) for r in self.rounds]
        if not self.rounds:
            raise ConfigError("a plan needs at least one round")
        for epochs, batch in self.rounds:
            if epochs < 1 or batch < 1:
                raise ConfigError(f"invalid round ({epochs}, {batch})")

    @property
    def total_epochs(self) -> int:
        return sum(e for e, _ in self.rounds)

    def round_of(self, epoch: int) -> int:
        """Round index of the 0-based global ``epoch``."""
        acc = 0
        for i, (epochs, _) in enumerate(self.rounds):
            acc += epochs
            if epoch < acc:
                return i
        raise ValueError(f"epoch {epoch} beyond plan")

    def round_end(self, r: int) -> int:
        return sum(e for e, _ in self.rounds[:r + 1])


# ---------------------------------------------------------------------------
# attention gate
# ---------------------------------------------------------------------------

def attention_coefficients(x: Tensor, g: Tensor, params: Dict[str, Tensor]) -> Tensor:
    """Single-channel coefficients at x's resolution, before multiplication."""
    if any(2 * gs != xs for gs, xs in zip(g.shape[2:], x.shape[2:])) or g.shape[0] != x.shape[0]:
        raise ShapeError(f"gating tensor {g.shape} must be half the resolution of {x.shape}")
    theta = ad.conv3d(x, params["theta.w"], None, stride=2)
    phi = ad.conv3d(g, params["phi.w"], params["phi.b"])
    act = ad.relu(ad.add(theta, phi))
    a = ad.sigmoid(ad.conv3d(act, params["psi.w"], params["psi.b"]))
    return ad.upsample_trilinear(a, size=x.shape[2:])


def attention_gate(x: Tensor, g: Tensor, params: Dict[str, Tensor]) -> Tensor:
    """Gate skip tensor ``x`` with the coarser tensor ``g``; output has x's shape."""
    return ad.mul_broadcast(x, attention_coefficients(x, g, params))


def gate_param_shapes(x_ch: int, g_ch: int) -> Dict[str, tuple]:
    inter = max(1, x_ch // 2)
    return {
        "theta.w": (inter, x_ch, 2, 2, 2),
        "phi.w": (inter, g_ch, 1, 1, 1),
        "phi.b": (inter,),
        "psi.w": (1, inter, 1, 1, 1),
        "psi.b": (1,),
    }


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

def param_shapes(cfg: ModelConfig) -> Dict[str, tuple]:
    """Ordered name -> shape table for every parameter of ``cfg``."""
    shapes: Dict[str, tuple] = {}

    def conv(name, cin, cout, k=3):
        shapes[f"{name}.w"] = (cout, cin, k, k, k)
        shapes[f"{name}.b"] = (cout,)

    prev = cfg.in_channels
    for level in range(cfg.depth):
        c = cfg.channels(level)
        prefix = "bottleneck" if level == cfg.depth - 1 else f"enc{level}"
        conv(f"{prefix}.conv1", prev, c)
        conv(f"{prefix}.conv2", c, c)
        prev = c
    for level in reversed(range(cfg.depth - 1)):
        c, cg = cfg.channels(level), cfg.channels(level + 1)
        if cfg.gate:
            for k, s in gate_param_shapes(c, cg).items():
                shapes[f"dec{level}.gate.{k}"] = s
        conv(f"dec{level}.conv1", c + cg, c)
        conv(f"dec{level}.conv2", c, c)
    conv("head", cfg.channels(0), cfg.num_classes, k=1)
    return shapes


class AttentionUNet:
    """Parameter container plus forward pass."""

    def __init__(self, cfg: ModelConfig, params: Dict[str, Tensor]):
        expected = param_shapes(cfg)
        if list(expected) != list(params):
            raise ConfigError("parameter names do not match the model config")
        for name, shape in expected.items():
            if tuple(params[name].shape) != shape:
                raise ShapeError(f"{name}: expected {shape}, got {params[name].shape}")
        self.cfg = cfg
        self.params = params

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def astype(self, dtype) -> "AttentionUNet":
        return AttentionUNet(self.cfg, {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k)
                                        for k, v in self.params.items()})

    def copy(self) -> "AttentionUNet":
        return self.astype(self.dtype)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def _block(self, prefix: str, x: Tensor) -> Tensor:
        p = self.params
        x = ad.relu(ad.conv3d(x, p[f"{prefix}.conv1.w"], p[f"{prefix}.conv1.b"], padding=1))
        return ad.relu(ad.conv3d(x, p[f"{prefix}.conv2.w"], p[f"{prefix}.conv2.b"], padding=1))

    def gate_params(self, level: int) -> Dict[str, Tensor]:
        prefix = f"dec{level}.gate."
        return {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}

    def logits(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        cfg = self.cfg
        if x.data.ndim != 5 or x.shape[1] != cfg.in_channels:
            raise ShapeError(f"expected (N, {cfg.in_channels}, D, H, W) input, got {x.shape}")
        cfg.check_input(x.shape[2:])
        skips = []
        for level in range(cfg.depth - 1):
            x = self._block(f"enc{level}", x)
            skips.append(x)
            x = ad.maxpool3d(x)
        x = self._block("bottleneck", x)
        for level in reversed(range(cfg.depth - 1)):
            skip = skips[level]
            up = ad.upsample_trilinear(x, size=skip.shape[2:])
            if cfg.gate:
                skip = attention_gate(skip, x, self.gate_params(level))
            x = self._block(f"dec{level}", ad.concat_channels(skip, up))
        return ad.conv3d(x, self.params["head.w"], self.params["head.b"])

    def forward(self, x) -> Tensor:
        """Per-voxel class probabilities, shape ``(N, num_classes, D, H, W)``."""
        return ad.softmax_channels(self.logits(x))

    __call__ = forward


def build_model(cfg: ModelConfig, dtype=np.float32) -> AttentionUNet:
    """He-uniform kernels, zero biases, drawn in parameter-name order from ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b"):
            data = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(data.astype(dtype), requires_grad=True, name=name)
    return AttentionUNet(cfg, params)


def forward(model: AttentionUNet, batch) -> Tensor:
    return model.forward(batch)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

HISTORY_FIELDS = ("epoch", "loss", "dice", "iou", "accuracy", "sensitivity", "specificity")


@dataclass
class Checkpoint:
    model: AttentionUNet
    adam: AdamState
    epoch: int = 0
    history: List[dict] = field(default_factory=list)

    @property
    def config(self) -> ModelConfig:
        return self.model.cfg

    @classmethod
    def initial(cls, cfg: ModelConfig) -> "Checkpoint":
        model = build_model(cfg)
        return cls(model=model, adam=AdamState.for_params(model.parameters()))


CHECKPOINT_MAGIC = b"AUNC"
CHECKPOINT_VERSION = 1


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write ``ckpt`` in the little-endian AUNC container.

    Layout: magic, u32 version, u32 length + UTF-8 JSON header (config,
    epoch, history, Adam scalars), u32 tensor count, then per tensor:
    u16 name length, name, u32 ndim, u32 dims, float32 payload.
    """
    header = {
        "config": asdict(ckpt.model.cfg),
        "epoch": ckpt.epoch,
        "history": ckpt.history,
        "adam": {"t": ckpt.adam.t, "beta1": ckpt.adam.beta1, "beta2": ckpt.adam.beta2,
                 "eps": ckpt.adam.eps},
    }
    tensors = [(name, p.data) for name, p in ckpt.model.named_parameters()]
    names = [n for n, _ in tensors]
    if ckpt.adam.m:
        tensors += [(f"adam.m/{n}", m) for n, m in zip(names, ckpt.adam.m)]
        tensors += [(f"adam.v/{n}", v) for n, v in zip(names, ckpt.adam.v)]
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            bname = name.encode()
            fh.write(struct.pack("<H", len(bname)))
            fh.write(bname)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path, config: Optional[ModelConfig] = None) -> Checkpoint:
    """Read an AUNC file; ``config``, when given, must match the stored one."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not an AUNC checkpoint")
    try:
        version, hlen = struct.unpack_from("<II", buf, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        off = 12
        header = json.loads(buf[off:off + hlen].decode())
        off += hlen
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + nlen].decode()
            off += nlen
            (ndim,) = struct.unpack_from("<I", buf, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            size = int(np.prod(shape)) * 4
            if off + size > len(buf):
                raise CheckpointError(f"truncated tensor {name}")
            tensors[name] = np.frombuffer(buf, dtype="<f4", count=size // 4,
                                          offset=off).reshape(shape).astype(np.float32)
            off += size
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc

    cfg = ModelConfig(**header["config"])
    if config is not None and asdict(config) != asdict(cfg):
        raise CheckpointError(f"checkpoint config {asdict(cfg)} does not match {asdict(config)}")
    shapes = param_shapes(cfg)
    params = {}
    for name, shape in shapes.items():
        if name not in tensors:
            raise CheckpointError(f"missing tensor {name}")
        if tensors[name].shape != shape:
            raise CheckpointError(f"{name}: stored shape {tensors[name].shape} != {shape}")
        params[name] = Tensor(tensors[name], requires_grad=True, name=name)
    model = AttentionUNet(cfg, params)
    a = header["adam"]
    adam = AdamState(t=a["t"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"])
    if f"adam.m/{next(iter(shapes))}" in tensors:
        adam.m = [tensors[f"adam.m/{n}"].copy() for n in shapes]
        adam.v = [tensors[f"adam.v/{n}"].copy() for n in shapes]
    else:
        adam.m = [np.zeros(s, dtype=np.float32) for s in shapes.values()]
        adam.v = [np.zeros(s, dtype=np.float32) for s in shapes.values()]
    return Checkpoint(model=model, adam=adam, epoch=header["epoch"], history=header["history"])


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

Sample = Tuple[np.ndarray, np.ndarray]  # image (C, D, H, W), labels (D, H, W)


def _one_hot_batch(labels: np.ndarray, num_classes: int) -> np.ndarray:
    classes = np.arange(num_classes).reshape(1, -1, 1, 1, 1)
    return (labels[:, None] == classes).astype(np.float32)


def _wt_confusion(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    pred = probs.argmax(axis=1) > 0
    truth = labels > 0
    return np.array([np.sum(pred & truth), np.sum(pred & ~truth),
                     np.sum(~pred & truth), np.sum(~pred & ~truth)], dtype=np.int64)


def _ratio(num, den) -> float:
    return float(num / den) if den > 0 else float("nan")


def epoch_row(epoch: int, loss: float, counts: np.ndarray) -> dict:
    tp, fp, fn, tn = (int(c) for c in counts)
    return {
        "epoch": epoch,
        "loss": loss,
        "dice": 1.0 - loss,
        "iou": _ratio(tp, tp + fp + fn),
        "accuracy": _ratio(tp + tn, tp + tn + fp + fn),
        "sensitivity": _ratio(tp, tp + fn),
        "specificity": _ratio(tn, tn + fp),
    }


def train_step(model: AttentionUNet, adam: AdamState, x: np.ndarray, y: np.ndarray,
               lr: float) -> Tuple[float, np.ndarray]:
    target = _one_hot_batch(y, model.cfg.num_classes)
    probs = model.forward(Tensor(x.astype(model.dtype)))
    loss = ad.dice_loss(probs, target)
    model.zero_grad()
    ad.backward(loss)
    params = model.parameters()
    ad.adam_step(params, [p.grad for p in params], adam, lr)
    return float(loss.data), _wt_confusion(probs.data, y)


def train(ckpt: Checkpoint, samples: Sequence[Sample], plan: TrainPlan,
          on_epoch: Optional[Callable[[Checkpoint], None]] = None,
          stop_after: Optional[int] = None) -> Checkpoint:
    """Run ``plan`` from ``ckpt.epoch`` onwards, updating ``ckpt`` in place.

    Every epoch shuffles the samples with a generator seeded by
    ``(plan.seed, epoch)`` so that resuming from a checkpoint replays the
    exact batch order of an uninterrupted run. ``stop_after`` halts once the
    global epoch count reaches that value.
    """
    if not samples:
        raise ConfigError("empty training set")
    n = len(samples)
    images = np.stack([s[0] for s in samples]).astype(np.float32)
    labels = np.stack([s[1] for s in samples])
    ckpt.model.cfg.check_input(images.shape[2:])
    end = plan.total_epochs if stop_after is None else min(stop_after, plan.total_epochs)
    while ckpt.epoch < end:
        epoch = ckpt.epoch
        batch = plan.rounds[plan.round_of(epoch)][1]
        order = np.random.default_rng([plan.seed, epoch]).permutation(n)
        total, counts = 0.0, np.zeros(4, dtype=np.int64)
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            loss, c = train_step(ckpt.model, ckpt.adam, images[idx], labels[idx], plan.lr)
            total += loss * len(idx)
            counts += c
        ckpt.epoch += 1
        ckpt.history.append(epoch_row(ckpt.epoch, total / n, counts))
        if on_epoch is not None:
            on_epoch(ckpt)
    return ckpt


def predict(model: AttentionUNet, images: Iterable[np.ndarray]) -> List[np.ndarray]:
    """Class probabilities ``(C, D, H, W)`` per image, one forward pass each."""
    return [model.forward(Tensor(img[None].astype(model.dtype))).data[0] for img in images]


def mean_soft_dice(model: AttentionUNet, samples: Sequence[Sample]) -> float:
    """Mean over samples of the foreground soft dice ``1 - dice_loss``."""
    scores = []
    for (img, lab), probs in zip(samples, predict(model, [s[0] for s in samples])):
        target = _one_hot_batch(lab[None], model.cfg.num_classes)
        scores.append(1.0 - float(ad.dice_loss(Tensor(probs[None]), target).data))
    return float(np.mean(scores))
