"""
A small reverse-mode autodiff engine over numpy arrays.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients. ``backward``
walks the graph in reverse topological order and accumulates into
``.grad``. Ops keep the dtype of their inputs, so building the same graph
from float64 tensors gives the 64-bit replay used by gradient checks.

Spatial tensors use the layout ``(N, C, D, H, W)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import GraphError, ShapeError
from .volume import apply_separable, interp_matrix


class Tensor:
    """Value node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 _parents: Sequence["Tensor"] = (), _backward=None, op: str = "leaf"):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self.op = op
        self._parents = tuple(_parents)
        self._backward = _backward
        self.name = name

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, dtype={self.dtype})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def parents(self):
        return self._parents

    def zero_grad(self):
        self.grad = None

    def astype(self, dtype) -> "Tensor":
        """Detached leaf copy in another dtype."""
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, _as_tensor(-1.0, self.dtype))

    def __sub__(self, other):
        return add(self, -_as_tensor(other, self.dtype))

    def sum(self):
        return tsum(self)


def _as_tensor(x, dtype=np.float32) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _node(data, parents, backward_fn, op) -> Tensor:
    parents = tuple(parents)
    if not any(p.requires_grad for p in parents):
        return Tensor(data, op=op)
    return Tensor(data, _parents=parents, _backward=backward_fn, op=op)


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.dtype)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------

def topological_order(root: Tensor) -> List[Tensor]:
    """Nodes reachable from ``root`` with every parent before its children."""
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad.

    Intermediate gradients are discarded after use; leaf gradients
    accumulate across calls until reset with ``zero_grad``.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = topological_order(loss)
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            _accumulate(node, g)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}") from exc

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), bw, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(out, (a, b), bw, "mul")


def mul_broadcast(x: Tensor, alpha: Tensor) -> Tensor:
    """Scale ``x`` (N, C, ...) by a single-channel map ``alpha`` (N, 1, ...)."""
    if (alpha.data.ndim != x.data.ndim or alpha.shape[1] != 1
            or alpha.shape[0] != x.shape[0] or alpha.shape[2:] != x.shape[2:]):
        raise ShapeError(f"alpha {alpha.shape} cannot gate x {x.shape}")
    return mul(x, alpha)


def tsum(x: Tensor) -> Tensor:
    def bw(g):
        return (np.broadcast_to(g, x.shape),)

    return _node(np.asarray(x.data.sum()), (x,), bw, "sum")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype)

    def bw(g):
        return (g * mask,)

    return _node(out, (x,), bw, "relu")


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)

    def bw(g):
        return (g * out * (1 - out),)

    return _node(out, (x,), bw, "sigmoid")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def bw(g):
        return g[:, :ca], g[:, ca:]

    return _node(out, (a, b), bw, "concat")


def softmax_channels(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _node(out, (x,), bw, "softmax")


# ---------------------------------------------------------------------------
# 3D ops
# ---------------------------------------------------------------------------

def _triple(v) -> tuple:
    return tuple(v) if isinstance(v, (tuple, list)) else (v, v, v)


def conv_output_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv3d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride=1, padding=0) -> Tensor:
    """3D cross-correlation.

    Parameters
    ----------
    x : Tensor
        Input of shape ``(N, Cin, D, H, W)``.
    w : Tensor
        Kernel of shape ``(Cout, Cin, kd, kh, kw)``.
    b : Tensor, optional
        Bias of shape ``(Cout,)``.
    stride, padding : int or 3-tuple
        Zero padding is applied symmetrically per spatial axis.

    Returns
    -------
    Tensor of shape ``(N, Cout, Do, Ho, Wo)`` where
    ``Do = floor((D + 2*pad - kd) / stride) + 1``.
    """
    if x.data.ndim != 5 or w.data.ndim != 5:
        raise ShapeError(f"conv3d expects 5D input and kernel, got {x.shape} and {w.shape}")
    n, cin, *spatial = x.shape
    cout, wcin, *ks = w.shape
    if wcin != cin:
        raise ShapeError(f"kernel expects {wcin} input channels, input has {cin}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"bias shape {b.shape} does not match {cout} output channels")
    st, pd = _triple(stride), _triple(padding)
    osz = [conv_output_size(s, k, t, p) for s, k, t, p in zip(spatial, ks, st, pd)]
    if min(osz) < 1:
        raise ShapeError(f"kernel {tuple(ks)} does not fit padded input {tuple(spatial)}")

    xp = np.pad(x.data, ((0, 0), (0, 0)) + tuple((p, p) for p in pd)) if any(pd) else x.data
    win = sliding_window_view(xp, ks, axis=(2, 3, 4))
    win = win[:, :, :st[0] * (osz[0] - 1) + 1:st[0],
              :st[1] * (osz[1] - 1) + 1:st[1],
              :st[2] * (osz[2] - 1) + 1:st[2]]
    # rows: (cin, kd, kh, kw); columns: (n, do, ho, wo)
    kvol = ks[0] * ks[1] * ks[2]
    cols = np.ascontiguousarray(win.transpose(1, 5, 6, 7, 0, 2, 3, 4)).reshape(cin * kvol, -1)
    w2 = w.data.reshape(cout, -1)
    out = (w2 @ cols).reshape(cout, n, *osz).transpose(1, 0, 2, 3, 4)
    if b is not None:
        out = out + b.data.reshape(1, cout, 1, 1, 1)
    out = np.ascontiguousarray(out)

    def bw(g):
        g2 = g.transpose(1, 0, 2, 3, 4).reshape(cout, -1)
        gw = (g2 @ cols.T).reshape(w.shape) if w.requires_grad else None
        gb = g2.sum(axis=1) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (w2.T @ g2).reshape(cin, *ks, n, *osz)
            gxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(ks[0]):
                for j in range(ks[1]):
                    for k in range(ks[2]):
                        gxp[:, :,
                            i:i + st[0] * (osz[0] - 1) + 1:st[0],
                            j:j + st[1] * (osz[1] - 1) + 1:st[1],
                            k:k + st[2] * (osz[2] - 1) + 1:st[2]] += \
                            gcols[:, i, j, k].transpose(1, 0, 2, 3, 4)
            gx = gxp[:, :, pd[0]:pd[0] + spatial[0], pd[1]:pd[1] + spatial[1],
                     pd[2]:pd[2] + spatial[2]]
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _node(out, parents, bw, "conv3d")


def maxpool3d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """Max over ``window**3`` blocks; gradient goes to the first maximum on ties."""
    n, c, *spatial = x.shape
    if min(spatial) < window:
        raise ShapeError(f"spatial dims {tuple(spatial)} smaller than pool window {window}")
    osz = [(s - window) // stride + 1 for s in spatial]
    win = sliding_window_view(x.data, (window,) * 3, axis=(2, 3, 4))
    win = win[:, :, :stride * (osz[0] - 1) + 1:stride, :stride * (osz[1] - 1) + 1:stride,
              :stride * (osz[2] - 1) + 1:stride]
    flat = win.reshape(n, c, *osz, window ** 3)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gx = np.zeros(x.shape, dtype=x.dtype)
        for idx in range(window ** 3):
            i, rem = divmod(idx, window * window)
            j, k = divmod(rem, window)
            gx[:, :, i:i + stride * (osz[0] - 1) + 1:stride,
               j:j + stride * (osz[1] - 1) + 1:stride,
               k:k + stride * (osz[2] - 1) + 1:stride] += np.where(arg == idx, g, 0)
        return (gx,)

    return _node(np.ascontiguousarray(out), (x,), bw, "maxpool3d")


def upsample_trilinear(x: Tensor, scale: int = 2, size: Optional[Sequence[int]] = None) -> Tensor:
    """Align-corners trilinear resampling to ``size`` (default: ``scale`` x input)."""
    spatial = x.shape[2:]
    if size is None:
        size = tuple(s * scale for s in spatial)
    size = tuple(int(s) for s in size)
    if len(size) != 3 or min(size) < 1:
        raise ShapeError(f"invalid upsample size {size}")
    mats = [interp_matrix(s, t, dtype=x.dtype) for s, t in zip(spatial, size)]
    out = apply_separable(x.data, mats)

    def bw(g):
        return (apply_separable(g, [m.T for m in mats]),)

    return _node(np.ascontiguousarray(out), (x,), bw, "upsample")


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

DICE_EPS = 1e-6


def dice_loss(p: Tensor, t, foreground_only: bool = True, eps: float = DICE_EPS) -> Tensor:
    """Soft dice loss ``1 - mean_c (2 sum(p t) + eps) / (sum(p^2) + sum(t^2) + eps)``.

    Sums run over the batch and all spatial positions of each channel
    (axis 1). With ``foreground_only`` the mean skips channel 0, unless it
    is the only channel. Gradients flow to ``p`` only.
    """
    tdata = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=p.dtype)
    if p.shape != tdata.shape:
        raise ShapeError(f"prediction {p.shape} and target {tdata.shape} differ")
    if p.data.ndim < 2:
        raise ShapeError("dice_loss expects at least (N, C) shaped input")
    axes = (0,) + tuple(range(2, p.data.ndim))
    pd = p.data
    inter = (pd * tdata).sum(axis=axes)
    denom = (pd * pd).sum(axis=axes) + (tdata * tdata).sum(axis=axes)
    dice = (2 * inter + eps) / (denom + eps)
    nch = p.shape[1]
    chans = np.arange(1, nch) if foreground_only and nch > 1 else np.arange(nch)
    loss = 1.0 - dice[chans].mean()

    def bw(g):
        num = 2 * inter + eps
        den = denom + eps
        shape = (1, nch) + (1,) * (pd.ndim - 2)
        weight = np.zeros(nch, dtype=pd.dtype)
        weight[chans] = 1.0 / len(chans)
        dd = (2 * tdata / den.reshape(shape)
              - 2 * pd * (num / den ** 2).reshape(shape))
        return (-g * weight.reshape(shape) * dd,)

    return _node(np.asarray(loss, dtype=p.dtype), (p,), bw, "dice_loss")


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Per-parameter moments for Adam, keyed by position in the param list."""

    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Iterable[Tensor], **kw) -> "AdamState":
        params = list(params)
        return cls(m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params], **kw)


def adam_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]],
              state: AdamState, lr: float = 1e-4) -> None:
    """Bias-corrected Adam update applied in place to ``params``."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ShapeError("optimizer state does not match parameter list")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if m.shape != p.shape:
            raise ShapeError(f"moment shape {m.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        mhat = m / c1
        vhat = v / c2
        p.data -= (lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.dtype)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def finite_diff_check(f: Callable[[Tensor], Tensor], x0, h: float = 1e-4,
                      indices: Optional[Iterable[int]] = None) -> float:
    """Worst relative error between backward() and central differences.

    ``f`` maps a Tensor to a scalar Tensor. Everything runs in float64.
    The per-element error is ``|a - n| / max(|a|, |n|, floor)`` with a floor
    of ``1e-6 * max(1, max|n|)`` so that near-zero gradients do not turn
    roundoff into huge ratios.
    """
    base = np.array(x0.data if isinstance(x0, Tensor) else x0, dtype=np.float64)
    x = Tensor(base.copy(), requires_grad=True)
    out = f(x)
    backward(out)
    analytic = np.zeros_like(base) if x.grad is None else x.grad.reshape(-1)
    idx = range(base.size) if indices is None else indices
    flat = base.reshape(-1)
    numeric = {}
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = float(f(Tensor(base.copy())).data)
        flat[i] = old - h
        fm = float(f(Tensor(base.copy())).data)
        flat[i] = old
        numeric[i] = (fp - fm) / (2 * h)
    if not numeric:
        return 0.0
    nvals = np.array(list(numeric.values()))
    avals = np.array([analytic.reshape(-1)[i] for i in numeric])
    floor = 1e-6 * max(1.0, np.abs(nvals).max())
    denom = np.maximum(np.maximum(np.abs(avals), np.abs(nvals)), floor)
    return float((np.abs(avals - nvals) / denom).max())
