"""
Reverse-mode automatic differentiation over float64 numpy arrays.

Only the handful of NHWC layers the segmentation models use are provided.
Every op that has at least one input with ``requires_grad`` records a node
carrying a backward rule and a global sequence number; :func:`backward`
collects the nodes reachable from the loss and replays them in reverse
execution order, so each node's rule runs exactly once.

    >>> x = Tensor(np.array([3.0]), requires_grad=True)
    >>> backward(sum(x * x))
    >>> x.grad
    array([6.])
"""

from __future__ import annotations

import contextlib
import itertools
import json
import os
import struct
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .errors import ContractError, MalformedFileError, ShapeError

_seq = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Node:
    __slots__ = ("seq", "parents", "backward_fn")

    def __init__(self, parents: tuple["Tensor", ...], backward_fn: Callable):
        self.seq = next(_seq)
        self.parents = parents
        self.backward_fn = backward_fn


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, as_tensor(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(as_tensor(other), as_tensor(-1.0)))

    def __neg__(self):
        return mul(self, as_tensor(-1.0))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record_op(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    """Wrap ``data`` as the output of an op; ``backward_fn(g)`` returns one grad per parent."""
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out.node = Node(parents, backward_fn)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor that requires it."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not attached to any graph")

    # collect reachable nodes; execution order == ascending seq
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen or t.node is None:
            continue
        seen.add(id(t))
        order.append(t)
        stack.extend(p for p in t.node.parents if p.requires_grad)
    order.sort(key=lambda t: t.node.seq, reverse=True)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in order:
        g = grads.pop(id(t), None)
        if g is None:
            continue
        t.grad = g if t.grad is None else t.grad + g
        for parent, pg in zip(t.node.parents, t.node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.node is None:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            elif id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


# ---------------------------------------------------------------------------
# elementwise / reductions
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record_op(a.data + b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return record_op(a.data * b.data, (a, b), bw)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    def bw(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return record_op(np.asarray(x.data.sum()), (x,), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    return record_op(np.where(mask, x.data, 0.0), (x,), bw)


_SIGMOID_LO = np.nextafter(0.0, 1.0)
_SIGMOID_HI = np.nextafter(1.0, 0.0)


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    z = x.data
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    # keep the output strictly inside (0, 1) once float64 saturates
    out = np.clip(out, _SIGMOID_LO, _SIGMOID_HI)

    def bw(g):
        return (g * out * (1.0 - out),)

    return record_op(out, (x,), bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1/(1-rate)``; identity at inference."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    scale = np.where(rng.random(x.shape) >= rate, 1.0 / (1.0 - rate), 0.0)

    def bw(g):
        return (g * scale,)

    return record_op(x.data * scale, (x,), bw)


# ---------------------------------------------------------------------------
# NHWC layers
# ---------------------------------------------------------------------------


def _check_nhwc(x: Tensor, what: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{what} expects an NxHxWxC input, got {x.shape}")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Stride-1 'same' cross-correlation with an odd ``k x k x C_in x C_out`` kernel."""
    _check_nhwc(x, "conv2d")
    k, k2, cin, cout = kernel.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d kernel must be odd and square, got {kernel.shape}")
    if x.shape[3] != cin:
        raise ShapeError(f"conv2d input has {x.shape[3]} channels, kernel expects {cin}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d bias must be ({cout},), got {bias.shape}")
    n, h, w, _ = x.shape
    p = k // 2
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0))) if p else x.data
    taps = [(i, j) for i in range(k) for j in range(k)]
    cols = np.concatenate([xp[:, i : i + h, j : j + w, :] for i, j in taps], axis=-1)
    cols2 = cols.reshape(-1, k * k * cin)
    wmat = kernel.data.reshape(k * k * cin, cout)
    out = (cols2 @ wmat + bias.data).reshape(n, h, w, cout)

    def bw(g):
        g2 = g.reshape(-1, cout)
        gw = (cols2.T @ g2).reshape(kernel.shape)
        gb = g2.sum(axis=0)
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(n, h, w, k * k * cin)
            gxp = np.zeros_like(xp)
            for t, (i, j) in enumerate(taps):
                gxp[:, i : i + h, j : j + w, :] += gcols[..., t * cin : (t + 1) * cin]
            gx = gxp[:, p : p + h, p : p + w, :] if p else gxp
        return gx, gw, gb

    return record_op(out, (x, kernel, bias), bw)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pool, stride 2. Ties route the gradient to the first element row-major."""
    _check_nhwc(x, "maxpool2")
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    win = x.data.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    win = win.reshape(n, h // 2, w // 2, c, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        onehot = (np.arange(4) == arg[..., None]) * g[..., None]
        gx = onehot.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
        return (gx.reshape(n, h, w, c),)

    return record_op(out, (x,), bw)


def conv2d_transpose(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Stride-2 transposed convolution with a ``2 x 2 x C_in x C_out`` kernel.

    Each input pixel writes ``value * kernel`` into its own 2x2 output block.
    """
    _check_nhwc(x, "conv2d_transpose")
    if kernel.data.ndim != 4 or kernel.shape[:2] != (2, 2):
        raise ShapeError(f"conv2d_transpose kernel must be 2x2xCinxCout, got {kernel.shape}")
    _, _, cin, cout = kernel.shape
    if x.shape[3] != cin:
        raise ShapeError(f"conv2d_transpose input has {x.shape[3]} channels, kernel expects {cin}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d_transpose bias must be ({cout},), got {bias.shape}")
    n, h, w, _ = x.shape
    # (cin, a, b, cout) so a matmul yields every block at once
    wmat = kernel.data.transpose(2, 0, 1, 3).reshape(cin, 4 * cout)
    x2 = x.data.reshape(-1, cin)
    blocks = (x2 @ wmat).reshape(n, h, w, 2, 2, cout)
    out = blocks.transpose(0, 1, 3, 2, 4, 5).reshape(n, 2 * h, 2 * w, cout) + bias.data

    def bw(g):
        gb = g.reshape(-1, cout).sum(axis=0)
        gblk = g.reshape(n, h, 2, w, 2, cout).transpose(0, 1, 3, 2, 4, 5).reshape(-1, 4 * cout)
        gw = (x2.T @ gblk).reshape(cin, 2, 2, cout).transpose(1, 2, 0, 3)
        gx = (gblk @ wmat.T).reshape(n, h, w, cin) if x.requires_grad else None
        return gx, gw, gb

    return record_op(out, (x, kernel, bias), bw)


def dense_channelwise(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-position affine map over channels (a 1x1 convolution)."""
    _check_nhwc(x, "dense_channelwise")
    if weight.data.ndim != 2 or weight.shape[0] != x.shape[3]:
        raise ShapeError(f"weight {weight.shape} does not fit input channels {x.shape[3]}")
    cout = weight.shape[1]
    if bias.shape != (cout,):
        raise ShapeError(f"bias must be ({cout},), got {bias.shape}")
    x2 = x.data.reshape(-1, x.shape[3])
    out = (x2 @ weight.data + bias.data).reshape(x.shape[:3] + (cout,))

    def bw(g):
        g2 = g.reshape(-1, cout)
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        return gx, x2.T @ g2, g2.sum(axis=0)

    return record_op(out, (x, weight, bias), bw)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4 or a.shape[:3] != b.shape[:3]:
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    ca = a.shape[3]

    def bw(g):
        return g[..., :ca], g[..., ca:]

    return record_op(np.concatenate([a.data, b.data], axis=3), (a, b), bw)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    def bw(g):
        gx = np.zeros_like(x.data)
        gx[..., start:stop] = g
        return (gx,)

    return record_op(x.data[..., start:stop].copy(), (x,), bw)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: np.ndarray,
    epsilon: float = 1e-5,
    exclude: np.ndarray | None = None,
) -> float:
    """Max relative error between the analytic gradient of ``f`` and central differences.

    ``exclude`` is a boolean mask of coordinates to skip (kinks such as
    relu at zero or maxpool ties).
    """
    x = np.array(x, dtype=np.float64)
    xt = Tensor(x.copy(), requires_grad=True)
    backward(f(xt))
    analytic = xt.grad if xt.grad is not None else np.zeros_like(x)

    worst = 0.0
    with no_grad():
        for idx in np.ndindex(x.shape):
            if exclude is not None and exclude[idx]:
                continue
            xp = x.copy()
            xp[idx] += epsilon
            xm = x.copy()
            xm[idx] -= epsilon
            num = (float(f(Tensor(xp)).data) - float(f(Tensor(xm)).data)) / (2 * epsilon)
            a = float(analytic[idx])
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"BEVRCKPT"
CHECKPOINT_VERSION = 1


def save_parameters(
    path: str | os.PathLike, params: Mapping[str, np.ndarray], header: Mapping | None = None
) -> None:
    """Write a flat name -> float64 array container.

    Layout: magic, u32 version, u64 header length, UTF-8 JSON header (metadata
    plus name/shape table, keys sorted), then raw little-endian float64 data in
    table order. No timestamps, so equal inputs give equal bytes.
    """
    names = sorted(params)
    table = [{"name": k, "shape": list(np.shape(params[k]))} for k in names]
    meta = json.dumps(
        {"meta": dict(header or {}), "tensors": table}, sort_keys=True, separators=(",", ":")
    ).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(meta)))
        fh.write(meta)
        for k in names:
            fh.write(np.ascontiguousarray(params[k], dtype="<f8").tobytes())


def load_parameters(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise MalformedFileError(f"{path}: not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    version, hlen = struct.unpack_from("<IQ", raw, off)
    if version != CHECKPOINT_VERSION:
        raise MalformedFileError(f"{path}: unsupported checkpoint version {version}")
    off += struct.calcsize("<IQ")
    head = json.loads(raw[off : off + hlen].decode())
    off += hlen
    params = {}
    for entry in head["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        params[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape).copy()
        off += 8 * n
    if off != len(raw):
        raise MalformedFileError(f"{path}: trailing bytes after tensor data")
    return params, head["meta"]
