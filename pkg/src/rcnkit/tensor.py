"""Dense rank-4 tensors with a reverse-mode gradient tape.

Only the operators the contour network needs are provided: convolution,
max pooling, align-corners bilinear upsampling, per-channel affine, a few
elementwise functions and scalar reductions.  Values are ``float32`` by
default; every operator preserves the dtype of its inputs so gradient
checks can run the same graph in ``float64``.
"""

from __future__ import annotations

import contextlib
import struct
from collections.abc import Callable, Iterator, Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32


class ShapeError(ValueError):
    """Operand shapes are incompatible; ``dim`` names the offending axis."""

    def __init__(self, message: str, dim: str | None = None):
        super().__init__(message)
        self.dim = dim


class Tensor:
    """A (batch, channels, height, width) array that can sit on a tape.

    Parameters
    ----------
    data : array_like
        Values. Arrays with fewer than four axes are left-padded with unit
        axes, so a plain float becomes a 1x1x1x1 scalar tensor.
    requires_grad : bool
        Whether gradients flow into this tensor during :func:`backward`.
    dtype : numpy dtype, optional
        Storage type; defaults to ``float32`` unless ``data`` is already a
        floating array.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DTYPE
        arr = np.ascontiguousarray(arr, dtype=dtype)
        if arr.ndim > 4:
            raise ShapeError(f"tensors are rank 4, got rank {arr.ndim}", dim="rank")
        while arr.ndim < 4:
            arr = arr[None]
        if 0 in arr.shape:
            raise ShapeError(f"all extents must be positive, got {arr.shape}", dim="extent")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got {self.shape}", dim="size")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __mul__(self, other: Tensor) -> Tensor:
        return mul(self, other)


# --------------------------------------------------------------------------
# tape
# --------------------------------------------------------------------------


@dataclass
class Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]
    op: str


@dataclass
class Tape:
    """Operations recorded in execution order."""

    nodes: list[Node] = field(default_factory=list)

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


_tapes: list[Tape] = [Tape()]
_grad_enabled = [True]


def current_tape() -> Tape:
    return _tapes[-1]


@contextlib.contextmanager
def recording(tape: Tape | None = None) -> Iterator[Tape]:
    """Route recorded operations to ``tape`` (a fresh one by default)."""
    tape = Tape() if tape is None else tape
    _tapes.append(tape)
    try:
        yield tape
    finally:
        _tapes.pop()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    _grad_enabled.append(False)
    try:
        yield
    finally:
        _grad_enabled.pop()


def emit(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], rule) -> Tensor:
    track = _grad_enabled[-1] and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=track, dtype=out.dtype)
    if track:
        current_tape().record(Node(inputs, result, rule, op))
    return result


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Propagate d(loss)/d(.) back through the tape.

    Leaf tensors accumulate into ``grad`` across calls; tensors produced by
    a recorded operation get their gradient overwritten.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}", dim="size")
    tape = current_tape() if tape is None else tape
    if not tape.nodes:
        raise RuntimeError("tape is empty; nothing was recorded for this loss")
    produced = {id(n.output) for n in tape.nodes}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        node.output.grad = g
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if key not in produced:
                leaves[key] = inp
    for key, t in leaves.items():
        g = grads[key].astype(t.data.dtype, copy=False)
        t.grad = g.copy() if t.grad is None else t.grad + g


# --------------------------------------------------------------------------
# operators
# --------------------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Direct 2-D cross-correlation.

    ``weight`` has shape (out_ch, in_ch, kh, kw); ``bias`` holds ``out_ch``
    values in any rank-4 layout.
    """
    if stride < 1 or padding < 0:
        raise ValueError(f"stride must be >= 1 and padding >= 0, got {stride}, {padding}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ShapeError(f"input has {c} channels but weight expects {ci}", dim="in_channels")
    if bias is not None and bias.data.size != o:
        raise ShapeError(f"bias has {bias.data.size} values for {o} output channels", dim="out_channels")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp:
        raise ShapeError(f"kernel height {kh} exceeds padded input height {hp}", dim="height")
    if kw > wp:
        raise ShapeError(f"kernel width {kw} exceeds padded input width {wp}", dim="width")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    wmat = weight.data
    if kh == 1 and kw == 1:
        cols = xp[:, :, ::stride, ::stride][:, :, :ho, :wo]
        out = np.einsum("nchw,oc->nohw", cols, wmat[:, :, 0, 0], optimize=True)
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        out = np.tensordot(win, wmat, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1, 1)
    out = np.ascontiguousarray(out)

    def rule(g: np.ndarray):
        gx = gw = gb = None
        if weight.requires_grad:
            if kh == 1 and kw == 1:
                gw = np.einsum("nohw,nchw->oc", g, cols, optimize=True)[:, :, None, None]
            else:
                gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3)).reshape(bias.shape)
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            # (n, ho, wo, c, kh, kw)
            gcols = np.tensordot(g, wmat, axes=([1], [0]))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return emit("conv2d", out, inputs, rule)


def max_pool(x: Tensor, kernel: int, stride: int, padding: int = 0) -> Tensor:
    """Max over kernel x kernel windows; padding never wins.

    The backward pass routes each output gradient to the first maximal
    cell of its window in row-major order.
    """
    if kernel < 1 or stride < 1 or padding < 0:
        raise ValueError("kernel and stride must be >= 1 and padding >= 0")
    n, c, h, w = x.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    if kernel > hp or kernel > wp:
        raise ShapeError(f"window {kernel} larger than padded input {hp}x{wp}", dim="height" if kernel > hp else "width")
    ho = (hp - kernel) // stride + 1
    wo = (wp - kernel) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf) if padding else x.data
    win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def rule(g: np.ndarray):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        rows = np.arange(ho)[:, None] * stride + arg // kernel
        cols = np.arange(wo)[None, :] * stride + arg % kernel
        ni = np.arange(n)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        np.add.at(gxp, (ni, ci, rows, cols), g)
        gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return (gx,)

    return emit("max_pool", np.ascontiguousarray(out), (x,), rule)


def _interp_matrix(src: int, dst: int, dtype) -> np.ndarray:
    """(dst, src) align-corners linear interpolation weights."""
    m = np.zeros((dst, src), dtype=np.float64)
    if src == 1 or dst == 1:
        m[:, 0] = 1.0
        return m.astype(dtype)
    pos = np.arange(dst) * (src - 1) / (dst - 1)
    lo = np.minimum(np.floor(pos).astype(int), src - 2)
    frac = pos - lo
    m[np.arange(dst), lo] = 1.0 - frac
    m[np.arange(dst), lo + 1] += frac
    return m.astype(dtype)


def upsample_bilinear(x: Tensor, target_h: int, target_w: int) -> Tensor:
    """Align-corners bilinear upsampling; corner pixels map exactly."""
    n, c, h, w = x.shape
    if target_h < h:
        raise ShapeError(f"target height {target_h} is smaller than source {h}", dim="height")
    if target_w < w:
        raise ShapeError(f"target width {target_w} is smaller than source {w}", dim="width")
    if (target_h, target_w) == (h, w):
        return emit("upsample_bilinear", x.data.copy(), (x,), lambda g: (g,))
    mh = _interp_matrix(h, target_h, x.dtype)
    mw = _interp_matrix(w, target_w, x.dtype)
    out = np.einsum("ph,nchw,qw->ncpq", mh, x.data, mw, optimize=True)

    def rule(g: np.ndarray):
        return (np.einsum("ph,ncpq,qw->nchw", mh, g, mw, optimize=True),)

    return emit("upsample_bilinear", np.ascontiguousarray(out), (x,), rule)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add needs identical shapes, got {a.shape} and {b.shape}", dim=_first_diff(a.shape, b.shape))
    return emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul needs identical shapes, got {a.shape} and {b.shape}", dim=_first_diff(a.shape, b.shape))
    return emit("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return emit("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    z = x.data
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return emit("sigmoid", out, (x,), lambda g: (g * out * (1 - out),))


def elementwise(op_kind: str, *operands: Tensor) -> Tensor:
    """Dispatch by name: ``add`` takes two operands, ``relu``/``sigmoid`` one."""
    table = {"add": (add, 2), "relu": (relu, 1), "sigmoid": (sigmoid, 1), "mul": (mul, 2)}
    if op_kind not in table:
        raise ValueError(f"unknown elementwise op {op_kind!r}")
    fn, arity = table[op_kind]
    if len(operands) != arity:
        raise TypeError(f"{op_kind} takes {arity} operand(s), got {len(operands)}")
    return fn(*operands)


def channel_affine(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """Per-channel ``x * scale + shift`` (stands in for batch norm)."""
    c = x.shape[1]
    if scale.data.size != c or shift.data.size != c:
        raise ShapeError(f"affine parameters must have {c} values", dim="channels")
    s = scale.data.reshape(1, c, 1, 1)
    out = x.data * s + shift.data.reshape(1, c, 1, 1)

    def rule(g: np.ndarray):
        gs = (g * x.data).sum(axis=(0, 2, 3)).reshape(scale.shape)
        gb = g.sum(axis=(0, 2, 3)).reshape(shift.shape)
        return g * s, gs, gb

    return emit("channel_affine", out, (x, scale, shift), rule)


def sum_all(x: Tensor) -> Tensor:
    total = x.data.sum(dtype=x.dtype).reshape(1, 1, 1, 1)
    return emit("sum", total, (x,), lambda g: (np.broadcast_to(g.reshape(()), x.shape).astype(x.dtype),))


def mean_all(x: Tensor) -> Tensor:
    size = x.data.size
    total = (x.data.sum(dtype=x.dtype) / size).reshape(1, 1, 1, 1).astype(x.dtype)
    return emit("mean", total, (x,), lambda g: (np.full(x.shape, g.reshape(()) / size, dtype=x.dtype),))


def _first_diff(a, b) -> str:
    for name, p, q in zip(("batch", "channels", "height", "width"), a, b):
        if p != q:
            return name
    return "shape"


# --------------------------------------------------------------------------
# parameters and optimisation
# --------------------------------------------------------------------------


class ParameterStore(Mapping[str, Tensor]):
    """Named trainable tensors, iterated in lexicographic name order."""

    def __init__(self, entries: Mapping[str, Tensor] | None = None):
        self._entries: dict[str, Tensor] = {}
        self._velocity: dict[str, np.ndarray] = {}
        for name, t in (entries or {}).items():
            self.add(name, t)

    def add(self, name: str, value) -> Tensor:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        t.name = name
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._entries[name]
        except KeyError:
            raise KeyError(f"no parameter named {name!r}") from None

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._entries))

    def __len__(self) -> int:
        return len(self._entries)

    def num_values(self) -> int:
        return sum(t.data.size for t in self._entries.values())

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad = None

    def astype(self, dtype) -> ParameterStore:
        """Detached copy with every parameter cast to ``dtype``."""
        return ParameterStore({k: Tensor(t.data, dtype=dtype) for k, t in self.items()})

    def copy(self) -> ParameterStore:
        return self.astype(DTYPE)

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.items()}


def sgd_step(store: ParameterStore, lr: float, momentum: float = 0.0, weight_decay: float = 0.0) -> None:
    """Momentum SGD: ``v = momentum*v + grad + wd*param; param -= lr*v``.

    Gradients are cleared afterwards.
    """
    missing = [k for k, t in store.items() if t.grad is None]
    if missing:
        raise RuntimeError(f"parameters without gradient: {', '.join(missing)}")
    for name, t in store.items():
        v = store._velocity.get(name)
        step = t.grad + weight_decay * t.data if weight_decay else t.grad
        v = step if v is None else momentum * v + step
        store._velocity[name] = v
        t.data = (t.data - lr * v).astype(t.data.dtype)
        t.grad = None


def init_conv(rng: np.random.Generator, out_ch: int, in_ch: int, k: int) -> np.ndarray:
    """He-normal weights, std = sqrt(2 / fan_in)."""
    std = np.sqrt(2.0 / (in_ch * k * k))
    return (rng.standard_normal((out_ch, in_ch, k, k)) * std).astype(DTYPE)


# --------------------------------------------------------------------------
# checkpoint container
# --------------------------------------------------------------------------

MAGIC = b"RCNK"
FORMAT_VERSION = 1


def save_checkpoint(store: Mapping[str, Tensor], path: str | Path) -> None:
    """Write ``store`` as RCNK: magic, version, count, then named float32 entries."""
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(store))]
    for name in sorted(store):
        t = store[name]
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<4I", *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> ParameterStore:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not an RCNK checkpoint")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    store = ParameterStore()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos : pos + nlen].decode("utf-8")
        pos += nlen
        dims = struct.unpack_from("<4I", buf, pos)
        pos += 16
        size = int(np.prod(dims))
        data = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(dims)
        pos += 4 * size
        store.add(name, Tensor(data.astype(DTYPE)))
    if pos != len(buf):
        raise ValueError(f"{path}: {len(buf) - pos} trailing bytes")
    return store
