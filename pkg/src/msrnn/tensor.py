"""Dense rank-4 float32 tensors with a tape for reverse-mode differentiation.

Operations executed while a :class:`Tape` is active are recorded together
with the values their backward rules need.  Outside a tape the same
operations run as plain numpy code (inference mode).

Layout is always ``(batch, channels, height, width)``; scalars are 1x1x1x1.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float32

__all__ = [
    "DTYPE",
    "ShapeError",
    "NumericError",
    "Tensor",
    "Parameter",
    "Tape",
    "active_tape",
    "backward",
    "conv2d",
    "maxpool2",
    "upsample_bilinear2",
    "sigmoid",
    "tanh",
    "add",
    "sub",
    "hadamard",
    "scale",
    "absolute",
    "square",
    "sum_all",
    "mean_all",
    "split_channels",
    "tile_channels",
    "elementwise",
    "Adam",
    "adam_step",
]


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class NumericError(ArithmeticError):
    """Raised when a non-finite value shows up where training cannot continue."""


class Tensor:
    """Immutable rank-4 float32 array, optionally bound to a tape node."""

    __slots__ = ("data", "_tape", "_node")

    def __init__(self, data):
        arr = np.array(data, dtype=DTYPE, copy=True)
        if arr.ndim != 4:
            raise ShapeError(f"tensors are rank 4 (b, c, h, w); got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ShapeError(f"all extents must be >= 1; got shape {arr.shape}")
        arr.flags.writeable = False
        self.data = arr
        self._tape = None
        self._node = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # internal constructor: arr is already a fresh float32 rank-4 array
        t = cls.__new__(cls)
        arr.flags.writeable = False
        t.data = arr
        t._tape = None
        t._node = None
        return t

    @classmethod
    def zeros(cls, shape: Sequence[int]) -> "Tensor":
        return cls._wrap(np.zeros(tuple(shape), dtype=DTYPE))

    @classmethod
    def full(cls, shape: Sequence[int], value: float) -> "Tensor":
        return cls._wrap(np.full(tuple(shape), value, dtype=DTYPE))

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"{type(self).__name__}(shape={self.shape})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return hadamard(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__


class Parameter(Tensor):
    """A trainable tensor with its gradient accumulator and Adam moments."""

    __slots__ = ("name", "grad", "m", "v")

    def __init__(self, data, name: str = ""):
        super().__init__(data)
        self.name = name
        self.grad = np.zeros_like(self.data)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)

    def assign(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=DTYPE)
        if values.shape != self.shape:
            raise ShapeError(f"{self.name}: expected shape {self.shape}, got {values.shape}")
        arr = values.copy()
        arr.flags.writeable = False
        self.data = arr

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


# ---------------------------------------------------------------------------
# tape


@dataclass
class _Record:
    kind: str
    inputs: tuple[int, ...]
    out: int
    backward: Callable[[np.ndarray], tuple]
    size: int
    flops: int


_TAPES: list["Tape"] = []


def active_tape() -> "Tape | None":
    return _TAPES[-1] if _TAPES else None


class Tape:
    """Ordered record of the operations executed while the tape is active.

    Use as a context manager; nested tapes shadow outer ones.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._leaf_nodes: dict[int, int] = {}
        self._leaves: list[Tensor] = []
        self._n_nodes = 0
        self._leaf_grads: dict[int, np.ndarray] = {}

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def stored_elements(self) -> int:
        """Element count of every recorded operation's output."""
        return sum(r.size for r in self.records)

    @property
    def conv_flops(self) -> int:
        return sum(r.flops for r in self.records)

    def counts_by_kind(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for r in self.records:
            out[r.kind] = out.get(r.kind, 0) + 1
        return out

    def node_of(self, t: Tensor) -> int:
        if t._tape is self:
            return t._node
        node = self._leaf_nodes.get(id(t))
        if node is None:
            node = self._n_nodes
            self._n_nodes += 1
            self._leaf_nodes[id(t)] = node
            self._leaves.append(t)  # keeps id(t) stable for the tape's lifetime
        return node

    def watch(self, t: Tensor) -> Tensor:
        """Register ``t`` as a leaf so its gradient can be queried."""
        self.node_of(t)
        return t

    def _append(self, kind, inputs, out: Tensor, backward, flops) -> None:
        in_nodes = tuple(self.node_of(t) for t in inputs)
        out._tape = self
        out._node = self._n_nodes
        self._n_nodes += 1
        self.records.append(_Record(kind, in_nodes, out._node, backward, out.size, flops))

    def backward(self, loss: Tensor, seed: np.ndarray | None = None) -> None:
        if loss._tape is not self:
            raise ValueError("loss was not produced on this tape")
        if seed is None:
            if loss.size != 1:
                raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
            seed = np.ones(loss.shape, dtype=DTYPE)
        grads: dict[int, np.ndarray] = {loss._node: np.asarray(seed, dtype=DTYPE)}
        for rec in reversed(self.records):
            g = grads.pop(rec.out, None)
            if g is None:
                continue
            for node, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None:
                    continue
                prev = grads.get(node)
                grads[node] = gi if prev is None else prev + gi
        self._leaf_grads = {}
        for t in self._leaves:
            node = self._leaf_nodes[id(t)]
            g = grads.get(node)
            if g is None:
                continue
            self._leaf_grads[node] = g
            if isinstance(t, Parameter):
                t.grad = t.grad + g

    def grad(self, t: Tensor) -> np.ndarray:
        """Gradient of the last backward pass with respect to leaf ``t``."""
        node = self._leaf_nodes.get(id(t))
        g = self._leaf_grads.get(node) if node is not None else None
        return np.zeros_like(t.data) if g is None else g


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every parameter reachable from the scalar ``loss``."""
    if loss._tape is None:
        raise ValueError("loss is not on a tape; run the forward pass inside `with Tape():`")
    loss._tape.backward(loss)


def _emit(kind: str, inputs: Sequence[Tensor], out: np.ndarray, bwd, flops: int = 0) -> Tensor:
    t = Tensor._wrap(out)
    tape = active_tape()
    if tape is not None:
        tape._append(kind, inputs, t, bwd, flops)
    return t


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# convolution, pooling, resampling


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(b, c, h, w) -> (b, c*k*k, h*w) patches of the same-padded input."""
    b, c, h, w = x.shape
    if k == 1:
        return x.reshape(b, c, h * w)
    p = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = np.empty((b, c, k, k, h, w), dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + h, j:j + w]
    return cols.reshape(b, c * k * k, h * w)


def _col2im(cols: np.ndarray, shape: tuple, k: int) -> np.ndarray:
    b, c, h, w = shape
    if k == 1:
        return cols.reshape(b, c, h, w)
    p = (k - 1) // 2
    cols = cols.reshape(b, c, k, k, h, w)
    gp = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            gp[:, :, i:i + h, j:j + w] += cols[:, :, i, j]
    return gp[:, :, p:p + h, p:p + w].copy()


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-padded stride-1 cross-correlation.

    ``weight`` is ``(cout, cin, k, k)`` with odd ``k``; ``bias`` is a
    ``(1, cout, 1, 1)`` tensor or None.
    """
    b, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels but weight expects {wcin}")
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square with odd size, got {kh}x{kw}")
    if bias is not None and bias.shape != (1, cout, 1, 1):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != {(1, cout, 1, 1)}")
    k = kh
    cols = _im2col(x.data, k)
    wmat = weight.data.reshape(cout, cin * k * k)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data.reshape(1, cout, 1)
    y = out.reshape(b, cout, h, w)

    def bwd(g):
        go = g.reshape(b, cout, h * w)
        gw = np.matmul(go, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        gx = _col2im(np.matmul(wmat.T, go), x.shape, k)
        if bias is None:
            return gx, gw
        return gx, gw, go.sum(axis=(0, 2)).reshape(1, cout, 1, 1)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit("conv2d", inputs, y, bwd, flops=2 * b * cout * cin * h * w * k * k)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties route the gradient to the first element."""
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2: height and width must be divisible by 2, got {h}x{w}")
    win = x.data.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(b, c, h // 2, w // 2, 4)
    idx = np.argmax(win, axis=-1)[..., None]
    y = np.take_along_axis(win, idx, axis=-1)[..., 0].copy()

    def bwd(g):
        gw = np.zeros((b, c, h // 2, w // 2, 4), dtype=DTYPE)
        np.put_along_axis(gw, idx, g[..., None], axis=-1)
        gw = gw.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gw.reshape(b, c, h, w),)

    return _emit("maxpool2", (x,), y, bwd)


_INTERP_CACHE: dict[int, np.ndarray] = {}


def _interp_matrix(n: int) -> np.ndarray:
    """(2n, n) half-pixel bilinear weights with edge clamping."""
    mat = _INTERP_CACHE.get(n)
    if mat is None:
        mat = np.zeros((2 * n, n), dtype=DTYPE)
        for o in range(2 * n):
            src = max((o + 0.5) / 2.0 - 0.5, 0.0)
            i0 = min(int(np.floor(src)), n - 1)
            i1 = min(i0 + 1, n - 1)
            lam = src - i0
            mat[o, i0] += 1.0 - lam
            mat[o, i1] += lam
        mat.flags.writeable = False
        _INTERP_CACHE[n] = mat
    return mat


def upsample_bilinear2(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    ah = _interp_matrix(h)
    aw = _interp_matrix(w)
    y = np.matmul(np.matmul(ah, x.data), aw.T)

    def bwd(g):
        return (np.matmul(np.matmul(ah.T, g), aw),)

    return _emit("upsample_bilinear2", (x,), y, bwd)


# ---------------------------------------------------------------------------
# elementwise


def sigmoid(x: Tensor) -> Tensor:
    # tanh form is overflow-free and gives exactly 0.5 at 0
    y = (0.5 * np.tanh(0.5 * x.data) + 0.5).astype(DTYPE)
    return _emit("sigmoid", (x,), y, lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _emit("tanh", (x,), y, lambda g: (g * (1.0 - y * y),))


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "hadamard")
    ad, bd = a.data, b.data
    return _emit("hadamard", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale(x: Tensor, alpha: float) -> Tensor:
    a = DTYPE(alpha)
    return _emit("scale", (x,), x.data * a, lambda g: (g * a,))


def absolute(x: Tensor) -> Tensor:
    s = np.sign(x.data)
    return _emit("abs", (x,), np.abs(x.data), lambda g: (g * s,))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _emit("square", (x,), xd * xd, lambda g: (2.0 * g * xd,))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    y = np.array(x.data.sum(dtype=np.float64), dtype=DTYPE).reshape(1, 1, 1, 1)
    return _emit("sum", (x,), y, lambda g: (np.broadcast_to(g.reshape(()), shape).astype(DTYPE),))


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    y = np.array(x.data.mean(dtype=np.float64), dtype=DTYPE).reshape(1, 1, 1, 1)
    return _emit("mean", (x,), y, lambda g: (np.full(shape, g.reshape(()) / n, dtype=DTYPE),))


def split_channels(x: Tensor, parts: int) -> list[Tensor]:
    """Split along the channel axis into ``parts`` equal tensors."""
    b, c, h, w = x.shape
    if c % parts:
        raise ShapeError(f"split_channels: {c} channels not divisible by {parts}")
    step = c // parts
    outs = []
    for p in range(parts):
        lo, hi = p * step, (p + 1) * step

        def bwd(g, lo=lo, hi=hi):
            full = np.zeros((b, c, h, w), dtype=DTYPE)
            full[:, lo:hi] = g
            return (full,)

        outs.append(_emit("split", (x,), x.data[:, lo:hi].copy(), bwd))
    return outs


def tile_channels(x: Tensor, channels: int) -> Tensor:
    """Repeat a single-channel tensor across ``channels`` channels."""
    if x.shape[1] != 1:
        raise ShapeError(f"tile_channels expects 1 channel, got {x.shape[1]}")
    y = np.repeat(x.data, channels, axis=1)
    return _emit("tile", (x,), y, lambda g: (g.sum(axis=1, keepdims=True),))


_UNARY = {"sigmoid": sigmoid, "tanh": tanh}
_BINARY = {"add": add, "sub": sub, "hadamard": hadamard}


def elementwise(kind: str, *operands, alpha: float | None = None) -> Tensor:
    """Dispatch by name: sigmoid, tanh, add, sub, hadamard, scale."""
    if kind in _UNARY:
        return _UNARY[kind](*operands)
    if kind in _BINARY:
        return _BINARY[kind](*operands)
    if kind == "scale":
        return scale(operands[0], alpha if alpha is not None else operands[1])
    raise ValueError(f"unknown elementwise op {kind!r}")


# ---------------------------------------------------------------------------
# optimizer


def adam_step(params: Iterable[Parameter], lr: float, betas=(0.9, 0.999),
              eps: float = 1e-8, t: int = 1) -> None:
    """One bias-corrected Adam update, then zero the gradients."""
    if t < 1:
        raise ValueError("adam step index starts at 1")
    params = list(params)
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient in parameter {p.name!r}")
    b1, b2 = betas
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p in params:
        g = p.grad.astype(DTYPE, copy=False)
        p.m = (b1 * p.m + (1.0 - b1) * g).astype(DTYPE)
        p.v = (b2 * p.v + (1.0 - b2) * g * g).astype(DTYPE)
        mhat = p.m / c1
        vhat = p.v / c2
        p.assign(p.data - lr * mhat / (np.sqrt(vhat) + eps))
        p.zero_grad()


class Adam:
    """Stateful wrapper around :func:`adam_step` that tracks the step index."""

    def __init__(self, params: Sequence[Parameter], lr: float = 3e-4,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0

    def step(self) -> None:
        adam_step(self.params, self.lr, self.betas, self.eps, self.t + 1)
        self.t += 1

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()
