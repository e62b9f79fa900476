"""Recurrent cells behind a common step interface.

A cell consumes a :class:`CellStepIO` (layer input, memory list, optional
zigzag memory and optional diagonal hidden state) and returns a
:class:`CellOutput`.  Two kinds exist: the ConvLSTM cell and a
parameter-free probe cell used to check tensor routing in the stack.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    DTYPE,
    Parameter,
    ShapeError,
    Tensor,
    add,
    conv2d,
    hadamard,
    sigmoid,
    split_channels,
    tanh,
    tile_channels,
)

ROLES = ("H", "C", "Z", "N", "S", "F", "D", "MS", "MT")
UTILDE = {"convlstm": 8, "probe": 0}

MemoryList = dict  # ordered slot name -> Tensor


@dataclass(frozen=True)
class CellSpec:
    kind: str = "convlstm"
    hidden: int = 64
    kernel: int = 3
    uses_zigzag: bool = False
    uses_diagonal: bool = False
    slots: tuple[str, ...] = ("H", "C")

    def __post_init__(self):
        if self.kind not in UTILDE:
            raise ValueError(f"unknown cell kind {self.kind!r}")
        if self.hidden < 1 or self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("hidden channels must be >= 1 and the kernel size odd")
        if len(set(self.slots)) != len(self.slots):
            raise ValueError(f"duplicate memory slots in {self.slots}")
        if "H" not in self.slots:
            raise ValueError("memory list must contain slot H")
        unknown = set(self.slots) - set(ROLES)
        if unknown:
            raise ValueError(f"unknown memory roles {sorted(unknown)}")
        if self.kind == "convlstm" and (
            self.slots != ("H", "C") or self.uses_zigzag or self.uses_diagonal
        ):
            raise ValueError("convlstm carries slots (H, C) and no zigzag/diagonal paths")


@dataclass
class CellStepIO:
    x: Tensor
    memories: MemoryList
    m: Tensor | None = None
    diag: Tensor | None = None


@dataclass
class CellOutput:
    h: Tensor
    memories: MemoryList = field(default_factory=dict)
    m: Tensor | None = None


def model_param_count(spec: CellSpec) -> int:
    """Complexity-model parameter count: Utilde * c^2 * k^2 (no biases, cin = c)."""
    return UTILDE[spec.kind] * spec.hidden ** 2 * spec.kernel ** 2


def cell_param_count(spec: CellSpec, in_channels: int | None = None) -> int:
    """Exact number of instantiated parameters, including biases."""
    if spec.kind == "probe":
        return 0
    c, k = spec.hidden, spec.kernel
    cin = c if in_channels is None else in_channels
    return 4 * c * cin * k * k + 4 * c + 4 * c * c * k * k


def _check_scale(io: CellStepIO) -> tuple[int, int]:
    hw = io.x.shape[2:]
    present = [("x", io.x), *io.memories.items()]
    if io.m is not None:
        present.append(("m", io.m))
    if io.diag is not None:
        present.append(("diag", io.diag))
    for name, t in present:
        if t.shape[2:] != hw:
            raise ShapeError(
                f"scale mismatch: {name} is {t.shape[2]}x{t.shape[3]} but x is {hw[0]}x{hw[1]}"
            )
    return hw


class ConvLSTMCell:
    """ConvLSTM with convolutional input-to-state and state-to-state transitions.

    Gate order along the channel axis is (i, f, g, o).  Only the
    input-to-state convolution carries a bias.
    """

    def __init__(self, spec: CellSpec, in_channels: int, rng: np.random.Generator, name: str):
        self.spec = spec
        self.in_channels = in_channels
        c, k = spec.hidden, spec.kernel
        bx = 1.0 / np.sqrt(in_channels * k * k)
        bh = 1.0 / np.sqrt(c * k * k)
        bias = rng.uniform(-bx, bx, size=(1, 4 * c, 1, 1))
        bias[:, c:2 * c] = 1.0  # forget gate
        self.wx = Parameter(rng.uniform(-bx, bx, size=(4 * c, in_channels, k, k)), f"{name}.wx")
        self.bx = Parameter(bias, f"{name}.bx")
        self.wh = Parameter(rng.uniform(-bh, bh, size=(4 * c, c, k, k)), f"{name}.wh")

    def parameters(self) -> list[Parameter]:
        return [self.wx, self.bx, self.wh]

    def step(self, io: CellStepIO) -> CellOutput:
        return convlstm_step(io, self.wx, self.bx, self.wh)


def convlstm_step(io: CellStepIO, wx: Tensor, bx: Tensor | None, wh: Tensor) -> CellOutput:
    h_prev, c_prev = io.memories["H"], io.memories["C"]
    if h_prev.shape != c_prev.shape:
        raise ShapeError(f"H {h_prev.shape} and C {c_prev.shape} must match")
    _check_scale(io)
    z = add(conv2d(io.x, wx, bx), conv2d(h_prev, wh))
    zi, zf, zg, zo = split_channels(z, 4)
    i, f, g, o = sigmoid(zi), sigmoid(zf), tanh(zg), sigmoid(zo)
    c = add(hadamard(f, c_prev), hadamard(i, g))
    h = hadamard(o, tanh(c))
    return CellOutput(h=h, memories={"H": h, "C": c})


class ProbeCell:
    """Parameter-free routing oracle.

    h = x + H + m + diag (absent terms count as zero), every non-H slot is
    incremented by one, and the zigzag memory leaves as m + h.  On
    integer-valued inputs every output is an exact integer.
    """

    def __init__(self, spec: CellSpec, in_channels: int):
        self.spec = spec
        self.in_channels = in_channels

    def parameters(self) -> list[Parameter]:
        return []

    def step(self, io: CellStepIO) -> CellOutput:
        return probe_step(io, self.spec.hidden)


def probe_step(io: CellStepIO, hidden: int | None = None) -> CellOutput:
    _check_scale(io)
    x = io.x
    c = io.memories["H"].shape[1]
    if x.shape[1] != c:
        if x.shape[1] != 1:
            raise ShapeError(f"probe: input has {x.shape[1]} channels, hidden has {c}")
        x = tile_channels(x, c)
    h = add(x, io.memories["H"])
    if io.m is not None:
        h = add(h, io.m)
    if io.diag is not None:
        h = add(h, io.diag)
    mems = {}
    for name, t in io.memories.items():
        mems[name] = h if name == "H" else add(t, Tensor.full(t.shape, 1.0))
    m_out = h if io.m is None else add(io.m, h)
    return CellOutput(h=h, memories=mems, m=m_out)


def build_cell(spec: CellSpec, in_channels: int, rng: np.random.Generator, name: str):
    if spec.kind == "convlstm":
        return ConvLSTMCell(spec, in_channels, rng, name)
    return ProbeCell(spec, in_channels)


def zero_memories(spec: CellSpec, batch: int, height: int, width: int) -> MemoryList:
    shape = (batch, spec.hidden, height, width)
    return {name: Tensor._wrap(np.zeros(shape, dtype=DTYPE)) for name in spec.slots}
