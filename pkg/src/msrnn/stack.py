"""The N-layer recurrent stack, flat or as a multi-scale mirror pyramid.

Layer ``l`` runs at linear scale ``2**-level[l]`` of the input frame.  On the
way up the stack the hidden state is max-pooled when the next layer is
coarser and bilinearly upsampled when it is finer.  In ``unet`` skip mode
the hidden state of encoder layer ``l`` is added to the input of decoder
layer ``N-1-l``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .cells import (
    CellOutput,
    CellSpec,
    CellStepIO,
    MemoryList,
    build_cell,
    model_param_count,
    zero_memories,
)
from .tensor import (
    DTYPE,
    Parameter,
    ShapeError,
    Tape,
    Tensor,
    add,
    conv2d,
    hadamard,
    maxpool2,
    upsample_bilinear2,
)

SKIP_MODES = ("none", "unet")


class ConfigError(ValueError):
    """Invalid stack or training configuration."""


def scale_levels(n_layers: int, multiscale: bool) -> list[int]:
    """Per-layer pooling depth; layer l runs at linear scale 2**-level."""
    if n_layers < 1:
        raise ConfigError("need at least one layer")
    if not multiscale:
        return [0] * n_layers
    return [min(l, n_layers - 1 - l) for l in range(n_layers)]


def scale_schedule(n_layers: int, multiscale: bool) -> list[Fraction]:
    """Linear scale factor of every layer, e.g. [1, 1/2, 1/4, 1/4, 1/2, 1] for N=6."""
    return [Fraction(1, 2 ** d) for d in scale_levels(n_layers, multiscale)]


def required_divisor(n_layers: int, multiscale: bool) -> int:
    return 2 ** max(scale_levels(n_layers, multiscale))


def skip_pairs(n_layers: int) -> dict[int, int]:
    """Decoder layer -> encoder layer it receives a skip from (unet mode)."""
    return {n_layers - 1 - e: e for e in range(n_layers) if e < n_layers - 1 - e}


@dataclass(frozen=True)
class StackConfig:
    cell: CellSpec = field(default_factory=CellSpec)
    layers: int = 6
    multiscale: bool = False
    skip: str = "none"
    in_channels: int = 1
    out_channels: int = 1
    m: int = 10
    n: int = 10
    height: int | None = None
    width: int | None = None

    def validate(self) -> None:
        if self.layers < 1 or self.m < 1 or self.n < 1:
            raise ConfigError("layers, m and n must all be >= 1")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("channel counts must be >= 1")
        if self.skip not in SKIP_MODES:
            raise ConfigError(f"skip mode must be one of {SKIP_MODES}, got {self.skip!r}")
        if self.skip == "unet" and not self.multiscale:
            raise ConfigError("skip=unet requires the multi-scale variant")
        for extent in (self.height, self.width):
            if extent is not None:
                check_divisible(extent, extent, self.layers, self.multiscale)


def check_divisible(height: int, width: int, n_layers: int, multiscale: bool) -> None:
    div = required_divisor(n_layers, multiscale)
    if height % div or width % div:
        raise ShapeError(
            f"frame size {height}x{width} must be divisible by {div} "
            f"for a {n_layers}-layer {'multi-scale' if multiscale else 'flat'} stack"
        )


@dataclass
class StackState:
    memories: list[MemoryList]
    zigzag: Tensor | None = None


def resample(t: Tensor, src_level: int, dst_level: int) -> Tensor:
    while src_level < dst_level:
        t = maxpool2(t)
        src_level += 1
    while src_level > dst_level:
        t = upsample_bilinear2(t)
        src_level -= 1
    return t


def _zeros(batch: int, channels: int, h: int, w: int) -> Tensor:
    return Tensor._wrap(np.zeros((batch, channels, h, w), dtype=DTYPE))


class Model:
    """A built stack: cells at their scheduled scales plus a 1x1 output head."""

    def __init__(self, config: StackConfig, seed: int = 0):
        config.validate()
        self.config = config
        self.levels = scale_levels(config.layers, config.multiscale)
        self.skips = skip_pairs(config.layers) if config.skip == "unet" else {}
        rng = np.random.default_rng(seed)
        spec = config.cell
        self.cells = []
        for l in range(config.layers):
            cin = config.in_channels if l == 0 else spec.hidden
            self.cells.append(build_cell(spec, cin, rng, f"layers.{l}"))
        bound = 1.0 / np.sqrt(spec.hidden)
        self.head_w = Parameter(
            rng.uniform(-bound, bound, size=(config.out_channels, spec.hidden, 1, 1)), "head.w"
        )
        self.head_b = Parameter(np.zeros((1, config.out_channels, 1, 1)), "head.b")

    @property
    def schedule(self) -> list[Fraction]:
        return [Fraction(1, 2 ** d) for d in self.levels]

    def parameters(self) -> list[Parameter]:
        params = []
        for cell in self.cells:
            params.extend(cell.parameters())
        params.extend([self.head_w, self.head_b])
        return params

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def exact_param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def model_param_count(self) -> int:
        return self.config.layers * model_param_count(self.config.cell)

    def layer_size(self, layer: int, height: int, width: int) -> tuple[int, int]:
        d = self.levels[layer]
        return height >> d, width >> d

    def init_state(self, batch: int, height: int, width: int) -> StackState:
        check_divisible(height, width, self.config.layers, self.config.multiscale)
        spec = self.config.cell
        mems = []
        for l in range(self.config.layers):
            h, w = self.layer_size(l, height, width)
            mems.append(zero_memories(spec, batch, h, w))
        zig = None
        if spec.uses_zigzag:
            h, w = self.layer_size(self.config.layers - 1, height, width)
            zig = _zeros(batch, spec.hidden, h, w)
        return StackState(mems, zig)

    def step(self, x: Tensor, state: StackState, trace: list | None = None):
        """One timestep through every layer; returns (next-frame prediction, new state)."""
        b, _, height, width = x.shape
        if x.shape[1] != self.config.in_channels:
            raise ShapeError(f"expected {self.config.in_channels} input channels, got {x.shape[1]}")
        check_divisible(height, width, self.config.layers, self.config.multiscale)
        spec = self.config.cell
        top = self.config.layers - 1
        lv = self.levels
        hs: list[Tensor] = []
        new_mems: list[MemoryList] = []
        m = state.zigzag
        m_level = lv[top]
        for l, cell in enumerate(self.cells):
            if l == 0:
                inp = x
            else:
                inp = resample(hs[l - 1], lv[l - 1], lv[l])
                if l in self.skips:
                    inp = add(inp, hs[self.skips[l]])
            m_in = None
            if spec.uses_zigzag:
                m_in = resample(m, m_level, lv[l])
            diag = None
            if spec.uses_diagonal:
                if l == 0:
                    h, w = self.layer_size(0, height, width)
                    diag = _zeros(b, spec.hidden, h, w)
                else:
                    diag = resample(state.memories[l - 1]["H"], lv[l - 1], lv[l])
            out: CellOutput = cell.step(CellStepIO(inp, state.memories[l], m_in, diag))
            if trace is not None:
                trace.append({"layer": l, "x": inp, "m": m_in, "diag": diag, "h": out.h})
            hs.append(out.h)
            new_mems.append(out.memories)
            if spec.uses_zigzag:
                m, m_level = out.m, lv[l]
        pred = conv2d(hs[-1], self.head_w, self.head_b)
        return pred, StackState(new_mems, m if spec.uses_zigzag else None)


def build_stack(config: StackConfig, seed: int = 0) -> Model:
    return Model(config, seed)


def step_time(model: Model, x: Tensor, state: StackState, trace: list | None = None):
    return model.step(x, state, trace)


def forward_sequence(model: Model, frames: np.ndarray, mask: np.ndarray | None = None,
                     trace: list | None = None) -> list[Tensor]:
    """Run m+n-1 recurrent steps and return the predictions X̂_1 .. X̂_{m+n-1}.

    ``frames`` is ``(b, m+n, c, h, w)``.  ``mask`` is ``(b, n-1)`` booleans:
    True feeds the ground-truth frame to that decoder step, False feeds the
    model's previous prediction.  ``None`` means inference (all False).
    """
    cfg = model.config
    frames = np.asarray(frames, dtype=DTYPE)
    if frames.ndim != 5:
        raise ShapeError(f"frames must be (b, t, c, h, w), got shape {frames.shape}")
    b, total, _, height, width = frames.shape
    if total != cfg.m + cfg.n:
        raise ShapeError(f"sequence has {total} frames, stack expects m+n = {cfg.m + cfg.n}")
    if mask is None:
        mask = np.zeros((b, cfg.n - 1), dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (b, cfg.n - 1):
        raise ShapeError(f"sampling mask must be {(b, cfg.n - 1)}, got {mask.shape}")

    state = model.init_state(b, height, width)
    preds: list[Tensor] = []
    for t in range(cfg.m + cfg.n - 1):
        if t < cfg.m:
            x = Tensor._wrap(frames[:, t].copy())
        else:
            x = _mix(frames[:, t], preds[-1], mask[:, t - cfg.m])
        tstep = [] if trace is not None else None
        pred, state = model.step(x, state, tstep)
        if trace is not None:
            trace.append(tstep)
        preds.append(pred)
    return preds


def _mix(truth: np.ndarray, pred: Tensor, use_truth: np.ndarray) -> Tensor:
    if use_truth.all():
        return Tensor._wrap(truth.copy())
    if not use_truth.any():
        return pred
    sel = use_truth.astype(DTYPE)[:, None, None, None]
    keep = Tensor._wrap(np.broadcast_to(1.0 - sel, pred.shape).astype(DTYPE))
    gt = Tensor._wrap((truth * sel).astype(DTYPE))
    return add(hadamard(pred, keep), gt)


def receptive_field_theoretical(schedule, k: int, layer: int) -> int:
    """Receptive field of layer ``layer`` along the vertical path.

    One cell step counts as one k x k convolution; the sampling jump doubles
    after each pooling and halves after each upsampling.
    """
    scales = [Fraction(s) for s in schedule]
    if not 0 <= layer < len(scales):
        raise ValueError(f"layer {layer} outside 0..{len(scales) - 1}")
    rf, jump = 1, Fraction(1)
    for l in range(layer + 1):
        if l > 0:
            jump *= scales[l - 1] / scales[l]
        rf += (k - 1) * jump
    return int(rf)


@dataclass(frozen=True)
class GradientBox:
    top: int
    left: int
    bottom: int
    right: int

    @property
    def height(self) -> int:
        return self.bottom - self.top + 1

    @property
    def width(self) -> int:
        return self.right - self.left + 1


def receptive_field_empirical(model: Model, layer: int, t: int = 0,
                              position: tuple[int, int] | None = None,
                              size: tuple[int, int] = (64, 64),
                              frame_value: float = 1.0) -> GradientBox:
    """Bounding box of the input-frame gradient support of one hidden unit.

    Feeds ``t + 1`` constant frames, then differentiates channel 0 of
    layer ``layer``'s hidden state at ``position`` (layer coordinates,
    default: centre) at step ``t`` with respect to frame ``t``.  A constant
    frame keeps pooling windows tied inside the image so the
    first-occurrence rule makes the measurement deterministic.
    """
    cfg = model.config
    if not 0 <= layer < cfg.layers:
        raise ValueError(f"layer {layer} outside 0..{cfg.layers - 1}")
    height, width = size
    lh, lw = model.layer_size(layer, height, width)
    if position is None:
        position = (lh // 2, lw // 2)
    py, px = position
    if not (0 <= py < lh and 0 <= px < lw):
        raise ValueError(f"probe position {position} outside layer extent {lh}x{lw}")
    frames = [Tensor.full((1, cfg.in_channels, height, width), frame_value) for _ in range(t + 1)]
    with Tape() as tape:
        tape.watch(frames[t])
        state = model.init_state(1, height, width)
        for step in range(t + 1):
            trace: list = []
            _, state = model.step(frames[step], state, trace)
        h = trace[layer]["h"]
        seed = np.zeros(h.shape, dtype=DTYPE)
        seed[0, 0, py, px] = 1.0
        tape.backward(h, seed=seed)
        g = np.abs(tape.grad(frames[t])).sum(axis=(0, 1))
    rows = np.flatnonzero((g > 1e-12).any(axis=1))
    cols = np.flatnonzero((g > 1e-12).any(axis=0))
    if rows.size == 0:
        return GradientBox(py, px, py - 1, px - 1)
    return GradientBox(int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1]))
