"""Moving MNIST generation, digit ingestion and the STF1 sequence file format.

STF1 layout (little-endian)::

    b"STF1" | u32 version=1 | u32 rank=5 | 5 x u32 dims [S, T, C, H, W] | float32 payload
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

GLYPH = 28
STF1_MAGIC = b"STF1"
STF1_VERSION = 1
IDX_IMAGE_MAGIC = 0x00000803
_U32_MAX = 2 ** 32 - 1


class FormatError(ValueError):
    """A file does not follow the expected binary layout."""


# ---------------------------------------------------------------------------
# digits


@dataclass(frozen=True)
class DigitSource:
    glyphs: np.ndarray  # (n, 28, 28) float32 in [0, 1]
    origin: str = "synthetic"

    def __post_init__(self):
        g = self.glyphs
        if g.ndim != 3 or g.shape[1:] != (GLYPH, GLYPH):
            raise ValueError(f"glyphs must be (n, 28, 28), got {g.shape}")
        if len(g) == 0:
            raise ValueError("digit source is empty")
        if g.min() < 0 or g.max() > 1:
            raise ValueError("glyph values must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.glyphs)


def load_idx(path) -> DigitSource:
    """Read an IDX image file (magic 0x00000803) of 28x28 uint8 images."""
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated IDX header")
    magic, n, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGE_MAGIC:
        raise FormatError(f"{path}: bad IDX magic 0x{magic:08x}")
    if (rows, cols) != (GLYPH, GLYPH):
        raise FormatError(f"{path}: images are {rows}x{cols}, expected 28x28")
    need = 16 + n * rows * cols
    if len(raw) < need:
        raise FormatError(f"{path}: truncated payload ({len(raw)} of {need} bytes)")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=n * rows * cols, offset=16)
    glyphs = pixels.reshape(n, rows, cols).astype(np.float32) / 255.0
    return DigitSource(glyphs, origin="idx-files")


def write_idx(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, rows, cols))
        f.write(images.tobytes())


# Stroke skeletons on a 0..1 box (x right, y down); one polyline per stroke.
_STROKES = {
    0: [[(0.5, 0.1), (0.8, 0.25), (0.8, 0.75), (0.5, 0.9), (0.2, 0.75), (0.2, 0.25), (0.5, 0.1)]],
    1: [[(0.35, 0.25), (0.55, 0.1), (0.55, 0.9)], [(0.35, 0.9), (0.75, 0.9)]],
    2: [[(0.2, 0.25), (0.45, 0.1), (0.75, 0.2), (0.75, 0.4), (0.2, 0.9), (0.8, 0.9)]],
    3: [[(0.2, 0.15), (0.75, 0.15), (0.45, 0.45), (0.8, 0.65), (0.55, 0.9), (0.2, 0.8)]],
    4: [[(0.65, 0.9), (0.65, 0.1), (0.2, 0.65), (0.85, 0.65)]],
    5: [[(0.8, 0.1), (0.25, 0.1), (0.22, 0.45), (0.7, 0.45), (0.8, 0.7), (0.55, 0.9), (0.2, 0.85)]],
    6: [[(0.7, 0.1), (0.3, 0.4), (0.22, 0.7), (0.5, 0.9), (0.78, 0.7), (0.6, 0.5), (0.25, 0.6)]],
    7: [[(0.2, 0.1), (0.8, 0.1), (0.4, 0.9)]],
    8: [[(0.5, 0.5), (0.25, 0.3), (0.5, 0.1), (0.75, 0.3), (0.5, 0.5),
         (0.22, 0.7), (0.5, 0.9), (0.78, 0.7), (0.5, 0.5)]],
    9: [[(0.75, 0.4), (0.5, 0.55), (0.25, 0.35), (0.5, 0.1), (0.75, 0.35), (0.7, 0.9)]],
}


def _segment_distance(px, py, a, b):
    ax, ay = a
    bx, by = b
    dx, dy = bx - ax, by - ay
    t = ((px - ax) * dx + (py - ay) * dy) / max(dx * dx + dy * dy, 1e-12)
    t = np.clip(t, 0.0, 1.0)
    return np.hypot(px - (ax + t * dx), py - (ay + t * dy))


def synthetic_glyphs(seed: int = 0) -> DigitSource:
    """Ten digit-like 28x28 glyphs drawn as thick anti-aliased strokes.

    The seed jitters stroke width, slant and placement slightly so different
    seeds give different handwriting.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:GLYPH, 0:GLYPH].astype(np.float64) + 0.5
    glyphs = np.zeros((10, GLYPH, GLYPH), dtype=np.float32)
    for digit, strokes in _STROKES.items():
        width = rng.uniform(1.6, 2.4)
        slant = rng.uniform(-0.15, 0.15)
        ox, oy = rng.uniform(-1.0, 1.0, size=2)
        dist = np.full(xx.shape, np.inf)
        for stroke in strokes:
            pts = [(4 + 20 * (x + slant * (0.5 - y)) + ox, 4 + 20 * y + oy) for x, y in stroke]
            for a, b in zip(pts[:-1], pts[1:]):
                dist = np.minimum(dist, _segment_distance(xx, yy, a, b))
        glyphs[digit] = np.clip(width + 0.5 - dist, 0.0, 1.0)
    return DigitSource(glyphs, origin="synthetic")


# ---------------------------------------------------------------------------
# moving sprites


@dataclass
class MovingSpriteState:
    x: float
    y: float
    vx: float
    vy: float
    glyph: int

    def advance(self, limit: float) -> None:
        """Move one frame, reflecting elastically off the box [0, limit]."""
        self.x, self.vx = _reflect(self.x + self.vx, self.vx, limit)
        self.y, self.vy = _reflect(self.y + self.vy, self.vy, limit)


def _reflect(pos: float, vel: float, limit: float) -> tuple[float, float]:
    if limit <= 0:
        return 0.0, vel
    # fold repeatedly in case a step overshoots more than one box width
    while pos < 0 or pos > limit:
        if pos < 0:
            pos, vel = -pos, -vel
        if pos > limit:
            pos, vel = 2 * limit - pos, -vel
    return pos, vel


def render_sprite(canvas: np.ndarray, glyph: np.ndarray, x: float, y: float) -> None:
    """Max-composite ``glyph`` with its top-left corner at subpixel (x, y)."""
    size = canvas.shape[0]
    ix, iy = int(np.floor(x)), int(np.floor(y))
    fx, fy = x - ix, y - iy
    patch = np.zeros((GLYPH + 1, GLYPH + 1), dtype=np.float64)
    patch[:GLYPH, :GLYPH] += (1 - fx) * (1 - fy) * glyph
    patch[:GLYPH, 1:] += fx * (1 - fy) * glyph
    patch[1:, :GLYPH] += (1 - fx) * fy * glyph
    patch[1:, 1:] += fx * fy * glyph
    # zero-weight rows/cols may hang past the border when x or y is integral
    ph = min(GLYPH + 1, size - iy)
    pw = min(GLYPH + 1, size - ix)
    if np.any(patch[ph:, :]) or np.any(patch[:, pw:]):
        raise ValueError("sprite crosses the frame border")
    region = canvas[iy:iy + ph, ix:ix + pw]
    np.maximum(region, patch[:ph, :pw].astype(canvas.dtype), out=region)


def _sequence_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def generate_sequence(source: DigitSource, digits: int, size: int, frames: int,
                      rng: np.random.Generator, speed_range=(2.0, 5.0)):
    """One sequence (T, 1, size, size) plus the sprite trajectories (T, d, 4)."""
    limit = float(size - GLYPH)
    sprites = []
    for _ in range(digits):
        x, y = rng.uniform(0.0, limit, size=2)
        speed = rng.uniform(*speed_range)
        theta = rng.uniform(0.0, 2 * np.pi)
        glyph = int(rng.integers(len(source)))
        sprites.append(MovingSpriteState(x, y, speed * np.cos(theta), speed * np.sin(theta), glyph))
    out = np.zeros((frames, 1, size, size), dtype=np.float32)
    track = np.zeros((frames, digits, 4))
    for t in range(frames):
        for s_idx, s in enumerate(sprites):
            render_sprite(out[t, 0], source.glyphs[s.glyph], s.x, s.y)
            track[t, s_idx] = (s.x, s.y, s.vx, s.vy)
        for s in sprites:
            s.advance(limit)
    return out, track


def generate_moving_mnist(source: DigitSource, count: int, digits: int = 2, size: int = 64,
                          frames: int = 20, seed: int = 0, speed_range=(2.0, 5.0),
                          m: int | None = None) -> "SequenceDataset":
    """Bouncing-digit sequences; sequence i depends only on (seed, i)."""
    if size < GLYPH + 1:
        raise ValueError(f"frame size must be at least {GLYPH + 1}, got {size}")
    if digits < 1 or count < 1 or frames < 2:
        raise ValueError("need at least one digit, one sequence and two frames")
    data = np.zeros((count, frames, 1, size, size), dtype=np.float32)
    for i in range(count):
        data[i], _ = generate_sequence(source, digits, size, frames, _sequence_rng(seed, i),
                                       speed_range)
    m = frames // 2 if m is None else m
    return SequenceDataset(data, m=m, n=frames - m)


@dataclass
class SequenceDataset:
    frames: np.ndarray  # (S, T, C, H, W)
    m: int = 10
    n: int = 10
    role: str = "train"

    def __post_init__(self):
        if self.frames.ndim != 5:
            raise ValueError(f"frames must be (S, T, C, H, W), got {self.frames.shape}")
        if self.frames.shape[1] != self.m + self.n:
            raise ValueError(f"T={self.frames.shape[1]} but m+n={self.m + self.n}")

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def shape(self) -> tuple:
        return self.frames.shape


# ---------------------------------------------------------------------------
# STF1


def stf1_write(path, tensor: np.ndarray) -> None:
    arr = np.asarray(tensor)
    if arr.ndim != 5:
        raise ValueError(f"STF1 stores rank-5 tensors, got rank {arr.ndim}")
    if any(d > _U32_MAX for d in arr.shape):
        raise FormatError("dimension does not fit in u32")
    arr = arr.astype("<f4", copy=False)
    if not np.all(np.isfinite(arr)):
        raise ValueError("STF1 payload must be finite")
    with open(path, "wb") as f:
        f.write(stf1_header_bytes(arr.shape))
        f.write(np.ascontiguousarray(arr).tobytes())


def stf1_header_bytes(shape) -> bytes:
    if len(shape) != 5 or any(not 1 <= d <= _U32_MAX for d in shape):
        raise FormatError(f"cannot encode STF1 dims {tuple(shape)}")
    return STF1_MAGIC + struct.pack("<II5I", STF1_VERSION, 5, *shape)


def stf1_header(path) -> tuple[int, ...]:
    with open(path, "rb") as f:
        head = f.read(32)
    return _parse_stf1_header(head, path)


def _parse_stf1_header(head: bytes, path) -> tuple[int, ...]:
    if len(head) < 4 or head[:4] != STF1_MAGIC:
        raise FormatError(f"{path}: not an STF1 file (bad magic)")
    if len(head) < 32:
        raise FormatError(f"{path}: truncated STF1 header")
    version, rank = struct.unpack("<II", head[4:12])
    if version != STF1_VERSION:
        raise FormatError(f"{path}: unsupported STF1 version {version}")
    if rank != 5:
        raise FormatError(f"{path}: STF1 rank must be 5, got {rank}")
    dims = struct.unpack("<5I", head[12:32])
    if min(dims) < 1:
        raise FormatError(f"{path}: zero-sized dimension in {dims}")
    return dims


def stf1_read(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    dims = _parse_stf1_header(raw[:32], path)
    count = int(np.prod(dims, dtype=np.uint64))
    if count * 4 > (1 << 62):
        raise FormatError(f"{path}: dimensions {dims} overflow")
    need = 32 + 4 * count
    if len(raw) != need:
        raise FormatError(f"{path}: payload is {len(raw) - 32} bytes, header implies {4 * count}")
    arr = np.frombuffer(raw, dtype="<f4", count=count, offset=32).reshape(dims)
    return arr.astype(np.float32)


def load_dataset(path, m: int = 10, n: int | None = None, role: str = "train") -> SequenceDataset:
    frames = stf1_read(path)
    total = frames.shape[1]
    n = total - m if n is None else n
    if m + n != total:
        raise FormatError(f"{path}: sequences have {total} frames, expected m+n={m + n}")
    return SequenceDataset(frames, m=m, n=n, role=role)
