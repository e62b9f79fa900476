"""Closed-form training-cost model for flat and multi-scale stacks.

All memory figures are in bits (32-bit floats).  ``utilde`` is the per-cell
multiple of a plain convolution's parameters and FLOPs, ``u`` the multiple
of its activation footprint.
"""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass
from fractions import Fraction

import numpy as np

from .stack import Model, forward_sequence
from .tensor import Tape

BITS = 32


@dataclass(frozen=True)
class CostModelParams:
    N: int = 6
    R: int = 19
    b: int = 4
    c: int = 64
    h: int = 64
    w: int = 64
    k: int = 3
    utilde: float = 8.0
    u: float = 8.0

    def __post_init__(self):
        for name in ("N", "R", "b", "c", "h", "w", "k"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if self.utilde <= 0 or self.u <= 0:
            raise ValueError("utilde and u must be positive")
        if self.u < self.utilde:
            raise ValueError(f"space multiple u={self.u} must be >= utilde={self.utilde}")


def out_coefficient(N: int, multiscale: bool) -> Fraction:
    """Forward-outputs memory in units of R*U*b*c*h*w bits."""
    if not multiscale:
        return Fraction(BITS * N)
    if N % 2:
        q = Fraction(1, 4) ** ((N - 1) // 2)
        return Fraction(256, 3) * (1 - q) + BITS * q
    return Fraction(256, 3) * (1 - Fraction(1, 4) ** (N // 2))


def flops_coefficient(N: int, multiscale: bool) -> Fraction:
    """Training FLOPs in units of R*Utilde*b*c^2*h*w*k^2."""
    if not multiscale:
        return Fraction(2 * N)
    if N % 2:
        q = Fraction(1, 4) ** ((N - 1) // 2)
        return Fraction(16, 3) * (1 - q) + 2 * q
    return Fraction(16, 3) * (1 - Fraction(1, 4) ** (N // 2))


def mem_par(p: CostModelParams) -> float:
    return BITS * p.N * p.utilde * p.c ** 2 * p.k ** 2


def mem_out(p: CostModelParams, multiscale: bool) -> float:
    return float(out_coefficient(p.N, multiscale)) * p.R * p.u * p.b * p.c * p.h * p.w


def mem_total(p: CostModelParams, multiscale: bool, include_params: bool = True) -> float:
    par = mem_par(p) if include_params else 0.0
    return 4 * par + 2 * mem_out(p, multiscale)


def memory_reduction(p: CostModelParams, include_params: bool = True) -> float:
    flat = mem_total(p, False, include_params)
    ms = mem_total(p, True, include_params)
    return (flat - ms) / flat


def memory_reduction_limit(N: int) -> Fraction:
    """Memory reduction when parameter memory is negligible (exact)."""
    flat = out_coefficient(N, False)
    return (flat - out_coefficient(N, True)) / flat


def flops(p: CostModelParams, multiscale: bool) -> float:
    return float(flops_coefficient(p.N, multiscale)) * p.R * p.utilde * p.b * p.c ** 2 * p.h * p.w * p.k ** 2


def flops_reduction(p: CostModelParams | int) -> Fraction:
    """Exact FLOPs reduction; depends on N only."""
    N = p if isinstance(p, int) else p.N
    flat = flops_coefficient(N, False)
    return (flat - flops_coefficient(N, True)) / flat


@dataclass(frozen=True)
class CostReport:
    params: CostModelParams
    mem_par_bits: float
    mem_out_flat_bits: float
    mem_out_ms_bits: float
    mem_all_flat_bits: float
    mem_all_ms_bits: float
    flops_flat: float
    flops_ms: float
    mem_reduction: float
    flops_reduction: float


def cost_report(p: CostModelParams) -> CostReport:
    return CostReport(
        params=p,
        mem_par_bits=mem_par(p),
        mem_out_flat_bits=mem_out(p, False),
        mem_out_ms_bits=mem_out(p, True),
        mem_all_flat_bits=mem_total(p, False),
        mem_all_ms_bits=mem_total(p, True),
        flops_flat=flops(p, False),
        flops_ms=flops(p, True),
        mem_reduction=memory_reduction(p),
        flops_reduction=float(flops_reduction(p)),
    )


CSV_COLUMNS = ["variant", "N", "R", "b", "c", "h", "w", "k", "M_par_bits", "M_out_bits",
               "M_all_bits", "flops", "mem_reduction", "flops_reduction"]


def report_rows(r: CostReport) -> list[dict]:
    p = r.params
    base = {key: getattr(p, key) for key in ("N", "R", "b", "c", "h", "w", "k")}
    rows = []
    for variant, out_bits, all_bits, fl in (
        ("plain", r.mem_out_flat_bits, r.mem_all_flat_bits, r.flops_flat),
        ("ms", r.mem_out_ms_bits, r.mem_all_ms_bits, r.flops_ms),
    ):
        rows.append({
            "variant": variant, **base,
            "M_par_bits": r.mem_par_bits, "M_out_bits": out_bits, "M_all_bits": all_bits,
            "flops": fl,
            "mem_reduction": r.mem_reduction if variant == "ms" else 0.0,
            "flops_reduction": r.flops_reduction if variant == "ms" else 0.0,
        })
    return rows


def report_csv(r: CostReport) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in report_rows(r):
        writer.writerow({k: _fmt(v) for k, v in row.items()})
    return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v) if not v.is_integer() else str(int(v))
    return str(v)


def human_bytes(bits: float) -> str:
    b = bits / 8
    for unit in ("B", "kB", "MB", "GB", "TB"):
        if b < 1000 or unit == "TB":
            return f"{b:.2f} {unit}"
        b /= 1000
    return f"{b:.2f} TB"


def report_text(r: CostReport, param_count: int | None = None) -> str:
    p = r.params
    lines = [
        f"cost model  N={p.N} R={p.R} b={p.b} c={p.c} h={p.h} w={p.w} k={p.k} "
        f"Utilde={p.utilde:g} U={p.u:g}",
        f"  parameters (model count)  {param_count if param_count is not None else int(r.mem_par_bits // BITS):,}",
        f"  model memory              {human_bytes(r.mem_par_bits)}",
        f"  outputs memory  plain     {human_bytes(r.mem_out_flat_bits)}",
        f"  outputs memory  ms        {human_bytes(r.mem_out_ms_bits)}",
        f"  training memory plain     {human_bytes(r.mem_all_flat_bits)}",
        f"  training memory ms        {human_bytes(r.mem_all_ms_bits)}",
        f"  FLOPs plain               {r.flops_flat / 1e9:.2f} G",
        f"  FLOPs ms                  {r.flops_ms / 1e9:.2f} G",
        f"  memory reduction          {100 * r.mem_reduction:.2f}%",
        f"  memory reduction limit    {100 * float(memory_reduction_limit(p.N)):.2f}%",
        f"  FLOPs reduction           {100 * r.flops_reduction:.2f}%",
    ]
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class Measurement:
    stored_elements: int
    conv_flops: int
    records: int


def instrument(model: Model, frames: np.ndarray, mask: np.ndarray | None = None) -> Measurement:
    """Run one forward sequence on a fresh tape and count what it stored."""
    with Tape() as tape:
        forward_sequence(model, frames, mask)
    return Measurement(tape.stored_elements, tape.conv_flops, len(tape))


def predicted_stored_ratio(N: int) -> float:
    """MS / flat forward-outputs ratio from the closed form."""
    return float(out_coefficient(N, True) / out_coefficient(N, False))


def as_dict(p: CostModelParams) -> dict:
    return asdict(p)
