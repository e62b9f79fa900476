"""Frame-quality metrics, categorical skill scores and training losses.

Sequence arrays are ``(S, T, C, H, W)``; a single frame batch
``(T, C, H, W)`` or a plain 2-D image is promoted automatically.
MSE, MAE, GDL and the balanced errors are per-frame pixel SUMS averaged
over samples and frames.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, absolute, add, mean_all, scale, square, sub

PSNR_CAP = 100.0
DEFAULT_THRESHOLDS = (0.5, 2.0, 5.0, 10.0)
# rain-rate weight map: w = 1 below 2, 2 in [2, 5), 5 in [5, 10), 10 in [10, 30), 30 above
DEFAULT_WEIGHT_EDGES = (2.0, 5.0, 10.0, 30.0)
DEFAULT_WEIGHT_VALUES = (1.0, 2.0, 5.0, 10.0, 30.0)


def _as5d(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 2:
        return a[None, None, None]
    if a.ndim == 4:
        return a[None]
    if a.ndim != 5:
        raise ValueError(f"expected (S, T, C, H, W) data, got shape {a.shape}")
    return a


def _pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    p, t = _as5d(pred), _as5d(truth)
    if p.shape != t.shape:
        raise ValueError(f"prediction shape {p.shape} != truth shape {t.shape}")
    return p, t


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation over the last two axes."""
    k = len(g)
    h, w = img.shape[-2:]
    rows = sum(g[i] * img[..., i:h - k + 1 + i, :] for i in range(k))
    return sum(g[j] * rows[..., :, j:w - k + 1 + j] for j in range(k))


def ssim_frames(pred, truth, data_range: float = 1.0, win: int = 11,
                sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> np.ndarray:
    """Gaussian-window SSIM per (sample, frame), averaged over channels."""
    p, t = _pair(pred, truth)
    if min(p.shape[-2:]) < win:
        raise ValueError(f"frames smaller than the {win}x{win} SSIM window")
    g = _gaussian_window(win, sigma)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mu_p, mu_t = _filter_valid(p, g), _filter_valid(t, g)
    spp = _filter_valid(p * p, g) - mu_p ** 2
    stt = _filter_valid(t * t, g) - mu_t ** 2
    spt = _filter_valid(p * t, g) - mu_p * mu_t
    num = (2 * mu_p * mu_t + c1) * (2 * spt + c2)
    den = (mu_p ** 2 + mu_t ** 2 + c1) * (spp + stt + c2)
    return (num / den).mean(axis=(-3, -2, -1))


def psnr_frames(pred, truth, data_range: float = 1.0) -> np.ndarray:
    p, t = _pair(pred, truth)
    mse = ((p - t) ** 2).mean(axis=(-3, -2, -1))
    with np.errstate(divide="ignore"):
        val = 10 * np.log10(data_range ** 2 / mse)
    return np.minimum(val, PSNR_CAP)


def gdl_frames(pred, truth) -> np.ndarray:
    """Gradient difference (alpha = 1): per-frame sum over both image axes."""
    p, t = _pair(pred, truth)
    dy = np.abs(np.abs(np.diff(t, axis=-2)) - np.abs(np.diff(p, axis=-2))).sum(axis=(-3, -2, -1))
    dx = np.abs(np.abs(np.diff(t, axis=-1)) - np.abs(np.diff(p, axis=-1))).sum(axis=(-3, -2, -1))
    return dx + dy


@dataclass
class FrameMetrics:
    mse: float
    mae: float
    ssim: float
    psnr: float
    gdl: float
    per_frame: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def as_row(self) -> dict[str, float]:
        return {"mse": self.mse, "mae": self.mae, "ssim": self.ssim, "psnr": self.psnr,
                "gdl": self.gdl}


def frame_metrics(pred, truth) -> FrameMetrics:
    p, t = _pair(pred, truth)
    err = p - t
    per = {
        "mse": (err ** 2).sum(axis=(-3, -2, -1)),
        "mae": np.abs(err).sum(axis=(-3, -2, -1)),
        "ssim": ssim_frames(p, t),
        "psnr": psnr_frames(p, t),
        "gdl": gdl_frames(p, t),
    }
    return FrameMetrics(**{k: float(v.mean()) for k, v in per.items()}, per_frame=per)


def metrics_csv(m: FrameMetrics) -> str:
    """One row per horizon step, then an aggregate row."""
    buf = io.StringIO()
    cols = ["frame", "mse", "mae", "ssim", "psnr", "gdl"]
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(cols)
    per = {k: v.mean(axis=0) for k, v in m.per_frame.items()}
    for step in range(len(per["mse"])):
        writer.writerow([step + 1] + [f"{per[c][step]:.6g}" for c in cols[1:]])
    writer.writerow(["all"] + [f"{getattr(m, c):.6g}" for c in cols[1:]])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# skill scores


def step_weights(truth, edges=DEFAULT_WEIGHT_EDGES, values=DEFAULT_WEIGHT_VALUES) -> np.ndarray:
    if len(values) != len(edges) + 1:
        raise ValueError("weight map needs one more value than edges")
    return np.asarray(values, dtype=np.float64)[np.searchsorted(edges, truth, side="right")]


@dataclass
class SkillScores:
    thresholds: tuple[float, ...]
    csi: dict[float, float]
    hss: dict[float, float]
    b_mse: float
    b_mae: float
    degenerate: dict[float, list[str]] = field(default_factory=dict)


def confusion(pred, truth, threshold: float) -> tuple[int, int, int, int]:
    """(TP, FP, FN, TN) after binarising both fields at >= threshold."""
    pe = np.asarray(pred) >= threshold
    te = np.asarray(truth) >= threshold
    tp = int(np.count_nonzero(pe & te))
    fp = int(np.count_nonzero(pe & ~te))
    fn = int(np.count_nonzero(~pe & te))
    tn = int(np.count_nonzero(~pe & ~te))
    return tp, fp, fn, tn


def csi_hss(tp: int, fp: int, fn: int, tn: int) -> tuple[float, float, list[str]]:
    flags = []
    den = tp + fn + fp
    if den == 0:
        csi = 0.0
        flags.append("csi")
    else:
        csi = tp / den
    hden = (tp + fn) * (fn + tn) + (tp + fp) * (fp + tn)
    if hden == 0:
        hss = 0.0
        flags.append("hss")
    else:
        hss = 2 * (tp * tn - fn * fp) / hden
    return csi, hss, flags


def skill_scores(pred, truth, thresholds=DEFAULT_THRESHOLDS, weights=None) -> SkillScores:
    """CSI/HSS per threshold plus balanced MSE/MAE.

    ``weights`` is a callable mapping the truth field to per-pixel weights;
    the default is the rain-rate step map.
    """
    p, t = _pair(pred, truth)
    thresholds = tuple(float(x) for x in thresholds)
    if list(thresholds) != sorted(thresholds):
        raise ValueError("thresholds must be ascending")
    csi, hss, flagged = {}, {}, {}
    for tau in thresholds:
        c, h, flags = csi_hss(*confusion(p, t, tau))
        csi[tau], hss[tau] = c, h
        if flags:
            flagged[tau] = flags
    w = step_weights(t) if weights is None else np.asarray(weights(t), dtype=np.float64)
    err = p - t
    b_mse = float((w * err ** 2).sum(axis=(-3, -2, -1)).mean())
    b_mae = float((w * np.abs(err)).sum(axis=(-3, -2, -1)).mean())
    return SkillScores(thresholds, csi, hss, b_mse, b_mae, flagged)


# ---------------------------------------------------------------------------
# losses

LOSS_KINDS = ("l1", "l2", "l1+l2")


def training_loss(preds, truths, kind: str = "l1+l2") -> Tensor:
    """Mean-per-element L1, L2 or L1+L2 over the predicted frames (differentiable)."""
    if kind not in LOSS_KINDS:
        raise ValueError(f"loss kind must be one of {LOSS_KINDS}, got {kind!r}")
    if len(preds) != len(truths) or not preds:
        raise ValueError("need matching, non-empty prediction and truth lists")
    total = None
    for p, t in zip(preds, truths):
        if not isinstance(t, Tensor):
            t = Tensor(t)
        if p.shape != t.shape:
            raise ValueError(f"prediction {p.shape} and truth {t.shape} differ")
        d = sub(p, t)
        if kind == "l1":
            term = mean_all(absolute(d))
        elif kind == "l2":
            term = mean_all(square(d))
        else:
            term = add(mean_all(absolute(d)), mean_all(square(d)))
        total = term if total is None else add(total, term)
    return scale(total, 1.0 / len(preds))
