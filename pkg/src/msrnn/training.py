"""Scheduled-sampling training, evaluation and MSCK checkpoints.

MSCK layout (little-endian)::

    b"MSCK" | u32 version=1 | u32 tensor count
    per tensor: u32 name length | UTF-8 name | u32 rank | rank x u32 dims | float32 payload
"""
from __future__ import annotations

import csv
import ctypes
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .cells import CellSpec
from .data import SequenceDataset, load_dataset
from .metrics import LOSS_KINDS, FrameMetrics, SkillScores, frame_metrics, skill_scores, training_loss
from .stack import ConfigError, Model, StackConfig, build_stack, check_divisible, forward_sequence
from .tensor import DTYPE, Adam, NumericError, Parameter, ShapeError, Tape

log = logging.getLogger(__name__)

MSCK_MAGIC = b"MSCK"
MSCK_VERSION = 1
LOG_COLUMNS = ["epoch", "iteration", "train_loss", "mse", "mae", "ssim", "psnr", "gdl"]


class CheckpointError(ValueError):
    """A checkpoint file is malformed or does not fit the model."""


@dataclass
class TrainConfig:
    stack: StackConfig = field(default_factory=StackConfig)
    epochs: int = 5
    batch_size: int = 4
    lr: float = 3e-4
    loss: str = "l1+l2"
    decay_fraction: float = 0.75
    seed: int = 0
    clip_norm: float | None = 10.0
    train_path: str | None = None
    test_path: str | None = None
    checkpoint_path: str | None = None
    log_path: str | None = None
    eval_batch_size: int = 16

    def validate(self) -> None:
        self.stack.validate()
        if self.epochs < 1 or self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigError("epochs and batch sizes must be positive")
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")
        if not 0 < self.decay_fraction <= 1:
            raise ConfigError("decay fraction must lie in (0, 1]")
        if self.loss not in LOSS_KINDS:
            raise ConfigError(f"loss must be one of {LOSS_KINDS}")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ConfigError("clip norm must be positive (or None to disable)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        stack = dict(d.pop("stack"))
        stack["cell"] = CellSpec(**{**stack["cell"], "slots": tuple(stack["cell"]["slots"])})
        return cls(stack=StackConfig(**stack), **d)


def sampling_mask(iteration: int, total: int, decay_fraction: float, batch: int, n: int,
                  seed: int) -> np.ndarray:
    """Per-(sample, decoder step) ground-truth flags for scheduled sampling.

    The ground-truth probability decays linearly from 1 to 0 over the first
    ``decay_fraction * total`` iterations.
    """
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    eps = max(0.0, 1.0 - iteration / (decay_fraction * total))
    rng = np.random.default_rng(np.random.SeedSequence([seed, iteration, 7]))
    return rng.random((batch, max(n - 1, 0))) < eps


def _tune_allocator() -> None:
    # keep large activation buffers on the heap instead of fresh mmaps per op
    try:
        libc = ctypes.CDLL("libc.so.6")
    except OSError:
        return
    m_trim_threshold, m_top_pad, m_mmap_threshold = -1, -2, -3
    libc.mallopt(m_mmap_threshold, 1 << 30)
    libc.mallopt(m_trim_threshold, 1 << 30)
    libc.mallopt(m_top_pad, 1 << 28)


def clip_gradients(params: list[Parameter], max_norm: float) -> float:
    norm = float(np.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params)))
    if np.isfinite(norm) and norm > max_norm:
        factor = DTYPE(max_norm / (norm + 1e-6))
        for p in params:
            p.grad = p.grad * factor
    return norm


def _check_dataset(ds: SequenceDataset, stack: StackConfig, what: str) -> None:
    s, t, c, h, w = ds.frames.shape
    if t != stack.m + stack.n:
        raise ShapeError(f"{what} sequences have {t} frames; stack expects m+n={stack.m + stack.n}")
    if c != stack.in_channels:
        raise ShapeError(f"{what} frames have {c} channels; stack expects {stack.in_channels}")
    check_divisible(h, w, stack.layers, stack.multiscale)


@dataclass
class TrainResult:
    model: Model
    optimizer: Adam
    log: list[dict]
    iteration: int


def train(cfg: TrainConfig, train_data: SequenceDataset | None = None,
          test_data: SequenceDataset | None = None, resume: str | None = None,
          stop_at: int | None = None, eval_each_epoch: bool = True) -> TrainResult:
    """Train a stack with Adam on the n forecast frames.

    ``stop_at`` ends the run after that many global iterations (the decay
    schedule still spans the full run), which is how interrupted runs and
    resumption are exercised.
    """
    cfg.validate()
    _tune_allocator()
    st = cfg.stack
    if train_data is None:
        if not cfg.train_path:
            raise ConfigError("no training data: set train_path")
        train_data = load_dataset(cfg.train_path, m=st.m, n=st.n, role="train")
    if test_data is None and cfg.test_path:
        test_data = load_dataset(cfg.test_path, m=st.m, n=st.n, role="test")
    _check_dataset(train_data, st, "training")
    if test_data is not None:
        _check_dataset(test_data, st, "test")

    model = build_stack(st, seed=cfg.seed)
    params = model.parameters()
    opt = Adam(params, lr=cfg.lr)
    start = 0
    if resume:
        ckpt = checkpoint_load(resume)
        restore(model, ckpt, opt)
        start = ckpt.iteration

    frames = train_data.frames
    per_epoch = len(train_data) // cfg.batch_size
    if per_epoch == 0:
        raise ConfigError(f"batch size {cfg.batch_size} exceeds the {len(train_data)} training sequences")
    total = cfg.epochs * per_epoch
    end = total if stop_at is None else min(stop_at, total)
    rows: list[dict] = []
    epoch_losses: list[float] = []
    perm = None
    perm_epoch = -1
    log.info("training %d iterations (%d per epoch) from iteration %d", end - start, per_epoch, start)
    for it in range(start, end):
        epoch, pos = divmod(it, per_epoch)
        if epoch != perm_epoch:
            perm = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch, 11])).permutation(len(train_data))
            perm_epoch = epoch
        idx = np.sort(perm[pos * cfg.batch_size:(pos + 1) * cfg.batch_size])
        batch = frames[idx]
        mask = sampling_mask(it, total, cfg.decay_fraction, cfg.batch_size, st.n, cfg.seed)
        with Tape():
            preds = forward_sequence(model, batch, mask)
            loss = training_loss(preds[-st.n:], [batch[:, st.m + j] for j in range(st.n)], cfg.loss)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"non-finite training loss at iteration {it}")
            loss._tape.backward(loss)
        if cfg.clip_norm is not None:
            clip_gradients(params, cfg.clip_norm)
        opt.step()
        epoch_losses.append(value)
        if pos == per_epoch - 1:
            row = {"epoch": epoch + 1, "iteration": it + 1,
                   "train_loss": float(np.mean(epoch_losses))}
            epoch_losses = []
            if test_data is not None and eval_each_epoch:
                row.update(evaluate(model, test_data, batch_size=cfg.eval_batch_size)[0].as_row())
            rows.append(row)
            log.info("epoch %d  %s", epoch + 1, "  ".join(f"{k}={v:.5g}" for k, v in row.items()))
            if cfg.log_path:
                append_log(cfg.log_path, row)
            if cfg.checkpoint_path:
                checkpoint_save(cfg.checkpoint_path, model, opt, iteration=it + 1, config=cfg.to_dict())
    if cfg.checkpoint_path and (not rows or rows[-1]["iteration"] != end):
        checkpoint_save(cfg.checkpoint_path, model, opt, iteration=end, config=cfg.to_dict())
    return TrainResult(model, opt, rows, end)


def append_log(path, row: dict) -> None:
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=LOG_COLUMNS, extrasaction="ignore",
                                lineterminator="\n")
        if new:
            writer.writeheader()
        writer.writerow({k: row.get(k, "") for k in LOG_COLUMNS})


def predict(model: Model, data: SequenceDataset, batch_size: int = 16,
            indices=None) -> np.ndarray:
    """Inference-mode forecasts (S, n, C, H, W) for the selected sequences."""
    st = model.config
    frames = data.frames if indices is None else data.frames[np.asarray(indices)]
    out = np.zeros((len(frames), st.n) + frames.shape[2:], dtype=DTYPE)
    for lo in range(0, len(frames), batch_size):
        batch = frames[lo:lo + batch_size]
        preds = forward_sequence(model, batch, None)
        out[lo:lo + len(batch)] = np.stack([p.data for p in preds[-st.n:]], axis=1)
    return out


def evaluate(model: Model | str, data: SequenceDataset, batch_size: int = 16,
             thresholds=None, weights=None) -> tuple[FrameMetrics, SkillScores | None]:
    """Inference-mode metrics; ``model`` may be a built model or a checkpoint path."""
    if not isinstance(model, Model):
        model = model_from_checkpoint(model)
    _check_dataset(data, model.config, "test")
    forecast = predict(model, data, batch_size)
    truth = data.frames[:, model.config.m:]
    fm = frame_metrics(np.clip(forecast, 0.0, 1.0), truth)
    skills = None
    if thresholds is not None:
        skills = skill_scores(forecast, truth, thresholds, weights)
    return fm, skills


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    iteration: int = 0
    config: dict | None = None

    def parameter_names(self) -> list[str]:
        return [k for k in self.tensors if not k.startswith(("adam.", "meta."))]


def _bytes_tensor(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def write_msck(path, tensors: dict[str, np.ndarray]) -> None:
    parts = [MSCK_MAGIC, struct.pack("<II", MSCK_VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_msck(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MSCK_MAGIC:
        raise CheckpointError(f"{path}: not an MSCK checkpoint (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != MSCK_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        tensors[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return tensors


def checkpoint_save(path, model: Model, optimizer: Adam | None = None,
                    iteration: int | None = None, config: dict | None = None) -> None:
    tensors: dict[str, np.ndarray] = {}
    for name, p in model.named_parameters().items():
        tensors[name] = p.data
    if optimizer is not None:
        for name, p in model.named_parameters().items():
            tensors[f"adam.m.{name}"] = p.m
            tensors[f"adam.v.{name}"] = p.v
    if iteration is not None:
        tensors["meta.iteration"] = np.array([iteration], dtype=np.float32)
    if config is not None:
        tensors["meta.config"] = _bytes_tensor(json.dumps(config, sort_keys=True))
    write_msck(path, tensors)


def checkpoint_load(path) -> Checkpoint:
    tensors = read_msck(path)
    iteration = 0
    if "meta.iteration" in tensors:
        iteration = int(tensors["meta.iteration"][0])
    config = None
    if "meta.config" in tensors:
        config = json.loads(tensors["meta.config"].astype(np.uint8).tobytes().decode("utf-8"))
    return Checkpoint(tensors, iteration, config)


def restore(model: Model, ckpt: Checkpoint, optimizer: Adam | None = None) -> None:
    """Copy checkpoint tensors into ``model`` (and Adam moments into ``optimizer``)."""
    named = model.named_parameters()
    for name in ckpt.tensors:
        if name.startswith("meta."):
            continue
        base = name[len("adam.m."):] if name.startswith(("adam.m.", "adam.v.")) else name
        if base not in named:
            raise CheckpointError(f"checkpoint tensor {name!r} has no counterpart in the model")
        if ckpt.tensors[name].shape != named[base].shape:
            raise CheckpointError(
                f"shape mismatch for {name!r}: checkpoint {ckpt.tensors[name].shape}, "
                f"model {named[base].shape}"
            )
    missing = [n for n in named if n not in ckpt.tensors]
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters {missing}")
    for name, p in named.items():
        p.assign(ckpt.tensors[name])
        p.zero_grad()
        if optimizer is not None:
            p.m = ckpt.tensors.get(f"adam.m.{name}", np.zeros_like(p.data)).copy()
            p.v = ckpt.tensors.get(f"adam.v.{name}", np.zeros_like(p.data)).copy()
    if optimizer is not None:
        optimizer.t = ckpt.iteration


def model_from_checkpoint(path) -> Model:
    ckpt = checkpoint_load(path)
    if ckpt.config is None:
        raise CheckpointError(f"{path}: checkpoint carries no configuration; build the model explicitly")
    cfg = TrainConfig.from_dict(ckpt.config)
    model = build_stack(cfg.stack, seed=cfg.seed)
    restore(model, ckpt)
    return model
