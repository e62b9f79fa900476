"""Command-line entry point: ``msrnn <command> [flags]``.

Commands: gen-data, train, eval, analyze, rf, export.  Every flag can also
be set in a ``--config`` file of ``key = value`` lines grouped under
``[data]``, ``[model]``, ``[train]``, ``[eval]``, ``[analyze]``, ``[rf]`` or
``[export]``; flags given on the command line win.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import cost
from .cells import CellSpec
from .data import (
    FormatError,
    generate_moving_mnist,
    load_dataset,
    load_idx,
    stf1_write,
    synthetic_glyphs,
)
from .metrics import metrics_csv
from .stack import (
    ConfigError,
    StackConfig,
    build_stack,
    receptive_field_empirical,
    receptive_field_theoretical,
)
from .tensor import NumericError, ShapeError
from .training import CheckpointError, TrainConfig, evaluate, model_from_checkpoint, predict, train

log = logging.getLogger("msrnn")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text) -> tuple[float, ...]:
    if isinstance(text, tuple):
        return text
    return tuple(float(x) for x in str(text).replace(" ", "").split(",") if x)


def _ints(text) -> tuple[int, ...]:
    if isinstance(text, tuple):
        return text
    return tuple(int(x) for x in str(text).replace(" ", "").split(",") if x)


@dataclass(frozen=True)
class Opt:
    section: str
    name: str
    type: Callable[[str], Any]
    default: Any
    help: str
    choices: tuple | None = None


def _o(section, name, type_, default, help_, choices=None) -> Opt:
    return Opt(section, name, type_, default, help_, choices)


# one table drives the parser, the config-file schema and the resolved-config log
OPTIONS: dict[str, Opt] = {o.section + "." + o.name: o for o in [
    _o("data", "out", str, "data", "output directory for train.stf1, test.stf1 and provenance.txt"),
    _o("data", "count", int, 2000, "number of training sequences"),
    _o("data", "test_count", int, 400, "number of test sequences"),
    _o("data", "size", int, 32, "frame height and width in pixels (>= 29)"),
    _o("data", "digits", int, 1, "bouncing digits per sequence"),
    _o("data", "frames", int, 20, "frames per sequence (observed + predicted)"),
    _o("data", "seed", int, 0, "generator seed; each sequence derives its own stream from it"),
    _o("data", "idx_train", str, None, "IDX image file for training glyphs (synthetic glyphs when unset)"),
    _o("data", "idx_test", str, None, "IDX image file for test glyphs (synthetic glyphs when unset)"),

    _o("model", "cell", str, "convlstm", "recurrent cell kind", ("convlstm", "probe")),
    _o("model", "variant", str, "ms", "flat stack or mirror-pyramid multi-scale stack", ("plain", "ms")),
    _o("model", "skip", str, "unet", "encoder-to-decoder hidden-state shortcuts (unet needs variant ms)",
       ("none", "unet")),
    _o("model", "layers", int, 6, "number of stacked recurrent layers N"),
    _o("model", "hidden", int, 8, "hidden channels per layer c"),
    _o("model", "kernel", int, 3, "convolution kernel size k (odd)"),
    _o("model", "m", int, 10, "observed input frames"),
    _o("model", "n", int, 10, "predicted frames"),

    _o("train", "epochs", int, 5, "passes over the training set"),
    _o("train", "batch_size", int, 4, "sequences per minibatch"),
    _o("train", "lr", float, 3e-4, "Adam learning rate (constant)"),
    _o("train", "loss", str, "l1+l2", "training loss on the predicted frames", ("l1", "l2", "l1+l2")),
    _o("train", "decay_fraction", float, 0.75,
       "fraction of all iterations over which the ground-truth feeding probability decays to 0"),
    _o("train", "seed", int, 1, "seed for weights, batch order and sampling masks"),
    _o("train", "clip_norm", float, 10.0, "global gradient-norm clip"),
    _o("train", "no_clip", _bool, False, "disable gradient clipping"),
    _o("train", "train_data", str, "data/train.stf1", "training sequences (STF1)"),
    _o("train", "test_data", str, "data/test.stf1", "test sequences evaluated after every epoch (STF1)"),
    _o("train", "checkpoint", str, "model.msck", "checkpoint written after every epoch"),
    _o("train", "log", str, "train_log.csv", "per-epoch metric log (CSV, appended)"),
    _o("train", "resume", _bool, False, "continue from --checkpoint if it exists"),

    _o("eval", "checkpoint", str, "model.msck", "checkpoint to evaluate"),
    _o("eval", "test_data", str, "data/test.stf1", "test sequences (STF1)"),
    _o("eval", "batch_size", int, 16, "sequences per inference batch"),
    _o("eval", "thresholds", _floats, None,
       "comma-separated thresholds; when set, CSI/HSS and balanced errors are reported"),
    _o("eval", "metrics_csv", str, None, "write per-horizon-step metrics to this CSV file"),

    _o("analyze", "layers", int, 6, "stack depth N"),
    _o("analyze", "steps", int, 19, "recurrent steps R = m + n - 1"),
    _o("analyze", "batch_size", int, 4, "minibatch b"),
    _o("analyze", "hidden", int, 64, "hidden channels c"),
    _o("analyze", "height", int, 64, "frame height h"),
    _o("analyze", "width", int, 64, "frame width w"),
    _o("analyze", "kernel", int, 3, "kernel size k"),
    _o("analyze", "utilde", float, 8.0, "per-cell parameter/FLOPs multiple of one convolution"),
    _o("analyze", "u", float, 8.0, "per-cell activation-space multiple (must be >= utilde)"),
    _o("analyze", "csv", str, None, "also write the report rows to this CSV file"),
    _o("analyze", "measure", _bool, False,
       "build both ConvLSTM stacks at these sizes and count taped activations and FLOPs"),

    _o("rf", "layers", int, 6, "stack depth N"),
    _o("rf", "kernel", int, 3, "kernel size k"),
    _o("rf", "hidden", int, 8, "hidden channels of the randomly initialised ConvLSTM"),
    _o("rf", "size", int, 64, "input frame size for the gradient measurement"),
    _o("rf", "seed", int, 0, "weight seed"),
    _o("rf", "variant", str, "both", "which stacks to report", ("plain", "ms", "both")),

    _o("export", "checkpoint", str, "model.msck", "trained checkpoint"),
    _o("export", "data", str, "data/test.stf1", "sequences to forecast (STF1)"),
    _o("export", "indices", _ints, (0,), "comma-separated sequence indices"),
    _o("export", "out", str, "frames", "output directory for PGM files"),
    _o("export", "montage", _bool, False,
       "also write one truth/prediction/difference montage per sequence"),
]}

COMMANDS = {
    "gen-data": ("data",),
    "train": ("model", "train"),
    "eval": ("eval",),
    "analyze": ("analyze",),
    "rf": ("rf",),
    "export": ("export",),
}

HELP = {
    "gen-data": "generate bouncing-digit train/test sequences as STF1 files",
    "train": "train a stack with scheduled sampling and Adam",
    "eval": "evaluate a checkpoint on test sequences",
    "analyze": "closed-form (and optionally measured) training memory and FLOPs",
    "rf": "theoretical and gradient-measured receptive fields of the encoder layers",
    "export": "write truth, prediction and difference frames as binary PGM",
}


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msrnn", description=__doc__.split("\n\n")[0])
    parser.add_argument("--log-level", default="INFO", help="logging level (default: INFO)")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for cmd, sections in COMMANDS.items():
        p = sub.add_parser(cmd, help=HELP[cmd], description=HELP[cmd],
                           formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        p.add_argument("--config", default=None, help="key = value config file with [section] headers")
        for key, opt in OPTIONS.items():
            if opt.section not in sections:
                continue
            kwargs = dict(dest=key, default=argparse.SUPPRESS, help=f"{opt.help} (default: {opt.default})")
            if opt.type is _bool:
                kwargs.update(action="store_const", const=True)
            else:
                kwargs.update(type=opt.type, metavar=opt.name.upper())
                if opt.choices:
                    kwargs["choices"] = opt.choices
            p.add_argument(_flag(opt.name), **kwargs)
    return parser


def read_config(path) -> dict[str, Any]:
    """Parse a config file into ``{"section.key": value}``; unknown keys are errors."""
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    try:
        with open(path, encoding="utf-8") as f:
            cp.read_file(f)
    except (OSError, UnicodeDecodeError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    values: dict[str, Any] = {}
    for section in cp.sections():
        for raw_key, raw in cp.items(section):
            key = f"{section}.{raw_key.replace('-', '_')}"
            opt = OPTIONS.get(key)
            if opt is None:
                raise ConfigError(f"{path}: unknown key {raw_key!r} in section [{section}]")
            try:
                value = opt.type(raw)
            except ValueError as exc:
                raise ConfigError(f"{path}: bad value for {key}: {exc}") from exc
            if opt.choices and value not in opt.choices:
                raise ConfigError(f"{path}: {key} must be one of {opt.choices}, got {value!r}")
            values[key] = value
    return values


def resolve(command: str, args: argparse.Namespace) -> dict[str, Any]:
    sections = COMMANDS[command]
    resolved = {k: o.default for k, o in OPTIONS.items() if o.section in sections}
    if args.config:
        for key, value in read_config(args.config).items():
            if key.split(".")[0] in sections:
                resolved[key] = value
    for key in resolved:
        if hasattr(args, key):
            resolved[key] = getattr(args, key)
    log.info("resolved config for %s: %s", command, json.dumps(resolved, sort_keys=True, default=list))
    return resolved


# ---------------------------------------------------------------------------
# PGM


def to_bytes(frame: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(frame, dtype=np.float64), 0.0, 1.0) * 255).astype(np.uint8)


def write_pgm(path, frame: np.ndarray) -> None:
    """Binary greyscale PGM (P5, maxval 255) of a 2-D frame in [0, 1]."""
    pix = to_bytes(frame)
    if pix.ndim != 2:
        raise ValueError(f"PGM frames are 2-D, got shape {pix.shape}")
    h, w = pix.shape
    Path(path).write_bytes(f"P5\n{w} {h} 255\n".encode("ascii") + pix.tobytes())


def montage(rows: list[list[np.ndarray]], gap: int = 2) -> np.ndarray:
    """Tile rows of equal-size frames with ``gap`` white pixels between tiles."""
    h, w = rows[0][0].shape
    cols = max(len(r) for r in rows)
    out = np.ones((len(rows) * (h + gap) - gap, cols * (w + gap) - gap))
    for i, row in enumerate(rows):
        for j, frame in enumerate(row):
            out[i * (h + gap):i * (h + gap) + h, j * (w + gap):j * (w + gap) + w] = np.clip(frame, 0, 1)
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(c: dict) -> int:
    out = Path(c["data.out"])
    size, frames, digits, seed = c["data.size"], c["data.frames"], c["data.digits"], c["data.seed"]
    if c["data.count"] < 1 or c["data.test_count"] < 1:
        raise ConfigError("sequence counts must be >= 1")
    if frames < 2:
        raise ConfigError("need at least 2 frames per sequence")
    if (c["data.idx_train"] is None) != (c["data.idx_test"] is None):
        raise ConfigError("give both --idx-train and --idx-test, or neither")
    if c["data.idx_train"]:
        train_src, test_src = load_idx(c["data.idx_train"]), load_idx(c["data.idx_test"])
        glyphs = f"idx train={c['data.idx_train']} test={c['data.idx_test']}"
    else:
        train_src, test_src = synthetic_glyphs(2 * seed), synthetic_glyphs(2 * seed + 1)
        glyphs = f"synthetic fallback (glyph seeds train={2 * seed} test={2 * seed + 1})"
    try:
        train_ds = generate_moving_mnist(train_src, c["data.count"], digits, size, frames, seed=2 * seed)
        test_ds = generate_moving_mnist(test_src, c["data.test_count"], digits, size, frames,
                                        seed=2 * seed + 1)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out.mkdir(parents=True, exist_ok=True)
    stf1_write(out / "train.stf1", train_ds.frames)
    stf1_write(out / "test.stf1", test_ds.frames)
    lines = [f"{k.split('.', 1)[1]} = {v}" for k, v in sorted(c.items())]
    lines += [f"glyph_source = {glyphs}", "speed_range = 2..5 px/frame",
              f"train_shape = {list(train_ds.frames.shape)}", f"test_shape = {list(test_ds.frames.shape)}",
              f"train_sequence_seed = {2 * seed}", f"test_sequence_seed = {2 * seed + 1}"]
    (out / "provenance.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    log.info("wrote %s and %s (%s)", out / "train.stf1", out / "test.stf1", glyphs)
    return EXIT_OK


def _stack_config(c: dict, height=None, width=None) -> StackConfig:
    cell = CellSpec(c["model.cell"], hidden=c["model.hidden"], kernel=c["model.kernel"])
    return StackConfig(cell=cell, layers=c["model.layers"], multiscale=c["model.variant"] == "ms",
                       skip=c["model.skip"], m=c["model.m"], n=c["model.n"], height=height, width=width)


def cmd_train(c: dict) -> int:
    try:
        stack = _stack_config(c)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    stack.validate()
    cfg = TrainConfig(
        stack=stack, epochs=c["train.epochs"], batch_size=c["train.batch_size"], lr=c["train.lr"],
        loss=c["train.loss"], decay_fraction=c["train.decay_fraction"], seed=c["train.seed"],
        clip_norm=None if c["train.no_clip"] else c["train.clip_norm"],
        train_path=c["train.train_data"], test_path=c["train.test_data"] or None,
        checkpoint_path=c["train.checkpoint"], log_path=c["train.log"],
    )
    resume = c["train.checkpoint"] if c["train.resume"] and Path(c["train.checkpoint"]).exists() else None
    result = train(cfg, resume=resume)
    for row in result.log:
        print(" ".join(f"{k}={v:.6g}" for k, v in row.items()))
    return EXIT_OK


def cmd_eval(c: dict) -> int:
    model = model_from_checkpoint(c["eval.checkpoint"])
    st = model.config
    data = load_dataset(c["eval.test_data"], m=st.m, n=st.n, role="test")
    fm, skills = evaluate(model, data, batch_size=c["eval.batch_size"], thresholds=c["eval.thresholds"])
    table = metrics_csv(fm)
    sys.stdout.write(table)
    if c["eval.metrics_csv"]:
        Path(c["eval.metrics_csv"]).write_text(table, encoding="utf-8")
    if skills is not None:
        for tau in skills.thresholds:
            flag = f"  (degenerate: {','.join(skills.degenerate[tau])})" if tau in skills.degenerate else ""
            print(f"threshold {tau:g}: CSI={skills.csi[tau]:.4f} HSS={skills.hss[tau]:.4f}{flag}")
        print(f"B-MSE={skills.b_mse:.6g} B-MAE={skills.b_mae:.6g}")
    return EXIT_OK


def cmd_analyze(c: dict) -> int:
    try:
        p = cost.CostModelParams(N=c["analyze.layers"], R=c["analyze.steps"], b=c["analyze.batch_size"],
                                 c=c["analyze.hidden"], h=c["analyze.height"], w=c["analyze.width"],
                                 k=c["analyze.kernel"], utilde=c["analyze.utilde"], u=c["analyze.u"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    report = cost.cost_report(p)
    params = int(round(p.N * p.utilde * p.c ** 2 * p.k ** 2))
    sys.stdout.write(cost.report_text(report, params))
    if c["analyze.csv"]:
        Path(c["analyze.csv"]).write_text(cost.report_csv(report), encoding="utf-8")
    if c["analyze.measure"]:
        m = (p.R + 1) // 2
        frames = np.random.default_rng(0).random((p.b, p.R + 1, p.c, p.h, p.w), dtype=np.float32)
        got = {}
        for ms in (False, True):
            stack = StackConfig(cell=CellSpec("convlstm", hidden=p.c, kernel=p.k), layers=p.N,
                                multiscale=ms, in_channels=p.c, out_channels=p.c, m=m, n=p.R + 1 - m)
            got[ms] = cost.instrument(build_stack(stack, seed=0), frames)
        stored = got[True].stored_elements / got[False].stored_elements
        fl = 1 - got[True].conv_flops / got[False].conv_flops
        print(f"  measured stored-element ratio ms/plain  {stored:.4f} "
              f"(closed form {cost.predicted_stored_ratio(p.N):.4f})")
        print(f"  measured conv FLOPs reduction           {100 * fl:.2f}%")
    return EXIT_OK


def cmd_rf(c: dict) -> int:
    n_layers, k, size = c["rf.layers"], c["rf.kernel"], c["rf.size"]
    variants = ("plain", "ms") if c["rf.variant"] == "both" else (c["rf.variant"],)
    encoder = range((n_layers + 1) // 2)
    print("variant layer theoretical measured_h measured_w")
    for v in variants:
        stack = StackConfig(cell=CellSpec("convlstm", hidden=c["rf.hidden"], kernel=k), layers=n_layers,
                            multiscale=v == "ms", height=size, width=size)
        model = build_stack(stack, seed=c["rf.seed"])
        for layer in encoder:
            theo = receptive_field_theoretical(model.schedule, k, layer)
            box = receptive_field_empirical(model, layer, size=(size, size))
            print(f"{v} {layer} {theo} {box.height} {box.width}")
    return EXIT_OK


def cmd_export(c: dict) -> int:
    model = model_from_checkpoint(c["export.checkpoint"])
    st = model.config
    data = load_dataset(c["export.data"], m=st.m, n=st.n, role="test")
    idx = list(c["export.indices"])
    bad = [i for i in idx if not 0 <= i < len(data)]
    if bad:
        raise ConfigError(f"indices {bad} outside 0..{len(data) - 1}")
    forecast = predict(model, data, indices=idx)
    out = Path(c["export.out"])
    out.mkdir(parents=True, exist_ok=True)
    for row, i in enumerate(idx):
        truth = data.frames[i, st.m:, 0]
        pred = np.clip(forecast[row, :, 0], 0.0, 1.0)
        diff = np.abs(truth - pred)
        for t in range(st.n):
            for kind, frame in (("truth", truth[t]), ("pred", pred[t]), ("diff", diff[t])):
                write_pgm(out / f"seq{i:05d}_{kind}_{t + 1:02d}.pgm", frame)
        if c["export.montage"]:
            write_pgm(out / f"seq{i:05d}_montage.pgm", montage([list(truth), list(pred), list(diff)]))
    log.info("wrote frames for %d sequences to %s", len(idx), out)
    return EXIT_OK


RUNNERS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "analyze": cmd_analyze,
           "rf": cmd_rf, "export": cmd_export}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = getattr(logging, str(args.log_level).upper(), logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(message)s", stream=sys.stderr)
    log.setLevel(level)
    try:
        return RUNNERS[args.command](resolve(args.command, args))
    except (ConfigError, ShapeError) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (FormatError, CheckpointError, OSError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except NumericError as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
