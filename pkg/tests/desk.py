"""Desk-scale training runs shared by the acceptance suite.

Each run trains on 1-digit 32x32 bouncing-digit sequences (2,000 train /
400 test, 5 epochs) and stores its final test metrics as JSON keyed by a
hash of the run configuration, so the slow part happens once.  Run this
file directly to fill the cache ahead of time::

    python tests/desk.py
"""
from __future__ import annotations

import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

from msrnn.cells import CellSpec
from msrnn.data import generate_moving_mnist, load_dataset, stf1_write, synthetic_glyphs
from msrnn.stack import StackConfig
from msrnn.training import TrainConfig, evaluate, train

CACHE = Path(__file__).resolve().parent / "desk_runs"
DATA = CACHE / "data"
RUN_VERSION = 1

TRAIN_COUNT, TEST_COUNT = 2000, 400
SIZE, FRAMES = 32, 20
HIDDEN = 8
EPOCHS = 5


def dataset_paths() -> tuple[Path, Path]:
    DATA.mkdir(parents=True, exist_ok=True)
    train_p, test_p = DATA / "train.stf1", DATA / "test.stf1"
    if not train_p.exists():
        ds = generate_moving_mnist(synthetic_glyphs(0), TRAIN_COUNT, digits=1, size=SIZE,
                                   frames=FRAMES, seed=100)
        stf1_write(train_p, ds.frames)
    if not test_p.exists():
        ds = generate_moving_mnist(synthetic_glyphs(1), TEST_COUNT, digits=1, size=SIZE,
                                   frames=FRAMES, seed=200)
        stf1_write(test_p, ds.frames)
    return train_p, test_p


def run_config(variant: str, skip: str = "none", loss: str = "l1+l2", seed: int = 1) -> TrainConfig:
    stack = StackConfig(cell=CellSpec("convlstm", hidden=HIDDEN), layers=6,
                        multiscale=variant == "ms", skip=skip, height=SIZE, width=SIZE)
    train_p, test_p = dataset_paths()
    return TrainConfig(stack=stack, epochs=EPOCHS, batch_size=4, loss=loss, seed=seed,
                       train_path=str(train_p), test_path=str(test_p))


def run_key(cfg: TrainConfig) -> str:
    d = asdict(cfg)
    d["train_path"] = d["test_path"] = None
    blob = json.dumps({"v": RUN_VERSION, "cfg": d}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def desk_run(variant: str, skip: str = "none", loss: str = "l1+l2", seed: int = 1) -> dict:
    cfg = run_config(variant, skip, loss, seed)
    name = f"{variant}-{skip}-{loss.replace('+', '')}-s{seed}-{run_key(cfg)}"
    path = CACHE / f"{name}.json"
    if path.exists():
        return json.loads(path.read_text())
    start = time.time()
    cfg.log_path = str(CACHE / f"{name}.log.csv")
    Path(cfg.log_path).unlink(missing_ok=True)
    result = train(cfg, eval_each_epoch=False)
    fm, _ = evaluate(result.model, load_dataset(cfg.test_path, m=10, n=10, role="test"))
    out = {"name": name, "variant": variant, "skip": skip, "loss": loss, "seed": seed,
           "iterations": result.iteration, "seconds": round(time.time() - start, 1),
           "train_loss": [r["train_loss"] for r in result.log], **fm.as_row()}
    path.write_text(json.dumps(out, indent=2) + "\n")
    return out


RUNS = [
    ("ms", "unet", "l1+l2", 1),
    ("plain", "none", "l1+l2", 1),
    ("ms", "none", "l1+l2", 1),
    ("ms", "unet", "l1+l2", 2),
    ("plain", "none", "l1+l2", 2),
    ("ms", "none", "l1+l2", 2),
    ("ms", "unet", "l1", 1),
    ("ms", "unet", "l2", 1),
]

if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    for args in RUNS:
        res = desk_run(*args)
        print(json.dumps(res), flush=True, file=sys.stdout)
