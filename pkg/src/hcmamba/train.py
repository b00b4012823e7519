"""AdamW training with cosine learning-rate decay, per-epoch CSV logging and resume.

A run directory holds:

* ``log.csv``: one row per epoch (epoch, train_loss, val_mIoU, val_DSC, val_HD95, seconds)
* ``best.ckpt``: parameters with the best validation mIoU so far
* ``last.ckpt`` and ``state.ckpt``: latest parameters plus optimizer moments, for resume

All randomness comes from ``RunConfig.seed``; batch order and flips depend only
on ``(seed, epoch)``, so a resumed run replays the uninterrupted one exactly.
"""
from __future__ import annotations

import csv
import math
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from threadpoolctl import threadpool_limits

from .autodiff import Tensor, backward, no_grad
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint, shape_mismatches
from .config import RunConfig
from .data import Dataset, batch_iter
from .errors import CheckpointError, TrainingDiverged
from .losses import composite_loss
from .metrics import MetricReport, evaluate
from .model import forward, init_params, parameter_shapes

CSV_COLUMNS = ("epoch", "train_loss", "val_mIoU", "val_DSC", "val_HD95", "seconds")


def cosine_lr(step: int, total_steps: int, lr: float, min_lr: float) -> float:
    """Cosine decay from ``lr`` at step 0 to ``min_lr`` at ``total_steps``."""
    frac = min(step / max(total_steps, 1), 1.0)
    return min_lr + 0.5 * (lr - min_lr) * (1.0 + math.cos(math.pi * frac))


class AdamW:
    """Adam with decoupled weight decay; moments share the parameter dtype."""

    def __init__(self, params: "OrderedDict[str, Tensor]", weight_decay: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= (lr * (update + self.weight_decay * p.data)).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {f"m.{k}": a for k, a in self.m.items()}
        out.update({f"v.{k}": a for k, a in self.v.items()})
        return out

    def load_state(self, tensors: dict[str, np.ndarray], step: int) -> None:
        for k in self.params:
            self.m[k] = tensors[f"m.{k}"].copy()
            self.v[k] = tensors[f"v.{k}"].copy()
        self.step_count = step


def predict(params, images: np.ndarray, cfg, batch_size: int = 8) -> np.ndarray:
    """Argmax class masks for ``images [N, H, W, 3]``, evaluated without a tape."""
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            logits = forward(params, images[i:i + batch_size], cfg)
            out.append(logits.data.argmax(axis=-1))
    return np.concatenate(out)


def evaluate_split(params, dataset: Dataset, cfg, batch_size: int = 8) -> MetricReport:
    return evaluate(predict(params, dataset.images, cfg, batch_size), dataset.masks, cfg.num_classes)


def params_to_arrays(params) -> "OrderedDict[str, np.ndarray]":
    return OrderedDict((k, p.data) for k, p in params.items())


def load_params(path, cfg) -> "OrderedDict[str, Tensor]":
    """Load parameters from ``path`` after checking them against ``cfg``'s shapes."""
    ckpt = load_checkpoint(path)
    problems = shape_mismatches(parameter_shapes(cfg), ckpt.tensors)
    if problems:
        raise CheckpointError("checkpoint does not match the config:\n  " + "\n  ".join(problems))
    return OrderedDict((k, Tensor(ckpt.tensors[k], requires_grad=True))
                       for k in parameter_shapes(cfg))


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_miou: float
    val_dsc: float
    val_hd95: float
    seconds: float

    def csv_row(self) -> list[str]:
        return [str(self.epoch), repr(self.train_loss), repr(self.val_miou), repr(self.val_dsc),
                repr(self.val_hd95), f"{self.seconds:.3f}"]


@dataclass
class TrainResult:
    history: list[EpochRecord] = field(default_factory=list)
    best_miou: float = -1.0
    best_epoch: int = -1
    seconds: float = 0.0

    @property
    def final(self) -> EpochRecord:
        return self.history[-1]


def _write_log(path: Path, history: list[EpochRecord]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_COLUMNS)
        for rec in history:
            w.writerow(rec.csv_row())


def read_log(path) -> list[EpochRecord]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [EpochRecord(int(r["epoch"]), float(r["train_loss"]), float(r["val_mIoU"]),
                        float(r["val_DSC"]), float(r["val_HD95"]), float(r["seconds"])) for r in rows]


def train(cfg: RunConfig, resume: bool = False, stop_after: int | None = None,
          log: Callable[[str], None] = print) -> TrainResult:
    """Train per ``cfg``; with ``resume`` continue from ``out_dir/last.ckpt``.

    ``stop_after`` ends the run after that many epochs in total (used to
    exercise resume); the learning-rate schedule still spans ``cfg.epochs``.
    """
    with threadpool_limits(limits=cfg.threads):
        return _train(cfg, resume, stop_after, log)


def _train(cfg: RunConfig, resume: bool, stop_after: int | None, log) -> TrainResult:
    mcfg = cfg.model_config()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_set = Dataset.load(cfg.data_dir, "train", cfg.num_classes)
    val_set = Dataset.load(cfg.data_dir, "val", cfg.num_classes)
    if train_set.images.shape[1:3] != mcfg.input_size:
        raise CheckpointError(f"dataset images are {train_set.images.shape[1:3]} but the config "
                              f"expects {mcfg.input_size}")
    weights = cfg.loss_weights()
    steps_per_epoch = math.ceil(len(train_set) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch

    params = init_params(mcfg, cfg.seed, np.float32)
    opt = AdamW(params, cfg.weight_decay, (cfg.beta1, cfg.beta2))
    result = TrainResult()
    start_epoch = 0
    if resume:
        params = load_params(out / "last.ckpt", mcfg)
        state = load_checkpoint(out / "state.ckpt")
        opt = AdamW(params, cfg.weight_decay, (cfg.beta1, cfg.beta2))
        opt.load_state(state.tensors, int(state.meta["step"]))
        start_epoch = state.epoch + 1
        result.history = [r for r in read_log(out / "log.csv") if r.epoch < start_epoch]
        result.best_miou = float(state.meta["best_miou"])
        result.best_epoch = int(state.meta["best_epoch"])

    config_echo = cfg.to_items()
    end_epoch = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    t_run = time.perf_counter()
    for epoch in range(start_epoch, end_epoch):
        t0 = time.perf_counter()
        loss_sum, count = 0.0, 0
        for step, batch in enumerate(batch_iter(train_set, cfg.batch_size, cfg.seed, epoch, cfg.flip)):
            logits = forward(params, batch.images, mcfg)
            loss = composite_loss(logits, batch.masks, weights)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss {value} at epoch {epoch} step {step} "
                                       f"(lr {cosine_lr(opt.step_count, total_steps, cfg.lr, cfg.min_lr):.3g})")
            backward(loss)
            opt.step(cosine_lr(opt.step_count, total_steps, cfg.lr, cfg.min_lr))
            opt.zero_grad()
            loss_sum += value * len(batch)
            count += len(batch)
        report = evaluate_split(params, val_set, mcfg, cfg.batch_size)
        rec = EpochRecord(epoch, loss_sum / count, report.miou, report.dsc, report.hd95,
                          time.perf_counter() - t0)
        result.history.append(rec)
        arrays = params_to_arrays(params)
        if rec.val_miou > result.best_miou:
            result.best_miou, result.best_epoch = rec.val_miou, epoch
            save_checkpoint(out / "best.ckpt", Checkpoint(arrays, config_echo, cfg.seed, epoch))
        save_checkpoint(out / "last.ckpt", Checkpoint(arrays, config_echo, cfg.seed, epoch))
        save_checkpoint(out / "state.ckpt", Checkpoint(
            opt.state_tensors(), config_echo, cfg.seed, epoch,
            {"step": str(opt.step_count), "best_miou": repr(result.best_miou),
             "best_epoch": str(result.best_epoch)}))
        _write_log(out / "log.csv", result.history)
        log(f"epoch {epoch:3d}  loss {rec.train_loss:.4f}  val mIoU {rec.val_miou:.4f}  "
            f"DSC {rec.val_dsc:.4f}  HD95 {rec.val_hd95:.2f}  {rec.seconds:.1f}s")
    result.seconds = time.perf_counter() - t_run
    return result
