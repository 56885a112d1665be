"""Quantization-aware SGD training."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .data import Dataset
from . import init as init_mod
from .init import SCHEMES, STREAM_DROPOUT, STREAM_SHUFFLE, init_weights, philox  # noqa: F401
from .models import Model, build
from .tensor import cross_entropy

log = logging.getLogger(__name__)

SCHEDULERS = ("exponential", "step", "none")


class ConfigError(ValueError):
    """Invalid configuration value; ``field`` names the offending key."""

    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        super().__init__(message)
        self.field = field
        self.line = line


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch


@dataclass(frozen=True)
class TrainingConfig:
    lr: float = 0.01
    scheduler: str = "exponential"
    gamma: float = 0.95
    milestones: tuple = (80, 120)
    epochs: int = 40
    batch_size: int = 128
    weight_decay: float = 3e-4
    init: str = "normal"
    dropout: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        if not self.lr > 0:
            raise ConfigError("learning rate must be > 0", "lr")
        if self.scheduler not in SCHEDULERS:
            raise ConfigError(f"unknown scheduler {self.scheduler!r}; expected one of {SCHEDULERS}", "scheduler")
        if not 0 < self.gamma <= 1:
            raise ConfigError("gamma must be in (0, 1]", "gamma")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1", "epochs")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1", "batch_size")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0", "weight_decay")
        if self.init not in SCHEMES:
            raise ConfigError(f"unknown init scheme {self.init!r}; expected one of {SCHEMES}", "init")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must be in [0, 1)", "dropout")

    def as_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d


@dataclass
class TrainRecord:
    train_loss: list = field(default_factory=list)
    train_acc: list = field(default_factory=list)
    test_acc: list = field(default_factory=list)
    lr: list = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "train_acc", "test_acc", "lr"])
            for e, row in enumerate(zip(self.train_loss, self.train_acc, self.test_acc, self.lr)):
                w.writerow([e, *(repr(float(v)) for v in row)])


def schedule(lr0: float, scheduler: str, epoch: int, *, gamma: float = 0.95, milestones=(80, 120)) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if scheduler == "exponential":
        return lr0 * gamma ** epoch
    if scheduler == "step":
        return lr0 / 10 ** sum(1 for m in milestones if epoch >= m)
    if scheduler == "none":
        return lr0
    raise ValueError(f"unknown scheduler {scheduler!r}")


def sgd_update(w: np.ndarray, grad: np.ndarray, lr: float, weight_decay: float = 0.0) -> np.ndarray:
    """w <- w - lr * (grad + weight_decay * w), in place."""
    w -= lr * (grad + weight_decay * w)
    return w


def _step(model, x, y, lr, weight_decay, rng):
    state = model.gradients(x, y, train=rng is not None, rng=rng)
    loss = cross_entropy(state.logits, y)
    if not math.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss {loss}")
    for i, p in model.params.items():
        gw, gb = state.weight_grads[i], state.bias_grads[i]
        if not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))):
            raise TrainingDiverged(f"non-finite gradient in {p.name}")
        sgd_update(p.weight, gw, lr, weight_decay)
        sgd_update(p.bias, gb, lr, weight_decay)
        p.requantize()
    return loss, int(np.sum(state.logits.argmax(1) == y))


def sgd_step(model: Model, x: np.ndarray, y: np.ndarray, lr: float, weight_decay: float = 0.0,
             rng: Optional[np.random.Generator] = None) -> float:
    """One quantization-aware step in place; returns the batch loss before the update.

    Forward runs on dequant(quant(shadow)); the quantizer is treated as the
    identity for gradients (the clamp at max|W| never bites, since the clamp
    bound is the layer's own max), so dL/dW_eff updates the shadow weights.
    """
    return _step(model, x, y, lr, weight_decay, rng)[0]


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return philox(STREAM_SHUFFLE, seed, epoch).permutation(n)


def train(arch: str | Model, dataset: Dataset, config: TrainingConfig, *,
          progress: Optional[Callable[[int, dict], None]] = None) -> tuple[Model, TrainRecord]:
    if len(dataset.train_y) == 0:
        raise ValueError("empty training set")
    if isinstance(arch, Model):
        model = arch
    else:
        model = build(arch, init=config.init, seed=config.seed, dropout=config.dropout)
    has_dropout = any(s.kind == "dropout" and s.rate > 0 for s in model.specs)
    record = TrainRecord()
    x, y = dataset.train_x, dataset.train_y
    n, bs = len(y), config.batch_size
    for epoch in range(config.epochs):
        lr = schedule(config.lr, config.scheduler, epoch, gamma=config.gamma, milestones=config.milestones)
        order = epoch_order(n, config.seed, epoch)
        drng = philox(STREAM_DROPOUT, config.seed, epoch) if has_dropout else None
        total, correct = 0.0, 0
        for s in range(0, n, bs):
            idx = order[s:s + bs]
            try:
                loss, hits = _step(model, x[idx], y[idx], lr, config.weight_decay, drng)
            except TrainingDiverged as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}", epoch) from None
            total += loss * len(idx)
            correct += hits
        # running averages over the epoch's minibatches
        train_loss, train_acc = total / n, correct / n
        test_acc = model.accuracy(dataset.test_x, dataset.test_y) if len(dataset.test_y) else float("nan")
        record.train_loss.append(train_loss)
        record.train_acc.append(train_acc)
        record.test_acc.append(test_acc)
        record.lr.append(lr)
        log.info("epoch %d lr=%.5g loss=%.4f train_acc=%.4f test_acc=%.4f", epoch, lr, train_loss, train_acc, test_acc)
        if progress:
            progress(epoch, {"lr": lr, "train_loss": train_loss, "train_acc": train_acc, "test_acc": test_acc})
    model.requantize()
    model.provenance.update({
        "training": config.as_dict(),
        "dataset": dataset.name,
        "normalization": dataset.normalization,
        "final_test_acc": record.test_acc[-1],
        "final_train_acc": record.train_acc[-1],
        "quantizer": "symmetric-int8-per-layer, scale=max|W|/127, round-half-away, STE",
        "init_params": {"normal_std": init_mod.NORMAL_STD, "uniform_bound": init_mod.UNIFORM_BOUND},
    })
    return model, record
