"""Mini-batch training loops for the supervised and MAE objectives."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .data import stack
from .encoder import logits
from .errors import NumericError
from .objectives import MaeConfig, add_mae_decoder, has_decoder, mae_loss, supervised_loss
from .optim import AdamW, cosine_warmup


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-4
    weight_decay: float = 0.1
    warmup_fraction: float = 0.1
    min_lr: float = 0.0
    grad_clip: float | None = 1.0
    seed: int = 0


@dataclass
class History:
    losses: list = field(default_factory=list)      # mean loss per epoch
    lrs: list = field(default_factory=list)
    train_acc: list = field(default_factory=list)

    @property
    def final_loss(self):
        return self.losses[-1] if self.losses else float("nan")


class MetricsLog:
    """Long-format metrics CSV: run_id,epoch,split,metric,value,seed."""

    def __init__(self, path=None, run_id="run", seed=0, append=False):
        self.path = path
        self.run_id = run_id
        self.seed = seed
        self.rows = []
        if path is not None and not (append and os.path.exists(path)):
            with open(path, "w") as fh:
                fh.write("run_id,epoch,split,metric,value,seed\n")

    def log(self, epoch, split, metric, value):
        row = (self.run_id, epoch, split, metric, float(value), self.seed)
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(f"{row[0]},{row[1]},{row[2]},{row[3]},{row[4]:.8g},{row[5]}\n")


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def trainable(model, objective):
    """Parameters updated by ``objective``: the classifier is idle during MAE
    and the decoder is idle during supervised training."""
    skip = "classifier." if objective == "mae" else "decoder."
    return [(n, t) for n, t in model.named_parameters() if not n.startswith(skip)]


def make_optimizer(model, objective, cfg):
    return AdamW(trainable(model, objective), lr=cfg.lr, weight_decay=cfg.weight_decay,
                 grad_clip=cfg.grad_clip)


def accuracy(model, pairs, batch_size=64):
    correct = 0
    with ag.no_grad():
        for start in range(0, len(pairs), batch_size):
            v, t, y = stack(pairs[start:start + batch_size])
            out = logits(model, v, t)
            correct += int(np.sum(np.argmax(out.data, axis=1) == y))
    return correct / max(len(pairs), 1)


def train(model, pairs, objective="supervised", cfg=TrainConfig(), mae_cfg=None,
          optimizer=None, start_epoch=0, hooks=(), metrics=None):
    """Train in place.  ``objective`` is 'supervised' or 'mae'.

    ``hooks`` are called as ``hook(model, epoch, history)`` after each epoch.
    Raises NumericError as soon as a loss or gradient is non-finite.
    """
    if objective not in ("supervised", "mae"):
        raise ValueError(f"unknown objective {objective!r}")
    if objective == "mae":
        mae_cfg = mae_cfg or getattr(model, "mae_cfg", None) or MaeConfig()
        if not has_decoder(model):
            add_mae_decoder(model, mae_cfg, seed=cfg.seed)
    opt = optimizer or make_optimizer(model, objective, cfg)
    n = len(pairs)
    steps_per_epoch = max(math.ceil(n / cfg.batch_size), 1)
    total = steps_per_epoch * cfg.epochs
    hist = History()
    for epoch in range(start_epoch, cfg.epochs):
        rng = np.random.default_rng([cfg.seed, 500, epoch])
        mask_rng = np.random.default_rng([cfg.seed, 600, epoch])
        losses, lr = [], cfg.lr
        for i, idx in enumerate(_batches(n, cfg.batch_size, rng)):
            step = epoch * steps_per_epoch + i
            lr = cosine_warmup(step, total, cfg.lr, cfg.warmup_fraction, cfg.min_lr)
            batch = stack([pairs[j] for j in idx])
            opt.zero_grad()
            if objective == "mae":
                loss = mae_loss(model, batch, mae_cfg, mask_rng)
            else:
                loss = supervised_loss(model, batch)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss at epoch {epoch}, step {i}")
            loss.backward()
            gn = opt.grad_norm()
            if not math.isfinite(gn):
                raise NumericError(f"non-finite gradient at epoch {epoch}, step {i}")
            opt.step(lr)
            losses.append(value)
        hist.losses.append(float(np.mean(losses)))
        hist.lrs.append(lr)
        if metrics is not None:
            metrics.log(epoch, "train", f"{objective}_loss", hist.losses[-1])
        for hook in hooks:
            hook(model, epoch, hist)
    model.history = hist
    model.optimizer = opt
    return hist
