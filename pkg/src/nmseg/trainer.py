"""Desk-scale training: AdamW, cosine annealing, epoch loop, evaluation."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import checkpoint
from .data_metrics import Sample, augment, bce_dice_loss, dsc, miou, stack_batch, threshold
from .errors import ShapeError, TrainingError
from .network import UNet, UNetConfig
from .tensor_ops import Tape, Tensor, backward

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "loss", "miou", "dsc", "lr")


@dataclass
class OptimState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: Sequence[Tensor], grads, state: OptimState, lr: Optional[float] = None) -> None:
    """In-place AdamW update with decoupled weight decay.

    ``grads`` is either a mapping keyed by parameter or a sequence
    aligned with ``params``.
    """
    lr = state.lr if lr is None else lr
    if not isinstance(grads, dict):
        grads = dict(zip(params, grads))
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for i, p in enumerate(params):
        g = np.asarray(grads[p], dtype=p.dtype)
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.get(i)
        if m is None:
            m = state.m[i] = np.zeros_like(p.data)
            state.v[i] = np.zeros_like(p.data)
        v = state.v[i]
        p.data *= 1.0 - lr * state.weight_decay
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass(frozen=True)
class LrSchedule:
    lr_max: float = 1e-3
    lr_min: float = 1e-5
    t_max: int = 50


def cosine_lr(t: float, sched: LrSchedule) -> float:
    if t < 0:
        raise ValueError("schedule step must be non-negative")
    if t >= sched.t_max:
        return sched.lr_min
    return sched.lr_min + 0.5 * (sched.lr_max - sched.lr_min) * (1.0 + math.cos(math.pi * t / sched.t_max))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 4
    seed: int = 0
    lr_max: float = 1e-3
    lr_min: float = 1e-5
    t_max: int = 50
    weight_decay: float = 1e-2
    val_fraction: float = 0.3
    augment: bool = True


@dataclass
class TrainResult:
    model: UNet
    history: list[dict]
    best_miou: float = float("nan")
    best_epoch: int = -1


def split(data: Sequence[Sample], seed: int, val_fraction: float = 0.3):
    """Seeded 7:3 train/validation split."""
    order = np.random.default_rng([seed, 7]).permutation(len(data))
    n_val = int(round(len(data) * val_fraction))
    if len(data) > 1:
        n_val = min(max(n_val, 1), len(data) - 1)
    else:
        n_val = 0
    val = [data[i] for i in order[:n_val]]
    train = [data[i] for i in order[n_val:]]
    return train, val


def _loss_and_grads(model: UNet, images: np.ndarray, masks: np.ndarray, params):
    with Tape() as tape:
        pred = model.forward(Tensor(images.astype(model.dtype)), training=True)
        loss = bce_dice_loss(pred, masks)
    return float(loss.data), backward(tape, loss, params=params)


def train_step(model: UNet, images, masks, state: OptimState, lr: float) -> float:
    params = model.parameters()
    loss, grads = _loss_and_grads(model, images, masks, params)
    if math.isfinite(loss):
        adamw_step(params, grads, state, lr)
    return loss


def evaluate(model: UNet, data: Sequence[Sample], batch_size: int = 16) -> dict:
    """Mean per-sample mIoU / DSC at threshold 0.5, plus mean loss."""
    if not data:
        raise TrainingError("no samples to evaluate")
    ious, dices, losses = [], [], []
    for lo in range(0, len(data), batch_size):
        images, masks = stack_batch(data[lo : lo + batch_size])
        prob = model.forward(Tensor(images.astype(model.dtype)), training=False).data
        for p, m in zip(prob, masks):
            pm = threshold(p)
            ious.append(miou(pm, m))
            dices.append(dsc(pm, m))
            losses.append(bce_dice_loss(p.astype(np.float64), m))
    return {"miou": float(np.mean(ious)), "dsc": float(np.mean(dices)), "loss": float(np.mean(losses))}


def train(
    cfg: UNetConfig,
    data: Sequence[Sample],
    tcfg: TrainConfig = TrainConfig(),
    out_dir=None,
    model: Optional[UNet] = None,
) -> TrainResult:
    """Train on a seeded 70/30 split; one history record per epoch.

    When ``out_dir`` is given, writes ``history.csv``, ``manifest.json``
    and ``best.nmck`` (highest validation mIoU).
    """
    if not data:
        raise TrainingError("no samples to train on")
    model = UNet(cfg) if model is None else model
    history: list[dict] = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_manifest(out / "manifest.json", cfg, tcfg, len(data))
        write_history(out / "history.csv", history)
    result = TrainResult(model, history)
    if tcfg.epochs <= 0:
        return result

    train_set, val_set = split(data, tcfg.seed, tcfg.val_fraction)
    if not val_set:
        val_set = train_set
    sched = LrSchedule(tcfg.lr_max, tcfg.lr_min, tcfg.t_max)
    state = OptimState(lr=tcfg.lr_max, weight_decay=tcfg.weight_decay)
    params = model.parameters()

    for epoch in range(tcfg.epochs):
        lr = cosine_lr(epoch, sched)
        rng = np.random.default_rng([tcfg.seed, epoch])
        order = rng.permutation(len(train_set))
        losses = []
        for step, lo in enumerate(range(0, len(order), tcfg.batch_size)):
            batch = [train_set[i] for i in order[lo : lo + tcfg.batch_size]]
            if tcfg.augment:
                batch = [augment(s, rng) for s in batch]
            images, masks = stack_batch(batch)
            loss, grads = _loss_and_grads(model, images, masks, params)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss} at epoch {epoch}, step {step}")
            adamw_step(params, grads, state, lr)
            losses.append(loss)
        metrics = evaluate(model, val_set)
        rec = {"epoch": epoch, "loss": float(np.mean(losses)), "miou": metrics["miou"], "dsc": metrics["dsc"], "lr": lr}
        history.append(rec)
        log.info("epoch %d loss %.4f miou %.4f dsc %.4f lr %.2e", epoch, rec["loss"], rec["miou"], rec["dsc"], lr)
        if not rec["miou"] <= result.best_miou:  # also true while best is NaN
            result.best_miou, result.best_epoch = rec["miou"], epoch
            if out is not None:
                checkpoint.save(out / "best.nmck", model.state_dict())
        if out is not None:
            write_history(out / "history.csv", history)
    return result


def overfit(model: UNet, sample: Sample, steps: int = 200, lr: float = 1e-2) -> list[float]:
    """Fit a single sample (no augmentation, constant lr); returns the loss curve."""
    images, masks = stack_batch([sample])
    state = OptimState(lr=lr, weight_decay=0.0)
    return [train_step(model, images, masks, state, lr) for _ in range(steps)]


def write_history(path, history: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, lineterminator="\n")
        w.writeheader()
        for rec in history:
            w.writerow({k: (repr(float(rec[k])) if k != "epoch" else rec[k]) for k in HISTORY_FIELDS})


def read_history(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


def write_manifest(path, cfg: UNetConfig, tcfg: TrainConfig, n_samples: int) -> None:
    manifest = {
        "config": cfg.to_text(),
        "train": asdict(tcfg),
        "samples": n_samples,
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_model(cfg: UNetConfig, path) -> UNet:
    state = checkpoint.load(path)
    dtype = next(iter(state.values())).dtype.type if state else np.float32
    model = UNet(cfg, dtype=dtype)
    model.load_state_dict(state)
    return model


def gradcheck_network(cfg: UNetConfig, size: int = 8, batch: int = 2, seed: int = 0, h: float = 1e-4):
    """Finite-difference check of the training loss of a freshly
    initialised float64 ``cfg`` network on random inputs and masks."""
    from .tensor_ops import gradcheck_report

    rng = np.random.default_rng([seed, 11])
    model = UNet(cfg, dtype=np.float64)
    x = Tensor(rng.uniform(size=(batch, cfg.input_channels, size, size)))
    mask = (rng.uniform(size=(batch, cfg.num_classes, size, size)) > 0.5).astype(np.float64)

    class _Loss:
        def parameters(self):
            return model.parameters()

        def buffers(self):
            return model.buffers()

        def __call__(self, images):
            return bce_dice_loss(model.forward(images, training=True), mask)

    return gradcheck_report(_Loss(), x, h)
