"""Training loop and evaluation over sample lists."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .data import Sample, augment, batch_arrays
from .losses import DEFAULT_BIN_EDGES, EvalReport, LossConfig, SampleResult, metrics, size_stratified, total_loss
from .model import DuAT, threshold_logits
from .optim import AdamW, clip_grad_norm
from .tensor import Tensor, backward, no_grad

logger = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 4
    lr: float = 1e-4
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    augment: bool = True
    seed: int = 0
    log_every: int = 1
    schedule: str = "constant"
    warmup: int = 0
    grad_clip: float = 0.0  # global gradient-norm cap; 0 disables

    def lr_at(self, step: int) -> float:
        """Learning rate for 1-based ``step``. A linear ramp over the first
        ``warmup`` steps, then constant or a cosine that reaches zero at the last step."""
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if step <= self.warmup:
            return self.lr * step / self.warmup
        if self.schedule == "constant":
            return self.lr
        span = max(1, self.steps - self.warmup)
        return 0.5 * self.lr * (1.0 + math.cos(math.pi * (step - 1 - self.warmup) / span))


@dataclass
class TrainResult:
    steps: int
    losses: List[float]
    epochs: List[Dict]
    best_state: Optional[Dict[str, np.ndarray]]
    best_val_mdice: Optional[float]


def batches(samples: Sequence[Sample], batch_size: int, seed: int, use_augment: bool):
    """Endless stream of (epoch, batch) with a fresh shuffle each epoch."""
    order_rng = np.random.default_rng([seed, 1])
    aug_rng = np.random.default_rng([seed, 2])
    n = len(samples)
    epoch = 0
    while True:
        order = order_rng.permutation(n)
        for start in range(0, n - batch_size + 1 if n >= batch_size else 1, batch_size):
            chosen = [samples[i] for i in order[start:start + batch_size]]
            if use_augment:
                chosen = [augment(s, aug_rng) for s in chosen]
            yield epoch, chosen
        epoch += 1


def train(model: DuAT, train_samples: Sequence[Sample], cfg: TrainConfig,
          val_samples: Sequence[Sample] = (), loss_cfg: LossConfig = LossConfig(),
          log: Optional[Callable[[Dict], None]] = None) -> TrainResult:
    params = model.parameters()
    dtype = params[0].dtype
    opt = AdamW(params, lr=cfg.lr, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay)
    model.train()
    losses: List[float] = []
    epochs: List[Dict] = []
    epoch_losses: List[float] = []
    best_state, best_val = None, None
    current_epoch = 0

    def close_epoch(ep):
        nonlocal best_state, best_val
        rec = {"record": "epoch", "epoch": ep, "train_loss": float(np.mean(epoch_losses))}
        if val_samples:
            rec["val_mdice"] = evaluate(model, val_samples).mdice
            model.train()
            if best_val is None or rec["val_mdice"] > best_val:
                best_val = rec["val_mdice"]
                best_state = {k: v.copy() for k, v in model.state_dict().items()}
        epochs.append(rec)
        if log:
            log(rec)

    stream = batches(train_samples, cfg.batch_size, cfg.seed, cfg.augment)
    for step in range(1, cfg.steps + 1):
        epoch, chosen = next(stream)
        if epoch != current_epoch:
            close_epoch(current_epoch)
            epoch_losses = []
            current_epoch = epoch
        images, masks = batch_arrays(chosen, dtype)
        opt.lr = cfg.lr_at(step)
        opt.zero_grad()
        pred = model(Tensor(images))
        loss = total_loss(pred, Tensor(masks), loss_cfg)
        value = loss.item()
        if not math.isfinite(value):
            raise DivergenceError(f"loss became {value} at step {step}")
        backward(loss)
        if cfg.grad_clip:
            clip_grad_norm(params, cfg.grad_clip)
        opt.step()
        losses.append(value)
        epoch_losses.append(value)
        if log and cfg.log_every and step % cfg.log_every == 0:
            log({"record": "step", "step": step, "epoch": epoch, "loss": value})
    if epoch_losses:
        close_epoch(current_epoch)
    if best_state is None:
        best_state = {k: v.copy() for k, v in model.state_dict().items()}
    return TrainResult(cfg.steps, losses, epochs, best_state, best_val)


def predict_arrays(model: DuAT, images: np.ndarray, batch_size: int = 16):
    """Return (masks, probabilities) for a stack of images, model in eval mode."""
    dtype = model.parameters()[0].dtype
    was = model.training
    model.eval()
    masks, probs = [], []
    try:
        with no_grad():
            for start in range(0, len(images), batch_size):
                pred = model(Tensor(images[start:start + batch_size].astype(dtype)))
                masks.append(threshold_logits(pred.s1.data))
                probs.append(pred.probability())
    finally:
        model.train(was)
    return np.concatenate(masks), np.concatenate(probs)


def evaluate(model: DuAT, samples: Sequence[Sample], bin_edges=DEFAULT_BIN_EDGES, batch_size: int = 16) -> EvalReport:
    images, _ = batch_arrays(samples)
    masks, probs = predict_arrays(model, images, batch_size)
    return report_from_predictions(samples, masks, probs, bin_edges)


def report_from_predictions(samples: Sequence[Sample], masks: np.ndarray, probs: np.ndarray,
                            bin_edges=DEFAULT_BIN_EDGES) -> EvalReport:
    results = []
    for s, m, p in zip(samples, masks, probs):
        dice, iou, mae = metrics(m, s.mask, p)
        results.append(SampleResult(s.id, dice, iou, mae, s.area_fraction))
    return size_stratified(results, bin_edges)


def json_logger(stream):
    def log(record: Dict) -> None:
        stream.write(json.dumps(record, sort_keys=True) + "\n")
        stream.flush()
    return log
