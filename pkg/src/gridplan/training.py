"""Imitation-learning trainer with divergence bookkeeping.

A run is a pure function of (dataset, configs, seed): initialization,
shuffling, and updates all derive from the seed, so repeated runs produce
bitwise-identical metric sequences. Runs that blow up are not errors; they
finish early with status ``diverged`` and a recorded trigger so sweep
tables can flag them instead of crashing.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import checkpoint as ckpt
from .dataset import encode_samples, one_hot
from .models import Model, ModelConfig, init_params, predict_logits, forward
from .tensor import Tape, backward, softmax_cross_entropy


@dataclass
class DivergenceRules:
    grad_norm_limit: float = 1e6
    loss_ratio_limit: float = 100.0
    patience: int = 3  # consecutive epochs above the ratio before flagging


@dataclass
class TrainConfig:
    """Protocol defaults: 30 epochs, batch 256, learning rate 0.002.

    The optimizer is RMSProp without momentum; gradient clipping is off by
    default and only available behind ``grad_clip`` for practitioners who
    want stabilized runs.
    """

    epochs: int = 30
    batch_size: int = 256
    learning_rate: float = 0.002
    optimizer: str = "rmsprop"
    rms_decay: float = 0.9
    rms_epsilon: float = 1e-8
    seed: int = 0
    grad_clip: Optional[float] = None
    divergence: DivergenceRules = field(default_factory=DivergenceRules)
    checkpoint_every: int = 0  # epochs between checkpoints; 0 writes none

    def to_dict(self) -> dict:
        raw = dataclasses.asdict(self)
        return raw

    @staticmethod
    def from_dict(raw: dict) -> "TrainConfig":
        raw = dict(raw)
        if isinstance(raw.get("divergence"), dict):
            raw["divergence"] = DivergenceRules(**raw["divergence"])
        return TrainConfig(**raw)


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_loss: float
    val_accuracy: float


@dataclass
class RunRecord:
    """Per-epoch metrics plus the run's final status and provenance hash."""

    config_hash: str
    epochs: list[EpochStats] = field(default_factory=list)
    status: str = "completed"
    divergence_epoch: Optional[int] = None
    divergence_trigger: Optional[str] = None
    wall_seconds: float = 0.0

    @property
    def final_accuracy(self) -> Optional[float]:
        """Last validation accuracy; None for diverged runs (never reported)."""
        if self.status != "completed" or not self.epochs:
            return None
        return self.epochs[-1].val_accuracy

    def epoch_lines(self) -> list[str]:
        return [json.dumps(dataclasses.asdict(e), sort_keys=True) for e in self.epochs]

    def summary(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "status": self.status,
            "epochs_run": len(self.epochs),
            "divergence_epoch": self.divergence_epoch,
            "divergence_trigger": self.divergence_trigger,
            "final_train_loss": self.epochs[-1].train_loss if self.epochs else None,
            "final_accuracy": self.final_accuracy,
            "wall_seconds": self.wall_seconds,
        }


@dataclass
class LossHistory:
    """State the divergence rules track across batches and epochs."""

    epoch1_losses: list = field(default_factory=list)
    epoch1_median: Optional[float] = None
    high_epoch_streak: int = 0
    trigger: Optional[str] = None


def detect_divergence(loss: float, grad_norm: float, history: LossHistory,
                      rules: DivergenceRules = DivergenceRules()) -> str:
    """Per-batch divergence test: non-finite loss or an exploding gradient."""
    if not math.isfinite(loss):
        history.trigger = "non-finite loss"
        return "diverged"
    if grad_norm > rules.grad_norm_limit:
        history.trigger = f"gradient norm {grad_norm:.3e} above {rules.grad_norm_limit:.0e}"
        return "diverged"
    return "ok"


def end_epoch_divergence(epoch_mean_loss: float, history: LossHistory,
                         rules: DivergenceRules = DivergenceRules()) -> str:
    """Epoch-level rule: loss stuck above the ratio of the first epoch's median."""
    if history.epoch1_median is None:
        return "ok"
    if epoch_mean_loss > rules.loss_ratio_limit * history.epoch1_median:
        history.high_epoch_streak += 1
    else:
        history.high_epoch_streak = 0
    if history.high_epoch_streak >= rules.patience:
        history.trigger = (
            f"loss above {rules.loss_ratio_limit:.0f}x first-epoch median for "
            f"{rules.patience} consecutive epochs"
        )
        return "diverged"
    return "ok"


class RmsProp:
    """Plain RMSProp: square-average tracking, no momentum, no bias terms."""

    def __init__(self, decay: float = 0.9, epsilon: float = 1e-8):
        self.decay = decay
        self.epsilon = epsilon
        self.sq_avg: dict[str, np.ndarray] = {}

    def step(self, params: dict, learning_rate: float) -> None:
        for name, tensor in params.items():
            if tensor.grad is None:
                continue
            sq = self.sq_avg.get(name)
            if sq is None:
                sq = self.sq_avg[name] = np.zeros_like(tensor.data)
            sq *= self.decay
            sq += (1.0 - self.decay) * tensor.grad ** 2
            tensor.data -= learning_rate * tensor.grad / (np.sqrt(sq) + self.epsilon)


def config_hash(model_config: ModelConfig, train_config: TrainConfig) -> str:
    blob = json.dumps({"model": model_config.to_dict(), "train": train_config.to_dict()},
                      sort_keys=True)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def _global_grad_norm(params: dict) -> float:
    total = 0.0
    for t in params.values():
        if t.grad is not None:
            total += float((t.grad ** 2).sum())
    return math.sqrt(total)


def _accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float((logits.argmax(axis=1) == labels).mean())


def evaluate_loss(model: Model, x: np.ndarray, coords: np.ndarray,
                  labels: np.ndarray, batch_size: int = 512) -> tuple[float, float]:
    """Mean cross-entropy and single-step accuracy without gradient tracking."""
    losses, hits = [], 0
    for start in range(0, len(labels), batch_size):
        sl = slice(start, start + batch_size)
        logits = predict_logits(model, x[sl], coords[sl])
        targets = one_hot(labels[sl], logits.shape[1])
        z = logits - logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1))
        losses.extend(lse - (z * targets).sum(axis=1))
        hits += int((logits.argmax(axis=1) == labels[sl]).sum())
    return float(np.mean(losses)), hits / len(labels)


def train(model_config: ModelConfig, train_samples, val_samples,
          train_config: TrainConfig, *,
          model: Optional[Model] = None,
          optimizer: Optional[RmsProp] = None,
          start_epoch: int = 0,
          history: Optional[LossHistory] = None,
          record: Optional[RunRecord] = None,
          checkpoint_path=None,
          log: Optional[Callable[[EpochStats], None]] = None) -> tuple[Model, RunRecord]:
    """Imitation learning on expert labels; returns the model and its RunRecord.

    ``model``/``optimizer``/``start_epoch``/``history``/``record`` support
    resuming from a training checkpoint; fresh runs leave them unset.
    """
    if train_config.optimizer != "rmsprop":
        raise ValueError(f"unsupported optimizer {train_config.optimizer!r}")
    t0 = time.perf_counter()
    x, coords, labels, _ = encode_samples(train_samples)
    vx, vcoords, vlabels, _ = encode_samples(val_samples)

    model = model or init_params(model_config, train_config.seed)
    optimizer = optimizer or RmsProp(train_config.rms_decay, train_config.rms_epsilon)
    history = history or LossHistory()
    record = record or RunRecord(config_hash(model_config, train_config))
    rules = train_config.divergence
    params = model.named_parameters()
    n = len(train_samples)

    for epoch in range(start_epoch, train_config.epochs):
        order = np.random.default_rng([train_config.seed, epoch]).permutation(n)
        batch_losses, batch_hits, batch_counts = [], 0, 0
        status = "ok"
        for start in range(0, n, train_config.batch_size):
            idx = order[start:start + train_config.batch_size]
            targets = one_hot(labels[idx])
            with Tape() as tape:
                logits = forward(model, x[idx], coords[idx])
                loss = softmax_cross_entropy(logits, targets)
            for t in params.values():
                t.grad = None
            backward(loss, tape)

            loss_value = loss.item()
            grad_norm = _global_grad_norm(params)
            batch_losses.append(loss_value)
            batch_hits += int((logits.data.reshape(len(idx), -1).argmax(axis=1) == labels[idx]).sum())
            batch_counts += len(idx)
            if epoch == 0:
                history.epoch1_losses.append(loss_value)
            status = detect_divergence(loss_value, grad_norm, history, rules)
            if status == "diverged":
                break
            if train_config.grad_clip is not None and grad_norm > train_config.grad_clip:
                scale = train_config.grad_clip / grad_norm
                for t in params.values():
                    if t.grad is not None:
                        t.grad *= scale
            optimizer.step(params, train_config.learning_rate)

        if epoch == 0 and history.epoch1_losses:
            history.epoch1_median = float(np.median(history.epoch1_losses))
        epoch_mean = float(np.mean(batch_losses)) if batch_losses else float("nan")
        if status == "ok":
            status = end_epoch_divergence(epoch_mean, history, rules)

        if status == "diverged":
            record.status = "diverged"
            record.divergence_epoch = epoch + 1
            record.divergence_trigger = history.trigger
            break

        val_loss, val_acc = evaluate_loss(model, vx, vcoords, vlabels)
        stats = EpochStats(epoch + 1, epoch_mean, batch_hits / batch_counts, val_loss, val_acc)
        record.epochs.append(stats)
        if log:
            log(stats)
        if checkpoint_path and train_config.checkpoint_every:
            if (epoch + 1) % train_config.checkpoint_every == 0:
                save_training_checkpoint(checkpoint_path, model, optimizer,
                                         train_config, epoch + 1, history, record)

    record.wall_seconds = time.perf_counter() - t0
    return model, record


# ---------------------------------------------------------------------------
# training checkpoints (model + optimizer + progress in one container)


def save_training_checkpoint(path, model: Model, optimizer: RmsProp,
                             train_config: TrainConfig, epochs_done: int,
                             history: LossHistory, record: RunRecord) -> None:
    extra = {
        "train": train_config.to_dict(),
        "progress": {
            "epochs_done": epochs_done,
            "history": {
                "epoch1_median": history.epoch1_median,
                "high_epoch_streak": history.high_epoch_streak,
            },
            "record": {
                "config_hash": record.config_hash,
                "status": record.status,
                "epochs": [dataclasses.asdict(e) for e in record.epochs],
            },
        },
    }
    slots = {f"opt/sq_avg/{name}": arr for name, arr in optimizer.sq_avg.items()}
    ckpt.save_model(path, model, extra_config=extra, extra_arrays=slots)


def load_training_checkpoint(path):
    """Restore (model, optimizer, train_config, epochs_done, history, record)."""
    model, config, rest = ckpt.load_model(path)
    train_config = TrainConfig.from_dict(config["train"])
    progress = config["progress"]
    optimizer = RmsProp(train_config.rms_decay, train_config.rms_epsilon)
    prefix = "opt/sq_avg/"
    optimizer.sq_avg = {name[len(prefix):]: arr.copy()
                        for name, arr in rest.items() if name.startswith(prefix)}
    history = LossHistory(
        epoch1_median=progress["history"]["epoch1_median"],
        high_epoch_streak=progress["history"]["high_epoch_streak"],
    )
    rec_raw = progress["record"]
    record = RunRecord(rec_raw["config_hash"], [EpochStats(**e) for e in rec_raw["epochs"]],
                       status=rec_raw["status"])
    return model, optimizer, train_config, progress["epochs_done"], history, record


def resume_training(path, train_samples, val_samples, *,
                    log: Optional[Callable[[EpochStats], None]] = None) -> tuple[Model, RunRecord]:
    model, optimizer, train_config, done, history, record = load_training_checkpoint(path)
    return train(model.config, train_samples, val_samples, train_config,
                 model=model, optimizer=optimizer, start_epoch=done,
                 history=history, record=record, log=log)
