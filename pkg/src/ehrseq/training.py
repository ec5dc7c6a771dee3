"""Seeded training loop: shuffled mini-batches, early stopping on validation
AUPRC, best-validation parameters restored at the end."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import LabelError, NumericsError
from .events import TaskKind, TASKS
from .metrics import task_auprc
from .models import loss_for
from .neural import tensor as T
from .neural.optim import AdamW


@dataclass(frozen=True)
class TrainerConfig:
    lr: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 5
    weight_decay: float = 0.01
    pos_weight: float | None = None  # binary tasks only
    eval_batch_size: int = 64

    def to_dict(self) -> dict:
        return {"lr": self.lr, "batch_size": self.batch_size,
                "max_epochs": self.max_epochs, "patience": self.patience,
                "weight_decay": self.weight_decay, "pos_weight": self.pos_weight,
                "eval_batch_size": self.eval_batch_size}

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainerConfig":
        return cls(**doc)


@dataclass
class TrainResult:
    best_epoch: int
    best_valid_auprc: float
    epochs_run: int
    stopped_early: bool
    history: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"best_epoch": self.best_epoch, "best_valid_auprc": self.best_valid_auprc,
                "epochs_run": self.epochs_run, "stopped_early": self.stopped_early,
                "history": self.history}


def labels_array(samples, task: str) -> np.ndarray:
    spec = TASKS.get(task)
    if spec is None:
        raise LabelError(f"unknown task {task!r}")
    values = []
    for s in samples:
        label = s.labels.get(task)
        if label is None:
            raise LabelError(f"sample {s.stay_id} has no label for {task}")
        values.append(label.value)
    if spec.kind is TaskKind.MULTICLASS:
        return np.asarray(values, dtype=np.int64)
    return np.asarray(values, dtype=np.float64)


def predict_dataset(model, inputs, batch_size: int = 64) -> np.ndarray:
    """Probabilities for a whole dataset, evaluated in bounded chunks."""
    parts = [model.predict(inputs[i:i + batch_size])
             for i in range(0, len(inputs), batch_size)]
    return np.concatenate(parts, axis=0)


def train_model(model, train_inputs, train_labels, valid_inputs, valid_labels,
                cfg: TrainerConfig, seed: int) -> TrainResult:
    """Train in place; on return the model holds its best-validation weights.

    Divergence (non-finite loss) raises NumericsError carrying the history so
    far as ``partial_history``.
    """
    params = model.params()
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    kind = model.spec.task_kind
    n = len(train_inputs)
    history: list[dict] = []
    best = -np.inf
    best_epoch = 0
    best_params: dict[str, np.ndarray] = {}
    step = 0
    prev_seed, prev_step = T.state.dropout_seed, T.state.dropout_step
    try:
        T.state.dropout_seed = seed
        epochs_run = 0
        stopped_early = False
        for epoch in range(1, cfg.max_epochs + 1):
            order = np.random.default_rng([seed, epoch]).permutation(n)
            batch_losses = []
            with T.training_mode():
                for lo in range(0, n, cfg.batch_size):
                    chunk = order[lo:lo + cfg.batch_size]
                    T.state.dropout_step = step
                    step += 1
                    opt.zero_grad()
                    loss = loss_for(model, [train_inputs[i] for i in chunk],
                                    train_labels[chunk], cfg.pos_weight)
                    value = loss.item()
                    if not np.isfinite(value):
                        err = NumericsError(
                            f"non-finite training loss at epoch {epoch}")
                        err.partial_history = history
                        raise err
                    loss.backward()
                    opt.step()
                    batch_losses.append(value)
            probs = predict_dataset(model, valid_inputs, cfg.eval_batch_size)
            score = task_auprc(kind, probs, valid_labels)
            history.append({"epoch": epoch, "train_loss": float(np.mean(batch_losses)),
                            "valid_auprc": score})
            epochs_run = epoch
            if score > best:
                best = score
                best_epoch = epoch
                best_params = {name: p.data.copy() for name, p in params.items()}
            if epoch - best_epoch >= cfg.patience:
                stopped_early = True
                break
        for name, p in params.items():
            p.data[...] = best_params[name]
        return TrainResult(best_epoch=best_epoch, best_valid_auprc=float(best),
                           epochs_run=epochs_run, stopped_early=stopped_early,
                           history=history)
    finally:
        T.state.dropout_seed, T.state.dropout_step = prev_seed, prev_step
