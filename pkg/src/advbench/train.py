"""SGD training loop with momentum, weight decay, and a step schedule.

Everything is deterministic given (config, data, parameters): epoch
shuffles come from one generator seeded by the config, and the update
rule touches parameters in their naming order.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tape, Tensor, backward
from .data import Dataset, batches
from .nn import Module, predict
from .ops import softmax_cross_entropy

__all__ = ["TrainConfig", "EpochStats", "sgd_step", "train", "evaluate", "write_history_csv"]


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_decay_epochs: tuple = ()
    lr_decay_factor: float = 0.1
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.epochs < 0:
            raise ValueError(f"train.epochs must be non-negative, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"train.batch_size must be positive, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ValueError(f"train.learning_rate must be positive, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"train.momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"train.weight_decay must be non-negative, got {self.weight_decay}")
        if not 0 < self.lr_decay_factor <= 1:
            raise ValueError(f"train.lr_decay_factor must be in (0, 1], got {self.lr_decay_factor}")
        decays = tuple(self.lr_decay_epochs)
        if list(decays) != sorted(set(decays)):
            raise ValueError(f"train.lr_decay_epochs must be strictly increasing, got {decays}")
        if any(e < 1 or e > self.epochs for e in decays):
            raise ValueError(
                f"train.lr_decay_epochs entries must lie in [1, {self.epochs}], got {decays}"
            )
        self.lr_decay_epochs = decays
        return self


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: float


def sgd_step(params: dict, grads: dict, state: dict, lr: float,
             momentum: float, weight_decay: float) -> tuple[dict, dict]:
    """One momentum step, in place:

        v <- momentum * v + grad + weight_decay * param
        param <- param - lr * v
    """
    for name, param in params.items():
        grad = grads[name]
        if grad is None:
            raise ValueError(f"parameter {name} has no gradient")
        if grad.shape != param.data.shape:
            raise ValueError(
                f"gradient shape {grad.shape} does not match parameter {name} {param.data.shape}"
            )
        v = state.get(name)
        if v is None:
            v = np.zeros_like(param.data)
            state[name] = v
        v *= momentum
        v += grad
        if weight_decay:
            v += weight_decay * param.data
        param.data -= lr * v
    return params, state


def evaluate(model: Module, dataset: Dataset, batch_size: int = 256) -> float:
    """Clean accuracy in [0, 1]; leaves the model's mode as it found it."""
    was_training = model.training
    model.eval()
    correct = 0
    for images, labels in batches(dataset, batch_size):
        correct += int((predict(model, images) == labels).sum())
    if was_training:
        model.train()
    return correct / len(dataset)


def train(model: Module, train_set: Dataset, test_set: Dataset,
          config: TrainConfig) -> list[EpochStats]:
    """Train in place and return per-epoch statistics."""
    config.validate()
    if model.config.num_classes != train_set.num_classes:
        raise ValueError(
            f"model expects {model.config.num_classes} classes, "
            f"dataset {train_set.name} has {train_set.num_classes}"
        )
    params = dict(model.named_parameters())
    state: dict[str, np.ndarray] = {}
    shuffler = np.random.default_rng(config.seed)
    lr = config.learning_rate
    history: list[EpochStats] = []
    for epoch in range(1, config.epochs + 1):
        if epoch in config.lr_decay_epochs:
            lr *= config.lr_decay_factor
        model.train()
        epoch_seed = int(shuffler.integers(0, 2**63))
        loss_sum = 0.0
        correct = 0
        for images, labels in batches(train_set, config.batch_size, shuffle_seed=epoch_seed):
            x = Tensor(images)
            with Tape() as tape:
                logits = model(x)
                loss = softmax_cross_entropy(logits, labels)
            model.zero_grad()
            backward(loss)
            sgd_step(params, {n: p.grad for n, p in params.items()}, state,
                     lr, config.momentum, config.weight_decay)
            loss_sum += float(loss.data) * len(labels)
            correct += int((np.argmax(logits.data, axis=1) == labels).sum())
            # Tape records point at intermediate tensors which point back at
            # the tape; dropping them here lets each step's activations free
            # immediately instead of waiting on a cycle collection.
            tape.records.clear()
        n = len(train_set)
        test_acc = evaluate(model, test_set)
        history.append(EpochStats(epoch, loss_sum / n, correct / n, test_acc))
    model.eval()
    return history


def write_history_csv(history: list[EpochStats], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "train_acc", "test_acc"])
        for stats in history:
            writer.writerow([stats.epoch, repr(stats.train_loss),
                             repr(stats.train_acc), repr(stats.test_acc)])
    return path
