"""Minibatch SGD with momentum for the ConvNet classifier"""
from dataclasses import dataclass, field
from typing import List

import numpy as np
import structlog

from .model import ConvNetModel, loss_and_grads, refresh_bn_statistics
from .tensor import NonFiniteError

log = structlog.get_logger()


@dataclass(frozen=True)
class TrainConfig:
    """SGD settings, plus the batch-norm settle phase that ends training

    After the last epoch, *settle_steps* train-mode forward passes over
    batches of *settle_batch_size* fold more batch statistics into the BN
    running averages with the weights frozen, so that they describe the
    final weights rather than a blend of recent ones.
    """
    lr: float = 0.01
    momentum: float = 0.9
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0
    settle_steps: int = 300
    settle_batch_size: int = 128

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"Learning rate must be positive, not {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"Momentum must be in [0, 1), not {self.momentum}")
        if self.epochs < 0:
            raise ValueError("Epoch count can't be negative")
        if self.batch_size < 1 or self.settle_batch_size < 1:
            raise ValueError("Batch size must be at least 1")
        if self.settle_steps < 0:
            raise ValueError("Settle step count can't be negative")


@dataclass
class TrainResult:
    model: ConvNetModel
    epoch_losses: List[float] = field(default_factory=list)
    epoch_accuracies: List[float] = field(default_factory=list)
    step_losses: List[float] = field(default_factory=list)


def settle_bn_statistics(model: ConvNetModel, images, steps, batch_size, rng):
    """Run *steps* weight-frozen train-mode passes over shuffled *images*"""
    n = len(images)
    done = 0
    while done < steps:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            if done == steps:
                break
            refresh_bn_statistics(model, images[order[start:start + batch_size]])
            done += 1
    log.info("batch-norm statistics settled", steps=steps, batch_size=batch_size)


def train_classifier(model: ConvNetModel, images, labels,
                     config: TrainConfig = TrainConfig()) -> TrainResult:
    """Train a copy of *model*; the argument itself is not modified

    BN runs in train mode throughout, so the running statistics accumulate,
    and the settle phase brings them up to date with the final weights.
    They stay frozen once this returns. With ``epochs=0`` nothing changes.
    """
    n = len(images)
    if n == 0:
        raise ValueError("Can't train on an empty dataset")
    labels = np.asarray(labels)

    model = model.copy()
    rng = np.random.default_rng(config.seed)
    velocity = {name: np.zeros_like(getattr(layer, attr))
                for name, layer, attr in model.parameters()}
    result = TrainResult(model)

    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total_loss = 0.0
        correct = 0
        for step, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            res = loss_and_grads(model, images[idx], labels[idx], mode='train')
            if not np.isfinite(res.loss):
                raise NonFiniteError(
                    "training loss", f"epoch {epoch}, step {step}: {res.loss}")

            for name, layer, attr in model.parameters():
                v = velocity[name]
                v *= config.momentum
                v += res.grads[name]
                setattr(layer, attr, getattr(layer, attr) - config.lr * v)

            result.step_losses.append(res.loss)
            total_loss += res.loss * len(idx)
            correct += int((res.logits.argmax(axis=1) == labels[idx]).sum())

        result.epoch_losses.append(total_loss / n)
        result.epoch_accuracies.append(correct / n)
        log.info("epoch done", epoch=epoch, loss=round(total_loss / n, 6),
                 train_acc=round(correct / n, 4))

    if config.epochs and config.settle_steps:
        settle_bn_statistics(model, images, config.settle_steps,
                             config.settle_batch_size, rng)
    return result
