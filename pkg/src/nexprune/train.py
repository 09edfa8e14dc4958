"""Plain minibatch SGD with a step learning-rate schedule."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import NonFiniteError
from .network import Network, cross_entropy_loss, sgd_step
from .sampling import Dataset

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 20
    lr: float = 0.05
    batch_size: int = 64
    milestones: tuple = (0.5, 0.75)  # fractions of ``epochs``
    gamma: float = 0.1
    seed: int = 0

    def lr_at(self, epoch: int) -> float:
        lr = self.lr
        for frac in self.milestones:
            if epoch >= int(round(frac * self.epochs)):
                lr *= self.gamma
        return lr

    def to_dict(self):
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d


@dataclass
class TrainLog:
    losses: list = field(default_factory=list)
    train_accuracy: list = field(default_factory=list)


def train(net: Network, data: Dataset, cfg: TrainConfig, epochs: int | None = None) -> TrainLog:
    """Train ``net`` in place; ``epochs`` overrides ``cfg.epochs`` (schedule still uses cfg)."""
    epochs = cfg.epochs if epochs is None else epochs
    rng = np.random.default_rng(cfg.seed)
    log_ = TrainLog()
    n = len(data)
    for epoch in range(epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(n)
        total, correct = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue
            out, _ = net.forward(data.samples[idx], train=True)
            loss, grad = cross_entropy_loss(out, data.labels[idx])
            if not np.isfinite(loss):
                raise NonFiniteError(f"non-finite loss at epoch {epoch}")
            grads = net.backward(grad)
            sgd_step(net, grads, lr)
            total += loss * len(idx)
            correct += int((out.argmax(axis=1) == data.labels[idx]).sum())
        log_.losses.append(total / n)
        log_.train_accuracy.append(correct / n)
        log.debug("epoch %d lr %.4g loss %.4f acc %.3f", epoch, lr, total / n, correct / n)
    return log_


def predict(net: Network, samples: np.ndarray, batch_size: int = 500) -> np.ndarray:
    outs = [net.forward(samples[i:i + batch_size], bn="running")[0]
            for i in range(0, len(samples), batch_size)]
    return np.concatenate(outs).argmax(axis=1)


def evaluate(net: Network, data: Dataset) -> float:
    return float((predict(net, data.samples) == data.labels).mean())


def finetune_hook(data: Dataset, cfg: TrainConfig):
    """Trainer callback for the pruning engine: ``hook(net, epochs)`` trains in place."""
    def hook(net: Network, epochs: int):
        if epochs > 0:
            train(net, data, cfg, epochs=epochs)
        return net
    return hook
