"""Mini-batch training of a DenseNet with any of the smoothing objectives."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .data import Dataset
from .losses import TrainConfig, compute_loss
from .rng import example_noise

# stream ids separating the noise used for training from diagnostics
TRAIN_STREAM = 101
EVAL_STREAM = 102


@dataclass
class EpochLog:
    epoch: int
    loss: float
    clean_accuracy: float
    noisy_accuracy: float


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, 7, epoch]).permutation(n)


def train(net: nn.DenseNet, data: Dataset, cfg: TrainConfig, seed: int = 0, on_epoch=None):
    """Train ``net`` in place; returns (net, list of EpochLog).

    Noise for example i in epoch e is stream (seed, TRAIN_STREAM, e, i) and
    SmoothAdv variants reuse those draws for both the attack and the update.
    """
    cfg.validate()
    opt = cfg.optim
    state = nn.SGDState()
    x_all, y_all = data.inputs, data.labels
    logs = []
    for epoch in range(opt.epochs):
        order = epoch_order(seed, epoch, len(data))
        total = 0.0
        for start in range(0, len(order), opt.batch_size):
            idx = order[start:start + opt.batch_size]
            deltas = example_noise(seed, (TRAIN_STREAM, epoch), idx, cfg.m, data.dim, cfg.sigma)
            out = compute_loss(net, x_all[idx], y_all[idx], deltas, cfg, epoch)
            nn.sgd_step(net, out.grads, state, opt, epoch)
            total += out.value * len(idx)
        log = EpochLog(epoch, total / len(order), *accuracies(net, data, cfg.sigma, seed, epoch))
        logs.append(log)
        if on_epoch is not None:
            on_epoch(log)
    return net, logs


def accuracies(net: nn.DenseNet, data: Dataset, sigma: float, seed: int = 0, tag: int = 0):
    """Clean accuracy and accuracy under one Gaussian draw per example."""
    clean = float(np.mean(net.predict(data.inputs) == data.labels))
    noise = example_noise(seed, (EVAL_STREAM, tag), np.arange(len(data)), 1, data.dim, sigma)[0]
    noisy = float(np.mean(net.predict(data.inputs + noise) == data.labels))
    return clean, noisy
