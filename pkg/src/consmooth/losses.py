"""Training objectives for smoothed classifiers.

Each objective has a *head* operating on logits of shape (m, B, K) (m noise
draws, B examples) that returns the batch-mean loss and dL/dlogits, and a
wrapper that runs the network forward on ``x + delta`` and backpropagates.
All batch losses are means over examples.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .nn import DenseNet, log_softmax, logsumexp
from .stats import norm_ppf, norm_ppf_grad

LOSS_KINDS = (
    "gaussian",
    "consistency",
    "stability",
    "mse_ablation",
    "kl_ablation",
    "macer",
    "smoothadv",
    "smoothadv_consistency",
)
# objectives whose regularizer needs at least two draws per example
NEEDS_TWO_DRAWS = ("consistency", "kl_ablation", "mse_ablation", "smoothadv_consistency")

MACER_CLAMP = 1e-6


class ConfigError(ValueError):
    """An invalid training/certification configuration."""


@dataclass
class MacerParams:
    gamma: float = 8.0
    beta: float = 16.0


@dataclass
class AttackParams:
    steps: int = 10
    epsilon: float = 1.0
    step_size: float | None = None  # None means 2 * epsilon / steps
    warmup_epochs: int = 10

    def step_for(self, epsilon: float) -> float:
        if self.step_size is not None:
            return self.step_size
        return 2.0 * epsilon / max(self.steps, 1)

    def epsilon_at(self, epoch: int) -> float:
        """Attack radius ramped linearly from 0 over the warm-up epochs."""
        if self.warmup_epochs <= 0:
            return self.epsilon
        return self.epsilon * min(1.0, epoch / self.warmup_epochs)


@dataclass
class TrainConfig:
    sigma: float = 0.25
    lam: float = 10.0
    eta: float = 0.5
    m: int = 2
    loss_kind: str = "consistency"
    macer: MacerParams = field(default_factory=MacerParams)
    attack: AttackParams = field(default_factory=AttackParams)
    optim: nn.OptimConfig = field(default_factory=nn.OptimConfig)

    def validate(self) -> "TrainConfig":
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"unknown loss_kind {self.loss_kind!r}; choose from {', '.join(LOSS_KINDS)}")
        if not self.sigma > 0:
            raise ConfigError("sigma must be positive")
        if self.m < 1:
            raise ConfigError("m must be >= 1")
        if self.loss_kind in NEEDS_TWO_DRAWS and self.m < 2:
            raise ConfigError(f"{self.loss_kind} needs m >= 2 (the divergence term vanishes with one draw)")
        if self.lam < 0 or self.eta < 0:
            raise ConfigError("lambda and eta must be non-negative")
        if self.loss_kind == "macer" and (self.macer.gamma <= 0 or self.macer.beta < 1):
            raise ConfigError("macer needs gamma > 0 and beta >= 1")
        if self.loss_kind.startswith("smoothadv"):
            a = self.attack
            if a.epsilon < 0 or a.steps < 0 or (a.step_size is not None and a.step_size <= 0):
                raise ConfigError("attack needs epsilon >= 0, steps >= 0, step_size > 0")
        return self


@dataclass
class LossOutput:
    value: float
    grads: list | None = None


def _onehot(y, k):
    out = np.zeros((len(y), k))
    out[np.arange(len(y)), y] = 1.0
    return out


def _softmax_backprop(p, dp):
    """dL/dz from dL/dp for p = softmax(z), along the last axis."""
    return p * (dp - (dp * p).sum(axis=-1, keepdims=True))


def _mean_log_prob(lp):
    """log of the mean prediction over draws, (m, B, K) -> (B, K)."""
    return logsumexp(lp, axis=0) - math.log(lp.shape[0])


# ---------------------------------------------------------------------------
# heads: logits -> (batch-mean value, dL/dlogits)


def gaussian_head(z, y):
    m, b, k = z.shape
    lp = log_softmax(z)
    p = np.exp(lp)
    value = -lp[:, np.arange(b), y].mean()
    dz = (p - _onehot(y, k)) / (m * b)
    return float(value), dz


def kl_to_mean(probs: np.ndarray) -> float:
    """(1/m) sum_i KL(mean || p_i) for one example's draws, probs of shape (m, K)."""
    lp = np.log(np.asarray(probs, dtype=np.float64))
    log_pbar = _mean_log_prob(lp[:, None, :])[0]
    pbar = np.exp(log_pbar)
    return float((pbar * (log_pbar - lp)).sum(axis=-1).mean())


def consistency_head(z, y, lam, eta):
    """Cross-entropy on each draw + lam * mean KL(pbar || p_i) + eta * H(pbar)."""
    value, dz = gaussian_head(z, y)
    if not (lam or eta):
        return value, dz
    m, b, _ = z.shape
    lp = log_softmax(z)
    p = np.exp(lp)
    log_pbar = _mean_log_prob(lp)
    pbar = np.exp(log_pbar)
    mean_lp = lp.mean(axis=0)
    neg_ent = (pbar * log_pbar).sum(axis=-1)
    kl = neg_ent - (pbar * mean_lp).sum(axis=-1)
    value += float((lam * kl - eta * neg_ent).mean())
    # pbar enters both directly and through every p_i (no stop-gradient)
    dpbar = lam * (log_pbar + 1.0 - mean_lp) - eta * (log_pbar + 1.0)
    dz_reg = _softmax_backprop(p, dpbar[None] / m)
    dz_reg += -(lam / m) * (pbar[None] - p)
    return value, dz + dz_reg / b


def stability_head(z0, z, y, lam):
    """CE(F(x), y) + lam * mean_i CE_soft(F(x), F(x + d_i)), clean target not detached.

    ``z0`` are clean logits (B, K), ``z`` noisy logits (m, B, K).
    """
    m, b, k = z.shape
    lp0 = log_softmax(z0)
    p0 = np.exp(lp0)
    value = -lp0[np.arange(b), y].mean()
    dz0 = (p0 - _onehot(y, k)) / b
    dz = np.zeros_like(z)
    if lam:
        lp = log_softmax(z)
        p = np.exp(lp)
        soft_ce = -(p0[None] * lp).sum(axis=-1).mean(axis=0)
        value += lam * soft_ce.mean()
        dz = -(lam / (m * b)) * (p0[None] - p)
        dp0 = -(lam / m) * lp.sum(axis=0)
        dz0 = dz0 + _softmax_backprop(p0, dp0) / b
    return float(value), dz0, dz


def mse_head(z, y, lam):
    """Gaussian loss + lam * ||F(x + d_1) - F(x + d_2)||^2."""
    value, dz = gaussian_head(z, y)
    if z.shape[0] < 2:
        raise ValueError("mse regularizer needs m >= 2")
    if lam:
        b = z.shape[1]
        p = np.exp(log_softmax(z[:2]))
        diff = p[0] - p[1]
        value += float(lam * (diff**2).sum(axis=-1).mean())
        dp = np.stack([2 * lam * diff, -2 * lam * diff])
        dz = dz.copy()
        dz[:2] += _softmax_backprop(p, dp) / b
    return value, dz


def macer_head(z, y, lam, gamma, beta, sigma):
    """CE on the tempered mean prediction + hinge on its soft certified radius.

    The radius term is lam * sigma/2 * max(gamma - (Phi^-1(pbar_y) - Phi^-1(pbar_c2)), 0),
    only for examples whose mean prediction is correct. Quantile inputs are
    clamped to [1e-6, 1 - 1e-6]; clamped coordinates pass no gradient.
    """
    m, b, _ = z.shape
    lpb = log_softmax(beta * z)
    pb = np.exp(lpb)
    log_pbar = _mean_log_prob(lpb)
    pbar = np.exp(log_pbar)
    rows = np.arange(b)
    value = -log_pbar[rows, y].mean()
    dpbar = np.zeros_like(pbar)
    dpbar[rows, y] = -1.0 / pbar[rows, y]
    hinge_total = 0.0
    lo, hi = MACER_CLAMP, 1.0 - MACER_CLAMP
    coef = lam * sigma / 2.0
    for i in range(b):
        if np.argmax(pbar[i]) != y[i]:
            continue
        others = pbar[i].copy()
        others[y[i]] = -np.inf
        c2 = int(np.argmax(others))
        py, pc = pbar[i, y[i]], pbar[i, c2]
        cr = norm_ppf(min(max(py, lo), hi)) - norm_ppf(min(max(pc, lo), hi))
        if cr >= gamma:
            continue
        hinge_total += coef * (gamma - cr)
        if lo < py < hi:
            dpbar[i, y[i]] -= coef * norm_ppf_grad(py)
        if lo < pc < hi:
            dpbar[i, c2] += coef * norm_ppf_grad(pc)
    value += hinge_total / b
    dz = beta * _softmax_backprop(pb, dpbar[None] / m) / b
    return float(value), dz


def macer_radius(pbar, y) -> float:
    """Phi^-1(pbar_y) - Phi^-1(max_{c != y} pbar_c) with the MACER clamp."""
    pbar = np.asarray(pbar, dtype=np.float64)
    others = pbar.copy()
    others[y] = -np.inf
    lo, hi = MACER_CLAMP, 1.0 - MACER_CLAMP
    return norm_ppf(min(max(pbar[y], lo), hi)) - norm_ppf(min(max(others.max(), lo), hi))


def attack_head(z, y):
    """Per-example -log(mean_i F_y(x' + d_i)) and its logit gradient (not batch-averaged)."""
    m, b, _ = z.shape
    lp = log_softmax(z)
    p = np.exp(lp)
    lpy = lp[:, np.arange(b), y]  # (m, B)
    log_mean = logsumexp(lpy, axis=0) - math.log(m)
    w = np.exp(lpy - logsumexp(lpy, axis=0)[None])  # weight of each draw
    dz = w[..., None] * p
    dz[:, np.arange(b), y] -= w
    return -log_mean, dz


# ---------------------------------------------------------------------------
# network wrappers


def _noisy_forward(net, x, deltas):
    cache = nn.Cache()
    z = nn.forward_logits(net, np.asarray(x)[None] + deltas, cache)
    return z, cache


def _finish(net, cache, value, dz, grad):
    if not grad:
        return LossOutput(value)
    grads, _ = nn.backward(net, cache, dz)
    return LossOutput(value, grads)


def _as_batch(x, y, deltas):
    x = np.asarray(x, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if x.ndim == 1:
        x = x[None]
        if deltas.ndim == 2:
            deltas = deltas[:, None, :]
    if deltas.ndim != 3 or deltas.shape[1:] != x.shape:
        raise ValueError(f"deltas must have shape (m, B, d) matching x {x.shape}, got {deltas.shape}")
    return x, y, deltas


def gaussian_loss(net: DenseNet, x, y, deltas, grad: bool = True) -> LossOutput:
    """Mean cross-entropy over the noisy copies x + d_i."""
    x, y, deltas = _as_batch(x, y, deltas)
    z, cache = _noisy_forward(net, x, deltas)
    value, dz = gaussian_head(z, y)
    return _finish(net, cache, value, dz, grad)


def consistency_loss(net: DenseNet, x, y, deltas, lam: float, eta: float, grad: bool = True) -> LossOutput:
    x, y, deltas = _as_batch(x, y, deltas)
    if deltas.shape[0] < 2:
        raise ValueError("consistency regularization needs m >= 2 noise draws")
    z, cache = _noisy_forward(net, x, deltas)
    value, dz = consistency_head(z, y, lam, eta)
    return _finish(net, cache, value, dz, grad)


def stability_loss(net: DenseNet, x, y, deltas, lam: float, grad: bool = True) -> LossOutput:
    x, y, deltas = _as_batch(x, y, deltas)
    stacked = np.concatenate([x[None], x[None] + deltas])
    cache = nn.Cache()
    z = nn.forward_logits(net, stacked, cache)
    value, dz0, dz = stability_head(z[0], z[1:], y, lam)
    return _finish(net, cache, value, np.concatenate([dz0[None], dz]), grad)


def ablation_loss(net: DenseNet, x, y, deltas, lam: float, kind: str, grad: bool = True) -> LossOutput:
    """``kind='mse'``: squared distance between the first two noisy predictions;
    ``kind='kl'``: the consistency objective with eta = 0."""
    if kind == "kl":
        return consistency_loss(net, x, y, deltas, lam, 0.0, grad)
    if kind != "mse":
        raise ValueError(f"unknown ablation {kind!r}")
    x, y, deltas = _as_batch(x, y, deltas)
    if deltas.shape[0] < 2:
        raise ValueError("mse ablation needs m >= 2 noise draws")
    z, cache = _noisy_forward(net, x, deltas)
    value, dz = mse_head(z, y, lam)
    return _finish(net, cache, value, dz, grad)


def macer_loss(net: DenseNet, x, y, deltas, lam: float, gamma: float, beta: float, sigma: float,
               grad: bool = True) -> LossOutput:
    x, y, deltas = _as_batch(x, y, deltas)
    z, cache = _noisy_forward(net, x, deltas)
    value, dz = macer_head(z, y, lam, gamma, beta, sigma)
    return _finish(net, cache, value, dz, grad)


def smoothadv_attack(net: DenseNet, x, y, deltas, epsilon: float, steps: int,
                     step_size: float | None = None) -> np.ndarray:
    """L2 PGD on the soft-smoothed loss -log(mean_i F_y(x' + d_i)).

    Starts at x, takes normalized-gradient ascent steps and projects onto the
    ball of radius ``epsilon`` around x. The same draws are used at every step.
    """
    x, y, deltas = _as_batch(x, y, deltas)
    if epsilon <= 0 or steps <= 0:
        return x.copy()
    if step_size is None:
        step_size = 2.0 * epsilon / steps
    x_adv = x.copy()
    for _ in range(steps):
        cache = nn.Cache()
        z = nn.forward_logits(net, x_adv[None] + deltas, cache)
        _, dz = attack_head(z, y)
        _, dx = nn.backward(net, cache, dz, need_input=True)
        g = dx.sum(axis=0)
        norm = np.linalg.norm(g, axis=1, keepdims=True)
        x_adv = x_adv + step_size * np.divide(g, norm, out=np.zeros_like(g), where=norm > 0)
        offset = x_adv - x
        dist = np.linalg.norm(offset, axis=1, keepdims=True)
        scale = np.minimum(1.0, epsilon / np.maximum(dist, 1e-300))
        x_adv = x + offset * scale
    return x_adv


def attack_objective(net: DenseNet, x, y, deltas) -> np.ndarray:
    """Per-example -log(mean_i F_y(x + d_i))."""
    x, y, deltas = _as_batch(x, y, deltas)
    z = nn.forward_logits(net, x[None] + deltas)
    return attack_head(z, y)[0]


def smoothadv_train_loss(net: DenseNet, x_adv, y, deltas, lam: float = 0.0, eta: float = 0.0,
                         with_consistency: bool = False, grad: bool = True) -> LossOutput:
    """Noisy cross-entropy at the adversarial point, optionally plus the consistency term there."""
    if with_consistency:
        return consistency_loss(net, x_adv, y, deltas, lam, eta, grad)
    return gaussian_loss(net, x_adv, y, deltas, grad)


def compute_loss(net: DenseNet, x, y, deltas, cfg: TrainConfig, epoch: int = 0,
                 grad: bool = True) -> LossOutput:
    """Dispatch on ``cfg.loss_kind``. SmoothAdv kinds run the attack first."""
    kind = cfg.loss_kind
    if kind == "gaussian":
        return gaussian_loss(net, x, y, deltas, grad)
    if kind == "consistency":
        return consistency_loss(net, x, y, deltas, cfg.lam, cfg.eta, grad)
    if kind == "stability":
        return stability_loss(net, x, y, deltas, cfg.lam, grad)
    if kind == "mse_ablation":
        return ablation_loss(net, x, y, deltas, cfg.lam, "mse", grad)
    if kind == "kl_ablation":
        return ablation_loss(net, x, y, deltas, cfg.lam, "kl", grad)
    if kind == "macer":
        return macer_loss(net, x, y, deltas, cfg.lam, cfg.macer.gamma, cfg.macer.beta, cfg.sigma, grad)
    if kind in ("smoothadv", "smoothadv_consistency"):
        eps = cfg.attack.epsilon_at(epoch)
        x_adv = smoothadv_attack(net, x, y, deltas, eps, cfg.attack.steps, cfg.attack.step_for(eps))
        return smoothadv_train_loss(net, x_adv, y, deltas, cfg.lam, cfg.eta,
                                    kind == "smoothadv_consistency", grad)
    raise ConfigError(f"unknown loss_kind {kind!r}")
