"""Gaussian-smoothed prediction and the two-round Monte-Carlo certificate.

A base classifier is anything with ``predict(X) -> labels`` for a batch
``X`` of shape (N, d) and a ``num_classes`` attribute; ``DenseNet`` qualifies.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .rng import NoiseStream
from .stats import DomainError, clopper_pearson_lower, norm_ppf

ABSTAIN = -1

SELECTION_ROUND = 0
ESTIMATION_ROUND = 1


@dataclass(frozen=True)
class CertifyConfig:
    sigma: float = 0.25
    n0: int = 100
    n: int = 100_000
    alpha: float = 0.001
    seed: int = 0
    batch_size: int = 1000

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.n0 < 1 or self.n < 1 or self.batch_size < 1:
            raise ValueError("n0, n and batch_size must be >= 1")
        if not (0.0 < self.alpha < 1.0):
            raise ValueError("alpha must lie in (0, 1)")


@dataclass(frozen=True)
class CertResult:
    prediction: int
    radius: float
    p1_lower: float
    counts: np.ndarray

    @property
    def abstained(self) -> bool:
        return self.prediction == ABSTAIN


def smoothed_predict_counts(model, x, sigma: float, n_samples: int, stream: NoiseStream,
                            batch_size: int = 1000) -> np.ndarray:
    """Class tallies of ``model`` on ``n_samples`` noisy copies ``x + sigma * z``.

    Rows 0 .. n_samples-1 of ``stream`` supply z, so the tally does not depend
    on ``batch_size``.
    """
    x = np.asarray(x, dtype=np.float64)
    counts = np.zeros(model.num_classes, dtype=np.int64)
    done = 0
    while done < n_samples:
        b = min(batch_size, n_samples - done)
        batch = x[None, :] + stream.rows(done, b, sigma)
        counts += np.bincount(model.predict(batch), minlength=model.num_classes)
        done += b
    return counts


def radius_cap(sigma: float, n: int, alpha: float) -> float:
    """Largest radius certify can return: every one of the n samples agrees."""
    return sigma * norm_ppf(clopper_pearson_lower(n, n, alpha))


def certify(model, x, cfg: CertifyConfig, index: int = 0) -> CertResult:
    """Predict with the smoothed classifier at ``x`` and certify an L2 radius.

    Selection uses ``n0`` draws of stream (seed, index, 0) to pick the top class
    (ties to the lowest index); estimation counts that class over ``n`` fresh
    draws of stream (seed, index, 1). The radius is sigma * Phi^-1(p_lower); the
    result abstains when p_lower <= 1/2.
    """
    dim = np.asarray(x).shape[-1]
    select = NoiseStream(cfg.seed, index, SELECTION_ROUND, dim=dim)
    estimate = NoiseStream(cfg.seed, index, ESTIMATION_ROUND, dim=dim)
    counts0 = smoothed_predict_counts(model, x, cfg.sigma, cfg.n0, select, cfg.batch_size)
    top = int(np.argmax(counts0))
    counts = smoothed_predict_counts(model, x, cfg.sigma, cfg.n, estimate, cfg.batch_size)
    p1_lower = clopper_pearson_lower(int(counts[top]), cfg.n, cfg.alpha)
    if p1_lower <= 0.5:
        return CertResult(ABSTAIN, 0.0, p1_lower, counts)
    return CertResult(top, cfg.sigma * norm_ppf(p1_lower), p1_lower, counts)


def certify_many(model, inputs, cfg: CertifyConfig, indices=None, threads: int = 1):
    """Certify every row of ``inputs``; yields results in row order.

    Each example owns its noise streams, so the output is the same for any
    thread count.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if indices is None:
        indices = range(len(inputs))
    jobs = list(zip(indices, inputs))
    if threads <= 1:
        for i, x in jobs:
            yield certify(model, x, cfg, i)
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        yield from pool.map(lambda job: certify(model, job[1], cfg, job[0]), jobs)


def certified_radius_two_sided(p1: float, p2: float, sigma: float) -> float:
    """sigma/2 * (Phi^-1(p1) - Phi^-1(p2)) for top-class and runner-up probabilities."""
    if not (0.0 < p2 <= p1 < 1.0) or p1 + p2 > 1.0 + 1e-15:
        raise DomainError(f"need 0 < p2 <= p1 < 1 and p1 + p2 <= 1, got p1={p1}, p2={p2}")
    return 0.5 * sigma * (norm_ppf(p1) - norm_ppf(p2))
