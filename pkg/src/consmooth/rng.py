"""Counter-based Gaussian noise streams.

Every draw is a pure function of (key, counter), where the key is hashed from
a seed plus any number of integer stream ids (example index, round, epoch...).
Draws therefore do not depend on evaluation order, batch size or thread count.
The mixing function is the SplitMix64 finalizer; normals come from Box-Muller
on pairs of counters.
"""
import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_TWO_PI = 2.0 * np.pi


def _mix64(z):
    z = np.asarray(z, dtype=np.uint64)
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _as_u64(x):
    return np.asarray(x, dtype=np.int64).astype(np.uint64)


def stream_keys(seed: int, *ids, last=None) -> np.ndarray:
    """Stream keys for (seed, *ids, j) with j running over the array ``last``."""
    with np.errstate(over="ignore"):
        h = _mix64(_as_u64(seed) + _GAMMA)
        for i in ids:
            h = _mix64(h ^ _mix64(_as_u64(i) + _GAMMA))
        if last is not None:
            h = _mix64(h ^ _mix64(_as_u64(last) + _GAMMA))
    return h


def stream_key(seed: int, *ids: int) -> int:
    """Hash a seed and stream ids into a 64-bit stream key."""
    return int(stream_keys(seed, *ids))


def uniforms(key, counters) -> np.ndarray:
    """Uniform doubles in (0, 1), one per uint64 counter (key broadcasts)."""
    c = np.asarray(counters, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = _mix64(np.asarray(key, dtype=np.uint64) + (c + np.uint64(1)) * _GAMMA)
    return (z >> np.uint64(11)).astype(np.float64) * 2.0**-53 + 2.0**-54


def _box_muller(key, idx):
    pair = idx >> np.uint64(1)
    u1 = uniforms(key, pair << np.uint64(1))
    u2 = uniforms(key, (pair << np.uint64(1)) + np.uint64(1))
    r = np.sqrt(-2.0 * np.log(u1))
    theta = _TWO_PI * u2
    odd = (idx & np.uint64(1)).astype(bool)
    return np.where(odd, r * np.sin(theta), r * np.cos(theta))


def normals(key: int, start: int, count: int) -> np.ndarray:
    """Standard normals with indices start .. start+count-1 of stream ``key``."""
    return _box_muller(np.uint64(key), np.arange(start, start + count, dtype=np.uint64))


class NoiseStream:
    """A keyed stream of isotropic Gaussian vectors of dimension ``dim``.

    Row ``i`` of the stream is always the same vector, however the rows are
    requested.
    """

    def __init__(self, seed: int, *ids: int, dim: int):
        self.key = stream_key(seed, *ids)
        self.ids = (seed,) + tuple(ids)
        self.dim = dim

    def rows(self, start: int, count: int, sigma: float = 1.0) -> np.ndarray:
        z = normals(self.key, start * self.dim, count * self.dim)
        return sigma * z.reshape(count, self.dim)


def example_noise(seed: int, stream_ids: tuple, indices, m: int, dim: int, sigma: float) -> np.ndarray:
    """Noise draws for a batch of examples, shape (m, len(indices), dim).

    Draw ``j`` of example ``i`` is row ``j`` of stream (seed, *stream_ids, i), so
    a training batch is reproducible from the example indices alone.
    """
    keys = stream_keys(seed, *stream_ids, last=np.asarray(indices, dtype=np.int64))
    idx = np.arange(m * dim, dtype=np.uint64).reshape(m, 1, dim)
    z = _box_muller(keys.reshape(1, -1, 1), idx)
    return sigma * z
