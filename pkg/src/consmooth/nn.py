"""Fully-connected softmax classifier with analytic backprop and SGD.

Everything runs in float64. Weights are stored (fan_in, fan_out) so a layer is
``h @ W + b``.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

ACTIVATIONS = ("relu", "tanh")


@dataclass
class DenseNet:
    layer_dims: tuple
    weights: list
    biases: list
    activation: str = "relu"
    # Optional normalization applied to the (already noisy) input as layer zero.
    input_mean: np.ndarray | None = None
    input_std: np.ndarray | None = None

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.layer_dims) < 2 or min(self.layer_dims) < 1:
            raise ValueError(f"bad layer_dims {self.layer_dims}")
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("parameter count does not match layer_dims")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            shape = (self.layer_dims[i], self.layer_dims[i + 1])
            if w.shape != shape or b.shape != shape[1:]:
                raise ValueError(f"layer {i}: got W{w.shape} b{b.shape}, expected W{shape}")
        if (self.input_mean is None) != (self.input_std is None):
            raise ValueError("input_mean and input_std must be given together")
        if self.input_mean is not None:
            d = self.layer_dims[0]
            self.input_mean = np.asarray(self.input_mean, dtype=np.float64).reshape(d)
            self.input_std = np.asarray(self.input_std, dtype=np.float64).reshape(d)

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def num_classes(self) -> int:
        return self.layer_dims[-1]

    def params(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "DenseNet":
        return DenseNet(
            self.layer_dims,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.activation,
            None if self.input_mean is None else self.input_mean.copy(),
            None if self.input_std is None else self.input_std.copy(),
        )

    def predict(self, x) -> np.ndarray:
        """Hard labels argmax_k F_k(x) for a batch (ties go to the lowest index)."""
        return np.argmax(forward_logits(self, x), axis=-1)


def init_net(layer_dims: Sequence[int], activation: str = "relu", seed: int = 0,
             input_mean=None, input_std=None) -> DenseNet:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return DenseNet(tuple(layer_dims), weights, biases, activation, input_mean, input_std)


def zero_net(layer_dims: Sequence[int], activation: str = "relu") -> DenseNet:
    weights = [np.zeros((a, b)) for a, b in zip(layer_dims[:-1], layer_dims[1:])]
    biases = [np.zeros(b) for b in layer_dims[1:]]
    return DenseNet(tuple(layer_dims), weights, biases, activation)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    mx = a.max(axis=axis, keepdims=True)
    return np.squeeze(mx, axis) + np.log(np.exp(a - mx).sum(axis=axis))


@dataclass
class Cache:
    inputs: list = field(default_factory=list)  # input to each affine layer
    pre: list = field(default_factory=list)     # pre-activations of hidden layers


def _check_input(net: DenseNet, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != net.input_dim:
        raise ValueError(f"input dim {x.shape[-1]} does not match network input {net.input_dim}")
    return x


def forward_logits(net: DenseNet, x, cache: Cache | None = None) -> np.ndarray:
    """Pre-softmax outputs for a vector (d,) or batch (..., d)."""
    h = _check_input(net, x)
    if net.input_mean is not None:
        h = (h - net.input_mean) / net.input_std
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        if cache is not None:
            cache.inputs.append(h)
        z = h @ w + b
        if i == last:
            return z
        if cache is not None:
            cache.pre.append(z)
        h = np.maximum(z, 0.0) if net.activation == "relu" else np.tanh(z)


def forward(net: DenseNet, x) -> np.ndarray:
    """Softmax probabilities, computed through log-softmax so no entry is 0 unless it underflows."""
    return np.exp(log_softmax(forward_logits(net, x)))


def backward(net: DenseNet, cache: Cache, dlogits: np.ndarray, need_input: bool = False):
    """Reverse pass for one forward call.

    ``dlogits`` is dL/dlogits with the same leading shape as the input batch.
    Returns (grads, dx) where grads is aligned with ``net.params()`` and dx is
    dL/dx (None unless requested).
    """
    grads = [None] * (2 * len(net.weights))
    g = dlogits
    for i in range(len(net.weights) - 1, -1, -1):
        h = cache.inputs[i]
        hf = h.reshape(-1, h.shape[-1])
        gf = g.reshape(-1, g.shape[-1])
        grads[2 * i] = hf.T @ gf
        grads[2 * i + 1] = gf.sum(axis=0)
        if i == 0 and not need_input:
            break
        g = g @ net.weights[i].T
        if i > 0:
            z = cache.pre[i - 1]
            if net.activation == "relu":
                g = g * (z > 0.0)
            else:
                g = g * (1.0 - np.tanh(z) ** 2)
    dx = None
    if need_input:
        dx = g if net.input_std is None else g / net.input_std
    return grads, dx


def add_grads(acc: list | None, grads: list) -> list:
    if acc is None:
        return [g.copy() for g in grads]
    for a, g in zip(acc, grads):
        a += g
    return acc


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 1e-4
    lr_decay_epochs: tuple = (30, 60)
    lr_decay_factor: float = 0.1
    epochs: int = 90
    batch_size: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate <= 0 or not (0.0 <= self.momentum < 1.0):
            raise ValueError("need learning_rate > 0 and 0 <= momentum < 1")
        if self.weight_decay < 0 or self.lr_decay_factor <= 0:
            raise ValueError("need weight_decay >= 0 and lr_decay_factor > 0")
        self.lr_decay_epochs = tuple(int(e) for e in self.lr_decay_epochs)

    def lr_at(self, epoch: int) -> float:
        """Step schedule: multiply by the decay factor at each listed epoch (0-based)."""
        drops = sum(1 for e in self.lr_decay_epochs if epoch >= e)
        return self.learning_rate * self.lr_decay_factor**drops


@dataclass
class SGDState:
    buffers: list | None = None


def sgd_step(net: DenseNet, grads: list, state: SGDState, cfg: OptimConfig, epoch: int = 0):
    """SGD with coupled weight decay and (Nesterov) momentum, no dampening.

    Updates ``net`` in place and returns (net, state).
    """
    lr = cfg.lr_at(epoch)
    params = net.params()
    if state.buffers is None:
        state.buffers = [np.zeros_like(p) for p in params]
    for p, g, buf in zip(params, grads, state.buffers):
        d = g + cfg.weight_decay * p if cfg.weight_decay else g
        if cfg.momentum:
            buf *= cfg.momentum
            buf += d
            d = d + cfg.momentum * buf if cfg.nesterov else buf
        p -= lr * d
    return net, state


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradcheckReport:
    max_rel_error: float
    mean_rel_error: float
    n_checked: int
    worst_param: tuple

    def passed(self, tolerance: float = 1e-4) -> bool:
        return self.max_rel_error < tolerance


def gradcheck(net: DenseNet, loss_fn: Callable, h: float = 1e-5, max_params: int = 10_000,
              seed: int = 0, floor: float = 1e-6) -> GradcheckReport:
    """Compare ``loss_fn(net) -> (value, grads)`` against central differences.

    Relative error is |a - n| / max(|a|, |n|, floor). All parameters are
    checked up to ``max_params``; above that a seeded random subset is used.
    """
    _, analytic = loss_fn(net)
    params = net.params()
    coords = [(i, j) for i, p in enumerate(params) for j in range(p.size)]
    if len(coords) > max_params:
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(coords), size=max_params, replace=False)
        coords = [coords[k] for k in sorted(pick)]
    errors = []
    for i, j in coords:
        flat = params[i].reshape(-1)
        old = flat[j]
        flat[j] = old + h
        up = loss_fn(net)[0]
        flat[j] = old - h
        down = loss_fn(net)[0]
        flat[j] = old
        numeric = (up - down) / (2.0 * h)
        a = analytic[i].reshape(-1)[j]
        errors.append(abs(a - numeric) / max(abs(a), abs(numeric), floor))
    errors = np.asarray(errors)
    worst = int(np.argmax(errors))
    return GradcheckReport(float(errors.max()), float(errors.mean()), len(coords), coords[worst])


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"CSMOOTH\x00"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    net: DenseNet
    sigma: float
    config_text: str = ""


def _f64le(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def dump_checkpoint(net: DenseNet, sigma: float, config_text: str = "") -> bytes:
    """Serialize a network.

    Layout (little-endian): magic[8], u32 version, u32 n_dims, u32 dims...,
    u32 activation index, f64 training sigma, u32 config length + UTF-8
    config text, u8 has_normalization (+ mean[d], std[d] as f64), then W0, b0,
    W1, b1, ... row-major f64.
    """
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(net.layer_dims)))
    buf.write(struct.pack(f"<{len(net.layer_dims)}I", *net.layer_dims))
    buf.write(struct.pack("<Id", ACTIVATIONS.index(net.activation), float(sigma)))
    text = config_text.encode("utf-8")
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    has_norm = net.input_mean is not None
    buf.write(struct.pack("<B", int(has_norm)))
    if has_norm:
        buf.write(_f64le(net.input_mean))
        buf.write(_f64le(net.input_std))
    for p in net.params():
        buf.write(_f64le(p))
    return buf.getvalue()


class CheckpointError(ValueError):
    pass


def parse_checkpoint(data: bytes) -> Checkpoint:
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(8)) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, n_dims = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    dims = struct.unpack(f"<{n_dims}I", take(4 * n_dims))
    act, sigma = struct.unpack("<Id", take(12))
    if act >= len(ACTIVATIONS):
        raise CheckpointError(f"unknown activation index {act}")
    (text_len,) = struct.unpack("<I", take(4))
    config_text = bytes(take(text_len)).decode("utf-8")
    (has_norm,) = struct.unpack("<B", take(1))

    def floats(shape):
        count = int(np.prod(shape))
        return np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)

    mean = std = None
    if has_norm:
        mean, std = floats((dims[0],)), floats((dims[0],))
    weights, biases = [], []
    for a, b in zip(dims[:-1], dims[1:]):
        weights.append(floats((a, b)))
        biases.append(floats((b,)))
    if pos != len(view):
        raise CheckpointError("trailing bytes after parameters")
    net = DenseNet(dims, weights, biases, ACTIVATIONS[act], mean, std)
    return Checkpoint(net, sigma, config_text)


def save_checkpoint(path, net: DenseNet, sigma: float, config_text: str = ""):
    with open(path, "wb") as f:
        f.write(dump_checkpoint(net, sigma, config_text))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        return parse_checkpoint(f.read())
