"""Flat ``key = value`` run configuration with dotted namespaces.

Example::

    seed = 0
    data.kind = two_moons
    train.loss = consistency
    train.sigma = 0.5
    train.lambda = 10
    certify.n = 10000

Lines starting with ``#`` are comments. Unknown keys are rejected.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import data as data_mod
from . import nn
from .losses import AttackParams, ConfigError, MacerParams, TrainConfig
from .smoothing import CertifyConfig

FULL_CERTIFY_N = 100_000
DESK_CERTIFY_N = 10_000


def _floats(text):
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text):
    return tuple(int(v) for v in text.split(",") if v.strip())


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text):
    return None if text.strip().lower() in ("", "none", "auto") else float(text)


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    if v is None:
        return "auto"
    if isinstance(v, float):
        return repr(v)
    return str(v)


# key -> (parser, default)
SCHEMA = {
    "seed": (int, 0),
    "data.kind": (str, "two_moons"),
    "data.seed": (int, 0),
    "data.n_train": (int, 2000),
    "data.n_test": (int, 1000),
    "data.noise_std": (float, 0.1),
    "data.centers": (str, "2,0;-2,0"),
    "data.std": (float, 1.0),
    "data.train_images": (str, ""),
    "data.train_labels": (str, ""),
    "data.test_images": (str, ""),
    "data.test_labels": (str, ""),
    "model.hidden": (_ints, (64, 64)),
    "model.activation": (str, "relu"),
    "train.loss": (str, "consistency"),
    "train.sigma": (float, 0.5),
    "train.lambda": (float, 10.0),
    "train.eta": (float, 0.5),
    "train.m": (int, 2),
    "train.macer.gamma": (float, 8.0),
    "train.macer.beta": (float, 16.0),
    "train.attack.steps": (int, 10),
    "train.attack.epsilon": (float, 1.0),
    "train.attack.step_size": (_opt_float, None),
    "train.attack.warmup_epochs": (int, 10),
    "optim.lr": (float, 0.1),
    "optim.momentum": (float, 0.9),
    "optim.nesterov": (_bool, True),
    "optim.weight_decay": (float, 1e-4),
    "optim.decay_epochs": (_ints, (30, 45)),
    "optim.decay_factor": (float, 0.1),
    "optim.epochs": (int, 60),
    "optim.batch_size": (int, 64),
    "certify.sigma": (_opt_float, None),
    "certify.n0": (int, 100),
    "certify.n": (int, DESK_CERTIFY_N),
    "certify.alpha": (float, 0.001),
    "certify.batch_size": (int, 1000),
    "certify.limit": (int, 0),
    "report.radii": (_floats, (0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0, 2.25)),
    "report.gap_samples": (int, 1000),
    "output.dir": (str, "runs"),
}


@dataclass
class RunConfig:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls({k: d for k, (_, d) in SCHEMA.items()})

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        cfg = cls.defaults()
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            cfg.set(key.strip(), value.strip())
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as f:
            return cls.parse(f.read())

    def set(self, key: str, value):
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(value, str):
            try:
                value = SCHEMA[key][0](value)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {exc}") from exc
        self.values[key] = value
        return self

    def copy(self) -> "RunConfig":
        return RunConfig(dict(self.values))

    def to_text(self) -> str:
        """Canonical form: every key, sorted, one per line."""
        return "".join(f"{k} = {_fmt(self.values[k])}\n" for k in sorted(self.values))

    def items(self):
        return ((k, _fmt(self.values[k])) for k in sorted(self.values))

    # -- builders ----------------------------------------------------------

    def train_config(self) -> TrainConfig:
        v = self.values
        try:
            optim = nn.OptimConfig(
                learning_rate=v["optim.lr"], momentum=v["optim.momentum"], nesterov=v["optim.nesterov"],
                weight_decay=v["optim.weight_decay"], lr_decay_epochs=v["optim.decay_epochs"],
                lr_decay_factor=v["optim.decay_factor"], epochs=v["optim.epochs"],
                batch_size=v["optim.batch_size"], seed=v["seed"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        cfg = TrainConfig(
            sigma=v["train.sigma"], lam=v["train.lambda"], eta=v["train.eta"], m=v["train.m"],
            loss_kind=v["train.loss"],
            macer=MacerParams(v["train.macer.gamma"], v["train.macer.beta"]),
            attack=AttackParams(v["train.attack.steps"], v["train.attack.epsilon"],
                                v["train.attack.step_size"], v["train.attack.warmup_epochs"]),
            optim=optim)
        return cfg.validate()

    def certify_config(self, default_sigma: float) -> CertifyConfig:
        v = self.values
        sigma = v["certify.sigma"] if v["certify.sigma"] is not None else default_sigma
        try:
            return CertifyConfig(sigma=sigma, n0=v["certify.n0"], n=v["certify.n"], alpha=v["certify.alpha"],
                                 seed=v["seed"], batch_size=v["certify.batch_size"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def layer_dims(self, dim: int, num_classes: int) -> tuple:
        return (dim, *self.values["model.hidden"], num_classes)

    def datasets(self):
        """(train, test) datasets described by the ``data.*`` keys."""
        v = self.values
        kind = v["data.kind"]
        seeds = np.random.SeedSequence(v["data.seed"]).generate_state(2)
        if kind == "two_moons":
            return (data_mod.gen_two_moons(v["data.n_train"], v["data.noise_std"], int(seeds[0]), "train"),
                    data_mod.gen_two_moons(v["data.n_test"], v["data.noise_std"], int(seeds[1]), "test"))
        if kind == "blobs":
            try:
                centers = [[float(c) for c in part.split(",")] for part in v["data.centers"].split(";")]
            except ValueError as exc:
                raise ConfigError(f"bad data.centers: {exc}") from exc
            return (data_mod.gen_gaussian_blobs(v["data.n_train"], centers, v["data.std"], int(seeds[0]), "train"),
                    data_mod.gen_gaussian_blobs(v["data.n_test"], centers, v["data.std"], int(seeds[1]), "test"))
        if kind == "mnist":
            paths = [v[f"data.{k}"] for k in ("train_images", "train_labels", "test_images", "test_labels")]
            if not all(paths):
                raise ConfigError("mnist needs data.train_images/train_labels/test_images/test_labels")
            train = data_mod.load_mnist_idx(paths[0], paths[1], "train").subset(v["data.n_train"])
            test = data_mod.load_mnist_idx(paths[2], paths[3], "test").subset(v["data.n_test"])
            return train, test
        raise ConfigError(f"unknown data.kind {kind!r}")
