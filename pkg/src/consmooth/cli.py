"""Command-line entry points: train, certify, report, gradcheck, sweep.

Exit codes: 0 success, 2 configuration error, 3 runtime error (bad files,
dimension mismatches, failed gradient checks).
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import losses, metrics, nn
from .config import DESK_CERTIFY_N, FULL_CERTIFY_N, RunConfig
from .data import DataError
from .losses import ConfigError
from .rng import NoiseStream
from .smoothing import certify_many
from .train import train

log = logging.getLogger("consmooth")

EXIT_CONFIG = 2
EXIT_RUNTIME = 3
OUT_ENV = "CONSMOOTH_OUT"

CHECKPOINT_NAME = "checkpoint.bin"
TRAIN_LOG_NAME = "train_log.csv"
CERT_NAME = "certify.csv"
SUMMARY_NAME = "summary.csv"
GAPS_NAME = "gaps.csv"
GAP_STREAM = 103


class RuntimeFailure(RuntimeError):
    pass


def resolve_out(cli_out, cfg: RunConfig | None) -> Path:
    if cli_out:
        return Path(cli_out)
    if os.environ.get(OUT_ENV):
        return Path(os.environ[OUT_ENV])
    return Path(cfg["output.dir"] if cfg is not None else "runs")


# ---------------------------------------------------------------------------
# pipeline steps (also used by tests)


def run_train(cfg: RunConfig, out: Path) -> Path:
    tcfg = cfg.train_config()
    train_set, _ = cfg.datasets()
    net = nn.init_net(cfg.layer_dims(train_set.dim, train_set.num_classes), cfg["model.activation"], seed=cfg["seed"])
    out.mkdir(parents=True, exist_ok=True)
    config_text = cfg.to_text()
    with open(out / TRAIN_LOG_NAME, "w", encoding="utf-8", newline="") as f:
        f.write("".join(f"# {line}\n" for line in config_text.splitlines()))
        f.write("epoch,loss,clean_accuracy,noisy_accuracy\n")

        def on_epoch(e):
            f.write(f"{e.epoch},{e.loss:.9g},{e.clean_accuracy:.6f},{e.noisy_accuracy:.6f}\n")
            log.info("epoch %d loss %.4f clean %.3f noisy %.3f", e.epoch, e.loss, e.clean_accuracy, e.noisy_accuracy)

        train(net, train_set, tcfg, seed=cfg["seed"], on_epoch=on_epoch)
    path = out / CHECKPOINT_NAME
    nn.save_checkpoint(path, net, tcfg.sigma, config_text)
    return path


def _certify_metadata(cfg: RunConfig, ccfg, ckpt_bytes: bytes, train_sigma: float) -> dict:
    meta = dict(cfg.items())
    meta["meta.checkpoint_sha256"] = hashlib.sha256(ckpt_bytes).hexdigest()
    meta["meta.train_sigma"] = repr(train_sigma)
    meta["meta.certify_sigma"] = repr(ccfg.sigma)
    if ccfg.n != FULL_CERTIFY_N:
        meta["meta.deviation"] = f"certify.n={ccfg.n} (full protocol uses n={FULL_CERTIFY_N})"
    return meta


def run_certify(cfg: RunConfig | None, checkpoint: Path, out: Path, threads: int = 1) -> Path:
    ckpt_bytes = Path(checkpoint).read_bytes()
    ckpt = nn.parse_checkpoint(ckpt_bytes)
    if cfg is None:
        cfg = RunConfig.parse(ckpt.config_text)
    ccfg = cfg.certify_config(default_sigma=ckpt.sigma)
    if ccfg.sigma != ckpt.sigma:
        log.warning("certifying with sigma=%g but the model was trained with sigma=%g", ccfg.sigma, ckpt.sigma)
    _, test = cfg.datasets()
    if test.dim != ckpt.net.input_dim:
        raise RuntimeFailure(f"checkpoint expects inputs of dim {ckpt.net.input_dim}, dataset has {test.dim}")
    if test.num_classes > ckpt.net.num_classes:
        raise RuntimeFailure("dataset has more classes than the checkpoint")
    limit = cfg["certify.limit"] or len(test)
    inputs, labels = test.inputs[:limit], test.labels[:limit]

    out.mkdir(parents=True, exist_ok=True)
    path = out / CERT_NAME
    head = metrics.cert_csv_head(_certify_metadata(cfg, ccfg, ckpt_bytes, ckpt.sigma))
    done = 0
    if path.exists():
        existing = path.read_text(encoding="utf-8")
        if not existing.startswith(head):
            raise RuntimeFailure(f"{path} exists with different metadata; refusing to resume")
        lines = existing[len(head):].splitlines(keepends=True)
        complete = [ln for ln in lines if ln.endswith("\n")]
        done = len(complete)
        path.write_text(head + "".join(complete), encoding="utf-8")
        log.info("resuming certification at row %d", done)
    else:
        path.write_text(head, encoding="utf-8")
    with open(path, "a", encoding="utf-8", newline="") as f:
        indices = range(done, len(inputs))
        for i, res in zip(indices, certify_many(ckpt.net, inputs[done:], ccfg, indices, threads)):
            f.write(metrics.format_cert_row(metrics.CertRow(i, int(labels[i]), res.prediction, res.radius)))
            f.flush()
    return path


def run_report(cert_path: Path, out: Path, radii=None, cfg: RunConfig | None = None,
               checkpoint: Path | None = None, gap_samples: int | None = None) -> dict:
    rows, meta = metrics.read_cert_csv(cert_path)
    if radii is None:
        radii = metrics.DEFAULT_RADII
        if "report.radii" in meta:
            radii = RunConfig.defaults().set("report.radii", meta["report.radii"])["report.radii"]
    report = metrics.EvalReport.from_rows(rows, radii, meta)
    out.mkdir(parents=True, exist_ok=True)
    written = {"summary": out / SUMMARY_NAME}
    written["summary"].write_text(metrics.summary_csv(report), encoding="utf-8")
    if checkpoint is not None:
        ckpt = nn.load_checkpoint(checkpoint)
        if cfg is None:
            cfg = RunConfig.parse(ckpt.config_text)
        _, test = cfg.datasets()
        n = gap_samples or cfg["report.gap_samples"]
        sigma = cfg["certify.sigma"] or ckpt.sigma
        gaps = np.concatenate([
            metrics.logprob_gap_samples(ckpt.net, x, int(y), sigma, n, NoiseStream(cfg["seed"], GAP_STREAM, i, dim=test.dim))
            for i, (x, y) in enumerate(zip(test.inputs[:len(rows)], test.labels[:len(rows)]))])
        edges, counts = metrics.gap_histogram(gaps)
        gap_meta = dict(cfg.items())
        gap_meta.update({"meta.gap_samples": n, "meta.gap_mean": f"{gaps.mean():.9g}", "meta.gap_var": f"{gaps.var():.9g}"})
        written["gaps"] = out / GAPS_NAME
        written["gaps"].write_text(metrics.histogram_csv(edges, counts, gap_meta), encoding="utf-8")
    written["report"] = report
    return written


SWEEPABLE = {"lambda": "train.lambda", "m": "train.m", "sigma": "train.sigma"}


def run_sweep(cfg: RunConfig, param: str, values, out: Path, threads: int = 1) -> Path:
    if param not in SWEEPABLE:
        raise ConfigError(f"can only sweep {', '.join(SWEEPABLE)}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    key = SWEEPABLE[param]
    rows = []
    for value in values:
        run = cfg.copy().set(key, str(value))
        if param == "sigma":
            run.set("certify.sigma", str(value))
        run.train_config()  # validate before any work
        run_dir = out / f"{param}={value}"
        ckpt = run_train(run, run_dir)
        cert = run_certify(run, ckpt, run_dir, threads)
        report = run_report(cert, run_dir, run["report.radii"])["report"]
        rows.append((value, report))
    radii = cfg["report.radii"]
    lines = [f"{param},acr," + ",".join(f"cert_acc@{r:.2f}" for r in radii) + "\n"]
    for value, rep in rows:
        lines.append(f"{value},{rep.acr:.12g}," + ",".join(f"{rep.cert_acc[r]:.12g}" for r in radii) + "\n")
    path = out / "comparison.csv"
    path.write_text("".join(f"# {k} = {v}\n" for k, v in cfg.items()) + "".join(lines), encoding="utf-8")
    return path


def run_gradcheck(cfg: RunConfig, kinds, n_nets: int = 5, tolerance: float = 1e-4):
    """Finite-difference check of every requested objective on small random tanh nets."""
    results = []
    for kind in kinds:
        for trial in range(n_nets):
            results.append((kind, trial, gradcheck_loss(kind, cfg, trial)))
    return results, all(r.passed(tolerance) for _, _, r in results)


def gradcheck_loss(kind: str, cfg: RunConfig, trial: int = 0, dims=(2, 16, 16, 3), batch: int = 4):
    rng = np.random.default_rng([trial, 11])
    net = nn.init_net(dims, "tanh", seed=trial)
    for b in net.biases:
        b += 0.1 * rng.standard_normal(b.shape)
    tcfg = cfg.copy().set("train.loss", kind).set("train.m", str(max(cfg["train.m"], 2))).train_config()
    x = rng.standard_normal((batch, dims[0]))
    deltas = tcfg.sigma * rng.standard_normal((tcfg.m, batch, dims[0]))
    if kind == "macer":
        # pick labels where the mean prediction is correct so the hinge is active
        z = nn.forward_logits(net, x[None] + deltas)
        y = np.exp(nn.log_softmax(tcfg.macer.beta * z)).mean(axis=0).argmax(axis=1)
    else:
        y = rng.integers(0, dims[-1], size=batch)
    if kind.startswith("smoothadv"):
        # parameter gradient at a fixed adversarial point
        eps = tcfg.attack.epsilon
        x_adv = losses.smoothadv_attack(net, x, y, deltas, eps, tcfg.attack.steps, tcfg.attack.step_for(eps))

        def fn(n):
            o = losses.smoothadv_train_loss(n, x_adv, y, deltas, tcfg.lam, tcfg.eta, kind == "smoothadv_consistency")
            return o.value, o.grads
    else:
        def fn(n):
            o = losses.compute_loss(n, x, y, deltas, tcfg)
            return o.value, o.grads

    return nn.gradcheck(net, fn)


# ---------------------------------------------------------------------------
# argparse


def _add_common(p, config_required=True):
    p.add_argument("--config", type=Path, required=config_required, help="run configuration file")
    p.add_argument("--out", type=Path, help=f"output directory (else ${OUT_ENV}, else output.dir)")
    p.add_argument("--seed", type=int, help="override the global seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="consmooth", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a base classifier and write a checkpoint")
    _add_common(p)

    p = sub.add_parser("certify", help="certify the test set with a trained checkpoint")
    _add_common(p, config_required=False)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--n", type=int)
    p.add_argument("--n0", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--sigma", type=float, help="certification sigma (default: the training sigma)")
    p.add_argument("--full", action="store_true", help=f"use n={FULL_CERTIFY_N} instead of the desk default {DESK_CERTIFY_N}")
    p.add_argument("--limit", type=int, help="certify only the first N test examples")

    p = sub.add_parser("report", help="aggregate a certification CSV")
    p.add_argument("--cert", type=Path, required=True)
    p.add_argument("--out", type=Path)
    p.add_argument("--radii", help="comma-separated radius grid")
    p.add_argument("--checkpoint", type=Path, help="also write a log-probability gap histogram")
    p.add_argument("--config", type=Path)
    p.add_argument("--gap-samples", type=int)

    p = sub.add_parser("gradcheck", help="finite-difference check of the training objectives")
    p.add_argument("--config", type=Path)
    p.add_argument("--loss", default="all", help="loss kind or 'all'")
    p.add_argument("--nets", type=int, default=5)
    p.add_argument("--tolerance", type=float, default=1e-4)

    p = sub.add_parser("sweep", help="train/certify/report once per parameter value")
    _add_common(p)
    p.add_argument("--param", required=True, choices=sorted(SWEEPABLE))
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--threads", type=int, default=1)
    return parser


def _load(path) -> RunConfig:
    return RunConfig.load(path) if path else RunConfig.defaults()


def _dispatch(args) -> int:
    if args.command == "train":
        cfg = _load(args.config)
        if args.seed is not None:
            cfg.set("seed", args.seed)
        path = run_train(cfg, resolve_out(args.out, cfg))
        print(path)
    elif args.command == "certify":
        cfg = RunConfig.load(args.config) if args.config else RunConfig.parse(nn.load_checkpoint(args.checkpoint).config_text)
        if args.seed is not None:
            cfg.set("seed", args.seed)
        if args.full:
            cfg.set("certify.n", FULL_CERTIFY_N)
        for flag, key in (("n", "certify.n"), ("n0", "certify.n0"), ("alpha", "certify.alpha"),
                          ("sigma", "certify.sigma"), ("limit", "certify.limit")):
            if getattr(args, flag) is not None:
                cfg.set(key, getattr(args, flag))
        print(run_certify(cfg, args.checkpoint, resolve_out(args.out, cfg), args.threads))
    elif args.command == "report":
        cfg = RunConfig.load(args.config) if args.config else None
        radii = tuple(float(r) for r in args.radii.split(",")) if args.radii else None
        out = resolve_out(args.out, None) if (args.out or os.environ.get(OUT_ENV)) else args.cert.parent
        written = run_report(args.cert, out, radii, cfg, args.checkpoint, args.gap_samples)
        sys.stdout.write(written["summary"].read_text(encoding="utf-8"))
    elif args.command == "gradcheck":
        cfg = _load(args.config)
        kinds = losses.LOSS_KINDS if args.loss == "all" else (args.loss,)
        for kind in kinds:
            if kind not in losses.LOSS_KINDS:
                raise ConfigError(f"unknown loss kind {kind!r}")
        results, ok = run_gradcheck(cfg, kinds, args.nets, args.tolerance)
        print("loss,net,max_rel_error,mean_rel_error,n_checked")
        for kind, trial, r in results:
            print(f"{kind},{trial},{r.max_rel_error:.3e},{r.mean_rel_error:.3e},{r.n_checked}")
        if not ok:
            raise RuntimeFailure(f"gradient check failed at tolerance {args.tolerance}")
    elif args.command == "sweep":
        cfg = _load(args.config)
        if args.seed is not None:
            cfg.set("seed", args.seed)
        values = [v.strip() for v in args.values.split(",") if v.strip()]
        print(run_sweep(cfg, args.param, values, resolve_out(args.out, cfg), args.threads))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RuntimeFailure, DataError, nn.CheckpointError, metrics.ReportError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
