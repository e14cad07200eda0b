"""Certified accuracy, average certified radius, log-probability gaps, and CSV I/O."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .rng import NoiseStream
from .smoothing import ABSTAIN
from .stats import norm_cdf

DEFAULT_RADII = tuple(round(0.25 * i, 2) for i in range(10))  # 0.00 .. 2.25
CERT_HEADER = ("index", "label", "prediction", "radius", "correct", "abstained")
ABSTAIN_TOKEN = "ABSTAIN"


class ReportError(ValueError):
    pass


@dataclass(frozen=True)
class CertRow:
    index: int
    label: int
    prediction: int
    radius: float

    @property
    def abstained(self) -> bool:
        return self.prediction == ABSTAIN

    @property
    def correct(self) -> bool:
        return self.prediction == self.label


@dataclass
class EvalReport:
    rows: list
    acr: float
    cert_acc: dict
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_rows(cls, rows, radii=DEFAULT_RADII, metadata=None) -> "EvalReport":
        return cls(list(rows), average_certified_radius(rows), certified_accuracy(rows, radii), dict(metadata or {}))


def certified_accuracy(rows, radii=DEFAULT_RADII) -> dict:
    """Fraction of rows predicted correctly (no abstention) with radius strictly above r."""
    n = len(rows)
    out = {}
    for r in radii:
        if r < 0:
            raise ValueError("radii must be non-negative")
        hits = sum(1 for row in rows if row.correct and row.radius > r)
        out[r] = hits / n if n else 0.0
    return out


def average_certified_radius(rows) -> float:
    """Mean over all rows of radius * 1[prediction == label]."""
    if not rows:
        raise ReportError("no certification rows")
    return sum(row.radius for row in rows if row.correct) / len(rows)


def logprob_gap_samples(net: nn.DenseNet, x, y: int, sigma: float, n_samples: int,
                        stream: NoiseStream, batch_size: int = 10_000) -> np.ndarray:
    """log F_y(x + d) - max_{c != y} log F_c(x + d) over noise draws.

    Taken from log-softmax of the logits, so large gaps do not cancel.
    """
    x = np.asarray(x, dtype=np.float64)
    out = np.empty(n_samples)
    for start in range(0, n_samples, batch_size):
        b = min(batch_size, n_samples - start)
        lp = nn.log_softmax(nn.forward_logits(net, x[None] + stream.rows(start, b, sigma)))
        top = lp[:, y].copy()
        lp[:, y] = -np.inf
        out[start:start + b] = top - lp.max(axis=1)
    return out


def consistency_probability(model, x, sigma: float, n_samples: int, epsilon: float,
                            stream: NoiseStream, batch_size: int = 10_000):
    """Empirical P(f(x + d) = majority class) and whether it falls below Phi(epsilon / sigma).

    Returns (p_hat, below_threshold).
    """
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    x = np.asarray(x, dtype=np.float64)
    counts = np.zeros(model.num_classes, dtype=np.int64)
    for start in range(0, n_samples, batch_size):
        b = min(batch_size, n_samples - start)
        counts += np.bincount(model.predict(x[None] + stream.rows(start, b, sigma)), minlength=model.num_classes)
    p_hat = counts.max() / n_samples
    return float(p_hat), bool(p_hat < norm_cdf(epsilon / sigma))


def gap_histogram(gaps, bins: int = 100):
    """Uniform bins over the observed range; returns (edges, counts)."""
    gaps = np.asarray(gaps, dtype=np.float64)
    lo, hi = float(gaps.min()), float(gaps.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    counts, edges = np.histogram(gaps, bins=bins, range=(lo, hi))
    return edges, counts


# ---------------------------------------------------------------------------
# CSV


def _meta_lines(metadata) -> str:
    return "".join(f"# {k} = {v}\n" for k, v in metadata.items())


def format_cert_row(row: CertRow) -> str:
    pred = ABSTAIN_TOKEN if row.abstained else str(row.prediction)
    return f"{row.index},{row.label},{pred},{row.radius:.6f},{int(row.correct)},{int(row.abstained)}\n"


def cert_csv_head(metadata) -> str:
    """Metadata comment block followed by the column header."""
    return _meta_lines(metadata) + ",".join(CERT_HEADER) + "\n"


def read_cert_csv(path_or_text, from_text: bool = False):
    """Parse a certification CSV; returns (rows, metadata)."""
    text = path_or_text if from_text else open(path_or_text, encoding="utf-8").read()
    metadata, body = {}, []
    for line in text.splitlines():
        if line.startswith("#"):
            key, sep, value = line[1:].partition("=")
            if sep:
                metadata[key.strip()] = value.strip()
        elif line.strip():
            body.append(line)
    if not body or tuple(body[0].split(",")) != CERT_HEADER:
        raise ReportError("missing or malformed certification header")
    rows = []
    for lineno, rec in enumerate(csv.reader(body[1:]), start=2):
        try:
            index, label, pred, radius, correct, abstained = rec
            prediction = ABSTAIN if pred == ABSTAIN_TOKEN else int(pred)
            row = CertRow(int(index), int(label), prediction, float(radius))
        except ValueError as exc:
            raise ReportError(f"malformed certification row {lineno}: {rec}") from exc
        if int(correct) != int(row.correct) or int(abstained) != int(row.abstained):
            raise ReportError(f"inconsistent flags on certification row {lineno}")
        rows.append(row)
    if not rows:
        raise ReportError("certification file has no rows")
    return rows, metadata


def summary_csv(report: EvalReport, extra=None) -> str:
    buf = io.StringIO()
    buf.write(_meta_lines(report.metadata))
    buf.write("metric,value\n")
    rows = report.rows
    n = len(rows)
    items = [
        ("n_examples", n),
        ("acr", report.acr),
        ("clean_accuracy", sum(r.correct for r in rows) / n),
        ("abstain_rate", sum(r.abstained for r in rows) / n),
    ]
    items += [(f"cert_acc@{r:.2f}", v) for r, v in report.cert_acc.items()]
    items += list((extra or {}).items())
    for k, v in items:
        buf.write(f"{k},{v:.12g}\n" if isinstance(v, float) else f"{k},{v}\n")
    return buf.getvalue()


def histogram_csv(edges, counts, metadata=None) -> str:
    buf = io.StringIO()
    buf.write(_meta_lines(metadata or {}))
    buf.write("bin_left,bin_right,count\n")
    for left, right, c in zip(edges[:-1], edges[1:], counts):
        buf.write(f"{left:.9g},{right:.9g},{int(c)}\n")
    return buf.getvalue()
