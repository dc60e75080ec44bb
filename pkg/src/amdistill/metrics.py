"""Accuracy and calibration: ECE over equal-width confidence bins, NLL,
reliability-diagram tables."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List

import numpy as np

from .tensor import no_grad
from .tensor.functional import log_softmax_np

DIAGRAM_FIELDS = ["bin_lo", "bin_hi", "midpoint", "mean_conf", "accuracy", "count", "gap"]


@dataclass
class CalibrationBin:
    lo: float
    hi: float
    mean_conf: float
    accuracy: float
    count: int


@dataclass
class CalibrationReport:
    accuracy: float
    ece: float            # fraction in [0, 1]
    nll: float            # mean -log p(y)
    n: int
    bins: List[CalibrationBin] = field(default_factory=list)

    @property
    def ece_percent(self) -> float:
        return 100.0 * self.ece

    @property
    def nll_percent(self) -> float:
        # tables in the literature print mean NLL multiplied by 100
        return 100.0 * self.nll

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ece_percent"] = self.ece_percent
        d["nll_percent"] = self.nll_percent
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationReport":
        bins = [CalibrationBin(**b) for b in d["bins"]]
        return cls(d["accuracy"], d["ece"], d["nll"], d["n"], bins)


def bin_index(conf: np.ndarray, n_bins: int) -> np.ndarray:
    """Bin k covers (k/B, (k+1)/B]; the first bin also takes 0."""
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    return np.clip(np.searchsorted(edges, conf, side="left") - 1, 0, n_bins - 1)


def calibration_from_probs(probs: np.ndarray, labels: np.ndarray, n_bins: int = 15,
                           log_probs: np.ndarray = None) -> CalibrationReport:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    if n == 0:
        raise ValueError("cannot evaluate an empty dataset")
    pred = probs.argmax(axis=1)          # ties -> lowest index
    conf = probs.max(axis=1)
    correct = (pred == labels).astype(np.float64)
    if log_probs is None:
        with np.errstate(divide="ignore"):
            log_probs = np.log(probs)
    nll = float(-log_probs[np.arange(n), labels].mean())

    idx = bin_index(conf, n_bins)
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    bins = []
    ece = 0.0
    for k in range(n_bins):
        sel = idx == k
        cnt = int(sel.sum())
        mc = float(conf[sel].mean()) if cnt else 0.0
        acc = float(correct[sel].mean()) if cnt else 0.0
        bins.append(CalibrationBin(float(edges[k]), float(edges[k + 1]), mc, acc, cnt))
        ece += cnt / n * abs(acc - mc)
    return CalibrationReport(float(correct.mean()), float(ece), nll, n, bins)


def predict_logits(model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    model.eval()
    out = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            logits, _ = model(images[start:start + batch_size].astype(model.dtype))
            out.append(logits.data.astype(np.float64))
    return np.concatenate(out)


def evaluate(model, dataset, n_bins: int = 15, batch_size: int = 256) -> CalibrationReport:
    """Eval-mode pass over ``dataset``: top-1 accuracy, ECE and NLL."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    logits = predict_logits(model, dataset.images, batch_size)
    logp = log_softmax_np(logits, axis=1)
    return calibration_from_probs(np.exp(logp), dataset.labels, n_bins, log_probs=logp)


def accuracy(model, dataset, batch_size: int = 256) -> float:
    logits = predict_logits(model, dataset.images, batch_size)
    return float((logits.argmax(axis=1) == dataset.labels).mean())


def reliability_diagram(report: CalibrationReport) -> List[dict]:
    """One row per bin: midpoint, mean confidence, accuracy, count and gap."""
    rows = []
    for b in report.bins:
        rows.append({"bin_lo": b.lo, "bin_hi": b.hi, "midpoint": (b.lo + b.hi) / 2,
                     "mean_conf": b.mean_conf, "accuracy": b.accuracy, "count": b.count,
                     "gap": abs(b.accuracy - b.mean_conf) if b.count else 0.0})
    return rows


def ece_from_diagram(rows: List[dict]) -> float:
    n = sum(int(r["count"]) for r in rows)
    return float(sum(int(r["count"]) / n * abs(float(r["accuracy"]) - float(r["mean_conf"]))
                     for r in rows))


def write_diagram_csv(rows: List[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=DIAGRAM_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(r[k]) if isinstance(r[k], float) else r[k] for k in DIAGRAM_FIELDS})


def read_diagram_csv(path) -> List[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "count" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


def write_report(report: CalibrationReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2))
