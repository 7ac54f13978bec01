"""Classification metrics, report formatting, ablation runs and attention traces."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

logger = logging.getLogger(__name__)

NORMAL_CLASS = "Normal"


class UndefinedMetric(ValueError):
    pass


@dataclass
class ConfusionMatrix:
    """Counts with rows = true class and columns = predicted class."""

    counts: np.ndarray
    classes: tuple = ()

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    def accuracy(self) -> float:
        return float(np.trace(self.counts)) / self.total if self.total else 0.0


def confusion(true, pred, C: int, classes: Sequence[str] | None = None) -> ConfusionMatrix:
    true = np.asarray(true, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if true.shape != pred.shape:
        raise ValueError(f"length mismatch: {true.size} true vs {pred.size} predicted labels")
    for name, arr in (("true", true), ("predicted", pred)):
        if arr.size and (arr.min() < 0 or arr.max() >= C):
            raise ValueError(f"{name} label out of range [0, {C})")
    counts = np.zeros((C, C), dtype=np.int64)
    np.add.at(counts, (true, pred), 1)
    return ConfusionMatrix(counts, tuple(classes) if classes is not None else tuple(str(i) for i in range(C)))


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float
    undefined: bool = False


def f1_score(precision: float, recall: float) -> float:
    """Harmonic mean; 0 when both inputs are 0."""
    s = precision + recall
    return 2.0 * precision * recall / s if s > 0 else 0.0


def prf1(matrix: ConfusionMatrix | np.ndarray, c: int) -> PRF:
    """Precision, recall and F1 of class ``c``.

    A zero denominator gives 0 for that quantity and sets ``undefined``.
    """
    m = matrix.counts if isinstance(matrix, ConfusionMatrix) else np.asarray(matrix)
    tp = float(m[c, c])
    predicted = float(m[:, c].sum())
    actual = float(m[c, :].sum())
    undefined = predicted == 0 or actual == 0
    p = tp / predicted if predicted else 0.0
    r = tp / actual if actual else 0.0
    return PRF(p, r, f1_score(p, r), undefined)


def macro_f1(matrix: ConfusionMatrix | np.ndarray) -> float:
    m = matrix.counts if isinstance(matrix, ConfusionMatrix) else np.asarray(matrix)
    return float(np.mean([prf1(m, c).f1 for c in range(m.shape[0])]))


def roc_auc_ovr(scores, labels, c: int) -> float:
    """One-vs-rest AUC of class ``c`` by the rank statistic.

    ``scores`` is either the (N, C) probability matrix or a length-N score
    vector for class ``c``. Ties between a positive and a negative count ½,
    which average ranks give exactly.
    """
    s = np.asarray(scores, dtype=float)
    if s.ndim == 2:
        s = s[:, c]
    pos = np.asarray(labels) == c
    n_pos = int(pos.sum())
    n_neg = pos.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric(f"class {c} has {n_pos} positives and {n_neg} negatives")
    ranks = rankdata(s)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pairwise_auc(scores, positive) -> float:
    """Brute-force AUC over every positive/negative pair (reference only)."""
    s = np.asarray(scores, dtype=float)
    positive = np.asarray(positive, dtype=bool)
    p, n = s[positive], s[~positive]
    wins = (p[:, None] > n[None, :]).sum() + 0.5 * (p[:, None] == n[None, :]).sum()
    return float(wins / (p.size * n.size))


def macro_auc(scores, labels, C: int) -> tuple[float, list]:
    """Mean one-vs-rest AUC over classes where it is defined."""
    per = []
    for c in range(C):
        try:
            per.append(roc_auc_ovr(scores, labels, c))
        except UndefinedMetric as exc:
            logger.warning("AUC excluded from macro average: %s", exc)
            per.append(None)
    defined = [a for a in per if a is not None]
    return (float(np.mean(defined)) if defined else math.nan), per


# ------------------------------------------------------------------ report

@dataclass
class MetricsReport:
    classes: tuple
    confusion: ConfusionMatrix
    per_class: list          # PRF per class, in class order
    auc: list                # per-class AUC or None
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    macro_auc: float
    fpr: float | None        # None when the test set has no normal windows

    def support(self) -> np.ndarray:
        return self.confusion.counts.sum(axis=1)

    def to_text(self) -> str:
        width = max(9, max(len(c) for c in self.classes))
        lines = [f"{'class':<{width}s} {'precision':>9s} {'recall':>9s} {'f1':>9s} {'auc':>9s} {'support':>8s}"]
        for name, prf, auc, n in zip(self.classes, self.per_class, self.auc, self.support()):
            a = "n/a" if auc is None else f"{auc:.4f}"
            flag = " *" if prf.undefined else ""
            lines.append(f"{name:<{width}s} {prf.precision:9.4f} {prf.recall:9.4f} {prf.f1:9.4f} {a:>9s} {n:8d}{flag}")
        lines.append(f"{'macro':<{width}s} {self.macro_precision:9.4f} {self.macro_recall:9.4f} "
                     f"{self.macro_f1:9.4f} {self.macro_auc:9.4f} {self.confusion.total:8d}")
        lines.append("# * = zero denominator in precision or recall")
        lines.append("")
        lines.append("[confusion] rows=true cols=predicted")
        for name, row in zip(self.classes, self.confusion.counts):
            lines.append(f"{name:<{width}s} " + " ".join(f"{int(v):d}" for v in row))
        lines.append("")
        lines.append("[metrics]")
        kv = {
            "accuracy": self.accuracy,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "macro_auc": self.macro_auc,
            "fpr": "undefined" if self.fpr is None else self.fpr,
            "n_windows": self.confusion.total,
            "classes": ",".join(self.classes),
        }
        for name, prf in zip(self.classes, self.per_class):
            kv[f"precision.{name}"] = prf.precision
            kv[f"recall.{name}"] = prf.recall
            kv[f"f1.{name}"] = prf.f1
        lines += [f"{k} = {v!r}" if isinstance(v, float) else f"{k} = {v}" for k, v in kv.items()]
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


def parse_report_metrics(text: str) -> dict:
    """Read back the key = value section of a saved report."""
    out = {}
    section = False
    for line in text.splitlines():
        if line.strip() == "[metrics]":
            section = True
            continue
        if section and "=" in line:
            k, v = (s.strip() for s in line.split("=", 1))
            try:
                out[k] = float(v)
            except ValueError:
                out[k] = v
    return out


def report_from_predictions(true, probs: np.ndarray, classes: Sequence[str],
                            normal: str = NORMAL_CLASS) -> MetricsReport:
    classes = tuple(classes)
    C = len(classes)
    probs = np.asarray(probs, dtype=float)
    if probs.ndim != 2 or probs.shape[1] != C:
        raise ValueError(f"probability matrix shape {probs.shape} does not match {C} classes")
    true = np.asarray(true, dtype=np.int64)
    cm = confusion(true, probs.argmax(axis=1), C, classes)
    per = [prf1(cm, c) for c in range(C)]
    auc_mean, auc = macro_auc(probs, true, C)
    fpr = None
    if normal in classes:
        k = classes.index(normal)
        n_normal = cm.counts[k].sum()
        if n_normal:
            fpr = float(n_normal - cm.counts[k, k]) / float(n_normal)
    return MetricsReport(
        classes, cm, per, auc, cm.accuracy(),
        float(np.mean([p.precision for p in per])),
        float(np.mean([p.recall for p in per])),
        float(np.mean([p.f1 for p in per])),
        auc_mean, fpr)


def evaluate(model, samples, classes: Sequence[str], normal: str = NORMAL_CLASS,
             batch_size: int = 256) -> MetricsReport:
    """Infer-mode forward over every window, argmax prediction, full report."""
    from .model import predict

    if model.config.classes != len(classes):
        raise ValueError(f"model has {model.config.classes} outputs but the class table has {len(classes)}")
    if not samples:
        raise ValueError("no windows to evaluate")
    if model.config.uses_gnn and samples[0].X.shape[1] != model.config.node_dim:
        raise ValueError(f"node feature width {samples[0].X.shape[1]} != model {model.config.node_dim}")
    probs = predict(model, samples, batch_size)
    return report_from_predictions([s.label for s in samples], probs, classes, normal)


# ------------------------------------------------------------------ ablation

@dataclass
class AblationRow:
    variant: str
    report: MetricsReport
    train_report: object


def ablate(train_samples, test_samples, classes: Sequence[str], model_config, train_config,
           variants: Sequence[str], normal: str = NORMAL_CLASS) -> list[AblationRow]:
    """Train and evaluate each variant with identical seed and config.

    Rows come back in request order.
    """
    from .model import VARIANTS, HybridModel
    from .trainer import fit

    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise ValueError(f"unknown variant(s) {bad}; choose from {VARIANTS}")
    rows = []
    for v in variants:
        cfg = dataclasses.replace(model_config, variant=v)
        model, rep = fit(train_samples, train_config, HybridModel(cfg))
        rows.append(AblationRow(v, evaluate(model, test_samples, classes, normal), rep))
        logger.info("variant %s macro_f1 %.4f", v, rows[-1].report.macro_f1)
    return rows


def format_ablation(rows: Sequence[AblationRow]) -> str:
    lines = [f"{'variant':<14s} {'accuracy':>9s} {'precision':>9s} {'recall':>9s} {'f1':>9s} {'auc':>9s} {'epochs':>6s}"]
    for r in rows:
        m = r.report
        lines.append(f"{r.variant:<14s} {m.accuracy:9.4f} {m.macro_precision:9.4f} {m.macro_recall:9.4f} "
                     f"{m.macro_f1:9.4f} {m.macro_auc:9.4f} {r.train_report.epochs:6d}")
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------------ attention traces

@dataclass
class AttentionTrace:
    window_id: str
    true: str
    pred: str
    weights: np.ndarray      # (heads, T, T)

    @property
    def salience(self) -> np.ndarray:
        """Mean over heads of the column sums: how much each step is attended to."""
        return self.weights.sum(axis=1).mean(axis=0)


def attention_traces(model, samples, classes: Sequence[str], ids: Sequence | None = None,
                     batch_size: int = 256) -> list[AttentionTrace]:
    from .model import predict

    if not model.config.uses_attention:
        raise ValueError(f"variant {model.config.variant} has no attention layer")
    probs, weights = predict(model, samples, batch_size, with_attention=True)
    ids = list(ids) if ids is not None else [str(i) for i in range(len(samples))]
    pred = probs.argmax(axis=1)
    return [AttentionTrace(str(i), classes[s.label], classes[p], w)
            for i, s, p, w in zip(ids, samples, pred, weights)]


def format_traces(traces: Sequence[AttentionTrace]) -> str:
    lines = ["# attention trace: one WINDOW block per window",
             "# SALIENCE = mean over heads of column sums; HEAD rows are T x T, row i = query step i"]
    for tr in traces:
        h, T, _ = tr.weights.shape
        lines.append(f"WINDOW {tr.window_id} T={T} heads={h} true={tr.true} pred={tr.pred}")
        lines.append("SALIENCE " + " ".join(repr(float(v)) for v in tr.salience))
        for k in range(h):
            lines.append(f"HEAD {k}")
            lines += [" ".join(repr(float(v)) for v in row) for row in tr.weights[k]]
        lines.append("END")
    return "\n".join(lines) + "\n"


def parse_traces(text: str) -> list[AttentionTrace]:
    traces = []
    cur = None
    head_rows: list = []
    for line in text.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        if line.startswith("WINDOW "):
            parts = line.split()
            fields = dict(p.split("=", 1) for p in parts[2:])
            cur = {"id": parts[1], "T": int(fields["T"]), "heads": int(fields["heads"]),
                   "true": fields["true"], "pred": fields["pred"]}
            head_rows = []
        elif line.startswith("SALIENCE") or line.startswith("HEAD"):
            continue
        elif line == "END":
            w = np.array(head_rows, dtype=float).reshape(cur["heads"], cur["T"], cur["T"])
            traces.append(AttentionTrace(cur["id"], cur["true"], cur["pred"], w))
            cur = None
        else:
            head_rows.append([float(v) for v in line.split()])
    return traces


def export_attention(model, samples, path, classes: Sequence[str], ids: Sequence | None = None,
                     tol: float = 1e-9) -> list[AttentionTrace]:
    """Write attention traces after checking every weight row sums to 1."""
    traces = attention_traces(model, samples, classes, ids)
    for tr in traces:
        err = np.abs(tr.weights.sum(axis=-1) - 1.0).max()
        if err > tol:
            raise ArithmeticError(f"window {tr.window_id}: attention row sum off by {err:.3g}")
    Path(path).write_text(format_traces(traces), encoding="utf-8")
    return traces
