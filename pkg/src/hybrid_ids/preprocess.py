"""Cleaning, encoding, selection, balancing and windowing of flow records.

Every statistic is fitted on training rows only. A fitted :class:`Transform`
is a list of plain-dict steps; replaying it on the raw training table gives
back the processed training table bit for bit, and it serializes to JSON
without loss (floats round-trip through ``repr``).
"""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .ingest import FlowRecord, SchemaSpec

logger = logging.getLogger(__name__)

TRANSFORM_FORMAT = "hybrid-ids-transform/1"
UNSEEN = "<unseen>"
MISSING_DROP_FRACTION = 0.30
SKEW_THRESHOLD = 1.0


class TransformFormatError(ValueError):
    pass


@dataclass
class Dataset:
    """Column store of features plus integer labels.

    ``kinds`` values: ``continuous`` (float, nan = missing), ``categorical``
    (object array, None = missing) or ``indicator`` (0/1 float).
    """

    columns: dict
    kinds: dict
    labels: np.ndarray
    classes: list
    provenance: list = field(default_factory=list)

    @classmethod
    def from_records(cls, records: Sequence[FlowRecord], schema: SchemaSpec,
                     classes: Sequence[str] | None = None) -> "Dataset":
        if classes is None:
            classes = sorted({r.label for r in records})
        index = {c: i for i, c in enumerate(classes)}
        cols, kinds = {}, {}
        for name in schema.feature_columns:
            kind = schema.kind(name)
            if kind == "continuous":
                cols[name] = np.array([r.values[name] for r in records], dtype=float)
            else:
                cols[name] = np.array([r.values[name] for r in records], dtype=object)
            kinds[name] = kind
        labels = np.array([index[r.label] for r in records], dtype=np.int64)
        return cls(cols, kinds, labels, list(classes), [])

    @property
    def n_rows(self) -> int:
        return len(self.labels)

    @property
    def feature_names(self) -> list:
        return list(self.columns)

    @property
    def features(self) -> np.ndarray:
        bad = [n for n, k in self.kinds.items() if k == "categorical"]
        if bad:
            raise ValueError(f"categorical columns not encoded yet: {bad}")
        if not self.columns:
            return np.zeros((self.n_rows, 0))
        return np.column_stack([self.columns[n] for n in self.columns]).astype(float)

    def continuous_names(self) -> list:
        return [n for n, k in self.kinds.items() if k == "continuous"]

    def replace(self, columns=None, kinds=None, labels=None, entry=None) -> "Dataset":
        prov = list(self.provenance)
        if entry is not None:
            prov.append(entry)
        return Dataset(
            columns=self.columns if columns is None else columns,
            kinds=self.kinds if kinds is None else kinds,
            labels=self.labels if labels is None else labels,
            classes=list(self.classes),
            provenance=prov,
        )

    def take(self, index) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        cols = {n: v[index] for n, v in self.columns.items()}
        return Dataset(cols, dict(self.kinds), self.labels[index], list(self.classes), list(self.provenance))


# ------------------------------------------------------------------ imputation

def sample_skewness(x: np.ndarray) -> float:
    """Fisher-Pearson coefficient m3 / m2**1.5 over the non-missing values."""
    x = x[~np.isnan(x)]
    if x.size < 3:
        return 0.0
    d = x - x.mean()
    m2 = np.mean(d * d)
    if m2 == 0.0:
        return 0.0
    return float(np.mean(d ** 3) / m2 ** 1.5)


def _mode(values: np.ndarray):
    present = [v for v in values if v is not None]
    if not present:
        return None
    counts: dict = {}
    for v in present:
        counts[v] = counts.get(v, 0) + 1
    best = max(counts.values())
    return min(v for v, c in counts.items() if c == best)


def fit_impute(ds: Dataset, policy: Mapping[str, str] | None = None) -> dict:
    policy = dict(policy or {})
    drop, fill, used = [], {}, {}
    n = ds.n_rows
    for name, col in ds.columns.items():
        kind = ds.kinds[name]
        if kind == "continuous":
            missing = np.isnan(col)
        elif kind == "categorical":
            missing = np.array([v is None for v in col], dtype=bool)
        else:
            continue
        frac = missing.mean() if n else 0.0
        if frac > MISSING_DROP_FRACTION or missing.all():
            if missing.all():
                logger.warning("column %s is entirely missing; dropped", name)
            drop.append(name)
            continue
        if not missing.any():
            continue
        rule = policy.get(name, "auto")
        if kind == "categorical":
            rule = "mode"
            value = _mode(col)
        else:
            observed = col[~missing]
            if rule == "auto":
                rule = "median" if abs(sample_skewness(col)) > SKEW_THRESHOLD else "mean"
            if rule == "mean":
                value = float(observed.mean())
            elif rule == "median":
                value = float(np.median(observed))
            elif rule == "mode":
                vals, counts = np.unique(observed, return_counts=True)
                value = float(vals[np.argmax(counts)])
            else:
                raise ValueError(f"unknown imputation policy {rule!r} for {name}")
        fill[name] = value
        used[name] = rule
    return {"op": "impute", "drop": drop, "fill": fill, "policy": used}


def apply_impute(ds: Dataset, step: dict) -> Dataset:
    cols, kinds = {}, {}
    for name, col in ds.columns.items():
        if name in step["drop"]:
            continue
        if name in step["fill"]:
            value = step["fill"][name]
            if ds.kinds[name] == "continuous":
                col = np.where(np.isnan(col), value, col)
            else:
                col = np.array([value if v is None else v for v in col], dtype=object)
        elif ds.kinds[name] == "continuous" and np.isnan(col).any():
            # value never missing in training: fall back to 0 at apply time
            col = np.where(np.isnan(col), 0.0, col)
        elif ds.kinds[name] == "categorical" and any(v is None for v in col):
            col = np.array([UNSEEN if v is None else v for v in col], dtype=object)
        cols[name] = col
        kinds[name] = ds.kinds[name]
    return ds.replace(cols, kinds, entry=step)


def impute_missing(ds: Dataset, policy: Mapping[str, str] | None = None) -> Dataset:
    return apply_impute(ds, fit_impute(ds, policy))


# -------------------------------------------------------------------- encoding

def fit_one_hot(ds: Dataset) -> dict:
    vocab = {}
    for name, kind in ds.kinds.items():
        if kind != "categorical":
            continue
        seen: dict = {}
        for v in ds.columns[name]:
            if v is not None and v not in seen:
                seen[v] = None
        vocab[name] = list(seen)
    return {"op": "one_hot", "vocab": vocab}


def apply_one_hot(ds: Dataset, step: dict) -> Dataset:
    cols, kinds = {}, {}
    for name, col in ds.columns.items():
        if name not in step["vocab"]:
            cols[name] = col
            kinds[name] = ds.kinds[name]
            continue
        cats = step["vocab"][name]
        lookup = {c: i for i, c in enumerate(cats)}
        idx = np.array([lookup.get(v, len(cats)) for v in col], dtype=np.int64)
        for i, c in enumerate(cats + [UNSEEN]):
            key = f"{name}={c}"
            cols[key] = (idx == i).astype(float)
            kinds[key] = "indicator"
    return ds.replace(cols, kinds, entry=step)


def one_hot_encode(ds: Dataset) -> Dataset:
    return apply_one_hot(ds, fit_one_hot(ds))


def decode_one_hot(ds: Dataset, name: str, vocab: Sequence[str]) -> list:
    block = np.column_stack([ds.columns[f"{name}={c}"] for c in list(vocab) + [UNSEEN]])
    cats = list(vocab) + [UNSEEN]
    return [cats[i] for i in block.argmax(axis=1)]


# --------------------------------------------------------------------- scaling

def fit_minmax(ds: Dataset) -> dict:
    lo, hi = {}, {}
    for name in ds.continuous_names():
        col = ds.columns[name]
        lo[name] = float(col.min()) if col.size else 0.0
        hi[name] = float(col.max()) if col.size else 0.0
    return {"op": "minmax", "min": lo, "max": hi}


def apply_minmax(ds: Dataset, step: dict) -> Dataset:
    cols = dict(ds.columns)
    for name, lo in step["min"].items():
        if name not in cols:
            continue
        hi = step["max"][name]
        span = hi - lo
        if span == 0.0:
            cols[name] = np.zeros_like(cols[name])
        else:
            cols[name] = np.clip((cols[name] - lo) / span, 0.0, 1.0)
    return ds.replace(cols, entry=step)


def minmax_scale(ds: Dataset) -> tuple[Dataset, dict]:
    step = fit_minmax(ds)
    return apply_minmax(ds, step), {n: (step["min"][n], step["max"][n]) for n in step["min"]}


# ----------------------------------------------------------- feature selection

def correlation(x, y, kind: str = "pearson") -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.shape} vs {y.shape}")
    if x.size < 2:
        raise ValueError("correlation needs at least 2 values")
    if kind == "spearman":
        x, y = rankdata(x), rankdata(y)
    elif kind != "pearson":
        raise ValueError(f"unknown correlation kind {kind!r}")
    xc, yc = x - x.mean(), y - y.mean()
    sxx, syy = np.dot(xc, xc), np.dot(yc, yc)
    if sxx == 0.0 or syy == 0.0:
        return 0.0
    return float(np.clip(np.dot(xc, yc) / math.sqrt(sxx * syy), -1.0, 1.0))


def discretize(x: np.ndarray, bins: int = 10) -> np.ndarray:
    """Equal-frequency bin ids; tied values always share a bin."""
    x = np.asarray(x, dtype=float)
    uniq, inverse = np.unique(x, return_inverse=True)
    if uniq.size <= bins:
        return inverse.astype(np.int64)
    counts = np.bincount(inverse)
    first_rank = np.concatenate([[0], np.cumsum(counts)[:-1]])
    bin_of_value = np.minimum(bins - 1, (first_rank * bins) // x.size)
    return bin_of_value[inverse].astype(np.int64)


def mutual_information(x, labels, bins: int = 10) -> float:
    """Plug-in mutual information in nats between a discretized feature and labels."""
    fx = discretize(np.asarray(x, dtype=float), bins)
    _, fy = np.unique(np.asarray(labels), return_inverse=True)
    n = fx.size
    if n == 0:
        return 0.0
    joint = np.zeros((fx.max() + 1, fy.max() + 1))
    np.add.at(joint, (fx, fy), 1.0)
    pxy = joint / n
    px = pxy.sum(axis=1, keepdims=True)
    py = pxy.sum(axis=0, keepdims=True)
    nz = pxy > 0
    mi = float(np.sum(pxy[nz] * np.log(pxy[nz] / (px @ py)[nz])))
    return max(mi, 0.0)


def mi_scores(ds: Dataset, bins: int = 10) -> dict:
    return {n: mutual_information(ds.columns[n], ds.labels, bins) for n in ds.columns}


def _corr_matrix(m: np.ndarray) -> np.ndarray:
    mc = m - m.mean(axis=0)
    norms = np.sqrt((mc * mc).sum(axis=0))
    ok = norms > 0
    z = np.zeros_like(mc)
    z[:, ok] = mc[:, ok] / norms[ok]
    return np.clip(z.T @ z, -1.0, 1.0)


def collinear_drops(ds: Dataset, scores: Mapping[str, float], threshold: float = 0.85) -> list:
    """Names to drop so no continuous pair exceeds ``threshold`` in |pearson| or |spearman|.

    Repeatedly takes the most correlated violating pair and drops its lower-MI
    member (the later column on ties).
    """
    names = ds.continuous_names()
    if len(names) < 2:
        return []
    m = np.column_stack([ds.columns[n] for n in names])
    ranks = np.column_stack([rankdata(m[:, j]) for j in range(m.shape[1])])
    strength = np.maximum(np.abs(_corr_matrix(m)), np.abs(_corr_matrix(ranks)))
    np.fill_diagonal(strength, 0.0)
    alive = list(range(len(names)))
    drops = []
    while True:
        best, pair = threshold, None
        for a_pos, a in enumerate(alive):
            for b in alive[a_pos + 1:]:
                if strength[a, b] > best:
                    best, pair = strength[a, b], (a, b)
        if pair is None:
            break
        a, b = pair
        victim = a if scores[names[a]] < scores[names[b]] else b
        alive.remove(victim)
        drops.append(names[victim])
    return drops


def apply_keep(ds: Dataset, step: dict) -> Dataset:
    keep = set(step["keep"])
    cols = {n: v for n, v in ds.columns.items() if n in keep}
    kinds = {n: k for n, k in ds.kinds.items() if n in keep}
    return ds.replace(cols, kinds, entry=step)


def prune_collinear(ds: Dataset, threshold: float = 0.85, scores: Mapping[str, float] | None = None) -> Dataset:
    if scores is None:
        scores = mi_scores(ds)
    drops = collinear_drops(ds, scores, threshold)
    for name in drops:
        logger.info("dropping collinear feature %s", name)
    step = {"op": "prune_collinear", "threshold": threshold, "drop": drops,
            "keep": [n for n in ds.columns if n not in drops]}
    return apply_keep(ds, step)


def select_top_k(ds: Dataset, scores: Mapping[str, float], k: int = 35) -> Dataset:
    names = list(ds.columns)
    if k >= len(names):
        if k > len(names):
            logger.warning("k=%d exceeds %d available features; keeping all", k, len(names))
        chosen = names
    else:
        order = sorted(range(len(names)), key=lambda i: (-scores[names[i]], i))
        picked = set(order[:k])
        chosen = [n for i, n in enumerate(names) if i in picked]
    return apply_keep(ds, {"op": "select_top_k", "k": k, "keep": chosen})


# ------------------------------------------------------------------- transform

_APPLY = {
    "impute": apply_impute,
    "one_hot": apply_one_hot,
    "minmax": apply_minmax,
    "prune_collinear": apply_keep,
    "select_top_k": apply_keep,
}


@dataclass
class Transform:
    """Fitted preprocessing steps, replayable on any table with the same schema."""

    steps: list
    classes: list
    provenance: list = field(default_factory=list)

    def apply(self, ds: Dataset) -> Dataset:
        for step in self.steps:
            ds = _APPLY[step["op"]](ds, step)
        return ds

    @property
    def feature_names(self) -> list:
        return list(self.steps[-1]["keep"]) if self.steps and "keep" in self.steps[-1] else []

    def to_dict(self) -> dict:
        return {"format": TRANSFORM_FORMAT, "classes": self.classes,
                "steps": self.steps, "provenance": self.provenance}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1), encoding="utf-8")

    @classmethod
    def from_dict(cls, d: dict) -> "Transform":
        if d.get("format") != TRANSFORM_FORMAT:
            raise TransformFormatError(f"unsupported transform format {d.get('format')!r}")
        for step in d["steps"]:
            if step.get("op") not in _APPLY:
                raise TransformFormatError(f"unknown transform step {step.get('op')!r}")
        return cls(d["steps"], d["classes"], d.get("provenance", []))

    @classmethod
    def load(cls, path) -> "Transform":
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise TransformFormatError(f"{path}: not a transform file ({exc})") from None
        return cls.from_dict(d)


def fit_transform(train: Dataset, k: int = 35, threshold: float = 0.85, bins: int = 10,
                  impute_policy: Mapping[str, str] | None = None) -> tuple[Transform, Dataset]:
    """Fit the full cleaning/encoding/selection chain on training rows."""
    steps = []
    ds = train
    step = fit_impute(ds, impute_policy)
    ds = apply_impute(ds, step)
    steps.append(step)
    step = fit_one_hot(ds)
    ds = apply_one_hot(ds, step)
    steps.append(step)
    step = fit_minmax(ds)
    ds = apply_minmax(ds, step)
    steps.append(step)
    scores = mi_scores(ds, bins)
    drops = collinear_drops(ds, scores, threshold)
    step = {"op": "prune_collinear", "threshold": threshold, "drop": drops,
            "keep": [n for n in ds.columns if n not in drops]}
    ds = apply_keep(ds, step)
    steps.append(step)
    before = len(ds.columns)
    ds = select_top_k(ds, scores, k)
    steps.append(ds.provenance[-1])
    logger.info("feature selection: %d -> %d columns", before, len(ds.columns))
    return Transform(copy.deepcopy(steps), list(train.classes), list(ds.provenance)), ds


# ------------------------------------------------------------ split and balance

def stratified_split(labels, train_fraction: float = 0.8, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Per-class shuffled split; returns sorted (train_idx, test_idx).

    The global train count is floor(fraction * n). Each class receives the
    floor of its proportional share, and the leftover rows go to the classes
    with the largest fractional remainders (ties: lower class id), so per-class
    counts stay within one row of the exact share.
    """
    labels = np.asarray(labels)
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    frac = Fraction(str(train_fraction))
    classes, counts = np.unique(labels, return_counts=True)
    small = classes[counts < 2]
    if small.size:
        raise ValueError(f"classes with fewer than 2 rows: {small.tolist()}")
    shares = [frac * int(c) for c in counts]
    quota = [math.floor(s) for s in shares]
    total = math.floor(frac * int(labels.size))
    order = sorted(range(len(classes)), key=lambda i: (-(shares[i] - quota[i]), i))
    for i in order[: total - sum(quota)]:
        quota[i] += 1
    rng = np.random.default_rng(seed)
    train, test = [], []
    for cls, q in zip(classes, quota):
        idx = np.flatnonzero(labels == cls)
        perm = rng.permutation(idx.size)
        train.append(idx[perm[:q]])
        test.append(idx[perm[q:]])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


@dataclass
class SmoteResult:
    features: np.ndarray
    labels: np.ndarray
    base: np.ndarray        # source row of each synthetic sample
    neighbor: np.ndarray    # neighbour row it was interpolated towards
    lam: np.ndarray


def _neighbors(x: np.ndarray, k: int) -> np.ndarray:
    n = x.shape[0]
    out = np.empty((n, k), dtype=np.int64)
    sq = (x * x).sum(axis=1)
    for start in range(0, n, 512):
        block = x[start:start + 512]
        d = sq[start:start + 512, None] + sq[None, :] - 2.0 * block @ x.T
        rows = np.arange(block.shape[0])
        d[rows, start + rows] = np.inf
        out[start:start + 512] = np.argsort(d, axis=1, kind="stable")[:, :k]
    return out


def smote(features: np.ndarray, labels: np.ndarray, k_neighbors: int = 5,
          target_ratio: float = 0.5, seed: int = 0) -> SmoteResult:
    """Oversample classes below ``target_ratio`` x majority count.

    Synthetic rows are appended after the originals:
    ``x_new = x + lam * (x_nn - x)`` with ``lam ~ U[0, 1)`` and ``x_nn`` one
    of the ``k`` nearest same-class rows.
    """
    features = np.asarray(features, dtype=float)
    labels = np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    target = math.floor(target_ratio * counts.max())
    rng = np.random.default_rng(seed)
    new_x, new_y, bases, nbrs, lams = [], [], [], [], []
    for cls, count in zip(classes, counts):
        need = target - count
        if need <= 0:
            continue
        if count < 2:
            logger.warning("class %s has a single sample; SMOTE skipped", cls)
            continue
        idx = np.flatnonzero(labels == cls)
        k = min(k_neighbors, count - 1)
        nn = _neighbors(features[idx], k)
        pick_base = rng.integers(0, count, size=need)
        pick_nn = nn[pick_base, rng.integers(0, k, size=need)]
        lam = rng.random(need)
        x = features[idx[pick_base]]
        x_nn = features[idx[pick_nn]]
        new_x.append(x + lam[:, None] * (x_nn - x))
        new_y.append(np.full(need, cls))
        bases.append(idx[pick_base])
        nbrs.append(idx[pick_nn])
        lams.append(lam)
    if not new_x:
        empty = np.zeros(0, dtype=np.int64)
        return SmoteResult(features, labels, empty, empty, np.zeros(0))
    return SmoteResult(
        np.vstack([features] + new_x),
        np.concatenate([labels] + new_y),
        np.concatenate(bases),
        np.concatenate(nbrs),
        np.concatenate(lams),
    )


def smote_dataset(ds: Dataset, k_neighbors: int = 5, target_ratio: float = 0.5,
                  seed: int = 0) -> tuple[Dataset, SmoteResult]:
    res = smote(ds.features, ds.labels, k_neighbors, target_ratio, seed)
    names = ds.feature_names
    cols = {n: res.features[:, j] for j, n in enumerate(names)}
    per_class = np.bincount(res.labels[ds.n_rows:], minlength=len(ds.classes)).tolist()
    entry = {"op": "smote", "k_neighbors": k_neighbors, "target_ratio": target_ratio,
             "seed": seed, "synthetic_rows": int(res.base.size),
             "synthetic_per_class": per_class, "first_synthetic_row": ds.n_rows}
    return ds.replace(cols, labels=res.labels, entry=entry), res


# -------------------------------------------------------------------- windows

@dataclass
class WindowSet:
    """Fixed-length runs of time-ordered events.

    ``index[w]`` holds the T row positions (into the time-sorted table) of
    window ``w``; ``labels[w]`` is the label of its final event.
    """

    index: np.ndarray
    labels: np.ndarray
    T: int
    stride: int

    def __len__(self) -> int:
        return len(self.labels)


def make_windows(labels, T: int = 50, stride: int = 5) -> WindowSet:
    """Slide a length-T window with the given stride over time-sorted events."""
    labels = np.asarray(labels)
    n = labels.size
    if T < 1 or stride < 1:
        raise ValueError("T and stride must be positive")
    if n < T:
        logger.warning("only %d events for window length %d; no windows", n, T)
        return WindowSet(np.zeros((0, T), dtype=np.int64), np.zeros(0, dtype=np.int64), T, stride)
    count = (n - T) // stride + 1
    index = np.arange(count)[:, None] * stride + np.arange(T)[None, :]
    return WindowSet(index.astype(np.int64), labels[index[:, -1]].astype(np.int64), T, stride)
