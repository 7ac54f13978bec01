"""End-to-end wiring: records -> split -> transform -> SMOTE -> windows -> graph samples.

A :class:`Prepared` bundle holds both partitions as time-sorted flow tables
with their transformed per-event features and window index, and saves to a
directory of plain files (JSON plus ``.npz`` without pickled objects).
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .graph import FlowTable, GraphFieldMap, NodeFeatureScaler
from .ingest import FlowRecord, SchemaSpec, deduplicate
from .model import GraphWindow, make_samples, window_graphs
from .preprocess import (Dataset, Transform, WindowSet, fit_transform, make_windows,
                         smote_dataset, stratified_split)

logger = logging.getLogger(__name__)

PREPARED_FORMAT = "hybrid-ids-prepared/1"
# flow-table fields interpolated for SMOTE rows; the rest are copied from the base row
_INTERPOLATED = ("dur", "sbytes", "dbytes", "spkts", "dpkts")


@dataclass
class PrepConfig:
    train_fraction: float = 0.8
    k_features: int = 35
    collinear_threshold: float = 0.85
    mi_bins: int = 10
    smote_ratio: float = 0.5
    smote_k: int = 5
    T: int = 50
    stride: int = 5
    seed: int = 0


@dataclass
class Partition:
    table: FlowTable
    features: np.ndarray      # (n, d) transformed tabular features, same row order as table
    labels: np.ndarray
    synthetic: np.ndarray     # bool per row
    windows: WindowSet

    def arrays(self) -> dict:
        out = self.table.to_arrays()
        out.update(features=self.features, labels=self.labels, synthetic=self.synthetic,
                   window_index=self.windows.index, window_labels=self.windows.labels,
                   window_shape=np.array([self.windows.T, self.windows.stride]))
        return out

    @classmethod
    def from_arrays(cls, a) -> "Partition":
        T, stride = (int(v) for v in a["window_shape"])
        return cls(FlowTable.from_arrays(a), np.asarray(a["features"]), np.asarray(a["labels"]),
                   np.asarray(a["synthetic"]), WindowSet(np.asarray(a["window_index"]),
                                                         np.asarray(a["window_labels"]), T, stride))


@dataclass
class Prepared:
    transform: Transform
    classes: list
    train: Partition
    test: Partition
    config: PrepConfig
    stats: dict = field(default_factory=dict)

    @property
    def feature_names(self) -> list:
        return self.transform.feature_names

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.transform.save(d / "transform.json")
        for name, part in (("train", self.train), ("test", self.test)):
            with open(d / f"{name}.npz", "wb") as fh:
                np.savez(fh, **part.arrays())
        meta = {"format": PREPARED_FORMAT, "classes": self.classes,
                "config": asdict(self.config), "stats": self.stats}
        (d / "prepared.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, directory) -> "Prepared":
        d = Path(directory)
        meta_path = d / "prepared.json"
        if not meta_path.exists():
            raise FileNotFoundError(f"{d}: no prepared.json (run preprocess first)")
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        if meta.get("format") != PREPARED_FORMAT:
            raise ValueError(f"{meta_path}: unsupported format {meta.get('format')!r}")
        parts = {}
        for name in ("train", "test"):
            with np.load(d / f"{name}.npz", allow_pickle=False) as a:
                parts[name] = Partition.from_arrays(a)
        return cls(Transform.load(d / "transform.json"), meta["classes"], parts["train"],
                   parts["test"], PrepConfig(**meta["config"]), meta.get("stats", {}))


def _synthetic_rows(table: FlowTable, base: np.ndarray, neighbor: np.ndarray, lam: np.ndarray) -> FlowTable:
    """Flow rows for SMOTE samples: base row with volumes interpolated like the features."""
    out = table.take(base)
    nb = table.take(neighbor)
    for key in _INTERPOLATED:
        a, b = getattr(out, key), getattr(nb, key)
        setattr(out, key, a + lam * (b - a))
    return out


def _concat_tables(a: FlowTable, b: FlowTable) -> FlowTable:
    parts = {k: np.concatenate([getattr(a, k), getattr(b, k)]) for k in FlowTable.ARRAYS}
    return FlowTable(entities=a.entities, **parts)


def _time_sorted(table, features, labels, synthetic, cfg) -> Partition:
    order = np.argsort(table.ts, kind="stable")
    labels = labels[order]
    return Partition(table.take(order), features[order], labels, synthetic[order],
                     make_windows(labels, cfg.T, cfg.stride))


def prepare(records: Sequence[FlowRecord], schema: SchemaSpec, cfg: PrepConfig = PrepConfig(),
            fmap: GraphFieldMap = GraphFieldMap(), classes: Sequence[str] | None = None) -> Prepared:
    """Fit everything on the training split and apply it to the test split."""
    records, removed = deduplicate(records)
    ds = Dataset.from_records(records, schema, classes)
    tr, te = stratified_split(ds.labels, cfg.train_fraction, cfg.seed)
    transform, train_ds = fit_transform(ds.take(tr), cfg.k_features, cfg.collinear_threshold, cfg.mi_bins)
    test_ds = transform.apply(ds.take(te))
    table = FlowTable.from_records(records, fmap)

    balanced, res = smote_dataset(train_ds, cfg.smote_k, cfg.smote_ratio, cfg.seed)
    train_table = table.take(tr)
    if res.base.size:
        train_table = _concat_tables(train_table, _synthetic_rows(train_table, res.base, res.neighbor, res.lam))
    synthetic = np.zeros(balanced.n_rows, dtype=bool)
    synthetic[train_ds.n_rows:] = True
    train = _time_sorted(train_table, balanced.features, balanced.labels, synthetic, cfg)
    test = _time_sorted(table.take(te), test_ds.features, test_ds.labels,
                        np.zeros(test_ds.n_rows, dtype=bool), cfg)
    transform.provenance = list(balanced.provenance)
    stats = {
        "records": len(records) + removed, "duplicates_removed": removed,
        "train_rows": int(tr.size), "test_rows": int(te.size),
        "synthetic_rows": int(res.base.size), "features": len(transform.feature_names),
        "train_windows": len(train.windows), "test_windows": len(test.windows),
        "train_class_counts": np.bincount(train.labels, minlength=len(ds.classes)).tolist(),
        "test_class_counts": np.bincount(test.labels, minlength=len(ds.classes)).tolist(),
    }
    logger.info("prepared: %s", stats)
    return Prepared(transform, list(ds.classes), train, test, cfg, stats)


def graphs_for(part: Partition):
    return window_graphs(part.table, part.windows)


def build_samples(prep: Prepared, symmetrize: bool = True,
                  scaler: NodeFeatureScaler | None = None) -> tuple[list[GraphWindow], list[GraphWindow], NodeFeatureScaler]:
    """Graph samples for both partitions; the node scaler is fitted on training graphs."""
    train_graphs = graphs_for(prep.train)
    test_graphs = graphs_for(prep.test)
    if scaler is None:
        scaler = NodeFeatureScaler().fit([g for g, _, _ in train_graphs])
    train = make_samples(train_graphs, prep.train.windows, scaler, prep.train.features, symmetrize)
    test = make_samples(test_graphs, prep.test.windows, scaler, prep.test.features, symmetrize)
    return train, test, scaler
