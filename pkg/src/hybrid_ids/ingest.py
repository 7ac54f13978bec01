"""Flow-record CSV ingestion against a declared column schema."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

logger = logging.getLogger(__name__)

KINDS = ("continuous", "categorical", "label", "timestamp", "src_entity", "dst_entity", "ignore")


class SchemaError(ValueError):
    """Schema is malformed or does not match a data file."""


class DataFormatError(ValueError):
    """A data file cannot be read under its schema."""


@dataclass(frozen=True)
class Column:
    name: str
    kind: str


@dataclass(frozen=True)
class SchemaSpec:
    """Ordered column descriptors for a flow CSV."""

    columns: tuple[Column, ...]

    def __post_init__(self):
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            dup = sorted({n for n in names if names.count(n) > 1})
            raise SchemaError(f"duplicate column names: {dup}")
        for c in self.columns:
            if c.kind not in KINDS:
                raise SchemaError(f"column {c.name!r} has unknown kind {c.kind!r}")
        kinds = [c.kind for c in self.columns]
        for k in ("label", "timestamp"):
            if kinds.count(k) != 1:
                raise SchemaError(f"schema needs exactly one {k} column, found {kinds.count(k)}")
        for k in ("src_entity", "dst_entity"):
            if kinds.count(k) < 1:
                raise SchemaError(f"schema needs at least one {k} column")

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, str]]) -> "SchemaSpec":
        return cls(tuple(Column(n, k) for n, k in pairs))

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    def of_kind(self, kind: str) -> list[str]:
        return [c.name for c in self.columns if c.kind == kind]

    @property
    def label(self) -> str:
        return self.of_kind("label")[0]

    @property
    def timestamp(self) -> str:
        return self.of_kind("timestamp")[0]

    @property
    def feature_columns(self) -> list[str]:
        return [c.name for c in self.columns if c.kind in ("continuous", "categorical")]

    def kind(self, name: str) -> str:
        for c in self.columns:
            if c.name == name:
                return c.kind
        raise KeyError(name)

    def dumps(self) -> str:
        width = max(len(c.name) for c in self.columns)
        lines = ["# column kind"]
        lines += [f"{c.name:<{width}s} {c.kind}" for c in self.columns]
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")


def parse_schema(text: str) -> SchemaSpec:
    pairs = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise SchemaError(f"schema line {lineno}: expected 'name kind', got {raw!r}")
        pairs.append((parts[0], parts[1]))
    if not pairs:
        raise SchemaError("schema has no columns")
    return SchemaSpec.from_pairs(pairs)


def load_schema(path) -> SchemaSpec:
    return parse_schema(Path(path).read_text(encoding="utf-8"))


@dataclass
class FlowRecord:
    """One parsed network event.

    ``values`` maps every continuous/categorical column to a float (``nan``
    when missing) or a string (``None`` when missing). ``row`` keeps the raw
    cells so exact duplicates can be detected.
    """

    timestamp: float
    src: str
    dst: str
    values: dict
    label: str
    row: tuple = field(default=(), repr=False)
    synthetic: bool = False


def _entity(cells: dict, names: Sequence[str]) -> str:
    return ":".join(cells[n] for n in names)


def parse_flow_csv(path, schema: SchemaSpec, classes: Sequence[str] | None = None) -> list[FlowRecord]:
    """Read a flow CSV whose header matches ``schema`` column for column.

    Unparseable or empty continuous cells become ``nan``; empty categorical
    cells become ``None``. When ``classes`` is given, labels outside it are
    a format error.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        expected = schema.names
        if header != expected:
            missing = [n for n in expected if n not in header]
            extra = [n for n in header if n not in expected]
            misplaced = [n for i, n in enumerate(header)
                         if n in expected and (i >= len(expected) or expected[i] != n)]
            raise SchemaError(
                f"{path}: header does not match schema; missing={missing} "
                f"unexpected={extra} out_of_order={misplaced}")
        kinds = {c.name: c.kind for c in schema.columns}
        srcs, dsts = schema.of_kind("src_entity"), schema.of_kind("dst_entity")
        ts_col, label_col = schema.timestamp, schema.label
        allowed = set(classes) if classes is not None else None
        records = []
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataFormatError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
            cells = dict(zip(header, row))
            try:
                ts = float(cells[ts_col])
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: bad timestamp {cells[ts_col]!r}") from None
            values = {}
            for name, cell in cells.items():
                kind = kinds[name]
                if kind == "continuous":
                    values[name] = _to_float(cell)
                elif kind == "categorical":
                    values[name] = cell if cell != "" else None
            label = cells[label_col]
            if allowed is not None and label not in allowed:
                raise DataFormatError(f"{path}:{lineno}: label {label!r} not in class set")
            records.append(FlowRecord(ts, _entity(cells, srcs), _entity(cells, dsts),
                                      values, label, tuple(row)))
    if not records:
        raise DataFormatError(f"{path}: no data rows")
    return records


def _to_float(cell: str) -> float:
    if cell == "":
        return math.nan
    try:
        v = float(cell)
    except ValueError:
        return math.nan
    return v if math.isfinite(v) else math.nan


def deduplicate(records: Sequence[FlowRecord]) -> tuple[list[FlowRecord], int]:
    """Drop exact duplicate rows, keeping the first occurrence."""
    seen = set()
    kept = []
    for r in records:
        key = r.row if r.row else (r.timestamp, r.src, r.dst, tuple(sorted(r.values.items())), r.label)
        if key in seen:
            continue
        seen.add(key)
        kept.append(r)
    removed = len(records) - len(kept)
    if removed:
        logger.info("removed %d duplicate records", removed)
    return kept, removed


def write_flow_csv(path, schema: SchemaSpec, rows: Iterable[Sequence]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(schema.names)
        for row in rows:
            w.writerow(row)
