"""Per-window traffic graphs and the normalized adjacency used by the GCN.

Node ids inside a graph are always in canonical (sorted entity name) order,
and flows are canonically sorted before aggregation, so a graph does not
depend on the order its records arrive in.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .ingest import FlowRecord

logger = logging.getLogger(__name__)

GRAPH_FORMAT = "hybrid-ids-graph/1"

PROTOCOLS = ("tcp", "udp", "icmp")
SERVICES = ("-", "http", "https", "dns", "ssh", "ftp", "ftp-data", "smtp", "pop3",
            "snmp", "ssl", "irc", "radius", "dhcp")
STATES = ("FIN", "CON", "INT", "REQ", "RST", "ACC", "CLO", "ECO", "PAR", "URN", "no")
SUCCESS_STATES = frozenset({"FIN", "CON", "ACC"})
WELL_KNOWN_PORT_LIMIT = 1024

# Catalog v1. Order is part of the checkpoint/graph-file contract.
NODE_FEATURES = (
    "out_degree", "in_degree", "out_peers", "in_peers",
    "out_flows", "in_flows", "out_bytes", "in_bytes", "out_pkts", "in_pkts",
    "out_dur_mean", "out_dur_std", "in_dur_mean", "in_dur_std",
    "out_iat_mean", "in_iat_mean",
    "proto_tcp_frac", "proto_udp_frac", "proto_other_frac",
    "well_known_port_frac", "failure_frac",
    "out_bytes_per_pkt", "in_bytes_per_pkt",
    "active_span", "unique_services",
)
EDGE_FEATURES = (
    "duration", "protocol", "service", "src_pkts", "dst_pkts",
    "src_bytes", "dst_bytes", "state", "flow_count", "success",
)
NODE_DIM = len(NODE_FEATURES)
EDGE_DIM = len(EDGE_FEATURES)


class GraphError(ValueError):
    pass


def _code(value, table: Sequence[str]) -> int:
    try:
        return table.index(value)
    except ValueError:
        return len(table)


@dataclass(frozen=True)
class GraphFieldMap:
    """Which CSV columns carry the per-flow quantities the graph needs."""

    duration: str = "dur"
    protocol: str = "proto"
    service: str = "service"
    state: str = "state"
    src_bytes: str = "sbytes"
    dst_bytes: str = "dbytes"
    src_pkts: str = "spkts"
    dst_pkts: str = "dpkts"
    dst_port: str = "dport"


@dataclass
class FlowTable:
    """Columnar view of time-ordered flows with integer-coded entities.

    Entity codes index ``entities``, which is sorted, so comparing codes is
    the same as comparing entity names.
    """

    ts: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    entities: np.ndarray
    dur: np.ndarray
    proto: np.ndarray
    service: np.ndarray
    state: np.ndarray
    sbytes: np.ndarray
    dbytes: np.ndarray
    spkts: np.ndarray
    dpkts: np.ndarray
    dport: np.ndarray

    ARRAYS = ("ts", "src", "dst", "dur", "proto", "service", "state",
              "sbytes", "dbytes", "spkts", "dpkts", "dport")

    def __len__(self) -> int:
        return self.ts.size

    @classmethod
    def from_records(cls, records: Sequence[FlowRecord], fmap: GraphFieldMap = GraphFieldMap()) -> "FlowTable":
        for i, r in enumerate(records):
            if not r.src or not r.dst:
                raise GraphError(f"record {i} has an empty endpoint (src={r.src!r}, dst={r.dst!r})")
        names = np.array(sorted({r.src for r in records} | {r.dst for r in records}), dtype=str)
        lookup = {n: i for i, n in enumerate(names.tolist())}

        def num(key):
            out = np.array([r.values.get(key, np.nan) if key else np.nan for r in records], dtype=float)
            return out

        def nz(key):
            return np.nan_to_num(num(key), nan=0.0)

        return cls(
            ts=np.array([r.timestamp for r in records], dtype=float),
            src=np.array([lookup[r.src] for r in records], dtype=np.int64),
            dst=np.array([lookup[r.dst] for r in records], dtype=np.int64),
            entities=names,
            dur=nz(fmap.duration),
            proto=np.array([_code(r.values.get(fmap.protocol), PROTOCOLS) for r in records], dtype=np.int64),
            service=np.array([_code(r.values.get(fmap.service), SERVICES) for r in records], dtype=np.int64),
            state=np.array([_code(r.values.get(fmap.state), STATES) for r in records], dtype=np.int64),
            sbytes=nz(fmap.src_bytes),
            dbytes=nz(fmap.dst_bytes),
            spkts=nz(fmap.src_pkts),
            dpkts=nz(fmap.dst_pkts),
            dport=num(fmap.dst_port),
        )

    def take(self, index) -> "FlowTable":
        index = np.asarray(index, dtype=np.int64)
        parts = {k: getattr(self, k)[index] for k in self.ARRAYS}
        return FlowTable(entities=self.entities, **parts)

    def to_arrays(self, prefix: str = "flow_") -> dict:
        out = {prefix + k: getattr(self, k) for k in self.ARRAYS}
        out[prefix + "entities"] = self.entities
        return out

    @classmethod
    def from_arrays(cls, arrays, prefix: str = "flow_") -> "FlowTable":
        parts = {k: np.asarray(arrays[prefix + k]) for k in cls.ARRAYS}
        return cls(entities=np.asarray(arrays[prefix + "entities"]), **parts)


@dataclass
class TrafficGraph:
    """G = (V, E, X, A) for one window.

    ``edges`` holds (src, dst) node positions; ``A`` is the directed 0/1
    adjacency with a zero diagonal.
    """

    nodes: list
    X: np.ndarray
    edges: np.ndarray
    edge_attr: np.ndarray
    A: np.ndarray
    node_codes: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        n = len(self.nodes)
        assert self.X.shape == (n, NODE_DIM)
        assert self.A.shape == (n, n)
        assert self.edge_attr.shape == (len(self.edges), EDGE_DIM)

    def node_index(self, codes) -> np.ndarray:
        """Positions of entity codes within this graph's node list."""
        lookup = {c: i for i, c in enumerate(self.node_codes.tolist())}
        try:
            return np.array([lookup[c] for c in np.asarray(codes).tolist()], dtype=np.int64)
        except KeyError as exc:
            raise GraphError(f"event endpoint {exc.args[0]} missing from graph") from None

    def canonical(self) -> "TrafficGraph":
        """Same graph with nodes sorted by name."""
        order = sorted(range(len(self.nodes)), key=lambda i: self.nodes[i])
        inv = np.empty(len(order), dtype=np.int64)
        inv[order] = np.arange(len(order))
        edges = inv[self.edges] if len(self.edges) else self.edges
        eorder = np.lexsort((edges[:, 1], edges[:, 0])) if len(edges) else np.zeros(0, dtype=np.int64)
        codes = None if self.node_codes is None else self.node_codes[order]
        return TrafficGraph([self.nodes[i] for i in order], self.X[order], edges[eorder],
                            self.edge_attr[eorder], self.A[np.ix_(order, order)], codes)

    def permuted(self, perm) -> "TrafficGraph":
        """Relabel nodes so that new position i holds old node ``perm[i]``."""
        perm = np.asarray(perm)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(perm.size)
        edges = inv[self.edges] if len(self.edges) else self.edges
        codes = None if self.node_codes is None else self.node_codes[perm]
        return TrafficGraph([self.nodes[i] for i in perm], self.X[perm], edges,
                            self.edge_attr, self.A[np.ix_(perm, perm)], codes)


def normalize_adjacency(A, symmetrize: bool = True) -> np.ndarray:
    """D^-1/2 (A + I) D^-1/2 with D the row sums of A + I."""
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise GraphError(f"adjacency must be square, got shape {A.shape}")
    if symmetrize:
        A = np.maximum(A, A.T)
    a_tilde = A + np.eye(A.shape[0])
    deg = a_tilde.sum(axis=1)
    return a_tilde / np.sqrt(np.outer(deg, deg))


def _canonical_order(t: FlowTable) -> np.ndarray:
    keys = (t.dport, t.dpkts, t.spkts, t.dbytes, t.sbytes, t.dur, t.state, t.proto,
            t.service, t.dst, t.src, t.ts)
    return np.lexsort(tuple(np.nan_to_num(k, nan=-1.0) for k in keys))


def build_graph_table(table: FlowTable, index=None) -> TrafficGraph:
    """Graph over the flows ``table[index]`` (all flows when ``index`` is None)."""
    t = table if index is None else table.take(index)
    if len(t) == 0:
        raise GraphError("cannot build a graph from an empty window")
    t = t.take(_canonical_order(t))
    codes, inv = np.unique(np.concatenate([t.src, t.dst]), return_inverse=True)
    n = codes.size
    m = len(t)
    s, d = inv[:m], inv[m:]

    # edges: one per distinct (src, dst, service)
    triples = np.stack([s, d, t.service], axis=1)
    edge_keys, edge_of = np.unique(triples, axis=0, return_inverse=True)
    edge_of = edge_of.reshape(-1)
    e = edge_keys.shape[0]
    flow_count = np.bincount(edge_of, minlength=e).astype(float)
    success = np.array([st < len(STATES) and STATES[st] in SUCCESS_STATES for st in t.state], dtype=float)
    edge_attr = np.column_stack([
        np.bincount(edge_of, t.dur, e) / flow_count,
        _majority(edge_of, t.proto, e),
        edge_keys[:, 2].astype(float),
        np.bincount(edge_of, t.spkts, e),
        np.bincount(edge_of, t.dpkts, e),
        np.bincount(edge_of, t.sbytes, e),
        np.bincount(edge_of, t.dbytes, e),
        _majority(edge_of, t.state, e),
        flow_count,
        np.bincount(edge_of, success, e) / flow_count,
    ])
    edges = edge_keys[:, :2].astype(np.int64)

    A = np.zeros((n, n))
    off = s != d
    A[s[off], d[off]] = 1.0

    X = _node_features(t, s, d, n, edges, success)
    names = [str(x) for x in table.entities[codes]]
    return TrafficGraph(names, X, edges, edge_attr, A, codes)


def _majority(group: np.ndarray, value: np.ndarray, n: int) -> np.ndarray:
    """Most frequent value per group; ties go to the smaller value."""
    pairs, counts = np.unique(np.stack([group, value], axis=1), axis=0, return_counts=True)
    order = np.lexsort((pairs[:, 1], -counts, pairs[:, 0]))
    first = np.ones(order.size, dtype=bool)
    first[1:] = pairs[order[1:], 0] != pairs[order[:-1], 0]
    out = np.zeros(n)
    out[pairs[order[first], 0]] = pairs[order[first], 1]
    return out


def _node_features(t: FlowTable, s, d, n, edges, success) -> np.ndarray:
    X = np.zeros((n, NODE_DIM))
    vol = t.sbytes + t.dbytes
    pkts = t.spkts + t.dpkts

    X[:, 0] = np.bincount(edges[:, 0], minlength=n)
    X[:, 1] = np.bincount(edges[:, 1], minlength=n)
    pairs = np.unique(edges, axis=0)
    X[:, 2] = np.bincount(pairs[:, 0], minlength=n)
    X[:, 3] = np.bincount(pairs[:, 1], minlength=n)
    out_n = np.bincount(s, minlength=n).astype(float)
    in_n = np.bincount(d, minlength=n).astype(float)
    X[:, 4], X[:, 5] = out_n, in_n
    X[:, 6] = np.bincount(s, vol, n)
    X[:, 7] = np.bincount(d, vol, n)
    X[:, 8] = np.bincount(s, pkts, n)
    X[:, 9] = np.bincount(d, pkts, n)
    X[:, 10], X[:, 11] = _mean_std(s, t.dur, out_n, n)
    X[:, 12], X[:, 13] = _mean_std(d, t.dur, in_n, n)
    X[:, 14] = _mean_gap(s, t.ts, out_n, n)
    X[:, 15] = _mean_gap(d, t.ts, in_n, n)

    # flows touching a node; a self-flow counts once
    both = np.concatenate([s, d[s != d]])
    keep = np.concatenate([np.arange(len(t)), np.flatnonzero(s != d)])
    touch = np.bincount(both, minlength=n).astype(float)
    for col, mask in ((16, t.proto == 0), (17, t.proto == 1), (18, t.proto >= 2)):
        X[:, col] = np.bincount(both, mask[keep].astype(float), n) / touch
    well_known = np.nan_to_num(t.dport, nan=np.inf) < WELL_KNOWN_PORT_LIMIT
    X[:, 19] = np.bincount(both, well_known[keep].astype(float), n) / touch
    X[:, 20] = np.bincount(both, (1.0 - success)[keep], n) / touch

    has_pkts = pkts > 0
    bpp = np.where(has_pkts, vol / np.where(has_pkts, pkts, 1.0), 0.0)
    cnt_out = np.bincount(s, has_pkts.astype(float), n)
    cnt_in = np.bincount(d, has_pkts.astype(float), n)
    X[:, 21] = np.where(cnt_out > 0, np.bincount(s, bpp, n) / np.maximum(cnt_out, 1), 0.0)
    X[:, 22] = np.where(cnt_in > 0, np.bincount(d, bpp, n) / np.maximum(cnt_in, 1), 0.0)

    lo = np.full(n, np.inf)
    hi = np.full(n, -np.inf)
    np.minimum.at(lo, both, t.ts[keep])
    np.maximum.at(hi, both, t.ts[keep])
    X[:, 23] = hi - lo
    svc = np.unique(np.stack([both, t.service[keep]], axis=1), axis=0)
    X[:, 24] = np.bincount(svc[:, 0], minlength=n)
    return X


def _mean_std(group, value, count, n):
    total = np.bincount(group, value, n)
    mean = np.where(count > 0, total / np.maximum(count, 1), 0.0)
    dev = value - mean[group]
    var = np.where(count > 0, np.bincount(group, dev * dev, n) / np.maximum(count, 1), 0.0)
    return mean, np.sqrt(var)


def _mean_gap(group, ts, count, n):
    lo = np.full(n, np.inf)
    hi = np.full(n, -np.inf)
    np.minimum.at(lo, group, ts)
    np.maximum.at(hi, group, ts)
    return np.where(count >= 2, (hi - lo) / np.maximum(count - 1, 1), 0.0)


def build_graph(window: Sequence[FlowRecord], fmap: GraphFieldMap = GraphFieldMap()) -> TrafficGraph:
    """Graph for a window of parsed records."""
    if not window:
        raise GraphError("cannot build a graph from an empty window")
    return build_graph_table(FlowTable.from_records(window, fmap))


def node_features(entity: str, window: Sequence[FlowRecord], fmap: GraphFieldMap = GraphFieldMap()) -> np.ndarray:
    g = build_graph(window, fmap)
    if entity not in g.nodes:
        raise GraphError(f"entity {entity!r} does not appear in the window")
    return g.X[g.nodes.index(entity)]


class NodeFeatureScaler:
    """log1p followed by min-max, fitted on training graphs; clamps at apply."""

    def __init__(self, lo=None, hi=None):
        self.lo = None if lo is None else np.asarray(lo, dtype=float)
        self.hi = None if hi is None else np.asarray(hi, dtype=float)

    def fit(self, graphs: Sequence[TrafficGraph]) -> "NodeFeatureScaler":
        z = np.log1p(np.vstack([g.X for g in graphs]))
        self.lo, self.hi = z.min(axis=0), z.max(axis=0)
        return self

    def transform(self, X: np.ndarray) -> np.ndarray:
        z = np.log1p(X)
        span = self.hi - self.lo
        safe = np.where(span > 0, span, 1.0)
        return np.where(span > 0, np.clip((z - self.lo) / safe, 0.0, 1.0), 0.0)


# ------------------------------------------------------------------ text export

def _fmt(x: float) -> str:
    return repr(float(x))


def format_graphs(graphs: Sequence[TrafficGraph], ids: Sequence | None = None) -> str:
    """Text export: per graph a ``NODES``, ``EDGES`` and ``ADJ`` block."""
    lines = [f"# {GRAPH_FORMAT}",
             "# NODES rows: id " + " ".join(NODE_FEATURES),
             "# EDGES rows: src dst " + " ".join(EDGE_FEATURES)]
    for k, g in enumerate(graphs):
        gid = ids[k] if ids is not None else k
        lines.append(f"GRAPH {gid} {len(g.nodes)} {len(g.edges)}")
        lines.append("NODES")
        for name, row in zip(g.nodes, g.X):
            lines.append(name + " " + " ".join(_fmt(v) for v in row))
        lines.append("EDGES")
        for (a, b), row in zip(g.edges, g.edge_attr):
            lines.append(f"{g.nodes[a]} {g.nodes[b]} " + " ".join(_fmt(v) for v in row))
        lines.append("ADJ")
        for row in g.A:
            lines.append(" ".join(str(int(v)) for v in row))
        lines.append("END")
    return "\n".join(lines) + "\n"


def parse_graphs(text: str) -> list[tuple[str, TrafficGraph]]:
    out = []
    lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    i = 0
    while i < len(lines):
        head = lines[i].split()
        if head[0] != "GRAPH" or len(head) != 4:
            raise GraphError(f"expected GRAPH header, got {lines[i]!r}")
        gid, n, e = head[1], int(head[2]), int(head[3])
        i += 1
        if lines[i] != "NODES":
            raise GraphError("missing NODES block")
        names, X = [], []
        for row in lines[i + 1:i + 1 + n]:
            parts = row.split()
            names.append(parts[0])
            X.append([float(v) for v in parts[1:]])
        i += 1 + n
        if lines[i] != "EDGES":
            raise GraphError("missing EDGES block")
        pos = {nm: k for k, nm in enumerate(names)}
        edges, attr = [], []
        for row in lines[i + 1:i + 1 + e]:
            parts = row.split()
            edges.append((pos[parts[0]], pos[parts[1]]))
            attr.append([float(v) for v in parts[2:]])
        i += 1 + e
        if lines[i] != "ADJ":
            raise GraphError("missing ADJ block")
        A = [[float(v) for v in row.split()] for row in lines[i + 1:i + 1 + n]]
        i += 1 + n
        if lines[i] != "END":
            raise GraphError("missing END")
        i += 1
        out.append((gid, TrafficGraph(names, np.array(X).reshape(n, NODE_DIM),
                                      np.array(edges, dtype=np.int64).reshape(e, 2),
                                      np.array(attr).reshape(e, EDGE_DIM), np.array(A).reshape(n, n))))
    return out


def write_graphs(path, graphs: Sequence[TrafficGraph], ids: Sequence | None = None) -> None:
    Path(path).write_text(format_graphs(graphs, ids), encoding="utf-8")
