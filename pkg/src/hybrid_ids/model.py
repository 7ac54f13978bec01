"""GCN -> bidirectional LSTM -> multi-head self-attention -> pooled softmax.

Inputs arrive as :class:`Batch` objects: the windows' graphs stacked into
one block-diagonal normalized adjacency, the per-event endpoint positions
into the stacked node matrix, and (for the tabular ablations) per-event
feature rows.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from . import autograd as ag
from .autograd import BatchNormState, Tensor
from .graph import NODE_DIM, NodeFeatureScaler, FlowTable, build_graph_table, normalize_adjacency
from .preprocess import WindowSet

VARIANTS = ("full", "no_attention", "no_gnn", "no_lstm", "gnn_only", "lstm_only")
GATES = ("i", "f", "o", "c")


@dataclass
class ModelConfig:
    node_dim: int = NODE_DIM
    gcn_dims: tuple = (128, 64, 32)
    gcn_dropout: float = 0.3
    lstm_layers: int = 2
    lstm_hidden: int = 64
    lstm_dropout: float = 0.2
    heads: int = 4
    head_dim: int = 32
    classes: int = 2
    seq_len: int = 50
    l2: float = 1e-5
    seed: int = 0
    tab_dim: int = 0
    variant: str = "full"
    symmetrize: bool = True

    def __post_init__(self):
        self.gcn_dims = tuple(int(d) for d in self.gcn_dims)
        if not self.gcn_dims or min(self.gcn_dims) <= 0:
            raise ValueError("gcn_dims must be nonempty and positive")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.uses_attention and self.heads * self.head_dim != self.seq_width:
            raise ValueError(
                f"heads x head_dim = {self.heads * self.head_dim} must equal the attended width "
                f"{self.seq_width} (2 x lstm_hidden)")
        if self.uses_tabular and self.tab_dim <= 0:
            raise ValueError(f"variant {self.variant} needs tab_dim > 0")
        if self.classes < 2:
            raise ValueError("need at least 2 classes")

    @property
    def uses_gnn(self) -> bool:
        return self.variant in ("full", "no_attention", "no_lstm", "gnn_only")

    @property
    def uses_tabular(self) -> bool:
        return self.variant in ("no_gnn", "lstm_only")

    @property
    def uses_lstm(self) -> bool:
        return self.variant in ("full", "no_attention", "no_gnn", "lstm_only")

    @property
    def uses_attention(self) -> bool:
        # lstm_only keeps attention, so it coincides with no_gnn
        return self.variant in ("full", "no_gnn", "no_lstm", "lstm_only")

    @property
    def step_dim(self) -> int:
        return self.gcn_dims[-1]

    @property
    def seq_width(self) -> int:
        return 2 * self.lstm_hidden

    @property
    def pooled_dim(self) -> int:
        return self.step_dim if self.variant == "gnn_only" else self.seq_width

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gcn_dims"] = list(self.gcn_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# ---------------------------------------------------------------- model inputs

@dataclass
class GraphWindow:
    """One classification instance: a window's graph plus its event sequence."""

    adj: np.ndarray          # normalized |V|x|V|
    X: np.ndarray            # scaled node features |V|x25
    src: np.ndarray          # (T,) node positions of each event's source
    dst: np.ndarray          # (T,) node positions of each event's destination
    tab: np.ndarray | None   # (T, d) tabular event features
    label: int
    adj_csr: sp.csr_matrix = field(default=None, repr=False)


@dataclass
class Batch:
    adj: sp.csr_matrix
    X: np.ndarray
    src: np.ndarray          # (B*T,) rows into X
    dst: np.ndarray
    tab: np.ndarray | None   # (B, T, d)
    labels: np.ndarray
    size: int
    T: int


def collate(windows: Sequence[GraphWindow]) -> Batch:
    offsets = np.cumsum([0] + [w.X.shape[0] for w in windows])
    adj = sp.block_diag([w.adj_csr if w.adj_csr is not None else sp.csr_matrix(w.adj)
                         for w in windows], format="csr")
    src = np.concatenate([w.src + o for w, o in zip(windows, offsets)])
    dst = np.concatenate([w.dst + o for w, o in zip(windows, offsets)])
    tab = None
    if windows[0].tab is not None:
        tab = np.stack([w.tab for w in windows])
    return Batch(adj, np.vstack([w.X for w in windows]), src, dst, tab,
                 np.array([w.label for w in windows], dtype=np.int64),
                 len(windows), windows[0].src.size)


def window_graphs(table: FlowTable, windows: WindowSet):
    """Build the raw (unscaled) graph and event endpoint positions per window."""
    out = []
    for idx in windows.index:
        g = build_graph_table(table, idx)
        out.append((g, g.node_index(table.src[idx]), g.node_index(table.dst[idx])))
    return out


def make_samples(graphs, windows: WindowSet, scaler: NodeFeatureScaler,
                 tab_features: np.ndarray | None = None, symmetrize: bool = True) -> list[GraphWindow]:
    samples = []
    for (g, s, d), idx, label in zip(graphs, windows.index, windows.labels):
        adj = normalize_adjacency(g.A, symmetrize)
        tab = None if tab_features is None else tab_features[idx]
        samples.append(GraphWindow(adj, scaler.transform(g.X), s, d, tab, int(label), sp.csr_matrix(adj)))
    return samples


# ------------------------------------------------------------------ parameters

def _glorot(rng, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class HybridModel:
    """All trainable parameters and batchnorm buffers, in a canonical order."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.bn: dict[str, BatchNormState] = {}
        self._build()

    def _add(self, name, values):
        self.params[name] = Tensor(values, requires_grad=True, name=name)

    def _build(self):
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        if cfg.uses_gnn:
            dims = (cfg.node_dim,) + cfg.gcn_dims
            for layer in range(len(cfg.gcn_dims)):
                self._add(f"gcn.{layer}.W", _glorot(rng, dims[layer], dims[layer + 1]))
                self._add(f"gcn.{layer}.gamma", np.ones(dims[layer + 1]))
                self._add(f"gcn.{layer}.beta", np.zeros(dims[layer + 1]))
                self.bn[f"gcn.{layer}"] = BatchNormState(dims[layer + 1])
        if cfg.uses_tabular:
            self._add("tab.W", _glorot(rng, cfg.tab_dim, cfg.step_dim))
            self._add("tab.b", np.zeros(cfg.step_dim))
        if cfg.uses_lstm:
            h = cfg.lstm_hidden
            for layer in range(cfg.lstm_layers):
                d_in = cfg.step_dim if layer == 0 else 2 * h
                for direction in ("fwd", "bwd"):
                    p = f"lstm.{layer}.{direction}"
                    for g in GATES:
                        self._add(f"{p}.W_x{g}", _glorot(rng, d_in, h))
                        self._add(f"{p}.W_h{g}", _glorot(rng, h, h))
                    for g in GATES:
                        self._add(f"{p}.b_{g}", np.full(h, 1.0 if g == "f" else 0.0))
        if cfg.variant == "no_lstm":
            self._add("proj.W", _glorot(rng, cfg.step_dim, cfg.seq_width))
            self._add("proj.b", np.zeros(cfg.seq_width))
        if cfg.uses_attention:
            width = cfg.seq_width
            for i in range(cfg.heads):
                for m in ("Q", "K", "V"):
                    self._add(f"attn.{i}.W_{m}", _glorot(rng, width, cfg.head_dim))
            self._add("attn.W_O", _glorot(rng, cfg.heads * cfg.head_dim, width))
        self._add("cls.W", _glorot(rng, cfg.pooled_dim, cfg.classes))
        self._add("cls.b", np.zeros(cfg.classes))

    # names of the matrices that carry the L2 penalty
    def weight_names(self) -> list[str]:
        return [n for n, t in self.params.items() if t.values.ndim == 2]

    def n_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {n: t.values.copy() for n, t in self.params.items()}
        for n, st in self.bn.items():
            out[f"{n}.running_mean"] = st.mean.copy()
            out[f"{n}.running_var"] = st.var.copy()
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = self.state_dict()
        missing = sorted(set(expected) - set(state))
        extra = sorted(set(state) - set(expected))
        if missing or extra:
            raise ValueError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, arr in state.items():
            if arr.shape != expected[name].shape:
                raise ValueError(f"{name}: shape {arr.shape} != expected {expected[name].shape}")
        for n, t in self.params.items():
            t.values = np.array(state[n], dtype=float)
            t.grad = None
        for n, st in self.bn.items():
            st.mean = np.array(state[f"{n}.running_mean"], dtype=float)
            st.var = np.array(state[f"{n}.running_var"], dtype=float)

    def copy(self) -> "HybridModel":
        return copy.deepcopy(self)


# ------------------------------------------------------------------ sub-networks

def gcn_forward(adj, X: np.ndarray | Tensor, model: HybridModel, train: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
    """Stacked propagation relu(A_hat H W), each followed by batchnorm and dropout."""
    cfg = model.config
    H = X if isinstance(X, Tensor) else Tensor(X)
    if H.shape[1] != cfg.node_dim:
        raise ag.ShapeError(f"node features have width {H.shape[1]}, model expects {cfg.node_dim}")
    P = model.params
    for layer in range(len(cfg.gcn_dims)):
        H = ag.relu(ag.spmm(adj, ag.matmul(H, P[f"gcn.{layer}.W"])))
        H = ag.batchnorm(H, P[f"gcn.{layer}.gamma"], P[f"gcn.{layer}.beta"], train, model.bn[f"gcn.{layer}"])
        H = ag.dropout(H, cfg.gcn_dropout, train, rng)
    return H


def _lstm_direction(xs: Tensor, model: HybridModel, prefix: str, reverse: bool,
                    fused: bool = True) -> Tensor:
    P = model.params
    hsz = model.config.lstm_hidden
    Wx = ag.concat([P[f"{prefix}.W_x{g}"] for g in GATES], axis=1)
    Wh = ag.concat([P[f"{prefix}.W_h{g}"] for g in GATES], axis=1)
    b = ag.concat([P[f"{prefix}.b_{g}"] for g in GATES], axis=0)
    # xs is time-major (T, B, d) so each step is a contiguous slice
    xproj = ag.add(ag.matmul(xs, Wx), b)
    if fused:
        return ag.lstm_sequence(xproj, Wh, reverse)
    steps = ag.unstack(xproj, axis=0)
    T = len(steps)
    order = range(T - 1, -1, -1) if reverse else range(T)
    outs: list = [None] * T
    h = c = None
    for t in order:
        pre = steps[t] if h is None else ag.add(steps[t], ag.matmul(h, Wh))
        i, f, o, cc = ag.split(pre, [hsz] * 4, axis=-1)
        i, f, o, cc = ag.sigmoid(i), ag.sigmoid(f), ag.sigmoid(o), ag.tanh(cc)
        # c_0 = 0, so the first step has no f * c_prev term
        c = ag.mul(i, cc) if c is None else ag.add(ag.mul(f, c), ag.mul(i, cc))
        h = ag.mul(o, ag.tanh(c))
        outs[t] = h
    return ag.stack(outs, axis=0)


def bilstm_forward(seq: Tensor | np.ndarray, model: HybridModel, train: bool = False,
                   rng: np.random.Generator | None = None, fused: bool = True) -> Tensor:
    """(B, T, d) -> (B, T, 2*hidden): concat of forward and backward hidden states.

    ``fused=False`` spells each gate out with elementwise primitives; it is
    slower and exists for cross-checking the fused sequence op.
    """
    x = seq if isinstance(seq, Tensor) else Tensor(seq)
    if x.values.ndim == 2:
        x = ag.reshape(x, (1,) + x.shape)
    cfg = model.config
    x = ag.transpose(x, (1, 0, 2))
    for layer in range(cfg.lstm_layers):
        if layer > 0:
            x = ag.dropout(x, cfg.lstm_dropout, train, rng)
        fwd = _lstm_direction(x, model, f"lstm.{layer}.fwd", False, fused)
        bwd = _lstm_direction(x, model, f"lstm.{layer}.bwd", True, fused)
        x = ag.concat([fwd, bwd], axis=-1)
    return ag.transpose(x, (1, 0, 2))


def multi_head_attention(H: Tensor | np.ndarray, model: HybridModel) -> tuple[Tensor, np.ndarray]:
    """Scaled dot-product self-attention per head, concatenated and projected.

    Returns the attended (B, T, width) tensor and the (B, heads, T, T) weights.
    """
    x = H if isinstance(H, Tensor) else Tensor(H)
    if x.values.ndim == 2:
        x = ag.reshape(x, (1,) + x.shape)
    cfg = model.config
    P = model.params
    if x.shape[-1] != cfg.heads * cfg.head_dim:
        raise ag.ShapeError(f"attention input width {x.shape[-1]} != heads x head_dim "
                            f"= {cfg.heads * cfg.head_dim}")
    B, T, _ = x.shape
    nh, dk = cfg.heads, cfg.head_dim

    def project(m):
        W = ag.concat([P[f"attn.{i}.W_{m}"] for i in range(nh)], axis=1)
        return ag.transpose(ag.reshape(ag.matmul(x, W), (B, T, nh, dk)), (0, 2, 1, 3))

    Q, K, V = project("Q"), project("K"), project("V")
    scores = ag.scale(ag.matmul(Q, ag.transpose(K, (0, 1, 3, 2))), 1.0 / math.sqrt(dk))
    weights = ag.softmax_rows(scores)
    heads = ag.matmul(weights, V)
    merged = ag.reshape(ag.transpose(heads, (0, 2, 1, 3)), (B, T, nh * dk))
    return ag.matmul(merged, P["attn.W_O"]), weights.values


def pool_and_classify(attended: Tensor | np.ndarray, model: HybridModel) -> Tensor:
    """Mean over time, affine map to class logits, softmax."""
    x = attended if isinstance(attended, Tensor) else Tensor(attended)
    if x.values.ndim == 2:
        x = ag.reshape(x, (1,) + x.shape)
    pooled = ag.mean(x, axis=1)
    logits = ag.add(ag.matmul(pooled, model.params["cls.W"]), model.params["cls.b"])
    return ag.softmax_rows(logits)


@dataclass
class Output:
    probs: Tensor
    attention: np.ndarray | None


def forward(batch: Batch, model: HybridModel, train: bool = False,
            rng: np.random.Generator | None = None) -> Output:
    cfg = model.config
    if batch.T < 1:
        raise ValueError("windows must hold at least one event")
    B, T = batch.size, batch.T
    if cfg.uses_gnn:
        H = gcn_forward(batch.adj, batch.X, model, train, rng)
        steps = ag.scale(ag.add(ag.gather_rows(H, batch.src), ag.gather_rows(H, batch.dst)), 0.5)
        seq = ag.reshape(steps, (B, T, cfg.step_dim))
    else:
        if batch.tab is None or batch.tab.shape[-1] != cfg.tab_dim:
            got = None if batch.tab is None else batch.tab.shape[-1]
            raise ag.ShapeError(f"variant {cfg.variant} needs tabular width {cfg.tab_dim}, got {got}")
        seq = ag.add(ag.matmul(Tensor(batch.tab), model.params["tab.W"]), model.params["tab.b"])
    attention = None
    if cfg.uses_lstm:
        seq = bilstm_forward(seq, model, train, rng)
    elif cfg.variant == "no_lstm":
        seq = ag.add(ag.matmul(seq, model.params["proj.W"]), model.params["proj.b"])
    if cfg.uses_attention:
        seq, attention = multi_head_attention(seq, model)
    return Output(pool_and_classify(seq, model), attention)


def loss(probs: Tensor, labels, model: HybridModel | None = None, l2: float | None = None) -> Tensor:
    """Mean negative log-likelihood plus l2 * sum of squared weight matrices."""
    labels = np.asarray(labels, dtype=np.int64)
    C = probs.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"label index out of range for {C} classes")
    nll = ag.scale(ag.mean(ag.log(ag.pick(probs, labels))), -1.0)
    if model is None:
        return nll
    if l2 is None:
        l2 = model.config.l2
    if l2 == 0.0:
        return nll
    penalty = None
    for name in model.weight_names():
        term = ag.square_sum(model.params[name])
        penalty = term if penalty is None else ag.add(penalty, term)
    return ag.add(nll, ag.scale(penalty, l2))


def predict(model: HybridModel, samples: Sequence[GraphWindow], batch_size: int = 256,
            with_attention: bool = False):
    """Infer-mode class probabilities (and optionally attention) for samples."""
    probs, atts = [], []
    for start in range(0, len(samples), batch_size):
        out = forward(collate(samples[start:start + batch_size]), model, train=False)
        probs.append(out.probs.values)
        if with_attention:
            atts.append(out.attention)
    P = np.vstack(probs) if probs else np.zeros((0, model.config.classes))
    if not with_attention:
        return P
    A = None if not atts or atts[0] is None else np.concatenate(atts)
    return P, A
