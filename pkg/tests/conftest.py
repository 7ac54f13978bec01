import numpy as np
import pytest
import scipy.sparse as sp

from hybrid_ids.graph import normalize_adjacency
from hybrid_ids.model import GraphWindow, ModelConfig


def tiny_config(**kw) -> ModelConfig:
    base = dict(node_dim=25, gcn_dims=(8, 4, 2), lstm_layers=2, lstm_hidden=3, heads=1,
                head_dim=6, classes=3, seq_len=5, tab_dim=4, seed=0)
    base.update(kw)
    return ModelConfig(**base)


def random_window(rng, n_nodes=4, T=5, label=0, node_dim=25, tab_dim=4) -> GraphWindow:
    A = (rng.random((n_nodes, n_nodes)) < 0.5).astype(float)
    np.fill_diagonal(A, 0.0)
    adj = normalize_adjacency(A)
    return GraphWindow(adj, rng.random((n_nodes, node_dim)), rng.integers(0, n_nodes, T),
                       rng.integers(0, n_nodes, T), rng.random((T, tab_dim)), label, sp.csr_matrix(adj))


def separable_windows(n, seed=0, T=5, n_nodes=4):
    """Two classes whose node features sit in disjoint ranges."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        label = i % 2
        w = random_window(rng, n_nodes, T, label)
        w.X = 0.45 * rng.random(w.X.shape) + (0.55 if label else 0.0)
        w.tab = 0.45 * rng.random(w.tab.shape) + (0.55 if label else 0.0)
        out.append(w)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: dict = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(ACCEPTANCE_LINES[number])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
