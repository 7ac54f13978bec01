"""Mini-batch Adam training with early stopping on validation macro-F1."""

from __future__ import annotations

import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .metrics import confusion, macro_f1
from .model import GraphWindow, HybridModel, ModelConfig, collate, forward, loss, predict

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"HIDSCKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Checkpoint file is malformed, truncated or of another version."""


class ConfigMismatchError(CheckpointError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 256
    lr: float = 0.001
    max_epochs: int = 200
    patience: int = 15
    val_fraction: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    l2: float = 1e-5
    min_delta: float = 1e-6
    clip_norm: float = 0.0          # 0 disables gradient clipping
    max_seconds: float = 0.0        # 0 disables the wall-clock budget

    def __post_init__(self):
        if not 0.0 < self.val_fraction < 0.5:
            raise ValueError("val_fraction must be in (0, 0.5)")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update, in place on ``params[name].values``."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.values.shape:
            raise ag.ShapeError(f"{name}: grad shape {g.shape} != param shape {p.values.shape}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        state.m[name], state.v[name] = m, v
        if lr != 0.0:
            p.values = p.values - lr * (m / c1) / (np.sqrt(v / c2) + eps)


@dataclass
class TrainReport:
    losses: list = field(default_factory=list)
    val_f1: list = field(default_factory=list)
    best_epoch: int = 0
    stop_reason: str = ""
    wall_time: float = 0.0

    @property
    def epochs(self) -> int:
        return len(self.losses)

    def log_lines(self) -> str:
        lines = ["epoch,loss,val_f1"]
        lines += [f"{i + 1},{l!r},{f!r}" for i, (l, f) in enumerate(zip(self.losses, self.val_f1))]
        lines.append(f"# best_epoch={self.best_epoch} stop_reason={self.stop_reason}")
        return "\n".join(lines) + "\n"


def validation_split(labels, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Stratified (train_idx, val_idx); classes with one window stay in train."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    tr, va = [], []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        perm = idx[rng.permutation(idx.size)]
        n_val = int(math.floor(val_fraction * idx.size)) if idx.size >= 2 else 0
        if idx.size >= 2 and n_val == 0:
            n_val = 1
        va.append(perm[:n_val])
        tr.append(perm[n_val:])
    return np.sort(np.concatenate(tr)), np.sort(np.concatenate(va))


def _clip(grads: dict, max_norm: float) -> None:
    total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if total > max_norm:
        for k in grads:
            grads[k] = grads[k] * (max_norm / total)


def fit(samples: Sequence[GraphWindow], config: TrainConfig, model: HybridModel,
        val_samples: Sequence[GraphWindow] | None = None) -> tuple[HybridModel, TrainReport]:
    """Train ``model`` and return the best-validation-F1 copy plus the report.

    Without ``val_samples`` a stratified ``val_fraction`` of ``samples`` is
    held out. Validation runs in infer mode (dropout off, batchnorm running
    statistics).
    """
    if not samples:
        raise ValueError("empty training set")
    labels = np.array([s.label for s in samples])
    if np.unique(labels).size < 2:
        raise ValueError("training set holds a single class")
    if val_samples is None:
        tr_idx, va_idx = validation_split(labels, config.val_fraction, config.seed)
        train = [samples[i] for i in tr_idx]
        val = [samples[i] for i in va_idx]
    else:
        train, val = list(samples), list(val_samples)
    val_labels = np.array([s.label for s in val])
    C = model.config.classes

    rng = np.random.default_rng(config.seed)
    state = AdamState()
    report = TrainReport()
    best_f1, best_state, since = -math.inf, model.state_dict(), 0
    names = list(model.params)
    start = time.perf_counter()
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(train))
        total, seen = 0.0, 0
        for b0 in range(0, len(order), config.batch_size):
            chunk = [train[i] for i in order[b0:b0 + config.batch_size]]
            batch = collate(chunk)
            with ag.Tape() as tape:
                out = forward(batch, model, train=True, rng=rng)
                L = loss(out.probs, batch.labels, model, config.l2)
            tape.backward(L)
            if not math.isfinite(L.item()):
                raise ag.NumericError(f"non-finite loss at epoch {epoch}")
            grads = {n: model.params[n].grad for n in names}
            if config.clip_norm > 0:
                _clip(grads, config.clip_norm)
            adam_step(model.params, grads, state, config.lr, config.beta1, config.beta2, config.eps)
            total += L.item() * len(chunk)
            seen += len(chunk)
        report.losses.append(total / seen)
        pred = predict(model, val, config.batch_size).argmax(axis=1) if val else np.zeros(0, dtype=int)
        f1 = macro_f1(confusion(val_labels, pred, C)) if val else 0.0
        report.val_f1.append(f1)
        logger.info("epoch %d loss %.5f val_f1 %.4f", epoch, report.losses[-1], f1)
        if f1 > best_f1 + config.min_delta:
            best_f1, best_state, since = f1, model.state_dict(), 0
            report.best_epoch = epoch
        else:
            since += 1
        if since >= config.patience:
            report.stop_reason = "early"
            break
        if config.max_seconds and time.perf_counter() - start > config.max_seconds:
            report.stop_reason = "time_budget"
            break
    else:
        report.stop_reason = "max_epochs"
    report.wall_time = time.perf_counter() - start
    best = model.copy()
    best.load_state_dict(best_state)
    return best, report


# ------------------------------------------------------------------ checkpoints

def save_checkpoint(model: HybridModel, path, meta: dict | None = None,
                    extra: dict[str, np.ndarray] | None = None) -> None:
    """Write the versioned binary checkpoint.

    Layout (little endian): magic, u32 version, u32 header length, JSON header
    {"config", "meta"}, u32 entry count, then per entry: u16 name length,
    name, u8 ndim, ndim x u64 dims, row-major float64 data. Entries follow the
    model's canonical order, then batchnorm buffers, then ``extra``.
    """
    header = json.dumps({"config": model.config.to_dict(), "meta": meta or {}}, sort_keys=True).encode()
    entries = list(model.state_dict().items()) + list((extra or {}).items())
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(header)), header,
             struct.pack("<I", len(entries))]
    for name, arr in entries:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode()
        parts.append(struct.pack("<HB", len(raw), arr.ndim) + raw)
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path) -> tuple[dict, dict, dict]:
    """(config dict, meta dict, entries) from a checkpoint file."""
    data = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic tag)")
    version, hlen = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    header = json.loads(take(hlen))
    (count,) = struct.unpack("<I", take(4))
    entries = {}
    for _ in range(count):
        nlen, ndim = struct.unpack("<HB", take(3))
        name = take(nlen).decode()
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        entries[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).astype(float)
    if pos != len(data):
        raise CheckpointError(f"{path}: trailing bytes after last entry")
    return header["config"], header.get("meta", {}), entries


def load_checkpoint(path, expected: ModelConfig | None = None) -> tuple[HybridModel, dict, dict]:
    """Rebuild a model; returns (model, meta, extra entries)."""
    cfg_dict, meta, entries = read_checkpoint(path)
    cfg = ModelConfig.from_dict(cfg_dict)
    if expected is not None and expected.to_dict() != cfg.to_dict():
        diff = {k: (v, cfg_dict.get(k)) for k, v in expected.to_dict().items() if cfg_dict.get(k) != v}
        raise ConfigMismatchError(f"{path}: config mismatch (requested, stored): {diff}")
    model = HybridModel(cfg)
    own = set(model.state_dict())
    try:
        model.load_state_dict({k: v for k, v in entries.items() if k in own})
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    extra = {k: v for k, v in entries.items() if k not in own}
    return model, meta, extra


def train_config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
