"""Tape-based reverse-mode automatic differentiation on top of numpy.

Values are always float64. Operations executed while a :class:`Tape` is
active (``with Tape() as tape:``) and that touch a tensor with
``requires_grad`` are recorded in execution order, so the recorded list is
already topologically sorted and ``tape.backward(loss)`` just walks it in
reverse. Outside a tape, ops run eagerly and record nothing, which is what
inference uses.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NumericError",
    "TapeError",
    "tensor",
    "matmul",
    "spmm",
    "add",
    "sub",
    "mul",
    "scale",
    "sigmoid",
    "tanh",
    "relu",
    "log",
    "softmax_rows",
    "dropout",
    "batchnorm",
    "BatchNormState",
    "sum_all",
    "mean",
    "reshape",
    "transpose",
    "concat",
    "stack",
    "unstack",
    "split",
    "gather_rows",
    "lstm_sequence",
    "pick",
    "square_sum",
    "backward",
    "numeric_grad",
    "relative_error",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NumericError(ArithmeticError):
    """A value or gradient became NaN or infinite."""


class TapeError(RuntimeError):
    """Misuse of the tape: backward twice, loss not recorded, and so on."""


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    __slots__ = ("values", "requires_grad", "grad", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(values, dtype=np.float64)
        self.values = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.values.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.values

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar keeps model code close to the math.
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)


def tensor(values, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(values, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Op:
    __slots__ = ("name", "inputs", "outputs", "backward_fn")

    def __init__(self, name, inputs, outputs, backward_fn):
        self.name = name
        self.inputs = inputs
        self.outputs = outputs
        self.backward_fn = backward_fn


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of executed primitive ops.

    A tape supports exactly one backward pass; call :meth:`reset` to reuse it.
    """

    def __init__(self):
        self.ops: list[_Op] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def reset(self) -> None:
        self.ops = []
        self.consumed = False

    def record(self, name: str, inputs: Sequence[Tensor], outputs: Sequence[Tensor],
               backward_fn: Callable) -> None:
        self.ops.append(_Op(name, tuple(inputs), tuple(outputs), backward_fn))

    def dump(self) -> str:
        """Text listing of recorded ops and their shapes, for debugging."""
        lines = []
        for i, op in enumerate(self.ops):
            ins = ", ".join(str(t.shape) for t in op.inputs)
            outs = ", ".join(str(t.shape) for t in op.outputs)
            lines.append(f"{i:5d} {op.name:<12s} ({ins}) -> {outs}")
        return "\n".join(lines)

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise TapeError("tape already consumed by a backward pass; reset it first")
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self.ops:
            raise TapeError("backward without a recorded forward pass")
        start = None
        for i in range(len(self.ops) - 1, -1, -1):
            if any(o is loss for o in self.ops[i].outputs):
                start = i
                break
        if start is None:
            raise TapeError("loss was not produced on this tape")
        self.consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
        produced = set()
        leaves: dict[int, Tensor] = {}
        for op in self.ops[: start + 1]:
            for o in op.outputs:
                produced.add(id(o))
            for t in op.inputs:
                if t.requires_grad and id(t) not in produced:
                    leaves[id(t)] = t

        for op in reversed(self.ops[: start + 1]):
            gouts = [grads.pop(id(o), None) for o in op.outputs]
            if all(g is None for g in gouts):
                continue
            if len(gouts) == 1:
                gins = op.backward_fn(gouts[0])
            else:
                gouts = [np.zeros_like(o.values) if g is None else g
                         for g, o in zip(gouts, op.outputs)]
                gins = op.backward_fn(gouts)
            for t, g in zip(op.inputs, gins):
                if g is None or not t.requires_grad:
                    continue
                prev = grads.get(id(t))
                grads[id(t)] = g if prev is None else prev + g

        for key, t in leaves.items():
            g = grads.get(key)
            if g is None:
                g = np.zeros_like(t.values)
            elif not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient for {t!r}")
            t.grad = g


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate ``.grad`` on every leaf reachable on ``tape`` (default: active)."""
    if tape is None:
        if not _ACTIVE:
            raise TapeError("backward without a recorded forward pass")
        tape = _ACTIVE[-1]
    tape.backward(loss)


def _emit(name: str, inputs: Sequence[Tensor], value: np.ndarray, backward_fn) -> Tensor:
    needs = bool(_ACTIVE) and any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=needs)
    if needs:
        _ACTIVE[-1].record(name, inputs, (out,), backward_fn)
    return out


def _emit_many(name: str, inputs: Sequence[Tensor], values: Sequence[np.ndarray],
               backward_fn) -> list[Tensor]:
    needs = bool(_ACTIVE) and any(t.requires_grad for t in inputs)
    outs = [Tensor(v, requires_grad=needs) for v in values]
    if needs:
        _ACTIVE[-1].record(name, inputs, outs, backward_fn)
    return outs


def _check_finite(name: str, value: np.ndarray) -> np.ndarray:
    # nan/inf propagate into the sum, which avoids a full boolean temporary
    if not np.isfinite(value.sum()):
        raise NumericError(f"{name} produced non-finite values")
    return value


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading axes of ``a`` (and ``b``) are batch axes."""
    av, bv = a.values, b.values
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {av.shape} x {bv.shape}")
    flat = bv.ndim == 2 and av.ndim > 2
    if flat:
        # one large GEMM instead of a loop over the batch axes
        out = (av.reshape(-1, av.shape[-1]) @ bv).reshape(av.shape[:-1] + (bv.shape[1],))
    else:
        out = np.matmul(av, bv)
    _check_finite("matmul", out)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            if flat:
                ga = (g.reshape(-1, g.shape[-1]) @ bv.T).reshape(av.shape)
            else:
                ga = _unbroadcast(np.matmul(g, np.swapaxes(bv, -1, -2)), av.shape)
        if b.requires_grad:
            if bv.ndim == 2 and av.ndim > 2:
                gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(av, -1, -2), g), bv.shape)
        return ga, gb

    return _emit("matmul", (a, b), out, bw)


def spmm(adj, x: Tensor) -> Tensor:
    """Constant (scipy sparse or dense) matrix times a tensor; no grad to ``adj``."""
    if adj.shape[1] != x.shape[0]:
        raise ShapeError(f"spmm shape mismatch: {adj.shape} x {x.shape}")
    out = np.asarray(adj @ x.values)
    adj_t = adj.T

    def bw(g):
        return (np.asarray(adj_t @ g),)

    return _emit("spmm", (x,), out, bw)


# ------------------------------------------------------------------- elementwise

def _binary_shapes(name, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name} shape mismatch: {a.shape} vs {b.shape}") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes("add", a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _emit("add", (a, b), a.values + b.values, bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes("sub", a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _emit("sub", (a, b), a.values - b.values, bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes("mul", a, b)
    av, bv = a.values, b.values

    def bw(g):
        ga = _unbroadcast(g * bv, av.shape) if a.requires_grad else None
        gb = _unbroadcast(g * av, bv.shape) if b.requires_grad else None
        return ga, gb

    return _emit("mul", (a, b), _check_finite("mul", av * bv), bw)


def scale(a: Tensor, c: float) -> Tensor:
    return _emit("scale", (a,), a.values * c, lambda g: (g * c,))


def sigmoid(a: Tensor) -> Tensor:
    # tanh form never overflows and gives exactly 0.5 at 0
    s = 0.5 * (1.0 + np.tanh(0.5 * a.values))
    return _emit("sigmoid", (a,), s, lambda g: (g * s * (1.0 - s),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.values)
    return _emit("tanh", (a,), t, lambda g: (g * (1.0 - t * t),))


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0
    return _emit("relu", (a,), np.where(mask, a.values, 0.0), lambda g: (g * mask,))


def log(a: Tensor, floor: float = 1e-300) -> Tensor:
    v = np.maximum(a.values, floor)
    return _emit("log", (a,), np.log(v), lambda g: (g / v,))


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    v = x.values
    if not np.isfinite(v).all():
        raise NumericError("softmax_rows needs finite input")
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", (x,), s, bw)


def dropout(x: Tensor, rate: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout. Infer mode (or rate 0) returns ``x`` itself."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _emit("dropout", (x,), x.values * keep, lambda g: (g * keep,))


class BatchNormState:
    """Running mean/variance buffers for one batchnorm layer."""

    def __init__(self, dim: int, momentum: float = 0.9, eps: float = 1e-5):
        self.mean = np.zeros(dim)
        self.var = np.ones(dim)
        self.momentum = momentum
        self.eps = eps


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, train: bool, state: BatchNormState) -> Tensor:
    """Per-feature normalization over the rows of a 2-D tensor."""
    v = x.values
    if v.ndim != 2 or gamma.shape != (v.shape[1],) or beta.shape != (v.shape[1],):
        raise ShapeError(f"batchnorm shapes: x {v.shape}, gamma {gamma.shape}, beta {beta.shape}")
    eps = state.eps
    gv = gamma.values
    if not train:
        inv = 1.0 / np.sqrt(state.var + eps)
        xhat = (v - state.mean) * inv
        out = xhat * gv + beta.values

        def bw_infer(g):
            return g * gv * inv, (g * xhat).sum(axis=0), g.sum(axis=0)

        return _emit("batchnorm", (x, gamma, beta), out, bw_infer)

    n = v.shape[0]
    if n < 2:
        raise ShapeError("batchnorm in train mode needs a batch of at least 2 rows")
    mu = v.mean(axis=0)
    xc = v - mu
    var = (xc * xc).mean(axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gv + beta.values
    m = state.momentum
    state.mean = m * state.mean + (1.0 - m) * mu
    state.var = m * state.var + (1.0 - m) * var * (n / (n - 1))

    def bw(g):
        gxhat = g * gv
        gx = inv * (gxhat - gxhat.mean(axis=0) - xhat * (gxhat * xhat).mean(axis=0))
        return gx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _emit("batchnorm", (x, gamma, beta), out, bw)


def lstm_sequence(xproj: Tensor, Wh: Tensor, reverse: bool = False) -> Tensor:
    """Run one LSTM direction over a whole time-major sequence.

    ``xproj`` is (T, B, 4H): input projections plus bias for every step, in
    [i | f | o | c~] order. ``Wh`` is (H, 4H). States start at zero. Returns
    the (T, B, H) hidden states indexed by time, whatever the direction.
    The backward pass is truncation-free BPTT in a single tape entry.
    """
    x = xproj.values
    W = Wh.values
    if x.ndim != 3 or W.ndim != 2 or W.shape[1] != x.shape[2] or 4 * W.shape[0] != W.shape[1]:
        raise ShapeError(f"lstm_sequence shapes: xproj {x.shape}, Wh {W.shape}")
    T, B, G = x.shape
    H = G // 4
    order = list(range(T - 1, -1, -1)) if reverse else list(range(T))
    acts = np.empty_like(x)
    cs = np.empty((T, B, H))
    tcs = np.empty((T, B, H))
    hs = np.empty((T, B, H))
    h = c = None
    for t in order:
        pre = x[t] if h is None else x[t] + h @ W
        a = acts[t]
        a[:, :3 * H] = pre[:, :3 * H]
        a[:, :3 * H] *= 0.5
        np.tanh(a[:, :3 * H], out=a[:, :3 * H])
        a[:, :3 * H] += 1.0
        a[:, :3 * H] *= 0.5
        np.tanh(pre[:, 3 * H:], out=a[:, 3 * H:])
        c_new = a[:, :H] * a[:, 3 * H:]
        if c is not None:
            c_new += a[:, H:2 * H] * c
        cs[t] = c_new
        np.tanh(c_new, out=tcs[t])
        np.multiply(a[:, 2 * H:3 * H], tcs[t], out=hs[t])
        h, c = hs[t], cs[t]
    _check_finite("lstm_sequence", hs)

    def bw(g):
        dpre = np.empty_like(x)
        dh_next = None
        dc_next = None
        for k in range(T - 1, -1, -1):
            t = order[k]
            a = acts[t]
            i, f, o, gg = a[:, :H], a[:, H:2 * H], a[:, 2 * H:3 * H], a[:, 3 * H:]
            dh = g[t] if dh_next is None else g[t] + dh_next
            tc = tcs[t]
            dc = dh * o * (1.0 - tc * tc)
            if dc_next is not None:
                dc += dc_next
            d = dpre[t]
            d[:, :H] = dc * gg * i * (1.0 - i)
            if k > 0:
                d[:, H:2 * H] = dc * cs[order[k - 1]] * f * (1.0 - f)
            else:
                d[:, H:2 * H] = 0.0
            d[:, 2 * H:3 * H] = dh * tc * o * (1.0 - o)
            d[:, 3 * H:] = dc * i * (1.0 - gg * gg)
            dc_next = dc * f
            dh_next = d @ W.T
        # h_prev for the step at processing position k is the state at k-1
        prev = np.zeros_like(hs)
        idx = np.array(order)
        prev[idx[1:]] = hs[idx[:-1]]
        dW = prev.reshape(-1, H).T @ dpre.reshape(-1, G)
        return dpre, dW

    return _emit("lstm_sequence", (xproj, Wh), hs, bw)


# ------------------------------------------------------------------- reductions

def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit("sum", (x,), np.asarray(x.values.sum()), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    shape = x.shape
    if axis is None:
        n = x.size
        return _emit("mean", (x,), np.asarray(x.values.mean()),
                     lambda g: (np.full(shape, float(g) / n),))
    n = shape[axis]

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),)

    return _emit("mean", (x,), x.values.mean(axis=axis), bw)


def square_sum(x: Tensor) -> Tensor:
    v = x.values
    return _emit("sqsum", (x,), np.asarray(np.vdot(v, v)), lambda g: (2.0 * g * v,))


def pick(x: Tensor, index: np.ndarray) -> Tensor:
    """``out[i] = x[i, index[i]]`` for a 2-D ``x``."""
    rows = np.arange(x.shape[0])
    index = np.asarray(index)
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        out[rows, index] = g
        return (out,)

    return _emit("pick", (x,), x.values[rows, index], bw)


# ------------------------------------------------------------------ shape plumbing

def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return _emit("reshape", (x,), x.values.reshape(shape), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _emit("transpose", (x,), np.transpose(x.values, axes), lambda g: (np.transpose(g, inv),))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    sizes = [t.shape[axis] for t in xs]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _emit("concat", tuple(xs), np.concatenate([t.values for t in xs], axis=axis), bw)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    n = len(xs)

    lead = (slice(None),) * (axis % (xs[0].values.ndim + 1))

    def bw(g):
        return tuple(g[lead + (i,)] for i in range(n))

    return _emit("stack", tuple(xs), np.stack([t.values for t in xs], axis=axis), bw)


def unstack(x: Tensor, axis: int = 0) -> list[Tensor]:
    """Split along ``axis`` into views; one tape entry for all pieces."""
    v = x.values
    lead = (slice(None),) * (axis % v.ndim)
    pieces = [v[lead + (i,)] for i in range(v.shape[axis])]

    def bw(gs):
        return (np.stack(gs, axis=axis),)

    return _emit_many("unstack", (x,), pieces, bw)


def split(x: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    cuts = np.cumsum(sizes)[:-1]
    pieces = np.split(x.values, cuts, axis=axis)

    def bw(gs):
        return (np.concatenate(gs, axis=axis),)

    return _emit_many("split", (x,), pieces, bw)


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Rows of a 2-D tensor by integer index; repeated indices accumulate grads."""
    index = np.asarray(index, dtype=np.int64)
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _emit("gather", (x,), x.values[index], bw)


# --------------------------------------------------------------- self-verification

def numeric_grad(f: Callable[[], float], param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` with respect to ``param``."""
    grad = np.zeros_like(param.values)
    flat = param.values.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """max |a-b| / max(|a|, |b|, floor), elementwise then maxed."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def is_finite(x: Tensor) -> bool:
    return bool(np.isfinite(x.values).all())

