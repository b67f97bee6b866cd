"""Minimal dense-tensor substrate with reverse-mode differentiation.

Tensors wrap float64 numpy arrays. Operations executed while a Tape is
active append a record (output, parents, vjp); Tape.backward replays the
records in reverse, which is a valid topological order because records are
appended at creation time. Reductions delegate to numpy's sequential
kernels, so forward evaluation is bit-deterministic for a fixed operand
order.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor", "Tape", "ShapeError", "tensor",
    "add", "sub", "neg", "mul", "div", "matmul", "scale", "shift",
    "concat", "split", "reshape", "tile_rows", "gather_rows",
    "abs_", "abs_diff", "relu", "leaky_relu", "elu", "sigmoid", "clamp",
    "segment_softmax", "segment_sum", "segment_mean", "segment_max",
    "softmax", "l2_norm", "row_l2_norm", "dot", "sum_", "mean_", "log1p_sum_exp",
    "grad_check",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "trainable", "name", "grad")

    def __init__(self, data, trainable: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.trainable = trainable
        self.name = name
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, trainable={self.trainable})"


def tensor(x, trainable: bool = False, name: str | None = None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, trainable=trainable, name=name)


_ACTIVE_TAPE: "Tape | None" = None


class Tape:
    """Ordered record of primitive ops; backward visits each record once."""

    def __init__(self):
        self.records = []  # (out, parents, vjp) in creation order

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a Tape is already active")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def backward(self, root: Tensor) -> dict:
        """Gradients of scalar `root` w.r.t. every trainable leaf, by name."""
        if root.data.ndim != 0 and root.data.size != 1:
            raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
        seen = set()
        for out, parents, _ in self.records:
            out.grad = None
            seen.add(id(out))
            for p in parents:
                if id(p) not in seen:
                    p.grad = None
                    seen.add(id(p))
        root.grad = np.ones_like(root.data)
        for out, parents, vjp in reversed(self.records):
            if out.grad is None:
                continue
            for p, g in zip(parents, vjp(out.grad)):
                if g is None:
                    continue
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
                p.grad = p.grad + g
        grads = {}
        for out, parents, _ in self.records:
            for p in parents:
                if p.trainable and p.grad is not None:
                    grads[p.name] = p.grad
        return grads


def _record(out: Tensor, parents, vjp):
    if _ACTIVE_TAPE is not None:
        _ACTIVE_TAPE.records.append((out, tuple(parents), vjp))
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum `g` down to `shape` along axes that were broadcast."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _check_finite(arr: np.ndarray, op: str):
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values produced by {op}")


# ---------------------------------------------------------------- arithmetic

def add(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    try:
        out = Tensor(a.data + b.data)
    except ValueError:
        raise ShapeError(f"add: incompatible shapes {a.shape} vs {b.shape}")
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    try:
        out = Tensor(a.data - b.data)
    except ValueError:
        raise ShapeError(f"sub: incompatible shapes {a.shape} vs {b.shape}")
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def neg(a) -> Tensor:
    a = tensor(a)
    return _record(Tensor(-a.data), (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    try:
        out = Tensor(a.data * b.data)
    except ValueError:
        raise ShapeError(f"mul: incompatible shapes {a.shape} vs {b.shape}")
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    out = Tensor(a.data / b.data)
    _check_finite(out.data, "div")
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * a.data / (b.data ** 2), b.shape)))


def scale(a, c: float) -> Tensor:
    a = tensor(a)
    return _record(Tensor(a.data * c), (a,), lambda g: (g * c,))


def shift(a, c: float) -> Tensor:
    a = tensor(a)
    return _record(Tensor(a.data + c), (a,), lambda g: (g,))


def matmul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} vs {b.shape}")
    out = Tensor(a.data @ b.data)
    return _record(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


# ------------------------------------------------------------- restructuring

def concat(parts, axis: int = 0) -> Tensor:
    parts = [tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
                     for i in range(len(parts)))

    return _record(out, parts, vjp)


def split(a, sizes, axis: int = 0) -> list[Tensor]:
    a = tensor(a)
    if sum(sizes) != a.data.shape[axis]:
        raise ShapeError(f"split: sizes {sizes} do not cover axis of shape {a.shape}")
    offsets = np.cumsum([0] + list(sizes))
    outs = []
    for i in range(len(sizes)):
        idx = np.arange(offsets[i], offsets[i + 1])
        piece = Tensor(np.take(a.data, idx, axis=axis))

        def vjp(g, idx=idx):
            full = np.zeros_like(a.data)
            sl = [slice(None)] * a.data.ndim
            sl[axis] = idx
            full[tuple(sl)] = g
            return (full,)

        outs.append(_record(piece, (a,), vjp))
    return outs


def reshape(a, shape) -> Tensor:
    a = tensor(a)
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.data.shape),))


def tile_rows(v, n: int) -> Tensor:
    """Stack 1-D vector `v` into an (n, d) matrix."""
    v = tensor(v)
    if v.data.ndim != 1:
        raise ShapeError(f"tile_rows expects 1-D input, got {v.shape}")
    out = Tensor(np.tile(v.data, (n, 1)))
    return _record(out, (v,), lambda g: (g.sum(axis=0),))


def gather_rows(a, idx) -> Tensor:
    a = tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor(a.data[idx])

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _record(out, (a,), vjp)


# ------------------------------------------------------------- nonlinearities

def abs_(a) -> Tensor:
    a = tensor(a)
    out = Tensor(np.abs(a.data))
    return _record(out, (a,), lambda g: (g * np.sign(a.data),))


def abs_diff(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    d = a.data - b.data
    out = Tensor(np.abs(d))
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g * np.sign(d), a.shape),
                              _unbroadcast(-g * np.sign(d), b.shape)))


def relu(a) -> Tensor:
    a = tensor(a)
    out = Tensor(np.maximum(a.data, 0.0))
    return _record(out, (a,), lambda g: (g * (a.data > 0),))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = tensor(a)
    out = Tensor(np.where(a.data > 0, a.data, slope * a.data))
    return _record(out, (a,), lambda g: (g * np.where(a.data > 0, 1.0, slope),))


def elu(a, alpha: float = 1.0) -> Tensor:
    a = tensor(a)
    ex = np.exp(np.minimum(a.data, 0.0))
    out = Tensor(np.where(a.data > 0, a.data, alpha * (ex - 1.0)))
    return _record(out, (a,), lambda g: (g * np.where(a.data > 0, 1.0, alpha * ex),))


def sigmoid(a) -> Tensor:
    a = tensor(a)
    s = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                 np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))
    out = Tensor(s)
    return _record(out, (a,), lambda g: (g * s * (1.0 - s),))


def clamp(a, lo: float, hi: float) -> Tensor:
    a = tensor(a)
    out = Tensor(np.clip(a.data, lo, hi))
    inside = (a.data > lo) & (a.data < hi)
    return _record(out, (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------- reductions

def segment_softmax(a, segments, n_segments: int) -> Tensor:
    """Row-segmented softmax (max-subtracted), per column for 2-D input.

    `segments` maps each row of `a` to a group; the softmax normalizes
    within each group. Every segment in [0, n_segments) must be
    populated; an empty segment means attention reached a node with no
    incident arcs, which is a bug upstream.
    """
    a = tensor(a)
    seg = np.asarray(segments, dtype=np.int64)
    if a.data.ndim not in (1, 2) or seg.shape != a.data.shape[:1]:
        raise ShapeError(f"segment_softmax: values {a.shape} vs segments {seg.shape}")
    counts = np.bincount(seg, minlength=n_segments)
    if np.any(counts == 0):
        empty = int(np.flatnonzero(counts == 0)[0])
        raise ValueError(f"segment_softmax: empty segment {empty}")
    group_shape = (n_segments,) + a.data.shape[1:]
    seg_max = np.full(group_shape, -np.inf)
    np.maximum.at(seg_max, seg, a.data)
    ex = np.exp(a.data - seg_max[seg])
    denom = np.zeros(group_shape)
    np.add.at(denom, seg, ex)
    s = ex / denom[seg]
    out = Tensor(s)

    def vjp(g):
        weighted = np.zeros(group_shape)
        np.add.at(weighted, seg, g * s)
        return (s * (g - weighted[seg]),)

    return _record(out, (a,), vjp)


def softmax(a) -> Tensor:
    """Softmax over a whole 1-D vector."""
    a = tensor(a)
    return segment_softmax(a, np.zeros(a.data.shape[0], dtype=np.int64), 1)


def _segment_matrix_check(a: Tensor, seg: np.ndarray):
    if a.data.ndim not in (1, 2) or seg.shape[0] != a.data.shape[0]:
        raise ShapeError(f"segment op: values {a.shape} vs segments {seg.shape}")


def segment_sum(a, segments, n_segments: int) -> Tensor:
    a = tensor(a)
    seg = np.asarray(segments, dtype=np.int64)
    _segment_matrix_check(a, seg)
    shape = (n_segments,) + a.data.shape[1:]
    out_data = np.zeros(shape)
    np.add.at(out_data, seg, a.data)
    out = Tensor(out_data)
    return _record(out, (a,), lambda g: (g[seg],))


def segment_mean(a, segments, n_segments: int) -> Tensor:
    """Per-segment mean; empty segments yield 0 (callers must not consume them)."""
    a = tensor(a)
    seg = np.asarray(segments, dtype=np.int64)
    _segment_matrix_check(a, seg)
    counts = np.bincount(seg, minlength=n_segments).astype(np.float64)
    safe = np.maximum(counts, 1.0)
    shape = (n_segments,) + a.data.shape[1:]
    total = np.zeros(shape)
    np.add.at(total, seg, a.data)
    denom = safe if a.data.ndim == 1 else safe[:, None]
    out = Tensor(total / denom)

    def vjp(g):
        w = g / denom
        return (w[seg],)

    return _record(out, (a,), vjp)


def segment_max(a, segments, n_segments: int) -> Tensor:
    """Per-segment max of a 1-D vector; gradient flows to the first argmax."""
    a = tensor(a)
    seg = np.asarray(segments, dtype=np.int64)
    if a.data.ndim != 1:
        raise ShapeError("segment_max expects 1-D input")
    counts = np.bincount(seg, minlength=n_segments)
    if np.any(counts == 0):
        raise ValueError("segment_max: empty segment")
    out_data = np.full(n_segments, -np.inf)
    np.maximum.at(out_data, seg, a.data)
    # first row achieving the max in each segment, scanning in index order
    winner = np.full(n_segments, -1, dtype=np.int64)
    for i in range(a.data.shape[0]):
        s = seg[i]
        if winner[s] < 0 and a.data[i] == out_data[s]:
            winner[s] = i
    out = Tensor(out_data)

    def vjp(g):
        full = np.zeros_like(a.data)
        full[winner] += g
        return (full,)

    return _record(out, (a,), vjp)


def sum_(a) -> Tensor:
    a = tensor(a)
    out = Tensor(a.data.sum())
    return _record(out, (a,), lambda g: (np.full_like(a.data, float(g)),))


def mean_(a) -> Tensor:
    a = tensor(a)
    n = a.data.size
    out = Tensor(a.data.mean())
    return _record(out, (a,), lambda g: (np.full_like(a.data, float(g) / n),))


def l2_norm(a) -> Tensor:
    a = tensor(a)
    nrm = float(np.sqrt(np.sum(a.data ** 2)))
    out = Tensor(nrm)

    def vjp(g):
        if nrm == 0.0:
            return (np.zeros_like(a.data),)
        return (float(g) * a.data / nrm,)

    return _record(out, (a,), vjp)


def row_l2_norm(a) -> Tensor:
    """Per-row Euclidean norm of a 2-D tensor."""
    a = tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"row_l2_norm expects 2-D input, got {a.shape}")
    nrm = np.sqrt(np.sum(a.data ** 2, axis=1))
    out = Tensor(nrm)

    def vjp(g):
        safe = np.where(nrm > 0, nrm, 1.0)
        return (g[:, None] * a.data / safe[:, None],)

    return _record(out, (a,), vjp)


def dot(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    if a.data.shape != b.data.shape or a.data.ndim != 1:
        raise ShapeError(f"dot: incompatible shapes {a.shape} vs {b.shape}")
    out = Tensor(np.dot(a.data, b.data))
    return _record(out, (a, b), lambda g: (float(g) * b.data, float(g) * a.data))


def log1p_sum_exp(a) -> Tensor:
    """Stable scalar log(1 + sum_i exp(a_i)); empty input yields 0."""
    a = tensor(a)
    if a.data.size == 0:
        return _record(Tensor(0.0), (a,), lambda g: (np.zeros_like(a.data),))
    m = max(0.0, float(a.data.max()))
    val = m + np.log(np.exp(-m) + np.sum(np.exp(a.data - m)))
    out = Tensor(val)
    return _record(out, (a,), lambda g: (float(g) * np.exp(a.data - val),))


# --------------------------------------------------------------- grad check

def grad_check(f, params: dict, h: float = 1e-5, n_samples: int = 20,
               rng=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` is a deterministic scalar function of `params` (name -> Tensor with
    trainable=True). Coordinates are sampled per tensor; the relative error
    denominator is max(1, |numeric|).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    rng = rng or np.random.default_rng(0)
    with Tape() as tape:
        loss = f(params)
    grads = tape.backward(loss)
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        coords = rng.choice(n, size=min(n_samples, n), replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            up = f(params).item()
            flat[c] = orig - h
            down = f(params).item()
            flat[c] = orig
            numeric = (up - down) / (2 * h)
            if not np.isfinite(numeric):
                raise FloatingPointError(f"non-finite finite-difference at {name}[{c}]")
            analytic = grads.get(name)
            aval = 0.0 if analytic is None else analytic.reshape(-1)[c]
            err = abs(aval - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
