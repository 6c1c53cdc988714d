"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

Every differentiable operation records itself on the current (thread-local)
Tape; ``backward`` replays the reachable records in reverse execution order.
Only the broadcasting the rest of the package needs is supported.
"""

from __future__ import annotations

import threading
import zlib
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, TargetError

Array = np.ndarray


class Tape:
    """Ordered record of differentiable operations, in execution order.

    Execution order is a topological order by construction: an op's inputs
    are always recorded before the op itself.
    """

    def __init__(self) -> None:
        self.records: list["Tensor"] = []

    def reset(self) -> None:
        self.records.clear()

    def __enter__(self) -> "Tape":
        _TLS.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TLS.stack.pop()


class _TapeStack(threading.local):
    def __init__(self) -> None:
        self.stack = [Tape()]


_TLS = _TapeStack()


def current_tape() -> Tape:
    return _TLS.stack[-1]


class Tensor:
    """Row-major float64 n-d array with an optional accumulated gradient."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self._parents: tuple["Tensor", ...] = ()
        self._backward: Callable[[], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: Array) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __sub__(self, other):
        return add(self, -_as_tensor(other))

    def __rsub__(self, other):
        return add(_as_tensor(other), -self)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul(self, Tensor(1.0 / other))
        raise TypeError("tensor division only supports python scalars")

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, parents: Sequence[Tensor], backward_fn: Callable[[], None]) -> Tensor:
    """Attach a backward rule and push the op onto the current tape."""
    if any(p.requires_grad or p._parents for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        current_tape().records.append(out)
    return out


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum gradient over axes that were broadcast in the forward pass."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, extent in enumerate(shape):
        if extent == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every tensor reachable from a scalar loss.

    Gradients accumulate across calls until explicitly cleared.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar, got shape {loss.shape}")

    reachable: set[int] = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in reachable:
            continue
        reachable.add(id(t))
        stack.extend(t._parents)

    loss.accumulate_grad(np.ones_like(loss.data))
    for rec in reversed(current_tape().records):
        if id(rec) in reachable and rec._backward is not None and rec.grad is not None:
            rec._backward()


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = Tensor(a.data + b.data)
    except ValueError:
        raise DimensionError(f"add: incompatible shapes {a.shape} and {b.shape}") from None

    def back() -> None:
        g = out.grad
        if a.requires_grad or a._parents:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad or b._parents:
            b.accumulate_grad(_unbroadcast(g, b.shape))

    return _record(out, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = Tensor(a.data * b.data)
    except ValueError:
        raise DimensionError(f"mul: incompatible shapes {a.shape} and {b.shape}") from None

    def back() -> None:
        g = out.grad
        if a.requires_grad or a._parents:
            a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad or b._parents:
            b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    return _record(out, (a, b), back)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))

    def back() -> None:
        # subgradient at 0 is 0
        x.accumulate_grad(out.grad * (x.data > 0.0))

    return _record(out, (x,), back)


def softplus(x: Tensor) -> Tensor:
    d = x.data
    out = Tensor(np.maximum(d, 0.0) + np.log1p(np.exp(-np.abs(d))))

    def back() -> None:
        sig = np.empty_like(d)
        pos = d >= 0
        sig[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
        ez = np.exp(d[~pos])
        sig[~pos] = ez / (1.0 + ez)
        x.accumulate_grad(out.grad * sig)

    return _record(out, (x,), back)


def elementwise(kind: str, *operands: Tensor) -> Tensor:
    """Dispatch by name; mirrors the pointwise op vocabulary."""
    table = {"add": add, "mul": mul, "relu": relu, "softplus": softplus}
    if kind not in table:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return table[kind](*operands)


# ---------------------------------------------------------------------------
# matmul and shape ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 1 or b.data.ndim < 1 or a.shape[-1] != b.shape[-2 if b.data.ndim > 1 else 0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def back() -> None:
        g = out.grad
        if a.requires_grad or a._parents:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a.accumulate_grad(_unbroadcast(ga, a.shape))
        if b.requires_grad or b._parents:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b.accumulate_grad(_unbroadcast(gb, b.shape))

    return _record(out, (a, b), back)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = Tensor(x.data.reshape(shape))

    def back() -> None:
        x.accumulate_grad(out.grad.reshape(x.shape))

    return _record(out, (x,), back)


def transpose_last2(x: Tensor) -> Tensor:
    out = Tensor(np.swapaxes(x.data, -1, -2))

    def back() -> None:
        x.accumulate_grad(np.swapaxes(out.grad, -1, -2))

    return _record(out, (x,), back)


def slice_view(x: Tensor, key: tuple) -> Tensor:
    """Differentiable (possibly strided) slice of x."""
    out = Tensor(x.data[key].copy())

    def back() -> None:
        g = np.zeros_like(x.data)
        g[key] += out.grad
        x.accumulate_grad(g)

    return _record(out, (x,), back)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    widths = [p.shape[axis] for p in parts]

    def back() -> None:
        offset = 0
        for p, w in zip(parts, widths):
            sl = [slice(None)] * out.grad.ndim
            sl[axis] = slice(offset, offset + w)
            if p.requires_grad or p._parents:
                p.accumulate_grad(out.grad[tuple(sl)])
            offset += w

    return _record(out, tuple(parts), back)


def reciprocal(x: Tensor) -> Tensor:
    out = Tensor(1.0 / x.data)

    def back() -> None:
        x.accumulate_grad(-out.grad * out.data * out.data)

    return _record(out, (x,), back)


# ---------------------------------------------------------------------------
# gather / scatter


def gather_rows(table: Tensor, ids: Array) -> Tensor:
    """Index rows of a 2-d table with an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    out = Tensor(table.data[ids])

    def back() -> None:
        g = np.zeros_like(table.data)
        np.add.at(g, ids.reshape(-1), out.grad.reshape(-1, table.shape[-1]))
        table.accumulate_grad(g)

    return _record(out, (table,), back)


def take_per_row(x: Tensor, idx: Array) -> Tensor:
    """Per-row column gather: out[i, k] = x[i, idx[i, k]]."""
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(x.shape[0])[:, None]
    out = Tensor(x.data[rows, idx])

    def back() -> None:
        g = np.zeros_like(x.data)
        np.add.at(g, (rows, idx), out.grad)
        x.accumulate_grad(g)

    return _record(out, (x,), back)


def gather_scalars(x: Tensor, rows: Array, cols: Array) -> Tensor:
    """Pick entries x[rows[j], cols[j]] into a (n, 1) column."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    out = Tensor(x.data[rows, cols][:, None])

    def back() -> None:
        g = np.zeros_like(x.data)
        np.add.at(g, (rows, cols), out.grad[:, 0])
        x.accumulate_grad(g)

    return _record(out, (x,), back)


def scatter_rows(rows: Tensor, ids: Array, total: int) -> Tensor:
    """Place rows[j] at output row ids[j] of a (total, width) zero tensor."""
    ids = np.asarray(ids, dtype=np.int64)
    data = np.zeros((total, rows.shape[-1]))
    np.add.at(data, ids, rows.data)
    out = Tensor(data)

    def back() -> None:
        rows.accumulate_grad(out.grad[ids])

    return _record(out, (rows,), back)


# ---------------------------------------------------------------------------
# softmax, reductions, losses


def softmax(x: Tensor) -> Tensor:
    """Numerically stabilized softmax over the last axis."""
    if x.shape[-1] == 0:
        raise DimensionError("softmax: empty last axis")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def back() -> None:
        g = out.grad
        dot = (g * y).sum(axis=-1, keepdims=True)
        x.accumulate_grad(y * (g - dot))

    return _record(out, (x,), back)


def tsum(x: Tensor, axis: int | None = None) -> Tensor:
    out = Tensor(x.data.sum(axis=axis, keepdims=axis is not None))

    def back() -> None:
        x.accumulate_grad(np.broadcast_to(out.grad, x.shape).copy())

    return _record(out, (x,), back)


def tmean(x: Tensor) -> Tensor:
    out = Tensor(x.data.mean())

    def back() -> None:
        x.accumulate_grad(np.full(x.shape, out.grad / x.size))

    return _record(out, (x,), back)


def mse(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise DimensionError(f"mse: incompatible shapes {pred.shape} and {target.shape}")
    diff = pred.data - target.data
    out = Tensor(np.mean(diff * diff))

    def back() -> None:
        g = out.grad * 2.0 * diff / pred.size
        if pred.requires_grad or pred._parents:
            pred.accumulate_grad(g)
        if target.requires_grad or target._parents:
            target.accumulate_grad(-g)

    return _record(out, (pred, target), back)


def softmax_cross_entropy(logits: Tensor, targets: Array) -> Tensor:
    """Mean cross-entropy between row softmaxes and integer class targets."""
    targets = np.asarray(targets, dtype=np.int64)
    n, c = logits.shape
    if targets.shape != (n,):
        raise DimensionError(f"cross_entropy: targets shape {targets.shape} for logits {logits.shape}")
    if targets.min() < 0 or targets.max() >= c:
        raise TargetError(f"cross_entropy: target out of range [0, {c})")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1))
    out = Tensor(np.mean(logz - shifted[np.arange(n), targets]))

    def back() -> None:
        p = np.exp(shifted)
        p /= p.sum(axis=-1, keepdims=True)
        p[np.arange(n), targets] -= 1.0
        logits.accumulate_grad(out.grad * p / n)

    return _record(out, (logits,), back)


def reductions_and_losses(kind: str, *args) -> Tensor:
    table = {"sum": tsum, "mean": tmean, "mse": mse, "softmax_cross_entropy": softmax_cross_entropy}
    if kind not in table:
        raise ValueError(f"unknown reduction kind {kind!r}")
    return table[kind](*args)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis with learned gain and bias."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gain.data + bias.data)

    def back() -> None:
        g = out.grad
        if gain.requires_grad or gain._parents:
            gain.accumulate_grad(_unbroadcast(g * xhat, gain.shape))
        if bias.requires_grad or bias._parents:
            bias.accumulate_grad(_unbroadcast(g, bias.shape))
        if x.requires_grad or x._parents:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            x.accumulate_grad(inv * (dxhat - m1 - xhat * m2))

    return _record(out, (x, gain, bias), back)


# ---------------------------------------------------------------------------
# randomness


class Rng:
    """Deterministic random stream: same seed + same call sequence, same values."""

    def __init__(self, seed: int) -> None:
        self.seed = int(seed)
        self.counter = 0
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def gaussian(self, *shape: int, std: float = 1.0) -> Array:
        self.counter += 1
        return self._gen.standard_normal(shape) * std

    def uniform(self, *shape: int, low: float = 0.0, high: float = 1.0) -> Array:
        self.counter += 1
        return self._gen.uniform(low, high, shape)

    def integers(self, low: int, high: int, *shape: int) -> Array:
        self.counter += 1
        return self._gen.integers(low, high, shape)

    def spawn(self, key: str | int) -> "Rng":
        """Child stream whose seed depends only on (self.seed, key)."""
        k = zlib.crc32(key.encode()) if isinstance(key, str) else int(key)
        mixed = np.random.SeedSequence([self.seed, k]).generate_state(1, np.uint64)[0]
        return Rng(int(mixed))


# ---------------------------------------------------------------------------
# gradient oracle


def finite_diff_grad(f: Callable[[Tensor], float | Tensor], x: Tensor, step: float = 1e-5) -> Array:
    """Central-difference gradient estimate of a scalar-valued f at x."""
    if step <= 0:
        raise ValueError("step must be positive")

    def evaluate(arr: Array) -> float:
        with Tape():
            r = f(Tensor(arr))
        return r.item() if isinstance(r, Tensor) else float(r)

    flat = x.data.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] += step
        hi = evaluate(bumped.reshape(x.shape))
        bumped[i] -= 2.0 * step
        lo = evaluate(bumped.reshape(x.shape))
        grad[i] = (hi - lo) / (2.0 * step)
    return grad.reshape(x.shape)
