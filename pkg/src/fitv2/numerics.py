"""Dense tensors with a define-by-run reverse-mode tape.

The arrays themselves are numpy buffers; this module only adds the gradient
bookkeeping the model needs. Every op records its parents and a closure that
maps the output gradient to parent gradients. ``Tensor.backward`` builds a
:class:`Tape` (topologically ordered node list) from the loss and walks it in
reverse, visiting each node exactly once.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_grad_enabled = True


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class NumericError(FloatingPointError):
    """Raised on non-finite values where finite ones are required."""


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording anything on the tape."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    # -- construction -----------------------------------------------------
    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        out = cls(data, dtype=data.dtype)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    # -- properties -------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=dtype)


def _lift(a, b) -> tuple[Tensor, Tensor]:
    """Wrap plain numbers/arrays so they share the other operand's dtype."""
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype), dtype=b.dtype)
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype), dtype=a.dtype)
    return a, b


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------


class Tape:
    """Topologically ordered record of the nodes reachable from an output."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not on the tape (no input requires grad)")
    tape = Tape.from_output(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg
        node._parents = ()
        node._backward = None
        node.requires_grad = False


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a, b)
    _check_broadcast(a, b, "add")
    out = a.data + b.data

    def bw(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return Tensor._make(out, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _lift(a, b)
    _check_broadcast(a, b, "sub")
    out = a.data - b.data

    def bw(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return Tensor._make(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _lift(a, b)
    _check_broadcast(a, b, "mul")
    out = a.data * b.data

    def bw(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return Tensor._make(out, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return Tensor._make(a.data * c, (a,), lambda g: (g * c,))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return Tensor._make(s, (a,), lambda g: (g * s * (1 - s),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    half = x.dtype.type(0.5)
    return half * (1 + np.tanh(half * x))


def silu(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    out = a.data * s

    def bw(g):
        return (g * (s * (1 + a.data * (1 - s))),)

    return Tensor._make(out, (a,), bw)


def square(a: Tensor) -> Tensor:
    return Tensor._make(a.data * a.data, (a,), lambda g: (2 * g * a.data,))


# ---------------------------------------------------------------------------
# reductions and shape
# ---------------------------------------------------------------------------


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._make(out, (a,), bw)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def mean_lastdim(a: Tensor) -> Tensor:
    return mean(a, axis=-1)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return Tensor._make(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return Tensor._make(out, (a,), lambda g: (g.transpose(inv),))


def concat_lastdim(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise DimensionError(
                f"concat_lastdim: leading shapes differ: {[q.shape for q in parts]}"
            )
    sizes = [p.shape[-1] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=-1)
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=-1))

    return Tensor._make(out, parts, bw)


def split_lastdim(a: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    if sum(sizes) != a.shape[-1]:
        raise DimensionError(f"split_lastdim: sizes {list(sizes)} do not sum to {a.shape[-1]}")
    outs = []
    start = 0
    for n in sizes:
        lo, hi = start, start + n

        def bw(g, lo=lo, hi=hi):
            full = np.zeros_like(a.data)
            full[..., lo:hi] = g
            return (full,)

        outs.append(Tensor._make(a.data[..., lo:hi].copy(), (a,), bw))
        start = hi
    return outs


def take_rows(table: Tensor, index) -> Tensor:
    """Row lookup ``table[index]`` with scatter-add gradient."""
    index = np.asarray(index, dtype=np.int64)
    out = table.data[index]

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._make(out, (table,), bw)


# ---------------------------------------------------------------------------
# contractions
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _lift(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ for shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch extents of {a.shape} and {b.shape} do not broadcast") from None
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return Tensor._make(out, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis; weight is (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data
    if bias is not None:
        out = out + bias.data
    out = out.reshape(*lead, weight.shape[1])

    def bw(g):
        g2 = g.reshape(-1, weight.shape[1])
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if bias.requires_grad else None)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, bw)


# ---------------------------------------------------------------------------
# normalisation / attention pieces
# ---------------------------------------------------------------------------


def softmax_lastdim(x: Tensor) -> Tensor:
    """Max-subtracted softmax; ``-inf`` inputs map to exactly zero."""
    if x.shape[-1] < 1:
        raise DimensionError("softmax over an empty axis")
    m = x.data.max(axis=-1, keepdims=True)
    if np.isneginf(m).any():
        raise ValueError("fully masked row")
    e = np.exp(x.data - m)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return Tensor._make(p, (x,), bw)


def layernorm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-6) -> Tensor:
    if x.ndim < 1 or x.shape[-1] < 1:
        raise DimensionError(f"layernorm needs a non-empty last axis, got {x.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    n = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * rstd
    out = xhat
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data

    def bw(g):
        gh = g * gain.data if gain is not None else g
        gx = rstd * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / n)
        grads = [gx]
        if gain is not None:
            grads.append(_unbroadcast(g * xhat, gain.shape))
        if bias is not None:
            grads.append(_unbroadcast(g, bias.shape))
        return grads

    parents = [x] + [t for t in (gain, bias) if t is not None]
    return Tensor._make(out, parents, bw)


def rotate_pairs(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate consecutive pairs ``(x[2i], x[2i+1])`` by angles with given cos/sin.

    ``cos``/``sin`` have last extent ``x.shape[-1] // 2`` and broadcast over
    the leading axes of ``x``.
    """
    if x.shape[-1] != 2 * cos.shape[-1]:
        raise DimensionError(f"rotate_pairs: {x.shape} vs {cos.shape[-1]} angle pairs")
    cos = cos.astype(x.dtype, copy=False)
    sin = sin.astype(x.dtype, copy=False)
    xe = x.data[..., 0::2]
    xo = x.data[..., 1::2]
    out = np.empty(np.broadcast_shapes(x.shape, cos.shape[:-1] + (x.shape[-1],)), dtype=x.dtype)
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos

    def bw(g):
        ge = g[..., 0::2]
        go = g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * cos + go * sin
        gx[..., 1::2] = -ge * sin + go * cos
        return (_unbroadcast(gx, x.shape),)

    return Tensor._make(out, (x,), bw)


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


class AdamWState:
    """First/second moment buffers keyed by parameter name."""

    def __init__(self):
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adamw_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray | None],
    state: AdamWState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """One decoupled-weight-decay Adam update, in place.

    Parameters whose gradient is ``None`` are skipped entirely (their moments
    do not advance), which is what the frozen post-training path relies on.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    b1, b2 = betas
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        w = p.data
        if weight_decay:
            w *= p.dtype.type(1.0 - lr * weight_decay)
        mhat = m / c1
        vhat = v / c2
        w -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(w.dtype)


def ema_update(shadow: dict[str, np.ndarray], live: dict[str, Tensor], decay: float) -> None:
    if not 0.0 <= decay < 1.0:
        raise ValueError(f"EMA decay must lie in [0, 1), got {decay}")
    for name, p in live.items():
        s = shadow[name]
        if s.shape != p.shape:
            raise DimensionError(f"EMA shadow {name!r} has shape {s.shape}, live {p.shape}")
        # written as a step toward the live value so constant weights stay bit-exact
        s += ((1.0 - decay) * (p.data - s)).astype(s.dtype)


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------


def numerical_grad(f: Callable[[], float], arr: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every entry of ``arr`` (mutated in place)."""
    out = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        hi = f()
        flat[i] = old - step
        lo = f()
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * step)
    return out


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest absolute discrepancy relative to the largest gradient magnitude."""
    scale_ = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale_)


def gradcheck(
    f: Callable[[], Tensor], leaves: Iterable[Tensor], step: float = 1e-6
) -> dict[str, float]:
    """Compare tape gradients with central differences; returns error per leaf."""
    leaves = list(leaves)
    for t in leaves:
        t.grad = None
    f().backward()
    errors = {}
    def value() -> float:
        with no_grad():
            return float(f().data.sum())

    for i, t in enumerate(leaves):
        num = numerical_grad(value, t.data, step)
        ana = t.grad if t.grad is not None else np.zeros_like(t.data)
        errors[t.name or f"leaf{i}"] = max_rel_error(ana, num)
    return errors
