"""Dense float32 tensors with reverse-mode automatic differentiation.

Every differentiable op returns a new :class:`Tensor` that remembers its
inputs and a closure that pushes the output gradient back to them.
:func:`backward` linearises that graph into a tape (inputs always precede the
ops that consume them) and replays it in reverse, visiting each op once.

Only the handful of ops a GPT-2 style decoder needs are provided, plus enough
elementwise arithmetic to build small test graphs.
"""
from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float32
GELU_COEF = 0.044715
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
# exp(-1e30 - finite) underflows to exactly 0 in float32
_MASKED = -1e30

_state = threading.local()


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class InvalidBatchError(ValueError):
    """A batch carries no supervised position."""


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mul(sum_all(self), _wrap(1.0 / self.size))

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def _not_scalar(t: Tensor):
    raise ValueError(f"expected a single-element tensor, got shape {t.shape}")


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = g.astype(DTYPE, copy=False)
    # never mutate in place: ``g`` may alias another node's buffer
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def build_tape(root: Tensor) -> list[Tensor]:
    """Topologically ordered list of recorded nodes reachable from ``root``."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every grad-requiring tensor that feeds ``loss``."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring grad")
    tape = build_tape(loss)
    _accumulate(loss, np.ones_like(loss.data))
    for node in reversed(tape):
        if node._backward is None:
            continue
        node._backward(node.grad)
        # interior buffers are no longer needed once pushed upstream
        node.grad = None
        node._parents = ()
        node._backward = None


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: _accumulate(a, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw)


def sum_all(a: Tensor) -> Tensor:
    def bw(g):
        _accumulate(a, np.broadcast_to(g.reshape(()), a.shape))

    return _make(np.asarray(a.data.sum(dtype=np.float64), dtype=DTYPE), (a,), bw)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: _accumulate(a, g * (1.0 - y * y)))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: _accumulate(a, g.reshape(old)))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.data.ndim)))
    inverse = tuple(np.argsort(axes))
    return _make(
        np.ascontiguousarray(a.data.transpose(axes)),
        (a,),
        lambda g: _accumulate(a, g.transpose(inverse)),
    )


def slice_from(x: Tensor, start: int, axis: int = 1) -> Tensor:
    """``x[..., start:, ...]`` along ``axis``."""
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, None)
    index = tuple(index)
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[index] = g
        _accumulate(x, full)

    return _make(x.data[index], (x,), bw)


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of a 2-D table; used for token embeddings."""
    ids = np.asarray(ids, dtype=np.int64)
    n_rows = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n_rows):
        raise IndexError(f"row id out of range [0, {n_rows})")

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        _accumulate(table, gt)

    return _make(table.data[ids], (table,), bw)


def select_positions(x: Tensor, mask: np.ndarray) -> Tensor:
    """Flatten the rows of ``x[..., d]`` where ``mask`` is true into ``[N, d]``."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape[:-1]:
        raise ShapeError(f"mask shape {mask.shape} does not match {x.shape[:-1]}")
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[mask] = g
        _accumulate(x, full)

    return _make(x.data[mask], (x,), bw)


# ---------------------------------------------------------------------------
# linear algebra and neural-net ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch broadcasting on leading axes."""
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            if b.data.ndim == 2 and a.data.ndim > 2:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
            _accumulate(b, gb)

    return _make(out, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` fused so the bias gradient is a single reduction."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {x.shape} @ {w.shape}")
    k, n = w.shape
    x2 = x.data.reshape(-1, k)
    out = x2 @ w.data
    if b is not None:
        out += b.data
    out_shape = x.shape[:-1] + (n,)

    def bw(g):
        g2 = g.reshape(-1, n)
        if x.requires_grad:
            _accumulate(x, (g2 @ w.data.T).reshape(x.shape))
        if w.requires_grad:
            _accumulate(w, x2.T @ g2)
        if b is not None and b.requires_grad:
            _accumulate(b, g2.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _make(out.reshape(out_shape), parents, bw)


_causal_cache: dict[tuple[int, int], np.ndarray] = {}


def _causal_bias(t_q: int, t_k: int) -> np.ndarray:
    key = (t_q, t_k)
    bias = _causal_cache.get(key)
    if bias is None:
        keep = np.tril(np.ones(key, dtype=bool), k=t_k - t_q)
        bias = np.where(keep, 0.0, _MASKED).astype(DTYPE)
        _causal_cache[key] = bias
    return bias


def softmax_rows(x: Tensor, causal: bool = False, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.

    ``causal`` hides keys after the query (query ``i`` of ``t_q`` sees keys up
    to ``i + t_k - t_q``). ``mask`` is an explicit boolean keep-mask
    broadcastable to ``x``. Hidden entries get probability exactly 0; a row
    with every entry hidden is rejected.
    """
    if x.shape[-1] < 1:
        raise ShapeError("softmax over an empty axis")
    # hide entries before taking the row max so hidden scores cannot
    # influence visible outputs, not even by rounding
    z = x.data + _causal_bias(x.shape[-2], x.shape[-1]) if causal else x.data.copy()
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not np.broadcast_to(mask, z.shape).any(axis=-1).all():
            raise ValueError("softmax row with every position masked")
        z = np.where(mask, z, DTYPE(_MASKED))
    z -= z.max(axis=-1, keepdims=True)
    y = np.exp(z, out=z)
    y /= y.sum(axis=-1, keepdims=True)

    def bw(g):
        gy = g * y
        gy -= y * gy.sum(axis=-1, keepdims=True)
        _accumulate(x, gy)

    return _make(y, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    d = x.shape[-1]

    def bw(g):
        if gain.requires_grad:
            _accumulate(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            _accumulate(bias, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            _accumulate(x, dx)

    return _make(out, (x, gain, bias), bw)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    v = x.data
    inner = _SQRT_2_OVER_PI * (v + GELU_COEF * v * v * v)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def bw(g):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * v * v)
        _accumulate(x, g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner))

    return _make(out, (x,), bw)


def cross_entropy_masked(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean NLL over the rows of ``logits[..., V]`` selected by ``mask``."""
    v = logits.shape[-1]
    z = logits.data.reshape(-1, v)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    sel = np.ones(len(targets), dtype=bool) if mask is None else np.asarray(mask, bool).reshape(-1)
    if len(targets) != z.shape[0] or len(sel) != z.shape[0]:
        raise ShapeError(f"targets/mask length does not match {z.shape[0]} logit rows")
    n = int(sel.sum())
    if n == 0:
        raise InvalidBatchError("loss mask selects no positions")
    t = targets[sel]
    if t.min() < 0 or t.max() >= v:
        raise IndexError(f"target id out of range [0, {v})")
    zs = z[sel].astype(np.float64)
    zs = zs - zs.max(axis=1, keepdims=True)
    logp = zs - np.log(np.exp(zs).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), t].mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), t] -= 1.0
        full = np.zeros_like(z)
        full[sel] = (p * (float(g) / n)).astype(DTYPE)
        _accumulate(logits, full.reshape(logits.shape))

    return _make(np.asarray(loss, dtype=DTYPE), (logits,), bw)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean elementwise sigmoid binary cross-entropy."""
    y = np.asarray(targets, dtype=DTYPE)
    if y.shape != logits.shape:
        raise ShapeError(f"targets {y.shape} do not match logits {logits.shape}")
    z = logits.data.astype(np.float64)
    # max(z,0) - z*y + log(1 + exp(-|z|))
    loss = (np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))).mean()
    n = z.size

    def bw(g):
        sig = 1.0 / (1.0 + np.exp(-z))
        _accumulate(logits, ((sig - y) * (float(g) / n)).astype(DTYPE))

    return _make(np.asarray(loss, dtype=DTYPE), (logits,), bw)


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


class AdamWState:
    def __init__(self):
        self.step = 0
        self.m: dict[int, np.ndarray] = {}
        self.v: dict[int, np.ndarray] = {}


def adamw_step(
    params: Sequence[Tensor],
    state: AdamWState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """One AdamW update in place, reading gradients from ``p.grad``.

    Weight decay is decoupled: ``w *= 1 - lr * wd`` before the Adam step.
    Parameters without a gradient are treated as having a zero gradient.
    """
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for i, p in enumerate(params):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(i)
        if m is None:
            m = state.m[i] = np.zeros_like(p.data)
            state.v[i] = np.zeros_like(p.data)
        v = state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            p.data *= DTYPE(1.0 - lr * weight_decay)
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        p.data -= (lr * update).astype(DTYPE)


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most ``max_norm``."""
    params = [p for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.dot(p.grad.ravel(), p.grad.ravel())) for p in params))
    if total > max_norm:
        scale = DTYPE(max_norm / (total + 1e-6))
        for p in params:
            p.grad = p.grad * scale
    return total
