"""Reverse-mode automatic differentiation over small dense float32 arrays.

Every op records its parents and a backward rule on the output tensor.
``backward`` walks the recorded ops reachable from a scalar loss in exact
reverse recording order, so gradients accumulate additively across uses and
across repeated calls.

Tensors are at most rank 3 (``batch x seq x dim``); multi-head attention
folds heads into the batch axis rather than introducing a fourth axis.
"""

from __future__ import annotations

import contextlib
import itertools
import math
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

MASK_FILL = -1e9
LN_EPS = 1e-5


class NumericsError(ValueError):
    """Base class for contract violations in the numerics layer."""


class ShapeError(NumericsError):
    pass


class NonFiniteError(NumericsError):
    pass


class DegenerateMaskError(NumericsError):
    """A softmax row with no unmasked entry."""


class _State(threading.local):
    def __init__(self):
        self.counter = itertools.count()
        self.dtype = np.float32
        self.grad_enabled = True


_state = _State()


def default_dtype():
    return _state.dtype


@contextlib.contextmanager
def float64_mode():
    """Run ops in 64-bit. Used only by the finite-difference oracle."""
    prev = _state.dtype
    _state.dtype = np.float64
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=_state.dtype)
        if arr.ndim > 3:
            raise ShapeError(f"tensors are at most rank 3, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite value in tensor {name or ''} of shape {arr.shape}".strip())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None
        self._seq = -1
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if _state.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._seq = next(_state.counter)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------


class Graph:
    """Recorded ops reachable from an output, in recording order."""

    def __init__(self, ops: list[Tensor]):
        self.ops = ops

    @classmethod
    def from_output(cls, out: Tensor) -> "Graph":
        seen: dict[int, Tensor] = {}
        stack = [out]
        while stack:
            t = stack.pop()
            if t._backward is None or id(t) in seen:
                continue
            seen[id(t)] = t
            stack.extend(t._parents)
        return cls(sorted(seen.values(), key=lambda t: t._seq))

    def __len__(self):
        return len(self.ops)


def _accumulate_leaf(t: Tensor, g: np.ndarray):
    g = np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def backward(loss: Tensor):
    """Populate ``.grad`` of every leaf that requires grad with d(loss)/d(leaf)."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    seed = np.ones_like(loss.data)
    if loss.is_leaf:
        _accumulate_leaf(loss, seed)
        return
    graph = Graph.from_output(loss)
    pending: dict[int, np.ndarray] = {id(loss): seed}
    for node in reversed(graph.ops):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.is_leaf:
                _accumulate_leaf(parent, pg)
            elif id(parent) in pending:
                pending[id(parent)] = pending[id(parent)] + pg
            else:
                pending[id(parent)] = pg


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def relu(x: Tensor) -> Tensor:
    on = x.data > 0
    return _make(np.where(on, x.data, 0), (x,), lambda g: (g * on,))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def log(x: Tensor, floor: float | None = None) -> Tensor:
    """Natural log; with ``floor`` the input is clamped from below first."""
    if floor is None:
        if (x.data <= 0).any():
            raise NonFiniteError("log of a non-positive value")
        return _make(np.log(x.data), (x,), lambda g: (g / x.data,))
    live = x.data > floor
    clamped = np.where(live, x.data, floor)
    return _make(np.log(clamped), (x,), lambda g: (np.where(live, g / clamped, 0),))


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``p == 0`` or no generator is given."""
    if p <= 0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return mul(x, Tensor(keep))


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def sum_all(x: Tensor) -> Tensor:
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape),))


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.ndim < 2:
        raise ShapeError(f"transpose needs rank >= 2, got {x.shape}")
    return _make(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([x.data for x in xs], axis=axis), xs,
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def narrow(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice ``x[:, start:stop]``."""
    def back(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return _make(x.data[:, start:stop], (x,), back)


def take_last(x: Tensor, ids: np.ndarray) -> Tensor:
    """Pick ``x[..., ids[...]]`` along the last axis; ids has x's shape minus the last axis."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape != x.shape[:-1]:
        raise ShapeError(f"take_last: x {x.shape} with ids {ids.shape}")
    idx = ids[..., None]

    def back(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, g[..., None], axis=-1)
        return (gx,)

    return _make(np.take_along_axis(x.data, idx, axis=-1)[..., 0], (x,), back)


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Per-batch row gather: ``x[b, index[b, j]]`` for x of shape (B, T, d)."""
    index = np.asarray(index, dtype=np.int64)
    if x.ndim != 3 or index.ndim != 2 or index.shape[0] != x.shape[0]:
        raise ShapeError(f"gather_rows: x {x.shape} with index {index.shape}")
    b = np.arange(x.shape[0])[:, None]

    def back(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (np.broadcast_to(b, index.shape), index), g)
        return (gx,)

    return _make(x.data[b, index], (x,), back)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; ids of shape (T,) or (B, T)."""
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"token id out of range [0, {vocab}): min {ids.min()}, max {ids.max()}")

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _make(table.data[ids], (table,), back)


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(B, T, d) -> (B*heads, T, d/heads)."""
    bsz, t, d = x.shape
    if d % heads:
        raise ShapeError(f"model width {d} not divisible by {heads} heads")
    dk = d // heads
    y = x.data.reshape(bsz, t, heads, dk).transpose(0, 2, 1, 3).reshape(bsz * heads, t, dk)
    return _make(y, (x,),
                 lambda g: (g.reshape(bsz, heads, t, dk).transpose(0, 2, 1, 3).reshape(bsz, t, d),))


def merge_heads(x: Tensor, heads: int) -> Tensor:
    """(B*heads, T, dk) -> (B, T, heads*dk)."""
    bh, t, dk = x.shape
    bsz = bh // heads
    y = x.data.reshape(bsz, heads, t, dk).transpose(0, 2, 1, 3).reshape(bsz, t, heads * dk)
    return _make(y, (x,),
                 lambda g: (g.reshape(bsz, t, heads, dk).transpose(0, 2, 1, 3).reshape(bh, t, dk),))


# ---------------------------------------------------------------------------
# linear algebra and normalisation
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product for (m,k)@(k,n), (B,m,k)@(k,n) and (B,m,k)@(B,k,n)."""
    a, b = as_tensor(a), as_tensor(b)
    ok = a.ndim in (2, 3) and b.ndim in (2, 3) and not (a.ndim == 2 and b.ndim == 3)
    if not ok or a.shape[-1] != b.shape[-2] or (b.ndim == 3 and a.shape[0] != b.shape[0]):
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2 and a.ndim == 3:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _make(a.data @ b.data, (a, b), back)


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; entries where ``mask == 0`` get exactly 0."""
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not mask.any(axis=-1).all():
            raise DegenerateMaskError("softmax row is fully masked")
        z = z + np.where(mask, 0.0, MASK_FILL).astype(z.dtype)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    if mask is not None:
        e = np.where(mask, e, 0)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalise over the last axis then apply ``gain`` and ``bias``."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: x {x.shape}, gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    y = xhat * gain.data + bias.data

    def back(g):
        gh = g * gain.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return _make(y, (x, gain, bias), back)


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray, heads: int,
              dropout_p: float = 0.0, rng: np.random.Generator | None = None) -> Tensor:
    """Masked multi-head scaled dot-product attention (no projections).

    Accepts (m,d)/(n,d) or batched (B,m,d)/(B,n,d) inputs; ``mask`` is
    (m,n) or (B,m,n) with 1 for allowed query/key pairs.
    """
    unbatched = q.ndim == 2
    if unbatched:
        q, k, v = (reshape(t, (1,) + t.shape) for t in (q, k, v))
    bsz, m, d = q.shape
    n = k.shape[1]
    if k.shape != (bsz, n, d) or v.shape != (bsz, n, d):
        raise ShapeError(f"attention: Q {q.shape}, K {k.shape}, V {v.shape}")
    if d % heads:
        raise ShapeError(f"model width {d} not divisible by {heads} heads")
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), (bsz, m, n))
    if not mask.any(axis=-1).all():
        raise DegenerateMaskError("attention query row has no allowed key")
    head_mask = np.repeat(mask, heads, axis=0)
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    scores = mul(matmul(qh, transpose(kh)), 1.0 / math.sqrt(d // heads))
    probs = dropout(softmax_rows(scores, head_mask), dropout_p, rng)
    out = merge_heads(matmul(probs, vh), heads)
    return reshape(out, (m, d)) if unbatched else out


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    n_checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def _rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> float:
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max())


def _as_scalar(out: Tensor, proj: np.ndarray | None) -> Tensor:
    if out.data.size == 1:
        return reshape(out, ()) if out.ndim else out
    return sum_all(mul(out, Tensor(proj)))


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor | np.ndarray, h: float = 1e-3,
               tol: float = 1e-3, seed: int = 0, floor: float = 1e-3) -> GradCheckReport:
    """Compare analytic gradients of ``f`` at ``x`` with central differences.

    Non-scalar outputs are reduced with a fixed random projection. The
    analytic pass runs at the default (32-bit) precision; the differences
    are taken in 64-bit so that rounding does not swamp the step ``h``.
    Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    xt = parameter(x0)
    out = f(xt)
    proj = None
    if out.data.size > 1:
        # representable in 32-bit so both passes see the same projection
        proj = rng.uniform(-1, 1, size=out.shape).astype(np.float32).astype(np.float64)
    backward(_as_scalar(out, proj))
    analytic = np.zeros_like(x0) if xt.grad is None else xt.grad.astype(np.float64)

    numeric = np.zeros_like(x0)
    with float64_mode(), no_grad():
        for i in np.ndindex(x0.shape):
            xp = x0.copy()
            xp[i] += h
            fp = _as_scalar(f(Tensor(xp)), proj).item()
            xp[i] -= 2 * h
            fm = _as_scalar(f(Tensor(xp)), proj).item()
            numeric[i] = (fp - fm) / (2 * h)
    return GradCheckReport(_rel_err(analytic, numeric, floor), x0.size, tol)


def grad_check_params(loss_fn: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-3,
                      tol: float = 1e-2, per_tensor: int = 4, seed: int = 0,
                      floor: float = 1e-3) -> GradCheckReport:
    """Finite-difference check of ``loss_fn`` w.r.t. parameters it closes over.

    Up to ``per_tensor`` randomly chosen elements of every parameter are
    perturbed in place (64-bit during the perturbed evaluations).
    """
    params = list(params)
    rng = np.random.default_rng(seed)
    for p in params:
        p.zero_grad()
    backward(loss_fn())
    analytic, numeric = [], []
    for p in params:
        grad = np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64)
        flat = rng.choice(p.data.size, size=min(per_tensor, p.data.size), replace=False)
        orig = p.data
        base = orig.astype(np.float64)
        try:
            with float64_mode(), no_grad():
                for j in flat:
                    i = np.unravel_index(j, p.shape)
                    work = base.copy()
                    work[i] += h
                    p.data = work
                    fp = loss_fn().item()
                    work[i] -= 2 * h
                    fm = loss_fn().item()
                    numeric.append((fp - fm) / (2 * h))
                    analytic.append(grad[i])
        finally:
            p.data = orig
        p.zero_grad()
    return GradCheckReport(_rel_err(np.array(analytic), np.array(numeric), floor), len(numeric), tol)
