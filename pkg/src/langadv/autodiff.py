"""Reverse-mode differentiation over dense float64 numpy arrays.

Every op builds a new :class:`Tensor` that remembers its parents and a closure
mapping the upstream gradient to one gradient per parent. :func:`backward`
walks the recorded DAG in reverse topological order and accumulates into the
``grad`` of every leaf that requires it.

Broadcasting is limited to a trailing-suffix match (a bias of shape ``(H,)``
against ``(B, S, H)``) and scalars; anything else is a :class:`ShapeError`.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
PROB_EPS = 1e-12

_GRAD_ENABLED = True


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording them."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), op: str = ""):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable | None = None
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'!r})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self):
        return tsum(self)

    def backward(self):
        backward(self)


class Parameter(Tensor):
    """A named trainable leaf. ``grad`` stays ``None`` until a backward pass
    reaches it or :meth:`zero_grad` is called."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(np.array(data, dtype=DTYPE, copy=True), requires_grad=True)
        self.name = name

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], op: str, backward_fn) -> Tensor:
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, op=op)
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _check_suffix(a: Tensor, b: Tensor, op: str):
    sa, sb = a.shape, b.shape
    if sa == sb or a.ndim == 0 or b.ndim == 0:
        return
    if b.ndim < a.ndim and sa[a.ndim - b.ndim:] == sb:
        return
    if a.ndim < b.ndim and sb[b.ndim - a.ndim:] == sa:
        return
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    return g.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix(a, b, "add")

    def _bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), "add", _bw)


def neg(a: Tensor) -> Tensor:
    def _bw(g):
        return (-g,)

    return _make(-a.data, (a,), "neg", _bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix(a, b, "mul")

    def _bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), "mul", _bw)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def _bw(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), "sigmoid", _bw)


def log(a: Tensor) -> Tensor:
    bad = a.data <= 0
    if np.any(bad):
        raise DomainError(
            f"log of non-positive value {float(a.data[bad].flat[0])!r}; clamp probabilities first"
        )

    def _bw(g):
        return (g / a.data,)

    return _make(np.log(a.data), (a,), "log", _bw)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)

    def _bw(g):
        return (g * inside,)

    return _make(np.clip(a.data, lo, hi), (a,), "clamp", _bw)


def clamp_prob(p: Tensor) -> Tensor:
    return clamp(p, PROB_EPS, 1.0 - PROB_EPS)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    x2 = x * x
    th = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + th)

    def _bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return _make(out, (a,), "gelu", _bw)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product; ``a`` may carry leading batch axes over a 2-D ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch axes differ in {a.shape} and {b.shape}")

    # stacked @ 2-D goes through one flat gemm; np.matmul would loop the stack
    flat = b.ndim == 2 and a.ndim > 2

    def _bw(g):
        ga = gb = None
        if flat:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                ga = (g2 @ b.data.T).reshape(a.shape)
            if b.requires_grad:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g2
            return ga, gb
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    if flat:
        out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
    else:
        out = a.data @ b.data
    return _make(out, (a, b), "matmul", _bw)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def _bw(g):
        return (np.transpose(g, inv),)

    return _make(np.transpose(a.data, axes), (a,), "transpose", _bw)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None

    def _bw(g):
        return (g.reshape(a.shape),)

    return _make(out, (a,), "reshape", _bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: nothing to concatenate")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} on axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def _bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, "concat", _bw)


# ---------------------------------------------------------------- reductions


def tsum(a: Tensor) -> Tensor:
    def _bw(g):
        return (np.broadcast_to(g, a.shape),)

    return _make(a.data.sum(), (a,), "sum", _bw)


def masked_mean(x: Tensor, mask) -> Tensor:
    """Average ``x`` of shape (B, S, H) over unmasked S positions, giving (B, H)."""
    m = np.asarray(mask, dtype=DTYPE)
    if x.ndim != 3 or m.shape != x.shape[:2]:
        raise ShapeError(f"masked_mean: mask {m.shape} does not match states {x.shape}")
    counts = m.sum(axis=1)
    if np.any(counts == 0):
        raise ShapeError(f"masked_mean: row {int(np.argmin(counts))} has no unmasked positions")
    w = m / counts[:, None]

    def _bw(g):
        return (w[:, :, None] * g[:, None, :],)

    return _make(np.einsum("bs,bsh->bh", w, x.data), (x,), "masked_mean", _bw)


# ---------------------------------------------------------------- nn primitives


def softmax(a: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` broadcasts against ``a``; zero entries get logit -inf, so each row
    needs at least one nonzero mask entry.
    """
    x = a.data
    if mask is not None:
        keep = np.broadcast_to(np.asarray(mask) != 0, x.shape)
        x = np.where(keep, x, -np.inf)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def _bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (a,), "softmax", _bw)


def embedding(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("embedding: ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError(f"embedding: ids out of range for table {weight.shape}")

    def _bw(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (full,)

    return _make(weight.data[ids], (weight,), "embedding", _bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs input {x.shape}")
    xc = x.data - x.data.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt((xc**2).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def _bw(g):
        dx = None
        if x.requires_grad:
            gx = g * gain.data
            n = x.shape[-1]
            dx = inv / n * (n * gx - gx.sum(-1, keepdims=True) - xhat * (gx * xhat).sum(-1, keepdims=True))
        return dx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return _make(xhat * gain.data + bias.data, (x, gain, bias), "layer_norm", _bw)


# ---------------------------------------------------------------- traversal


def _topo(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        stack.extend((p, False) for p in node._parents if id(p) not in seen)
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into every reachable leaf's ``grad``."""
    if root.data.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(_topo(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.array(g, dtype=DTYPE, copy=True)
            else:
                node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def gradient_check(
    fn: Callable[[], Tensor | Sequence[Tensor]],
    params: Sequence[Parameter],
    h: float = 1e-5,
) -> float:
    """Max relative error between backprop and central differences.

    ``fn`` must rebuild its graph from the live parameter values on each call.
    It may return several scalars sharing one forward pass; each is checked
    against the same probes. Per coordinate the error is
    ``|a - n| / max(1, |a|, |n|)``.
    """
    if h <= 0:
        raise ValueError("step h must be positive")

    def outputs():
        out = fn()
        return [out] if isinstance(out, Tensor) else list(out)

    roots = outputs()
    analytic = []
    for root in roots:
        if not np.isfinite(root.data).all():
            raise NonFiniteError("function value is not finite at the base point")
        for p in params:
            p.grad = None
        backward(root)
        analytic.append(
            np.concatenate([np.zeros(p.data.size) if p.grad is None else p.grad.reshape(-1) for p in params])
        )
    analytic = np.stack(analytic, axis=1) if analytic else np.zeros((0, 0))

    worst = 0.0
    offset = 0
    for p in params:
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            try:
                with no_grad():
                    flat[i] = orig + h
                    up = np.array([t.item() for t in outputs()])
                    flat[i] = orig - h
                    down = np.array([t.item() for t in outputs()])
            except DomainError:
                up = down = np.full(len(roots), math.nan)
            finally:
                flat[i] = orig
            if not (np.isfinite(up).all() and np.isfinite(down).all()):
                raise NonFiniteError(
                    f"non-finite value probing {getattr(p, 'name', '?')}[{i}] "
                    f"(coordinate {offset + i})",
                    index=offset + i,
                )
            num = (up - down) / (2 * h)
            a = analytic[offset + i]
            worst = max(worst, float(np.max(np.abs(a - num) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(num))))))
        offset += flat.size
    for p in params:
        p.grad = None
    return worst
