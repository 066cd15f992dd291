"""Small reverse-mode autodiff over numpy float64 arrays.

Every forward op records its parents and a closure that maps the output
gradient to parent gradients. ``Tensor.backward`` walks the recorded graph
once in reverse topological order, accumulates into leaves that require
grad, and then drops the graph.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

EPS = 1e-12


class DimensionError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


class EvaluationError(ArithmeticError):
    pass


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # sum out dimensions that numpy broadcasting expanded
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple = _parents
        self._backward: Callable | None = _backward

    # ---- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor({self.data!r}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # ---- graph construction ----------------------------------------------
    @staticmethod
    def _make(data, parents: tuple, backward) -> "Tensor":
        needs = any(p.requires_grad for p in parents)
        if not needs:
            return Tensor(data)
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): _as_array(grad)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        for node in topo:
            if node._backward is not None:
                node._parents = ()
                node._backward = None

    # ---- elementwise arithmetic ------------------------------------------
    def __add__(self, other) -> "Tensor":
        other = ensure_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._make(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
        )

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other) -> "Tensor":
        return self + (-ensure_tensor(other))

    def __rsub__(self, other) -> "Tensor":
        return ensure_tensor(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = ensure_tensor(other)
        a, b = self.data, other.data
        return Tensor._make(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = ensure_tensor(other)
        a, b = self.data, other.data
        out = a / b
        return Tensor._make(
            out,
            (self, other),
            lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape)),
        )

    def __rtruediv__(self, other) -> "Tensor":
        return ensure_tensor(other) / self

    def __pow__(self, p: float) -> "Tensor":
        a = self.data
        return Tensor._make(a**p, (self,), lambda g: (g * p * a ** (p - 1),))

    def __matmul__(self, other) -> "Tensor":
        other = ensure_tensor(other)
        a, b = self.data, other.data
        if a.ndim < 1 or b.ndim < 1:
            raise DimensionError("matmul needs at least 1-d operands")

        def back(g):
            if b.ndim == 1:
                ga = np.multiply.outer(g, b)
                gb = np.tensordot(a, g, axes=(list(range(a.ndim - 1)), list(range(g.ndim))))
                return ga, gb
            if a.ndim == 1:
                ga = g @ b.T
                gb = np.outer(a, g)
                return ga, gb
            ga = g @ np.swapaxes(b, -1, -2)
            a2 = a.reshape(-1, a.shape[-1])
            gb = a2.T @ g.reshape(-1, g.shape[-1])
            return ga, gb

        if b.ndim > 2:
            raise DimensionError("right matmul operand must be a vector or matrix")
        return Tensor._make(a @ b, (self, other), back)

    # ---- reductions and shape ops ----------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), back)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape) -> "Tensor":
        old = self.shape
        return Tensor._make(self.data.reshape(*shape), (self,), lambda g: (g.reshape(old),))

    def unsqueeze(self, axis: int = -1) -> "Tensor":
        return self.reshape(np.expand_dims(self.data, axis).shape)

    @property
    def T(self) -> "Tensor":
        return Tensor._make(self.data.T, (self,), lambda g: (g.T,))

    def __getitem__(self, idx) -> "Tensor":
        shape = self.shape

        def back(g):
            out = np.zeros(shape)
            np.add.at(out, idx, g)
            return (out,)

        return Tensor._make(self.data[idx], (self,), back)

    # ---- elementwise nonlinearities --------------------------------------
    def tanh(self) -> "Tensor":
        out = np.tanh(self.data)
        return Tensor._make(out, (self,), lambda g: (g * (1.0 - out * out),))

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,))

    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.data)
        return Tensor._make(out, (self,), lambda g: (g * 0.5 / out,))

    def abs(self) -> "Tensor":
        s = np.sign(self.data)
        return Tensor._make(np.abs(self.data), (self,), lambda g: (g * s,))

    def relu(self) -> "Tensor":
        m = self.data > 0
        return Tensor._make(self.data * m, (self,), lambda g: (g * m,))

    def clip(self, lo: float, hi: float) -> "Tensor":
        # zero gradient strictly outside [lo, hi]
        inside = (self.data >= lo) & (self.data <= hi)
        return Tensor._make(np.clip(self.data, lo, hi), (self,), lambda g: (g * inside,))


def ensure_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Parameter(Tensor):
    """A trainable leaf tensor with a checkpoint name."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


# ---- free functions ---------------------------------------------------------

def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [ensure_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [ensure_tensor(t) for t in tensors]

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), back)


def where(cond, a, b) -> Tensor:
    """Select ``a`` where ``cond`` else ``b``; ``cond`` is a constant mask."""
    cond = np.asarray(cond, dtype=bool)
    a, b = ensure_tensor(a), ensure_tensor(b)
    return Tensor._make(
        np.where(cond, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(np.where(cond, g, 0.0), a.shape), _unbroadcast(np.where(cond, 0.0, g), b.shape)),
    )


def dot(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    return (ensure_tensor(a) * ensure_tensor(b)).sum(axis=axis)


def cosine_sim(a, b, axis: int = -1) -> Tensor:
    """a·b / (|a||b| + 1e-12) along ``axis``.

    Two zero vectors give 0 rather than an error. Works on batches: every
    leading index is an independent pair.
    """
    a, b = ensure_tensor(a), ensure_tensor(b)
    if a.shape[axis] == 0 or b.shape[axis] == 0:
        raise DimensionError("cosine_sim of zero-length vectors")
    if a.shape[axis] != b.shape[axis]:
        raise DimensionError(f"length mismatch {a.shape[axis]} vs {b.shape[axis]}")
    x, y = a.data, b.data
    num = (x * y).sum(axis=axis)
    na = np.sqrt((x * x).sum(axis=axis))
    nb = np.sqrt((y * y).sum(axis=axis))
    den = na * nb + EPS
    out = num / den

    def back(g):
        e = lambda v: np.expand_dims(v, axis)
        gd, dn, n = e(g / den), e(den), e(num)
        ux = x / np.where(e(na) > 0, e(na), 1.0)
        uy = y / np.where(e(nb) > 0, e(nb), 1.0)
        ga = gd * (y - n * e(nb) * ux / dn)
        gb = gd * (x - n * e(na) * uy / dn)
        return _unbroadcast(ga, x.shape), _unbroadcast(gb, y.shape)

    return Tensor._make(out, (a, b), back)


def softmax(s, axis: int = -1) -> Tensor:
    s = ensure_tensor(s)
    if s.data.size == 0 or s.shape[axis] == 0:
        raise DimensionError("softmax of an empty vector")
    z = s.data - s.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return Tensor._make(
        out, (s,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    )


def mean_pool(seq, mask=None) -> Tensor:
    """Mean over the time axis (second to last).

    ``mask`` marks valid time steps with shape ``seq.shape[:-1]``; padded
    steps are excluded from the average.
    """
    seq = ensure_tensor(seq)
    if seq.ndim < 2:
        raise DimensionError("mean_pool expects a (T, d) sequence or a batch of them")
    if seq.shape[-2] == 0:
        raise DimensionError("mean_pool of an empty sequence")
    if mask is None:
        return seq.mean(axis=-2)
    mask = np.asarray(mask, dtype=np.float64)
    counts = mask.sum(axis=-1, keepdims=True)
    if np.any(counts == 0):
        raise DimensionError("mean_pool of an empty sequence")
    return (seq * mask[..., None]).sum(axis=-2) / counts


def l2_normalize(v, axis: int = -1) -> Tensor:
    v = ensure_tensor(v)
    norm = np.sqrt((v.data * v.data).sum(axis=axis, keepdims=True))
    if np.any(norm == 0):
        raise DegenerateInputError("cannot normalize a zero vector")
    # zero vectors are rejected above, so the exact norm is safe and keeps |out| = 1 for tiny inputs
    return v / (v * v).sum(axis=axis, keepdims=True).sqrt()


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-5) -> float:
    """Compare reverse-mode gradients of ``f`` with central differences.

    ``f`` is re-evaluated after perturbing each parameter entry in place, so
    it must read the parameters on every call. Returns the largest
    ``|analytic - numeric| / max(1, |analytic|)`` over all entries.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    out = f()
    if not np.all(np.isfinite(out.data)):
        raise EvaluationError("f is not finite at the base point")
    out.backward()
    worst = 0.0
    for p in params:
        analytic = np.zeros(p.shape) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise EvaluationError(f"f not finite when perturbing {getattr(p, 'name', '?')}[{i}]")
            numeric = (fp - fm) / (2 * h)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
