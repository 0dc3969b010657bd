"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every operation records its inputs and a backward rule on the output
tensor; :meth:`Tensor.backward` walks that record in reverse topological
order.  Only the operations the vision transformer needs are provided.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "NonFiniteError",
    "Tensor",
    "no_grad",
    "is_grad_enabled",
    "tensor",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "gelu",
    "softmax",
    "layer_norm",
    "mean",
    "sum",
    "sqrt",
    "square",
    "absolute",
    "l2_norm",
    "reshape",
    "transpose",
    "take",
    "gather_rows",
    "concat",
    "where",
    "detach",
    "numerical_grad",
    "gradcheck",
]

_GRAD_ENABLED = True

GELU_K = float(np.sqrt(2.0 / np.pi))
GELU_C = 0.044715


class NonFiniteError(FloatingPointError):
    """Raised when NaN or Inf shows up at an operation boundary."""


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    return arr


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {where}")


class Tensor:
    """Dense real array with an optional gradient record."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        _check_finite(self.data, "tensor construction")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"

    # -- introspection --------------------------------------------------
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
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    # -- gradient plumbing ----------------------------------------------
    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return detach(self)

    def backward(self) -> None:
        """Populate ``grad`` on every requires_grad leaf reachable from self.

        Gradients add into any existing ``grad``; call ``zero_grad`` between
        steps.
        """
        if self.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("loss does not depend on any tensor requiring grad")
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                _check_finite(g, "backward")
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.dtype != parent.data.dtype:
                    pg = pg.astype(parent.data.dtype)
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("only division by a python scalar is supported")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

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


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _lift_pair(a, b) -> tuple[Tensor, Tensor]:
    # constants take the dtype of the tensor operand so float32 graphs stay float32
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return _lift(a), _lift(b)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    while stack:
        node, i = stack.pop()
        if i == 0:
            if state.get(id(node)) == 2:
                continue
            state[id(node)] = 1
        parents = [p for p in node._parents if p.requires_grad]
        if i < len(parents):
            stack.append((node, i + 1))
            child = parents[i]
            s = state.get(id(child))
            assert s != 1, "cycle in autodiff graph"
            if s is None:
                stack.append((child, 0))
        else:
            state[id(node)] = 2
            order.append(node)
    return order


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise arithmetic ---------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift_pair(a, b)
    _check_broadcast(a.data, b.data, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _lift_pair(a, b)
    _check_broadcast(a.data, b.data, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _lift_pair(a, b)
    _check_broadcast(a.data, b.data, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    x = _lift(x)
    c = float(c)

    def backward(g):
        return (g * c,)

    return _make(x.data * c, (x,), backward, "scale")


def absolute(x: Tensor) -> Tensor:
    x = _lift(x)

    def backward(g):
        return (g * np.sign(x.data),)

    return _make(np.abs(x.data), (x,), backward, "absolute")


def square(x: Tensor) -> Tensor:
    x = _lift(x)

    def backward(g):
        return (2.0 * x.data * g,)

    return _make(x.data * x.data, (x,), backward, "square")


def sqrt(x: Tensor) -> Tensor:
    x = _lift(x)
    if (x.data < 0).any():
        raise ValueError("sqrt of a negative value")
    y = np.sqrt(x.data)

    def backward(g):
        # zero subgradient at the origin keeps unselected branches finite
        safe = np.where(y > 0, y, 1.0)
        return (np.where(y > 0, g / (2.0 * safe), 0.0),)

    return _make(y, (x,), backward, "sqrt")


def where(cond, a, b) -> Tensor:
    cond = np.asarray(cond, dtype=bool)
    a, b = _lift_pair(a, b)
    out = np.where(cond, a.data, b.data)

    def backward(g):
        return (
            _unbroadcast(np.where(cond, g, 0.0), a.shape),
            _unbroadcast(np.where(cond, 0.0, g), b.shape),
        )

    return _make(out, (a, b), backward, "where")


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = _lift(x)
    u = x.data
    t = np.tanh(GELU_K * (u + GELU_C * (u * u * u)))
    out = 0.5 * u * (1.0 + t)

    def backward(g):
        du = 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * u * u)
        return (g * du,)

    return _make(out, (x,), backward, "gelu")


# -- reductions ---------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = _lift(x)
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _lift(x)
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    if count == 0:
        raise ValueError("mean over an empty axis")
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _make(np.asarray(out), (x,), backward, "mean")


def l2_norm(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    x = _lift(x)
    n = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(n > 0, n, 1.0)
        return (np.where(n > 0, g * x.data / safe, 0.0),)

    out = n if keepdims else np.squeeze(n, axis=axis)
    return _make(out, (x,), backward, "l2_norm")


# -- linear algebra and normalisation -----------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner extents differ, {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if a.ndim > 2 and b.ndim == 2:
                # fold the batch into rows: one gemm instead of a batched one
                a2 = a.data.reshape(-1, a.shape[-1])
                gb = a2.T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _lift(x)
    if x.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), backward, "softmax")


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-6) -> Tensor:
    """Normalise over the last axis, then apply ``gain`` and ``bias``."""
    x = _lift(x)
    d = x.shape[-1]
    if gain is not None and gain.shape != (d,):
        raise ValueError(f"layer_norm gain shape {gain.shape} != ({d},)")
    if bias is not None and bias.shape != (d,):
        raise ValueError(f"layer_norm bias shape {bias.shape} != ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data
    parents = tuple(t for t in (x, gain, bias) if t is not None)

    def backward(g):
        dxhat = g * gain.data if gain is not None else g
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        grads = [dx]
        lead = tuple(range(g.ndim - 1))
        if gain is not None:
            grads.append((g * xhat).sum(axis=lead))
        if bias is not None:
            grads.append(g.sum(axis=lead))
        return tuple(grads)

    return _make(out, parents, backward, "layer_norm")


# -- shape manipulation -------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    x = _lift(x)
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return _make(out, (x,), backward, "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    x = _lift(x)
    if not axes:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _make(np.transpose(x.data, axes), (x,), backward, "transpose")


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Select entries of ``x`` along ``axis``; repeated indices accumulate."""
    x = _lift(x)
    idx = np.asarray(indices, dtype=np.intp)
    axis = axis % x.ndim
    out = np.take(x.data, idx, axis=axis)

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gm = np.moveaxis(gx, axis, 0)
        np.add.at(gm, idx, np.moveaxis(g, list(range(axis, axis + idx.ndim)),
                                       list(range(idx.ndim))))
        return (gx,)

    return _make(out, (x,), backward, "take")


def gather_rows(x: Tensor, indices) -> Tensor:
    """``out[b, k] = x[b, indices[b, k]]`` for ``x`` of shape (B, N, D)."""
    x = _lift(x)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 2 or idx.shape[0] != x.shape[0]:
        raise ValueError(f"gather_rows: indices {idx.shape} do not match batch {x.shape}")
    rows = np.arange(x.shape[0])[:, None]
    out = x.data[rows, idx]

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(gx, (rows, idx), g)
        return (gx,)

    return _make(out, (x,), backward, "gather_rows")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_lift(t) for t in tensors]
    if not ts:
        raise ValueError("concat of nothing")
    axis = axis % ts[0].ndim
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, ts, backward, "concat")


def detach(t: Tensor) -> Tensor:
    """Copy of ``t`` with no backward edge."""
    out = Tensor.__new__(Tensor)
    out.data = t.data.copy()
    out.requires_grad = False
    out.grad = None
    out._parents = ()
    out._backward = None
    out._op = "detach"
    return out


# -- finite-difference checking ------------------------------------------

def numerical_grad(f: Callable[[], Tensor], x: Tensor, eps: float = 1e-5,
                   entries: Iterable[tuple[int, ...]] | None = None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x.data``.

    With ``entries`` only those flat positions are perturbed; the rest of the
    returned array is NaN.
    """
    flat = x.data.reshape(-1)
    positions = range(flat.size) if entries is None else entries
    out = np.full(flat.size, np.nan)
    with no_grad():
        for i in positions:
            orig = flat[i]
            flat[i] = orig + eps
            fp = f().item()
            flat[i] = orig - eps
            fm = f().item()
            flat[i] = orig
            out[i] = (fp - fm) / (2.0 * eps)
    return out.reshape(x.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max elementwise |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def gradcheck(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Worst relative error between analytic and central-difference grads."""
    for t in inputs:
        t.zero_grad()
    f(*inputs).backward()
    worst = 0.0
    for t in inputs:
        num = numerical_grad(lambda: f(*inputs), t, eps)
        ana = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, relative_error(ana, num))
    return worst
