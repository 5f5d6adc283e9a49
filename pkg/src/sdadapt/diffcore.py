"""Small reverse-mode differentiation engine over float64 numpy arrays.

Every operation returns a :class:`DiffArray`.  When at least one input
requires a gradient the result remembers its parents and a backward rule;
:func:`backward` walks that graph in reverse topological order.  Heavy
primitives (conv1d, layernorm, softmax, CTC) are fused kernels with
hand-written backward rules so that whole minibatches go through numpy at
once.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf, expit

__all__ = [
    "DiffArray", "ComputeTape", "DimensionError", "NonFiniteError",
    "ParameterError", "UsageError", "no_grad", "as_array",
    "add", "sub", "mul", "hadamard", "neg", "scale", "matmul", "sigmoid", "gelu",
    "layernorm", "conv1d", "softmax", "log_softmax", "dropout", "reshape",
    "transpose", "sum_all", "mean_all", "backward", "grad_check",
]

NEG_SENTINEL = -1e30
_SQRT_HALF = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


class DimensionError(ValueError):
    pass


class ParameterError(ValueError):
    pass


class UsageError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_STATE = threading.local()


def _grad_enabled() -> bool:
    return getattr(_STATE, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference); per thread."""
    prev = _grad_enabled()
    _STATE.enabled = False
    try:
        yield
    finally:
        _STATE.enabled = prev


class DiffArray:
    """Dense float64 array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        if self.data.ndim == 0:
            self.data = self.data.reshape(())
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "DiffArray":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        out.name = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"DiffArray(shape={self.shape}{flag})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_array(x) -> DiffArray:
    return x if isinstance(x, DiffArray) else DiffArray._wrap(np.asarray(x, dtype=np.float64))


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced a non-finite value")


def _node(data: np.ndarray, parents: tuple, rule: Callable, op: str) -> DiffArray:
    _check_finite(data, op)
    out = DiffArray._wrap(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = rule
        out.name = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# elementwise -----------------------------------------------------------------

def add(a, b) -> DiffArray:
    a, b = as_array(a), as_array(b)
    out = a.data + b.data
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> DiffArray:
    a, b = as_array(a), as_array(b)
    out = a.data - b.data
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> DiffArray:
    a, b = as_array(a), as_array(b)
    out = a.data * b.data

    def rule(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb
    return _node(out, (a, b), rule, "mul")


hadamard = mul


def neg(a) -> DiffArray:
    a = as_array(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a, c: float) -> DiffArray:
    a = as_array(a)
    c = float(c)
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


def sigmoid(x) -> DiffArray:
    x = as_array(x)
    s = expit(x.data)
    return _node(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def gelu(x) -> DiffArray:
    """Exact GELU, x * Phi(x) with the erf-based normal CDF."""
    x = as_array(x)
    cdf = 0.5 * (1.0 + erf(x.data * _SQRT_HALF))
    out = x.data * cdf

    def rule(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)
    return _node(out, (x,), rule, "gelu")


# linear algebra ----------------------------------------------------------------

def matmul(a, b) -> DiffArray:
    a, b = as_array(a), as_array(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def rule(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb
    return _node(out, (a, b), rule, "matmul")


def reshape(a, shape) -> DiffArray:
    a = as_array(a)
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> DiffArray:
    a = as_array(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def sum_all(a) -> DiffArray:
    a = as_array(a)
    shape = a.shape
    return _node(np.asarray(a.data.sum()), (a,),
                 lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean_all(a) -> DiffArray:
    a = as_array(a)
    shape, n = a.shape, a.size
    return _node(np.asarray(a.data.mean()), (a,),
                 lambda g: (np.full(shape, float(g) / n),), "mean")


# fused kernels -------------------------------------------------------------------

def layernorm(x, gamma, beta, eps: float = 1e-5) -> DiffArray:
    """Normalise over the last axis using the population variance."""
    x, gamma, beta = as_array(x), as_array(gamma), as_array(beta)
    m = x.shape[-1]
    if gamma.shape != (m,) or beta.shape != (m,):
        raise DimensionError(f"layernorm width {m} vs gamma {gamma.shape}, beta {beta.shape}")
    if eps <= 0:
        raise ParameterError("layernorm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def rule(g):
        gx = gg = gb = None
        if x.requires_grad:
            gxh = g * gamma.data
            gx = rstd * (gxh - gxh.mean(axis=-1, keepdims=True)
                         - xhat * (gxh * xhat).mean(axis=-1, keepdims=True))
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, m).sum(axis=0)
        if beta.requires_grad:
            gb = g.reshape(-1, m).sum(axis=0)
        return gx, gg, gb
    return _node(out, (x, gamma, beta), rule, "layernorm")


def conv1d(x, kernel, bias=None, stride: int = 1) -> DiffArray:
    """Valid 1-D convolution over time.

    ``x`` is ``[T, Cin]`` or ``[B, T, Cin]``; ``kernel`` is ``[K, Cin, Cout]``.
    Output length is ``(T - K) // stride + 1``.
    """
    x, kernel = as_array(x), as_array(kernel)
    bias = as_array(bias) if bias is not None else None
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if kernel.ndim != 3 or xd.ndim != 3 or xd.shape[2] != kernel.shape[1]:
        raise DimensionError(f"conv1d input {x.shape} incompatible with kernel {kernel.shape}")
    K, cin, cout = kernel.shape
    if stride < 1:
        raise ParameterError("stride must be >= 1")
    B, T, _ = xd.shape
    t_out = (T - K) // stride + 1
    if T < K or t_out < 1:
        raise DimensionError(f"input length {T} shorter than kernel {K}")
    win = np.lib.stride_tricks.sliding_window_view(xd, K, axis=1)[:, ::stride]
    # win: [B, T', Cin, K] -> columns ordered (K, Cin) to match the kernel layout
    cols = np.ascontiguousarray(win.transpose(0, 1, 3, 2)).reshape(B * t_out, K * cin)
    w2 = kernel.data.reshape(K * cin, cout)
    out = (cols @ w2).reshape(B, t_out, cout)
    if bias is not None:
        out = out + bias.data
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def rule(g):
        g3 = g[None] if squeeze else g
        g2 = g3.reshape(B * t_out, cout)
        gx = gk = gb = None
        if kernel.requires_grad:
            gk = (cols.T @ g2).reshape(K, cin, cout)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad:
            gcols = (g2 @ w2.T).reshape(B, t_out, K, cin)
            gx = np.zeros_like(xd)
            span = stride * (t_out - 1) + 1
            for k in range(K):
                gx[:, k:k + span:stride, :] += gcols[:, :, k, :]
            if squeeze:
                gx = gx[0]
        return (gx, gk) if bias is None else (gx, gk, gb)

    if squeeze:
        out = out[0]
    return _node(out, parents, rule, "conv1d")


def softmax(x, axis: int = -1) -> DiffArray:
    x = as_array(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return _node(s, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),), "softmax")


def log_softmax(x, axis: int = -1) -> DiffArray:
    """Log-space softmax with max-shift, finite for |x| well beyond 1e3."""
    x = as_array(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def rule(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)
    return _node(out, (x,), rule, "log_softmax")


def dropout(x, p: float, rng: np.random.Generator | None, training: bool) -> DiffArray:
    """Inverted dropout; the exact identity when not training or p == 0."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must lie in [0, 1), got {p}")
    x = as_array(x)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise UsageError("dropout in training mode needs an rng")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return _node(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


# graph traversal -----------------------------------------------------------------

class ComputeTape:
    """Recorded operations reachable from a root, in topological order."""

    def __init__(self, root: DiffArray):
        self.root = root
        self.nodes: list[DiffArray] = []
        seen: set[int] = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

    def __len__(self) -> int:
        return len(self.nodes)

    def leaves(self) -> list[DiffArray]:
        return [n for n in self.nodes if n.is_leaf]

    def backward(self) -> None:
        root = self.root
        if root.size != 1:
            raise UsageError(f"backward needs a scalar root, got shape {root.shape}")
        if not root.requires_grad:
            return
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                _check_finite(node.grad, "backward")
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def backward(root: DiffArray) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every trainable leaf."""
    ComputeTape(root).backward()


def grad_check(function: Callable[[], DiffArray], params: Sequence[DiffArray],
               eps: float = 1e-5, floor: float | None = None,
               max_elements: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``function`` must rebuild the graph on every call and return a scalar.
    ``max_elements`` limits the number of probed coordinates per parameter.
    ``floor`` bounds the denominator from below; by default it is
    ``1e-6 * max(1, |f|)`` so that round-off in large losses does not show up
    as relative error on gradients that are exactly zero.
    """
    for p in params:
        p.zero_grad()
    root = function()
    backward(root)
    if floor is None:
        floor = 1e-6 * max(1.0, abs(root.item()))
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        idx: Iterable[int] = range(flat.size)
        if max_elements is not None and flat.size > max_elements:
            rng = rng or np.random.default_rng(0)
            idx = rng.choice(flat.size, size=max_elements, replace=False)
        a_flat = a.reshape(-1)
        with no_grad():
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                fp = function().item()
                flat[i] = orig - eps
                fm = function().item()
                flat[i] = orig
                num = (fp - fm) / (2.0 * eps)
                denom = max(abs(num), abs(a_flat[i]), floor)
                worst = max(worst, abs(num - a_flat[i]) / denom)
    for p in params:
        p.zero_grad()
    return worst
