"""Reverse-mode automatic differentiation on float64 numpy arrays.

The graph is built on the fly by every operation (define-by-run).  Each op
stores a closure that maps the upstream gradient to gradients of its inputs,
and those closures are themselves written in terms of ``Tensor`` operations.
Running the backward pass with ``create_graph=True`` therefore records a new
graph for the gradient computation, which is what makes double backprop
(e.g. a gradient penalty differentiated w.r.t. critic weights) work.

Piecewise-linear ops (ReLU, leaky ReLU, max pooling, abs) multiply by a
constant mask, so their second derivative is zero almost everywhere.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .errors import ContractError, DimensionError

__all__ = [
    "Tensor",
    "as_tensor",
    "no_grad",
    "enable_grad",
    "is_grad_enabled",
    "grad",
    "grad_norm_node",
    "matmul",
    "conv2d",
    "max_pool2d",
    "softmax",
    "log_softmax",
    "relu",
    "leaky_relu",
    "clip",
    "sigmoid",
    "concat",
    "l2_norm",
    "pad",
    "im2col",
    "col2im",
]

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


class _GradMode:
    def __init__(self, enabled: bool):
        self.enabled = enabled

    def __enter__(self):
        self.prev = is_grad_enabled()
        _state.enabled = self.enabled

    def __exit__(self, *exc):
        _state.enabled = self.prev
        return False


def no_grad() -> _GradMode:
    """Context manager that stops graph recording on this thread."""
    return _GradMode(False)


def enable_grad() -> _GradMode:
    return _GradMode(True)


ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


class Tensor:
    """An n-dimensional float64 array that remembers how it was computed.

    ``grad`` is a numpy buffer filled by :meth:`backward` on leaf tensors
    created with ``requires_grad=True``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 1000

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.name = name

    # -- basic attributes -------------------------------------------------
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
    def T(self) -> "Tensor":
        return self.transpose()

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=4)}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # -- method forms ------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def sqrt(self) -> "Tensor":
        return sqrt(self)

    def tanh(self) -> "Tensor":
        return tanh(self)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def relu(self) -> "Tensor":
        return relu(self)

    def abs(self) -> "Tensor":
        return tabs(self)

    def backward(self, grad_output: Optional[ArrayLike] = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf."""
        if grad_output is None and self.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        g0 = Tensor(np.ones_like(self.data) if grad_output is None else grad_output)
        _propagate(self, g0, create_graph=False, want=None)


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------


def _topo(root: Tensor) -> list:
    order: list = []
    seen: set = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def _propagate(root: Tensor, g0: Tensor, create_graph: bool, want: Optional[dict]):
    if not root.requires_grad:
        return {}
    order = _topo(root)
    grads = {id(root): g0}
    found: dict = {}
    with _GradMode(create_graph):
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if want is not None and id(node) in want:
                found[id(node)] = g
            if node._backward is None:
                if want is None:
                    node.grad = g.data.copy() if node.grad is None else node.grad + g.data
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                k = id(p)
                grads[k] = pg if k not in grads else grads[k] + pg
    return found


def grad(
    output: Tensor,
    inputs: Union[Tensor, Sequence[Tensor]],
    grad_output: Optional[ArrayLike] = None,
    create_graph: bool = False,
):
    """Return d(output)/d(inputs) without touching ``.grad`` buffers.

    With ``create_graph=True`` the returned tensors are graph nodes and can be
    differentiated again.  Inputs unreachable from ``output`` get zeros.
    """
    single = isinstance(inputs, Tensor)
    inputs = [inputs] if single else list(inputs)
    if grad_output is None:
        if output.size != 1:
            raise ContractError(f"grad() needs a scalar output or grad_output, got shape {output.shape}")
        grad_output = np.ones_like(output.data)
    found = _propagate(output, as_tensor(grad_output), create_graph, {id(t): t for t in inputs})
    res = [found.get(id(t), Tensor(np.zeros_like(t.data))) for t in inputs]
    return res[0] if single else res


def grad_norm_node(inputs: Tensor, output: Tensor, per_sample: bool = False) -> Tensor:
    """Differentiable 2-norm of d(output)/d(inputs).

    ``per_sample=True`` treats axis 0 of ``inputs`` as a batch and returns one
    norm per row; ``output`` must then be a sum of per-row quantities.  At a
    zero gradient the norm is 0 and its subgradient is taken as 0.
    """
    if output.size != 1:
        raise ContractError(f"output must be scalar, got shape {output.shape}")
    g = grad(output, inputs, create_graph=True)
    if per_sample:
        return l2_norm(g.reshape(g.shape[0], -1), axis=1)
    return l2_norm(g.reshape(-1), axis=0)


# ---------------------------------------------------------------------------
# broadcasting helpers
# ---------------------------------------------------------------------------


def _sum_to_array(a: np.ndarray, shape: tuple) -> np.ndarray:
    if a.shape == shape:
        return a
    lead = a.ndim - len(shape)
    if lead > 0:
        a = a.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and a.shape[i] != 1)
    if axes:
        a = a.sum(axis=axes, keepdims=True)
    return a.reshape(shape)


def sum_to(a: Tensor, shape: tuple) -> Tensor:
    shape = tuple(shape)
    if a.shape == shape:
        return a
    src = a.shape
    return _node(_sum_to_array(a.data, shape), (a,), lambda g: (broadcast_to(g, src),))


def broadcast_to(a: Tensor, shape: tuple) -> Tensor:
    shape = tuple(shape)
    if a.shape == shape:
        return a
    src = a.shape
    return _node(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (sum_to(g, src),))


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (sum_to(g, sa), sum_to(g, sb)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b), lambda g: (sum_to(g, sa), sum_to(-g, sb)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        ga = sum_to(g * b, a.shape) if a.requires_grad else None
        gb = sum_to(g * a, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data * b.data, (a, b), back)


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        ga = sum_to(g / b, a.shape) if a.requires_grad else None
        gb = sum_to(-g * a / (b * b), b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data / b.data, (a, b), back)


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, p: float) -> Tensor:
    if isinstance(p, Tensor):
        raise ContractError("power() takes a constant exponent")
    p = float(p)
    return _node(a.data**p, (a,), lambda g: (g * p * a ** (p - 1.0),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def back(g):
        return (g * (exp(a) if is_grad_enabled() else Tensor(out)),)

    return _node(out, (a,), back)


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: (g / a,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def back(g):
        s = sqrt(a) if is_grad_enabled() else Tensor(out)
        return (g * 0.5 / s,)

    return _node(out, (a,), back)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def back(g):
        t = tanh(a) if is_grad_enabled() else Tensor(out)
        return (g * (1.0 - t * t),)

    return _node(out, (a,), back)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = _stable_sigmoid(a.data)

    def back(g):
        s = sigmoid(a) if is_grad_enabled() else Tensor(out)
        return (g * s * (1.0 - s),)

    return _node(out, (a,), back)


def relu(a: Tensor) -> Tensor:
    return a * Tensor(a.data > 0)


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    return a * Tensor(np.where(a.data > 0, 1.0, slope))


def tabs(a: Tensor) -> Tensor:
    return a * Tensor(np.sign(a.data))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; the gradient is zero wherever the clamp is active."""
    inside = (a.data >= lo) & (a.data <= hi)
    return a * Tensor(inside) + Tensor(np.where(inside, 0.0, np.clip(a.data, lo, hi)))


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    src = a.shape
    kept = tuple(1 if i in axes else s for i, s in enumerate(src))

    def back(g):
        if not keepdims:
            g = reshape(g, kept)
        return (broadcast_to(g, src),)

    return _node(a.data.sum(axis=axes, keepdims=keepdims), (a,), back)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axis, keepdims) / float(count)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    src = a.shape
    out = a.data.reshape(shape)
    return _node(out, (a,), lambda g: (reshape(g, src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g: (transpose(g, inv),))


def getitem(a: Tensor, idx) -> Tensor:
    if isinstance(idx, Tensor):
        idx = idx.data.astype(np.int64)
    src = a.shape
    return _node(a.data[idx], (a,), lambda g: (_index_add(g, idx, src),))


def _index_add(g: Tensor, idx, shape: tuple) -> Tensor:
    """Scatter ``g`` into zeros of ``shape`` at ``idx`` (adjoint of indexing)."""
    out = np.zeros(shape)
    np.add.at(out, idx, g.data)
    return _node(out, (g,), lambda gg: (getitem(gg, idx),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def back(g):
        out = []
        for i in range(len(tensors)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(int(bounds[i]), int(bounds[i + 1]))
            out.append(g[tuple(sl)])
        return out

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back)


def pad(a: Tensor, widths: Sequence[tuple]) -> Tensor:
    """Zero-pad; ``widths`` follows ``np.pad``."""
    widths = [tuple(w) for w in widths]
    crop = tuple(slice(lo, lo + s) for (lo, _), s in zip(widths, a.shape))
    if all(lo == 0 and hi == 0 for lo, hi in widths):
        return a
    return _node(np.pad(a.data, widths), (a,), lambda g: (g[crop],))


def l2_norm(a: Tensor, axis: int = 0) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at a zero vector is 0."""
    out = np.sqrt((a.data**2).sum(axis=axis))

    def back(g):
        n = l2_norm(a, axis) if is_grad_enabled() else Tensor(out)
        zero = n.data == 0
        safe = n + Tensor(zero.astype(np.float64))
        scale = (g / safe) * Tensor((~zero).astype(np.float64))
        return (a * _expand(scale, axis, a.shape),)

    return _node(out, (a,), back)


def _expand(t: Tensor, axis: int, shape: tuple) -> Tensor:
    kept = list(shape)
    kept[axis % len(shape)] = 1
    return broadcast_to(reshape(t, tuple(kept)), shape)


# ---------------------------------------------------------------------------
# linear algebra, softmax
# ---------------------------------------------------------------------------


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs 2-D operands, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def back(g):
        ga = sum_to(matmul(g, _swap(b)), a.shape) if a.requires_grad else None
        gb = sum_to(matmul(_swap(a), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _node(np.matmul(a.data, b.data), (a, b), back)


def _swap(t: Tensor) -> Tensor:
    axes = list(range(t.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(t, tuple(axes))


def softmax(x: ArrayLike, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x - Tensor(x.data.max(axis=axis, keepdims=True))
    e = exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: ArrayLike, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x - Tensor(x.data.max(axis=axis, keepdims=True))
    return shifted - log(exp(shifted).sum(axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------


def im2col(x: Tensor, kh: int, kw: int) -> Tensor:
    """(N, C, H, W) -> (N, C*kh*kw, H'*W') patch matrix, stride 1, no padding."""
    n, c, h, w = x.shape
    ho, wo = h - kh + 1, w - kw + 1
    win = np.lib.stride_tricks.sliding_window_view(x.data, (kh, kw), axis=(2, 3))
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)
    src = x.shape
    return _node(cols, (x,), lambda g: (col2im(g, src, kh, kw),))


def col2im(cols: Tensor, shape: tuple, kh: int, kw: int) -> Tensor:
    """Adjoint of :func:`im2col`: overlapping patches are summed."""
    n, c, h, w = shape
    ho, wo = h - kh + 1, w - kw + 1
    g6 = cols.data.reshape(n, c, kh, kw, ho, wo)
    out = np.zeros(shape)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + ho, j : j + wo] += g6[:, :, i, j]
    return _node(out, (cols,), lambda g: (im2col(g, kh, kw),))


def conv2d(x: Tensor, k: Tensor, b: Optional[Tensor] = None, padding: str = "valid") -> Tensor:
    """Stride-1 cross-correlation (no kernel flip).

    ``x`` is (N, C, H, W) or a single (C, H, W) image; ``k`` is (O, C, kh, kw).
    ``padding`` is ``"valid"`` or ``"same"`` (odd kernels only for ``same``).
    """
    x, k = as_tensor(x), as_tensor(k)
    single = x.ndim == 3
    if single:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or k.ndim != 4:
        raise DimensionError(f"conv2d expects (N,C,H,W) and (O,C,kh,kw), got {x.shape} and {k.shape}")
    o, c, kh, kw = k.shape
    if x.shape[1] != c:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs kernel {k.shape}")
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise DimensionError(f"'same' padding needs odd kernel extents, got {k.shape}")
        ph, pw = kh // 2, kw // 2
        x = pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    elif padding != "valid":
        raise ContractError(f"padding must be 'same' or 'valid', got {padding!r}")
    n, _, h, w = x.shape
    if kh > h or kw > w:
        raise DimensionError(f"kernel {k.shape} larger than padded input {x.shape}")
    ho, wo = h - kh + 1, w - kw + 1
    cols = im2col(x, kh, kw)
    out = matmul(reshape(k, (o, c * kh * kw)), cols)
    if b is not None:
        out = out + reshape(as_tensor(b), (o, 1))
    out = reshape(out, (n, o, ho, wo))
    if single:
        out = reshape(out, (o, ho, wo))
    return out


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; trailing rows/cols that do not fill a window are dropped.

    Ties go to the first maximum in row-major window order.
    """
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho == 0 or wo == 0:
        raise DimensionError(f"pool size {size} larger than input {x.shape}")
    if (h, w) != (ho * size, wo * size):
        x = x[:, :, : ho * size, : wo * size]
    win = _windows(x.data, size)
    idx = win.argmax(axis=-1)[..., None]
    return _pool_select(x, idx, size)


def _windows(a: np.ndarray, size: int) -> np.ndarray:
    n, c, h, w = a.shape
    ho, wo = h // size, w // size
    return a.reshape(n, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, size * size)


def _pool_select(x: Tensor, idx: np.ndarray, size: int) -> Tensor:
    out = np.take_along_axis(_windows(x.data, size), idx, axis=-1)[..., 0]
    src = x.shape
    return _node(out, (x,), lambda g: (_pool_scatter(g, idx, size, src),))


def _pool_scatter(g: Tensor, idx: np.ndarray, size: int, shape: tuple) -> Tensor:
    n, c, h, w = shape
    ho, wo = h // size, w // size
    win = np.zeros((n, c, ho, wo, size * size))
    np.put_along_axis(win, idx, g.data[..., None], axis=-1)
    out = win.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(shape)
    return _node(out, (g,), lambda gg: (_pool_select(gg, idx, size),))
