"""Dense float64 tensors with define-by-run reverse-mode autodiff.

Every backward rule is written in terms of tensor ops, so gradients can be
recorded and differentiated again (``create_graph=True``). Score matching
needs that to push a Jacobian trace back into the parameters.
"""

from __future__ import annotations

import contextlib
import threading
import warnings
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "DisconnectedInputWarning",
    "no_grad",
    "enable_grad",
    "is_grad_enabled",
    "tensor",
    "grad",
    "grad_wrt_input",
    "add",
    "sub",
    "neg",
    "mul",
    "div",
    "scalar_mul",
    "add_scalar",
    "matmul",
    "exp",
    "log",
    "relu",
    "sigmoid",
    "tanh",
    "square",
    "sum",
    "mean",
    "expand",
    "reshape",
    "transpose",
    "index",
    "scatter",
    "concat",
    "logsumexp",
    "softmax",
    "log_softmax",
    "cross_entropy_soft",
    "bias_add",
    "conv2d",
    "conv_transpose2d",
]


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class DisconnectedInputWarning(UserWarning):
    """Requested gradient for a tensor that does not feed the output."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def _grad_mode(enabled: bool):
    prev = is_grad_enabled()
    _state.enabled = enabled
    try:
        yield
    finally:
        _state.enabled = prev


def no_grad():
    """Context manager that stops graph recording on this thread."""
    return _grad_mode(False)


def enable_grad():
    return _grad_mode(True)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.op = "leaf"

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64)
        out.grad = None
        out.op = op
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- introspection -------------------------------------------------
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
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg}, op={self.op})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add_scalar(self, other) if _is_number(other) else add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add_scalar(self, -other) if _is_number(other) else sub(self, other)

    def __rsub__(self, other):
        return add_scalar(neg(self), other)

    def __mul__(self, other):
        return scalar_mul(self, other) if _is_number(other) else mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return scalar_mul(self, 1.0 / other) if _is_number(other) else div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self)

    def backward(self, create_graph: bool = False) -> None:
        backward(self, create_graph=create_graph)


def _is_number(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _lift_scalar(a: Tensor, b: Tensor, op: str):
    """Expand a 0-d operand against the other one; anything else must match."""
    if a.shape == b.shape:
        return a, b
    if a.ndim == 0:
        return expand(reshape(a, (1,) * b.ndim), b.shape), b
    if b.ndim == 0:
        return a, expand(reshape(b, (1,) * a.ndim), a.shape)
    raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        a, b = _lift_scalar(a, b, "add")
    return Tensor._from_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        a, b = _lift_scalar(a, b, "sub")
    return Tensor._from_op(a.data - b.data, (a, b), lambda g: (g, neg(g)), "sub")


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, (a,), lambda g: (neg(g),), "neg")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        a, b = _lift_scalar(a, b, "mul")
    return Tensor._from_op(a.data * b.data, (a, b), lambda g: (mul(g, b), mul(g, a)), "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        a, b = _lift_scalar(a, b, "div")
    out_data = a.data / b.data

    def bw(g):
        ga = div(g, b)
        return ga, neg(div(mul(ga, a), b))

    return Tensor._from_op(out_data, (a, b), bw, "div")


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor._from_op(a.data * c, (a,), lambda g: (scalar_mul(g, c),), "scalar_mul")


def add_scalar(a: Tensor, c: float) -> Tensor:
    return Tensor._from_op(a.data + float(c), (a,), lambda g: (g,), "add_scalar")


def square(a: Tensor) -> Tensor:
    return Tensor._from_op(a.data * a.data, (a,), lambda g: (scalar_mul(mul(g, a), 2.0),), "square")


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)
    out: Tensor

    def bw(g):
        return (mul(g, out),)

    out = Tensor._from_op(out_data, (a,), bw, "exp")
    return out


def log(a: Tensor) -> Tensor:
    return Tensor._from_op(np.log(a.data), (a,), lambda g: (div(g, a),), "log")


def relu(a: Tensor) -> Tensor:
    mask = (a.data > 0).astype(np.float64)
    return Tensor._from_op(a.data * mask, (a,), lambda g: (mul(g, Tensor(mask)),), "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(-np.abs(x))
    out_data = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    out: Tensor

    def bw(g):
        return (mul(g, mul(out, add_scalar(neg(out), 1.0))),)

    out = Tensor._from_op(out_data, (a,), bw, "sigmoid")
    return out


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)
    out: Tensor

    def bw(g):
        return (mul(g, add_scalar(neg(square(out)), 1.0)),)

    out = Tensor._from_op(out_data, (a,), bw, "tanh")
    return out


# ---------------------------------------------------------------------------
# shape and reduction
# ---------------------------------------------------------------------------


def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out_data = a.data.sum(axis=axes, keepdims=keepdims)
    kd_shape = tuple(1 if i in axes else s for i, s in enumerate(a.shape))
    in_shape = a.shape

    def bw(g):
        return (expand(reshape(g, kd_shape), in_shape),)

    return Tensor._from_op(out_data, (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return scalar_mul(sum(a, axes, keepdims), 1.0 / n)


def expand(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Repeat size-1 axes of ``a`` up to ``shape`` (same rank required)."""
    shape = tuple(shape)
    if a.ndim != len(shape) or any(s != t and s != 1 for s, t in zip(a.shape, shape)):
        raise ShapeError(f"expand: cannot expand {a.shape} to {shape}")
    axes = tuple(i for i, (s, t) in enumerate(zip(a.shape, shape)) if s != t)
    out_data = np.broadcast_to(a.data, shape).copy()
    if not axes:
        return Tensor._from_op(out_data, (a,), lambda g: (g,), "expand")
    return Tensor._from_op(out_data, (a,), lambda g: (sum(g, axes, keepdims=True),), "expand")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    in_shape = a.shape
    try:
        out_data = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return Tensor._from_op(out_data, (a,), lambda g: (reshape(g, in_shape),), "reshape")


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._from_op(a.data.transpose(axes), (a,), lambda g: (transpose(g, inv),), "transpose")


def _has_array(key) -> bool:
    key = key if isinstance(key, tuple) else (key,)
    return any(isinstance(k, (np.ndarray, list)) for k in key)


def index(a: Tensor, key) -> Tensor:
    """``a[key]``; the gradient scatters back with accumulation."""
    in_shape = a.shape
    return Tensor._from_op(a.data[key], (a,), lambda g: (scatter(g, key, in_shape),), "index")


def scatter(a: Tensor, key, shape: Sequence[int]) -> Tensor:
    """Zeros of ``shape`` with ``a`` added at ``key`` (repeated indices accumulate)."""
    out_data = np.zeros(tuple(shape))
    if _has_array(key):
        np.add.at(out_data, key, a.data)
    else:
        out_data[key] = a.data
    return Tensor._from_op(out_data, (a,), lambda g: (index(g, key),), "scatter")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: nothing to concatenate")
    ref = tensors[0]
    axis = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            i != axis and s != r for i, (s, r) in enumerate(zip(t.shape, ref.shape))
        ):
            raise ShapeError(f"concat: shape mismatch {ref.shape} vs {t.shape} along axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)

    def bw(g):
        pre = (slice(None),) * axis
        return tuple(index(g, pre + (slice(int(lo), int(hi)),)) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return Tensor._from_op(out_data, tensors, bw, "concat")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D product or batched product with identical leading dimensions."""
    a, b = _as_tensor(a), _as_tensor(b)
    if (
        a.ndim < 2
        or a.ndim != b.ndim
        or a.shape[:-2] != b.shape[:-2]
        or a.shape[-1] != b.shape[-2]
    ):
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    nd = a.ndim
    swap = tuple(range(nd - 2)) + (nd - 1, nd - 2)

    def bw(g):
        return matmul(g, transpose(b, swap)), matmul(transpose(a, swap), g)

    return Tensor._from_op(a.data @ b.data, (a, b), bw, "matmul")


# ---------------------------------------------------------------------------
# composites
# ---------------------------------------------------------------------------


def logsumexp(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    # the shift is a constant, so it drops out of the gradient
    m = Tensor(np.max(a.data, axis=axis, keepdims=True))
    shifted = sub(a, expand(m, a.shape))
    out = add(log(sum(exp(shifted), axis, keepdims=True)), m)
    if keepdims:
        return out
    return reshape(out, tuple(s for i, s in enumerate(a.shape) if i != axis % a.ndim))


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    return sub(a, expand(logsumexp(a, axis, keepdims=True), a.shape))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    return exp(log_softmax(a, axis))


def cross_entropy_soft(logits: Tensor, target) -> Tensor:
    """Mean over rows of ``-sum_c target_c * log softmax(logits)_c``."""
    target = _as_tensor(target)
    _same_shape(logits, target, "cross_entropy_soft")
    per_row = neg(sum(mul(target, log_softmax(logits, -1)), -1))
    return mean(per_row)


def bias_add(x: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """Add a vector ``b`` along ``axis`` of ``x``."""
    axis = axis % x.ndim
    if b.shape != (x.shape[axis],):
        raise ShapeError(f"bias_add: bias shape {b.shape} does not match axis {axis} of {x.shape}")
    view = tuple(x.shape[axis] if i == axis else 1 for i in range(x.ndim))
    return add(x, expand(reshape(b, view), x.shape))


def _im2col_index(c: int, h: int, w: int, k: int, stride: int):
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    ci, ki, kj = np.meshgrid(np.arange(c), np.arange(k), np.arange(k), indexing="ij")
    oi, oj = np.meshgrid(np.arange(ho), np.arange(wo), indexing="ij")
    rows = ki.reshape(-1, 1) + stride * oi.reshape(1, -1)
    cols = kj.reshape(-1, 1) + stride * oj.reshape(1, -1)
    chan = np.broadcast_to(ci.reshape(-1, 1), rows.shape)
    return chan, rows, cols, ho, wo


def _pad(x: Tensor, padding: int) -> Tensor:
    if padding == 0:
        return x
    n, c, h, w = x.shape
    key = (slice(None), slice(None), slice(padding, padding + h), slice(padding, padding + w))
    return scatter(x, key, (n, c, h + 2 * padding, w + 2 * padding))


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (N, C, H, W) with square kernels ``w`` (F, C, k, k)."""
    if stride not in (1, 2):
        raise ValueError(f"conv2d: stride must be 1 or 2, got {stride}")
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: shape mismatch {x.shape} vs {w.shape}")
    n, c, h, wd = x.shape
    f, _, k, _ = w.shape
    xp = _pad(x, padding)
    chan, rows, cols, ho, wo = _im2col_index(c, h + 2 * padding, wd + 2 * padding, k, stride)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {xp.shape}")
    patches = index(xp, (slice(None), chan, rows, cols))  # (N, C*k*k, L)
    flat = reshape(transpose(patches, (0, 2, 1)), (n * ho * wo, c * k * k))
    out = matmul(flat, transpose(reshape(w, (f, c * k * k))))  # (N*L, F)
    if b is not None:
        out = bias_add(out, b, -1)
    return reshape(transpose(reshape(out, (n, ho * wo, f)), (0, 2, 1)), (n, f, ho, wo))


def conv_transpose2d(
    x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, padding: int = 0
) -> Tensor:
    """Adjoint of :func:`conv2d`; ``w`` is (C_in, C_out, k, k).

    Output side is ``(H - 1) * stride - 2 * padding + k``.
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv_transpose2d: shape mismatch {x.shape} vs {w.shape}")
    n, cin, h, wd = x.shape
    _, cout, k, _ = w.shape
    hp = (h - 1) * stride + k
    wp = (wd - 1) * stride + k
    chan, rows, cols, ho, wo = _im2col_index(cout, hp, wp, k, stride)
    assert (ho, wo) == (h, wd)
    flat = reshape(transpose(x, (0, 2, 3, 1)), (n * h * wd, cin))
    colmat = matmul(flat, reshape(w, (cin, cout * k * k)))  # (N*L, Cout*k*k)
    patches = transpose(reshape(colmat, (n, h * wd, cout * k * k)), (0, 2, 1))
    full = scatter(patches, (slice(None), chan, rows, cols), (n, cout, hp, wp))
    out = index(full, (slice(None), slice(None), slice(padding, hp - padding), slice(padding, wp - padding)))
    if b is not None:
        out = bias_add(out, b, 1)
    return out


# ---------------------------------------------------------------------------
# engine
# ---------------------------------------------------------------------------


def _toposort(root: Tensor) -> list:
    order: list = []
    seen: set = set()
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _propagate(root: Tensor, wanted: Optional[set], create_graph: bool) -> dict:
    """Return {id: gradient Tensor} for leaves (``wanted is None``) or the wanted ids."""
    if root.size != 1:
        raise ShapeError(f"backward: root must be a scalar, got shape {root.shape}")
    result: dict = {}
    if not root.requires_grad:
        return result
    order = _toposort(root)
    grads = {id(root): Tensor(np.ones_like(root.data))}
    with _grad_mode(create_graph):
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if (wanted is None and node.is_leaf) or (wanted is not None and id(node) in wanted):
                result[id(node)] = g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else add(prev, pg)
    return result


def backward(root: Tensor, create_graph: bool = False) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
    order_leaves = {id(t): t for t in _toposort(root) if t.is_leaf} if root.requires_grad else {}
    grads = _propagate(root, None, create_graph)
    for key, g in grads.items():
        leaf = order_leaves[key]
        leaf.grad = g.data.copy() if leaf.grad is None else leaf.grad + g.data


def grad(root: Tensor, inputs: Sequence[Tensor], create_graph: bool = False) -> list:
    """Gradients of scalar ``root`` w.r.t. ``inputs`` without touching any ``.grad``.

    Inputs that do not feed ``root`` get zeros and a :class:`DisconnectedInputWarning`.
    """
    got = _propagate(root, {id(t) for t in inputs}, create_graph)
    out = []
    for t in inputs:
        g = got.get(id(t))
        if g is None:
            warnings.warn(
                f"input of shape {t.shape} does not contribute to the output; returning zeros",
                DisconnectedInputWarning,
                stacklevel=2,
            )
            g = Tensor(np.zeros_like(t.data))
        out.append(g)
    return out


def grad_wrt_input(output: Tensor, x: Tensor) -> Tensor:
    """d(output)/dx as a constant tensor; parameter ``.grad`` buffers stay untouched."""
    with warnings.catch_warnings():
        warnings.simplefilter("always", DisconnectedInputWarning)
        (g,) = grad(output, [x])
    return g.detach()


def parameters_of(root: Tensor) -> Iterable[Tensor]:
    return [t for t in _toposort(root) if t.is_leaf]
