"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation builds a node holding its value and, for each parent, a rule
mapping the output gradient to that parent's gradient contribution.
:func:`backward` walks the graph in reverse topological order.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

GradRule = Callable[[np.ndarray], np.ndarray]


class NonFiniteError(ValueError):
    """Raised when a tensor would hold NaN or Inf."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: Sequence[tuple["Tensor", GradRule]] = ()):
        # op results are fresh arrays or views of read-only arrays; user data is copied
        if _parents and isinstance(data, np.ndarray) and data.dtype == np.float64:
            arr = data
        else:
            arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        arr.flags.writeable = False
        self.data = arr
        self.grad: np.ndarray | None = None
        self.name = name
        # only keep the tape where a gradient can flow
        self._parents = tuple(p for p in _parents if p[0].requires_grad)
        self.requires_grad = requires_grad or bool(self._parents)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float("nan")

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def __len__(self):
        return self.shape[0]

    # arithmetic
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

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __getitem__(self, index):
        return take(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self):
        return sum_all(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(a.data + b.data, _parents=(
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    ))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(a.data - b.data, _parents=(
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(-g, b.shape)),
    ))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(a.data * b.data, _parents=(
        (a, lambda g: _unbroadcast(g * b.data, a.shape)),
        (b, lambda g: _unbroadcast(g * a.data, b.shape)),
    ))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two tensors of identical shape."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"hadamard: shape mismatch {a.shape} vs {b.shape}")
    return mul(a, b)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return Tensor(s, _parents=((x, lambda g: g * s * (1.0 - s)),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return Tensor(t, _parents=((x, lambda g: g * (1.0 - t * t)),))


def activate(x: Tensor, kind: str) -> Tensor:
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return tanh(x)
    raise ValueError(f"unknown activation {kind!r}")


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    return Tensor(e, _parents=((x, lambda g: g * e),))


def square(x: Tensor) -> Tensor:
    return Tensor(x.data * x.data, _parents=((x, lambda g: 2.0 * g * x.data),))


def absolute(x: Tensor) -> Tensor:
    # np.sign(0) == 0 gives the zero subgradient at the kink
    return Tensor(np.abs(x.data), _parents=((x, lambda g: g * np.sign(x.data)),))


# reductions and shape ------------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    return Tensor(x.data.sum(), _parents=((x, lambda g: np.broadcast_to(g, x.shape).copy()),))


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return Tensor(x.data.reshape(shape), _parents=((x, lambda g: g.reshape(x.shape)),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor(x.data.transpose(axes), _parents=((x, lambda g: g.transpose(inverse)),))


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def take(x: Tensor, index) -> Tensor:
    basic = _is_basic(index)

    def rule(g):
        out = np.zeros(x.shape)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return out
    return Tensor(x.data[index], _parents=((x, rule),))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    parents = []
    for k, t in enumerate(tensors):
        parents.append((t, lambda g, k=k: np.take(g, k, axis=axis)))
    return Tensor(np.stack([t.data for t in tensors], axis=axis), _parents=parents)


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return Tensor(np.broadcast_to(x.data, shape),
                  _parents=((x, lambda g: _unbroadcast(g, x.shape)),))


# linear algebra ------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return Tensor(a.data @ b.data, _parents=(
        (a, lambda g: g @ b.data.T),
        (b, lambda g: a.data.T @ g),
    ))


def dense(x: Tensor, w: Tensor, bias: Tensor) -> Tensor:
    """Fully connected layer ``w @ x + bias``.

    ``x`` is either a vector of length K or a batch of shape (B, K); ``w`` is
    (J, K) and ``bias`` is (J,).
    """
    x, w, bias = as_tensor(x), as_tensor(w), as_tensor(bias)
    if w.ndim != 2 or bias.shape != (w.shape[0],) or x.shape[-1] != w.shape[1] or x.ndim > 2:
        raise ValueError(f"dense: shape mismatch x{x.shape} w{w.shape} b{bias.shape}")
    if x.ndim == 1:
        return reshape(dense(reshape(x, (1, -1)), w, bias), (w.shape[0],))
    return add(matmul(x, transpose(w, (1, 0))), bias)


# convolution ---------------------------------------------------------------

def _check_kernel_size(v: int) -> int:
    if v < 1 or v % 2 == 0:
        raise ValueError(f"kernel size must be odd and positive, got {v}")
    return v // 2


def unfold(x: Tensor, v: int) -> Tensor:
    """Zero-padded V x V neighbourhoods.

    (B, C, M, N) -> (B, M, N, C, V, V) where ``out[b, p, q, c, i, j]`` is
    ``x[b, c, p + i - V//2, q + j - V//2]`` or 0 outside the grid.
    """
    r = _check_kernel_size(v)
    if x.ndim != 4:
        raise ValueError(f"unfold expects (B, C, M, N), got {x.shape}")
    b, c, m, n = x.shape
    padded = np.pad(x.data, ((0, 0), (0, 0), (r, r), (r, r)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (v, v), axis=(2, 3))
    out = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5))

    def rule(g):
        g = g.transpose(0, 3, 1, 2, 4, 5)
        acc = np.zeros((b, c, m + 2 * r, n + 2 * r))
        for i in range(v):
            for j in range(v):
                acc[:, :, i:i + m, j:j + n] += g[..., i, j]
        return acc[:, :, r:r + m, r:r + n]

    return Tensor(out, _parents=((x, rule),))


def contract(patches: Tensor, w: Tensor) -> Tensor:
    """Apply kernels to unfolded patches: (B, M, N, C, V, V) x (O, C, V, V) -> (B, O, M, N)."""
    b, m, n, c, v, _ = patches.shape
    o = w.shape[0]
    if w.shape[1:] != (c, v, v):
        raise ValueError(f"kernel {w.shape} does not match patches {patches.shape}")
    p2 = patches.data.reshape(b * m * n, c * v * v)
    w2 = w.data.reshape(o, c * v * v)
    out = (p2 @ w2.T).reshape(b, m, n, o).transpose(0, 3, 1, 2)

    def rule_patches(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(b * m * n, o)
        return (g2 @ w2).reshape(patches.shape)

    def rule_w(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(b * m * n, o)
        return (g2.T @ p2).reshape(w.shape)

    return Tensor(out, _parents=((patches, rule_patches), (w, rule_w)))


def add_channel_bias(y: Tensor, bias: Tensor) -> Tensor:
    return add(y, reshape(bias, (bias.shape[0], 1, 1)))


def _check_conv_shapes(x: Tensor, w: Tensor, bias: Tensor):
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ValueError(f"kernel must be O x I x V x V, got {w.shape}")
    _check_kernel_size(w.shape[2])
    if x.ndim not in (3, 4) or x.shape[-3] != w.shape[1]:
        raise ValueError(f"input {x.shape} does not match kernel {w.shape}")
    if bias.shape != (w.shape[0],):
        raise ValueError(f"bias {bias.shape} does not match kernel {w.shape}")


def conv2d_patches(patches: Tensor, w: Tensor, bias: Tensor) -> Tensor:
    return add_channel_bias(contract(patches, w), bias)


def conv2d(x: Tensor, w: Tensor, bias: Tensor) -> Tensor:
    """Same-size 2-D convolution (cross-correlation) with zero padding.

    ``x`` is (I, M, N) or batched (B, I, M, N); ``w`` is (O, I, V, V).
    """
    x, w, bias = as_tensor(x), as_tensor(w), as_tensor(bias)
    _check_conv_shapes(x, w, bias)
    if x.ndim == 3:
        y = conv2d(reshape(x, (1,) + x.shape), w, bias)
        return reshape(y, y.shape[1:])
    return conv2d_patches(unfold(x, w.shape[2]), w, bias)


# backward ------------------------------------------------------------------

def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack_.append((node, True))
        for parent, _ in reversed(node._parents):
            if id(parent) not in visited:
                stack_.append((parent, False))
    return order


def backward(root: Tensor) -> list[Tensor]:
    """Populate ``.grad`` on every node reachable from a scalar ``root``.

    Returns the reachable leaves that require gradients, in discovery order.
    """
    if root.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    order = _topological_order(root)
    for node in order:
        node.grad = np.zeros(node.shape)
    root.grad = np.ones(root.shape)
    for node in reversed(order):
        for parent, rule in node._parents:
            parent.grad += rule(node.grad)
    return [node for node in order if node.requires_grad and not node._parents]


def zeros(shape, requires_grad=False, name=None) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad, name=name)


def ones(shape, requires_grad=False, name=None) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad, name=name)


def parameters(arrays: Iterable[tuple[str, np.ndarray]]) -> dict[str, Tensor]:
    return {name: Tensor(a, requires_grad=True, name=name) for name, a in arrays}
