"""Dense float32 tensors with define-by-run reverse-mode differentiation.

Every differentiable op executed while gradients are enabled appends a node
to the calling thread's :class:`Tape`. :func:`backward` replays that tape in
reverse (execution order reversed is a valid reverse topological order) and
then clears it, releasing the intermediate buffers held by the closures.

Reductions, matrix products and convolutions accumulate in float64 and round
the result back to float32.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels

DTYPE = np.float32
SOFTPLUS_THRESHOLD = 20.0


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out: "Tensor", parents: tuple["Tensor", ...], backward: Callable):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of executed differentiable ops for one worker."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []

    def record(self, node: _Node) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        for node in self.nodes:
            node.out._node = None
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


_local = threading.local()


def current_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False) -> None:
        arr = np.asarray(data, dtype=DTYPE)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operators -----------------------------------------------------
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __pow__(self, p: float): return power(self, p)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False): return sum_(self, axis, keepdims)
    def mean(self, axis=None, keepdims: bool = False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)
    def transpose(self, *axes): return transpose(self, axes or None)
    def exp(self): return exp(self)
    def log(self): return log(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = _Node(out, tuple(parents), backward)
        current_tape().record(out._node)
    return out


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = current_tape()
    seed = np.ones(loss.shape, dtype=DTYPE)
    if loss._node is None:
        if loss.requires_grad:
            _accumulate_leaf(loss, seed)
        return
    grads: dict[int, np.ndarray] = {id(loss): seed}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        parent_grads = node.backward(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if p._node is None:
                _accumulate_leaf(p, pg)
            else:
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg
    if not retain_graph:
        tape.clear()


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=DTYPE).reshape(t.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)), dtype=np.float64)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True, dtype=np.float64)
    return g.astype(DTYPE).reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise ----------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                              _unbroadcast(g * a.data, b.shape) if b.requires_grad else None))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), bw)


def power(x: Tensor, p: float) -> Tensor:
    p = float(p)
    if p != int(p) and np.any(x.data <= 0):
        raise DomainError("power with a non-integer exponent needs positive inputs")
    out = np.power(x.data, DTYPE(p))
    return _result(out, (x,), lambda g: (g * DTYPE(p) * np.power(x.data, DTYPE(p - 1.0)),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    if np.any(~(x.data > 0)):
        raise DomainError("log of non-positive value")
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    return (0.5 * (1.0 + np.tanh(0.5 * x))).astype(DTYPE)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),))


def silu(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)
    return _result(x.data * s, (x,), lambda g: (g * s * (1.0 + x.data * (1.0 - s)),))


def softplus(x: Tensor) -> Tensor:
    d = x.data
    big = d > SOFTPLUS_THRESHOLD
    out = np.where(big, d, np.log1p(np.exp(np.minimum(d, SOFTPLUS_THRESHOLD)))).astype(DTYPE)
    return _result(out, (x,), lambda g: (g * _sigmoid_np(d),))


def clamp(x: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip to ``[lo, hi]``; gradient passes only where the input was inside."""
    d = x.data
    out = np.clip(d, lo, hi).astype(DTYPE)
    inside = np.ones(d.shape, dtype=bool)
    if lo is not None:
        inside &= d >= lo
    if hi is not None:
        inside &= d <= hi
    return _result(out, (x,), lambda g: (g * inside,))


# -- reductions / linear algebra -----------------------------------------
def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise ShapeError(f"axis {a} out of range for rank {ndim}")
        out.append(a % ndim)
    return tuple(sorted(set(out)))


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims, dtype=np.float64).astype(DTYPE)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).astype(DTYPE),)

    return _result(np.asarray(out), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes, keepdims=keepdims, dtype=np.float64).astype(DTYPE)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return ((np.broadcast_to(g, x.shape) / np.float64(count)).astype(DTYPE),)

    return _result(np.asarray(out), (x,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    a64, b64 = a.data.astype(np.float64), b.data.astype(np.float64)

    def bw(g):
        g64 = g.astype(np.float64)
        return ((g64 @ b64.T).astype(DTYPE) if a.requires_grad else None,
                (a64.T @ g64).astype(DTYPE) if b.requires_grad else None)

    return _result((a64 @ b64).astype(DTYPE), (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape (N, in)."""
    out = matmul(x, transpose(weight))
    return out + bias if bias is not None else out


# -- shape ops ------------------------------------------------------------
def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from None
    return _result(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                   lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        return tuple(np.ascontiguousarray(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis))
                     for i in range(len(tensors)))

    return _result(out, tensors, bw)


def getitem(x: Tensor, idx) -> Tensor:
    out = np.ascontiguousarray(x.data[idx])

    def bw(g):
        full = np.zeros(x.shape, dtype=DTYPE)
        if _is_advanced(idx):
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _result(out, (x,), bw)


def _is_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of the two trailing axes."""
    out = x.data.repeat(factor, axis=-2).repeat(factor, axis=-1)

    def bw(g):
        *lead, h, w = g.shape
        g64 = g.reshape(*lead, h // factor, factor, w // factor, factor).sum(axis=(-3, -1), dtype=np.float64)
        return (g64.astype(DTYPE),)

    return _result(out, (x,), bw)


# -- convolution / normalization -----------------------------------------
def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input (a 3-D input is treated as batch 1)."""
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected NCHW input and OIkk kernel, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, k, k2 = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels but kernel expects {wcin} "
                         f"(input {x.shape}, kernel {weight.shape})")
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square with odd size, got {weight.shape}")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {x.shape} too small for kernel {k} with padding {padding}")

    cols = kernels.im2col(x.data, k, stride, padding)
    w2 = weight.data.reshape(cout, -1).astype(np.float64)
    out = cols @ w2.T
    if bias is not None:
        out += bias.data.astype(np.float64)
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2), dtype=DTYPE)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout).astype(np.float64)
        gx = _conv_input_grad(g, g2, w2, weight.data, (n, cin, h, w), k, stride, padding) \
            if x.requires_grad else None
        gw = (g2.T @ cols).reshape(weight.shape).astype(DTYPE) if weight.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0).astype(DTYPE))
        return tuple(grads)

    res = _result(out, parents, bw)
    return reshape(res, res.shape[1:]) if squeeze else res


def _conv_input_grad(g, g2, w2, wdata, shape, k, stride, padding):
    n, cin, h, w = shape
    cout = wdata.shape[0]
    if stride == 1 and cout < cin and k - 1 - padding >= 0:
        # full correlation with the rotated kernel; column buffer scales with cout, not cin
        wrot = wdata[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(cin, -1).astype(np.float64)
        cols = kernels.im2col(g, k, 1, k - 1 - padding)
        out = (cols @ wrot.T).reshape(n, h, w, cin).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(out, dtype=DTYPE)
    return kernels.col2im(g2 @ w2, (n, cin, h, w), k, stride, padding)


def group_norm(x: Tensor, groups: int, weight: Tensor | None = None,
               bias: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalize each (sample, channel-group) to zero mean / unit variance."""
    if eps <= 0:
        raise DomainError("group_norm eps must be positive")
    if x.ndim < 2:
        raise ShapeError(f"group_norm needs (N, C, ...) input, got {x.shape}")
    n, c = x.shape[:2]
    if groups < 1 or c % groups:
        raise ShapeError(f"group_norm: {groups} groups do not divide {c} channels")
    xg = x.data.reshape(n, groups, -1).astype(np.float64)
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=2, keepdims=True) + eps)
    xhat = xc * inv
    cshape = (1, c) + (1,) * (x.ndim - 2)
    xhat_full = xhat.reshape(x.shape)
    out = xhat_full
    if weight is not None:
        out = out * weight.data.astype(np.float64).reshape(cshape)
    if bias is not None:
        out = out + bias.data.astype(np.float64).reshape(cshape)
    parents = [x] + [t for t in (weight, bias) if t is not None]
    red_axes = (0,) + tuple(range(2, x.ndim))

    def bw(g):
        g64 = g.astype(np.float64)
        dxhat = g64 * weight.data.astype(np.float64).reshape(cshape) if weight is not None else g64
        d = dxhat.reshape(n, groups, -1)
        gx = inv * (d - d.mean(axis=2, keepdims=True) - xhat * (d * xhat).mean(axis=2, keepdims=True))
        grads = [gx.reshape(x.shape).astype(DTYPE)]
        if weight is not None:
            grads.append((g64 * xhat_full).sum(axis=red_axes).astype(DTYPE))
        if bias is not None:
            grads.append(g64.sum(axis=red_axes).astype(DTYPE))
        return tuple(grads)

    return _result(out.astype(DTYPE), parents, bw)


# -- constructors ---------------------------------------------------------
def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=DTYPE), requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=DTYPE), requires_grad)


def ones_like(x: Tensor) -> Tensor:
    return ones(x.shape)


def randn(rng: np.random.Generator, shape, scale: float = 1.0, requires_grad: bool = False) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad)


def parameters_checksum(arrays: Iterable[np.ndarray]) -> str:
    import hashlib

    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype=DTYPE).tobytes())
    return h.hexdigest()
