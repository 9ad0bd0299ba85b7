"""Small reverse-mode autodiff engine over channels-last numpy arrays.

Every op returns a new :class:`Tensor`; when any input requires a gradient
the result remembers its parents and a closure mapping the output gradient
to per-parent gradients. :func:`backward` walks that tape once in reverse
topological order.

Layouts are channels-last throughout: images are ``(B, H, W, C)``, clips are
``(B, T, H, W, C)``, kernels are ``(*spatial, Cin, Cout)``.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

_DTYPE: type = np.float32


@contextlib.contextmanager
def accumulation(dtype) -> Iterator[None]:
    """Temporarily switch the storage/accumulation dtype of new tensors.

    ``float64`` is meant for oracle checks such as finite differences.
    """
    global _DTYPE
    prev = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = prev


def default_dtype() -> type:
    return _DTYPE


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

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
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), scale(self, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and shape ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(data, (a, b), back, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(data, (a, b), back, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    data = a.data * a.data.dtype.type(c)

    def back(g):
        return (g * g.dtype.type(c),)

    return _result(data, (a,), back, "scale")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    data = a.data.reshape(shape)
    if math.prod(data.shape) != a.size:
        raise ValueError(f"cannot reshape {a.shape} into {tuple(shape)}")

    def back(g):
        return (g.reshape(a.shape),)

    return _result(data, (a,), back, "reshape")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + sizes)

    def back(g):
        index = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index[axis] = slice(lo, hi)
            out.append(g[tuple(index)])
        return out

    return _result(data, tensors, back, "concat")


def mean(a: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:
    """Mean over ``axis`` (all axes when None), dropping reduced axes."""
    data = a.data.mean(axis=axis)
    axes = tuple(range(a.ndim)) if axis is None else tuple(np.atleast_1d(axis) % a.ndim)
    count = math.prod(a.shape[i] for i in axes)

    def back(g):
        g = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(g / g.dtype.type(count), a.shape).copy(),)

    return _result(np.asarray(data, dtype=a.data.dtype), (a,), back, "mean")


def total(a: Tensor) -> Tensor:
    data = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def back(g):
        return (np.full(a.shape, g, dtype=a.data.dtype),)

    return _result(data, (a,), back, "sum")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in [0, 1), got {slope}")
    s = x.data.dtype.type(slope)
    mask = x.data > 0
    data = np.where(mask, x.data, x.data * s)

    def back(g):
        return (np.where(mask, g, g * s),)

    return _result(data, (x,), back, "leaky_relu")


def sigmoid(x: Tensor) -> Tensor:
    # tanh form avoids exp overflow for large |x|
    half = x.data.dtype.type(0.5)
    data = half * (np.tanh(x.data * half) + 1)

    def back(g):
        return (g * data * (1 - data),)

    return _result(data, (x,), back, "sigmoid")


def matmul(x: Tensor, w: Tensor) -> Tensor:
    data = x.data @ w.data

    def back(g):
        return g @ w.data.T, x.data.T @ g

    return _result(data, (x, w), back, "matmul")


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Fully connected layer on ``(B, F)`` inputs with a ``(F, O)`` weight."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ValueError(f"dense: input {x.shape} does not match weight {w.shape}")
    out = matmul(x, w)
    return out if b is None else add(out, b)


# ---------------------------------------------------------------------------
# losses


def mse(x: Tensor, xhat: Tensor) -> Tensor:
    """Mean squared difference over every element."""
    x, xhat = _as_tensor(x), _as_tensor(xhat)
    if x.shape != xhat.shape:
        raise ValueError(f"mse: shape mismatch {x.shape} vs {xhat.shape}")
    diff = x.data - xhat.data
    n = diff.size
    data = np.asarray(np.mean(diff * diff), dtype=diff.dtype)

    def back(g):
        gd = diff * (2 * g / diff.dtype.type(n))
        return gd, -gd

    return _result(data, (x, xhat), back, "mse")


def bce(p: Tensor, y, eps: float = 1e-7) -> Tensor:
    """Mean binary cross-entropy of probabilities ``p`` against targets ``y``."""
    y = _as_tensor(y)
    if p.shape != y.shape:
        raise ValueError(f"bce: shape mismatch {p.shape} vs {y.shape}")
    pc = np.clip(p.data, eps, 1 - eps)
    n = pc.size
    data = np.asarray(-np.mean(y.data * np.log(pc) + (1 - y.data) * np.log1p(-pc)), dtype=pc.dtype)

    def back(g):
        inside = (p.data > eps) & (p.data < 1 - eps)
        gp = g * (pc - y.data) / (pc * (1 - pc)) / pc.dtype.type(n)
        gy = g * (np.log1p(-pc) - np.log(pc)) / pc.dtype.type(n)
        return np.where(inside, gp, 0), gy

    return _result(data, (p, y), back, "bce")


# ---------------------------------------------------------------------------
# convolution family


def _tuple(v, n: int, what: str) -> tuple[int, ...]:
    t = (v,) * n if isinstance(v, (int, np.integer)) else tuple(int(i) for i in v)
    if len(t) != n:
        raise ValueError(f"{what} needs {n} entries, got {t}")
    return t


def conv_geometry(spatial, ksize, stride, dilation, padding):
    """Output extent and per-axis (before, after) padding for one convolution."""
    out, pads = [], []
    for size, k, s, d in zip(spatial, ksize, stride, dilation):
        span = (k - 1) * d + 1
        if padding == "same":
            n = -(-size // s)
            extra = max((n - 1) * s + span - size, 0)
            # odd padding puts the spare cell at the trailing edge
            pads.append((extra // 2, extra - extra // 2))
        elif padding == "valid":
            if span > size:
                raise ValueError(f"kernel extent {span} exceeds input extent {size}")
            n = (size - span) // s + 1
            pads.append((0, 0))
        else:
            raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
        out.append(n)
    return tuple(out), tuple(pads)


def _tap_index(tap, stride, dilation, out_shape):
    return (slice(None),) + tuple(
        slice(t * d, t * d + (n - 1) * s + 1, s)
        for t, s, d, n in zip(tap, stride, dilation, out_shape)
    )


_CHUNK_BYTES = 4 << 20


class _Conv:
    """Geometry and the three numeric kernels shared by conv and its transpose."""

    def __init__(self, in_shape, kernel_shape, stride, dilation, padding):
        nd = len(kernel_shape) - 2
        self.nd = nd
        self.ksize = tuple(kernel_shape[:nd])
        self.stride = _tuple(stride, nd, "stride")
        self.dilation = _tuple(dilation, nd, "dilation")
        if min(self.stride) < 1 or min(self.dilation) < 1:
            raise ValueError("stride and dilation must be positive")
        self.in_spatial = tuple(in_shape[1 : 1 + nd])
        self.out_spatial, self.pads = conv_geometry(
            self.in_spatial, self.ksize, self.stride, self.dilation, padding
        )
        self.padded = tuple(n + a + b for n, (a, b) in zip(self.in_spatial, self.pads))
        self.taps = list(itertools.product(*(range(k) for k in self.ksize)))

    def index(self, tap):
        return _tap_index(tap, self.stride, self.dilation, self.out_spatial)

    def pad(self, x: np.ndarray) -> np.ndarray:
        if not any(a or b for a, b in self.pads):
            return x
        return np.pad(x, ((0, 0),) + self.pads + ((0, 0),))

    def unpad(self, x: np.ndarray) -> np.ndarray:
        idx = (slice(None),) + tuple(slice(a, a + n) for (a, _), n in zip(self.pads, self.in_spatial))
        return x[idx]

    def columns(self, x: np.ndarray) -> np.ndarray:
        """im2col: (M, taps * Cin) patch matrix, one row per output position."""
        b, cin = x.shape[0], x.shape[-1]
        xp = self.pad(x)
        cols = np.empty((b,) + self.out_spatial + (len(self.taps), cin), dtype=x.dtype)
        for i, tap in enumerate(self.taps):
            cols[..., i, :] = xp[self.index(tap)]
        return cols.reshape(b * math.prod(self.out_spatial), -1)

    def batches(self, b: int, cin: int):
        # keep each patch matrix around a few MB so it stays cache-resident
        per_sample = math.prod(self.out_spatial) * len(self.taps) * cin * 8
        step = max(1, _CHUNK_BYTES // max(per_sample, 1))
        return [slice(lo, min(lo + step, b)) for lo in range(0, b, step)]

    def forward(self, x: np.ndarray, w: np.ndarray) -> np.ndarray:
        b, cout = x.shape[0], w.shape[-1]
        wm = w.reshape(-1, cout)
        out = np.empty((b,) + self.out_spatial + (cout,), dtype=np.result_type(x, w))
        for sl in self.batches(b, x.shape[-1]):
            out[sl] = (self.columns(x[sl]) @ wm).reshape((-1,) + self.out_spatial + (cout,))
        return out

    def input_grad(self, g: np.ndarray, w: np.ndarray) -> np.ndarray:
        b, cout = g.shape[0], g.shape[-1]
        cin = w.shape[-2]
        if cout < cin and all(s == 1 for s in self.stride):
            # full correlation of g with the flipped, channel-transposed kernel
            spans = [(k - 1) * d for k, d in zip(self.ksize, self.dilation)]
            gp = np.pad(g, ((0, 0),) + tuple((e, e) for e in spans) + ((0, 0),))
            flipped = np.swapaxes(w[(slice(None, None, -1),) * self.nd], -1, -2)
            full = _Conv(gp.shape, flipped.shape, 1, self.dilation, "valid")
            return self.unpad(full.forward(gp, np.ascontiguousarray(flipped)))
        wt = w.reshape(-1, cout).T
        gxp = np.zeros((b,) + self.padded + (cin,), dtype=g.dtype)
        for sl in self.batches(b, cin):
            gcols = (g[sl].reshape(-1, cout) @ wt).reshape(
                (-1,) + self.out_spatial + (len(self.taps), cin))
            part = gxp[sl]
            for i, tap in enumerate(self.taps):
                part[self.index(tap)] += gcols[..., i, :]
        return self.unpad(gxp)

    def kernel_grad(self, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        cout = g.shape[-1]
        gw = np.zeros((len(self.taps) * x.shape[-1], cout), dtype=np.result_type(x, g))
        for sl in self.batches(x.shape[0], x.shape[-1]):
            gw += self.columns(x[sl]).T @ g[sl].reshape(-1, cout)
        return gw.reshape(self.ksize + (x.shape[-1], cout))


def _check_conv_args(x: Tensor, w: Tensor, nd: int, name: str):
    if x.ndim != nd + 2 or w.ndim != nd + 2:
        raise ValueError(
            f"{name}: expected input rank {nd + 2} and kernel rank {nd + 2}, "
            f"got input {x.shape} and kernel {w.shape}"
        )
    if x.shape[-1] != w.shape[-2]:
        raise ValueError(
            f"{name}: input channels {x.shape[-1]} do not match kernel input channels "
            f"{w.shape[-2]} (input {x.shape}, kernel {w.shape})"
        )


def conv(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, dilation=1,
         padding: str = "same") -> Tensor:
    """N-d cross-correlation, channels-last, with optional per-channel bias."""
    nd = w.ndim - 2
    _check_conv_args(x, w, nd, f"conv{nd}d")
    geo = _Conv(x.shape, w.shape, stride, dilation, padding)
    data = geo.forward(x.data, w.data)
    if b is not None:
        data += b.data

    def back(g):
        gx = geo.input_grad(g, w.data) if x.requires_grad else None
        gw = geo.kernel_grad(x.data, g) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.reshape(-1, g.shape[-1]).sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return _result(data, parents, back, f"conv{nd}d")


def conv2d(x, w, b=None, stride=1, dilation=1, padding="same") -> Tensor:
    if w.ndim != 4:
        raise ValueError(f"conv2d: kernel must be (kh, kw, Cin, Cout), got {w.shape}")
    return conv(x, w, b, stride, dilation, padding)


def conv3d(x, w, b=None, stride=1, dilation=1, padding="same") -> Tensor:
    if w.ndim != 5:
        raise ValueError(f"conv3d: kernel must be (kt, kh, kw, Cin, Cout), got {w.shape}")
    return conv(x, w, b, stride, dilation, padding)


def conv_transpose(y: Tensor, w: Tensor, in_spatial: Sequence[int], stride=1, dilation=1,
                   padding: str = "same") -> Tensor:
    """Adjoint of :func:`conv` with respect to its input.

    ``in_spatial`` is the spatial extent of the conv input being mapped back
    to; it is needed because strided convolutions lose it.
    """
    nd = w.ndim - 2
    if y.ndim != nd + 2 or y.shape[-1] != w.shape[-1]:
        raise ValueError(
            f"conv_transpose: output-side tensor {y.shape} does not match kernel {w.shape}"
        )
    in_shape = (y.shape[0],) + tuple(in_spatial) + (w.shape[-2],)
    geo = _Conv(in_shape, w.shape, stride, dilation, padding)
    if geo.out_spatial != tuple(y.shape[1:-1]):
        raise ValueError(
            f"conv_transpose: {y.shape} is not a conv output of spatial extent {tuple(in_spatial)}"
        )
    data = geo.input_grad(y.data, w.data)

    def back(g):
        gy = geo.forward(g, w.data) if y.requires_grad else None
        gw = geo.kernel_grad(g, y.data) if w.requires_grad else None
        return gy, gw

    return _result(data, (y, w), back, f"conv_transpose{nd}d")


def conv_transpose2d(y, w, in_spatial, stride=1, dilation=1, padding="same") -> Tensor:
    return conv_transpose(y, w, in_spatial, stride, dilation, padding)


def upsample_nearest(x: Tensor, factor) -> Tensor:
    """Repeat every spatial cell ``factor`` times along each spatial axis."""
    nd = x.ndim - 2
    f = _tuple(factor, nd, "factor")
    if min(f) < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    data = x.data
    for axis, k in enumerate(f, start=1):
        if k > 1:
            data = np.repeat(data, k, axis=axis)

    def back(g):
        shape = [x.shape[0]]
        for n, k in zip(x.shape[1:-1], f):
            shape += [n, k]
        shape.append(x.shape[-1])
        return (g.reshape(shape).sum(axis=tuple(range(2, 2 * nd + 1, 2))),)

    return _result(np.ascontiguousarray(data), (x,), back, "upsample_nearest")


# ---------------------------------------------------------------------------
# reverse pass


def _topological(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params: Mapping[str, Tensor] | Iterable[Tensor] | None = None):
    """Propagate d(loss)/d(node) through the tape.

    Leaves that require grad get ``.grad`` set. When ``params`` is given the
    gradients are also returned in the same container shape (dict or list),
    with zeros for parameters the loss does not reach.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topological(loss)
    for node in order:
        if node._backward is None:
            node.grad = None
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg

    if params is None:
        return None
    on_tape = {id(node) for node in order}

    def grad_of(t: Tensor) -> np.ndarray:
        if id(t) in on_tape and t.grad is not None:
            return t.grad
        return np.zeros_like(t.data)

    if isinstance(params, Mapping):
        return {k: grad_of(t) for k, t in params.items()}
    return [grad_of(t) for t in params]
