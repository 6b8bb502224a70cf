"""Dense-tensor engine with reverse-mode differentiation.

Just enough machinery for a small masked U-Net and its loss stack: NCHW
convolution (im2col backed), nearest-neighbor upsampling, average pooling,
the usual elementwise operations, full reductions, and batched matmul.
Gradients are accumulated by a topological sweep from a scalar root.

Values live in numpy arrays. float32 is the working precision for training;
gradient verification against finite differences should be run in float64,
where central differences are actually trustworthy. An operation that
produces NaN or Inf raises :class:`~hdrmask.errors.NumericError` instead of
letting the poison spread.

Tensors are treated as immutable once produced; the trainer mutates
parameter ``data`` in place only between optimization steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError, GraphError, NumericError

DEFAULT_DTYPE = np.float32

_FLOAT_DTYPES = (np.float32, np.float64)


def _as_float_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in _FLOAT_DTYPES:
        return arr
    return arr.astype(DEFAULT_DTYPE)


def _first_bad_coord(arr):
    bad = ~np.isfinite(arr)
    idx = np.argwhere(bad)
    return tuple(int(i) for i in idx[0])


def _require_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op} produced a non-finite value at index {_first_bad_coord(arr)}")


class Tensor:
    """A numpy array plus the bookkeeping for reverse-mode differentiation.

    Leaves are parameters (``requires_grad=True``) or constants; interior
    nodes remember their parents and a closure that maps the output gradient
    to parent gradients. ``grad`` is materialized lazily by :func:`backward`.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_vjp")

    # Let `ndarray <op> Tensor` fall through to our reflected operators.
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        self.data = _as_float_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    def item(self):
        return float(self.data.reshape(()))

    def detach(self):
        """The value as a plain array, severed from the graph."""
        return self.data

    def zero_grad(self):
        self.grad = None

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other, self.dtype))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _lift(other, self.dtype))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_lift(other, self.dtype)))

    def __rsub__(self, other):
        return add(_lift(other, self.dtype), neg(self))

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("tensor/tensor division is not a registered operation")
        return mul(self, _lift(1.0 / other, self.dtype))

    def __getitem__(self, key):
        return getitem(self, key)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def abs(self):
        return absolute(self)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def backward(self, parameters=()):
        backward(self, parameters)


def parameter(data, name=None, dtype=None):
    return Tensor(data, requires_grad=True, name=name, dtype=dtype)


def constant(data, name=None, dtype=None):
    return Tensor(data, requires_grad=False, name=name, dtype=dtype)


def _lift(value, dtype):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _node(data, parents, vjp):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise ---------------------------------------------------------


def add(a, b):
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _node(out, (a, b), vjp)


def mul(a, b):
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return _node(out, (a, b), vjp)


def neg(a):
    return _node(-a.data, (a,), lambda g: (-g,))


def exp(a):
    out = np.exp(a.data)
    _require_finite(out, "exp")
    return _node(out, (a,), lambda g: (g * out,))


def log(a):
    if np.any(a.data <= 0):
        raise NumericError(f"log of non-positive value at index {tuple(int(i) for i in np.argwhere(a.data <= 0)[0])}")
    out = np.log(a.data)
    return _node(out, (a,), lambda g: (g / a.data,))


def absolute(a):
    # Subgradient 0 at the kink.
    return _node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def activation(a, kind="relu", slope=0.2):
    """Elementwise relu / leaky_relu(slope) / identity."""
    if kind == "identity":
        return a
    if kind == "relu":
        out = np.maximum(a.data, 0)
        return _node(out, (a,), lambda g: (g * (a.data > 0).astype(a.data.dtype),))
    if kind == "leaky_relu":
        factor = np.where(a.data > 0, a.data.dtype.type(1.0), a.data.dtype.type(slope))
        return _node(a.data * factor, (a,), lambda g: (g * factor,))
    raise ContractError(f"unknown activation kind {kind!r}")


def relu(a):
    return activation(a, "relu")


def leaky_relu(a, slope=0.2):
    return activation(a, "leaky_relu", slope)


# -- reductions and shape ops --------------------------------------------


def tsum(a):
    out = np.asarray(a.data.sum(), dtype=a.data.dtype)
    return _node(out, (a,), lambda g: (np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=False),))


def tmean(a):
    n = a.data.size
    out = np.asarray(a.data.mean(), dtype=a.data.dtype)

    def vjp(g):
        return (np.broadcast_to(g / n, a.data.shape).astype(a.data.dtype, copy=False),)

    return _node(out, (a,), vjp)


def reshape(a, shape):
    out = a.data.reshape(shape)
    return _node(out, (a,), lambda g: (g.reshape(a.data.shape),))


def transpose(a, axes):
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def getitem(a, key):
    out = a.data[key]

    def vjp(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return _node(out, (a,), vjp)


def concat(tensors, axis=1):
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat of an empty sequence")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(out, tuple(tensors), vjp)


def matmul(a, b):
    """Batched matrix product; leading batch dims must match exactly."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError("matmul operands must be at least 2-D")
    if a.data.shape[:-2] != b.data.shape[:-2]:
        raise DimensionError(f"matmul batch dims differ: {a.data.shape} vs {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {a.data.shape} vs {b.data.shape}")
    out = a.data @ b.data

    def vjp(g):
        return g @ _swap_last(b.data), _swap_last(a.data) @ g

    return _node(out, (a, b), vjp)


def _swap_last(arr):
    axes = list(range(arr.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return arr.transpose(axes)


# -- convolution ----------------------------------------------------------


def conv_output_extent(extent, kernel, stride, padding):
    return (extent + 2 * padding - kernel) // stride + 1


def _pad_nchw(x, padding, pad_value):
    if padding == 0:
        return x
    p = padding
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), mode="constant",
                  constant_values=x.dtype.type(pad_value))


def _im2col(xp, kh, kw, stride, oh, ow):
    """(N,C,Hp,Wp) -> (N, C*kh*kw, oh*ow) patch matrix (copies)."""
    n, c, _, _ = xp.shape
    s0, s1, s2, s3 = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kh, kw, oh, ow),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False,
    )
    return np.ascontiguousarray(windows).reshape(n, c * kh * kw, oh * ow)


def conv2d_raw(x, w, b=None, stride=1, padding=0, pad_value=0.0):
    """Plain-numpy NCHW convolution (cross-correlation), no graph.

    Shared by the differentiable op below and by mask propagation, which
    must stay outside the differentiation graph.
    """
    x = np.asarray(x)
    w = np.asarray(w)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects NCHW input and OIHW weights, got {x.shape} and {w.shape}")
    if padding < 0:
        raise DimensionError("padding must be >= 0")
    if stride < 1:
        raise DimensionError("stride must be >= 1")
    n, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    if c != ci:
        raise DimensionError(f"input has {c} channels but weights expect {ci}")
    oh = conv_output_extent(h, kh, stride, padding)
    ow = conv_output_extent(wd, kw, stride, padding)
    if oh < 1 or ow < 1:
        raise DimensionError(f"kernel {kh}x{kw} does not fit input {h}x{wd} with padding {padding}")
    xp = _pad_nchw(x, padding, pad_value)
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    out = np.matmul(w.reshape(co, ci * kh * kw), cols)
    if b is not None:
        out = out + np.asarray(b).reshape(1, co, 1)
    return out.reshape(n, co, oh, ow), cols


def _conv2d_input_grad(g, w, x_shape, stride, padding):
    """Gradient w.r.t. the (unpadded) input, via a zero-stuffed transposed conv."""
    n, c, h, wd = x_shape
    co, ci, kh, kw = w.shape
    _, _, oh, ow = g.shape
    if stride > 1:
        gs = np.zeros((n, co, (oh - 1) * stride + 1, (ow - 1) * stride + 1), dtype=g.dtype)
        gs[:, :, ::stride, ::stride] = g
    else:
        gs = g
    gsp = np.pad(gs, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)), mode="constant")
    # Kernel rotated 180 degrees with in/out channels swapped.
    wrot = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    dxp_partial, _ = conv2d_raw(gsp, np.ascontiguousarray(wrot), None, stride=1, padding=0)
    hp, wp = h + 2 * padding, wd + 2 * padding
    dxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
    ph, pw = dxp_partial.shape[2], dxp_partial.shape[3]
    dxp[:, :, :ph, :pw] = dxp_partial
    if padding:
        return dxp[:, :, padding:-padding, padding:-padding]
    return dxp


def conv2d(x, w, b=None, stride=1, padding=0, pad_value=0.0):
    """Differentiable NCHW convolution.

    ``pad_value`` pads the input with a constant that is treated as fixed:
    feature maps pad with 0, validity masks pad with 1.
    """
    if b is not None and not isinstance(b, Tensor):
        b = constant(b)
    bias = None if b is None else b.data
    out, cols = conv2d_raw(x.data, w.data, bias, stride, padding, pad_value)
    _require_finite(out, "conv2d")
    co, ci, kh, kw = w.data.shape
    parents = (x, w) if b is None else (x, w, b)

    def vjp(g):
        gm = g.reshape(g.shape[0], co, -1)
        dw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(co, ci, kh, kw)
        dx = _conv2d_input_grad(g, w.data, x.data.shape, stride, padding)
        if b is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3)).reshape(np.shape(bias))

    return _node(out, parents, vjp)


# -- pooling / resampling --------------------------------------------------


def avg_pool(x, window):
    """Non-overlapping mean pooling; extents must divide evenly."""
    if window < 1:
        raise DimensionError("pool window must be >= 1")
    n, c, h, w = x.data.shape
    if h % window or w % window:
        raise DimensionError(f"spatial extents {h}x{w} not divisible by pool window {window}")
    if window == 1:
        return x
    oh, ow = h // window, w // window
    blocks = x.data.reshape(n, c, oh, window, ow, window)
    out = blocks.mean(axis=(3, 5))

    def vjp(g):
        scale = np.asarray(1.0 / (window * window), dtype=g.dtype)
        gx = np.repeat(np.repeat(g * scale, window, axis=2), window, axis=3)
        return (gx,)

    return _node(out, (x,), vjp)


def upsample_nearest(x, factor):
    """Replicate each spatial value into a factor x factor block."""
    if factor < 1:
        raise DimensionError("upsample factor must be >= 1")
    if factor == 1:
        return x
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)
    n, c, h, w = x.data.shape

    def vjp(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _node(out, (x,), vjp)


def upsample_nearest_array(arr, factor):
    """Array-only nearest-neighbor upsampling (used for mask stacks)."""
    if factor == 1:
        return arr
    return np.repeat(np.repeat(arr, factor, axis=-2), factor, axis=-1)


# -- backward sweep --------------------------------------------------------


def _toposort(root):
    order = []
    state = {}  # id -> 1 while on stack, 2 when finished
    stack = [(root, iter(root._parents))]
    state[id(root)] = 1
    while stack:
        node, parents = stack[-1]
        advanced = False
        for p in parents:
            mark = state.get(id(p))
            if mark == 1:
                raise GraphError("cycle detected in the differentiation graph")
            if mark is None and p.requires_grad:
                state[id(p)] = 1
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            state[id(node)] = 2
            order.append(node)
            stack.pop()
    return order


def backward(root, parameters=()):
    """Populate ``grad`` on everything reachable from a scalar ``root``.

    Parameters that the root does not depend on get a zero gradient, so the
    optimizer can treat the result uniformly.
    """
    if root.data.size != 1:
        raise ContractError(f"backward requires a scalar root, got shape {root.data.shape}")
    if not root.requires_grad:
        for p in parameters:
            p.grad = np.zeros_like(p.data)
        return
    order = _toposort(root)
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._vjp is None:
            continue
        grads = node._vjp(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = g
            else:
                parent.grad = parent.grad + g
    for p in parameters:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)


# -- finite-difference verification ---------------------------------------


def check_gradients(fn, inputs, epsilon=1e-4, max_coords=16, rng=None):
    """Max relative error between analytic gradients and central differences.

    ``fn`` must be a pure function of the given leaf tensors returning a
    scalar Tensor. Coordinates are subsampled beyond ``max_coords`` per
    input. Run in float64: at float32 the differences themselves are noise.
    """
    if epsilon <= 0:
        raise ContractError("epsilon must be positive")
    rng = rng or np.random.default_rng(0)
    for t in inputs:
        t.zero_grad()
    out = fn(*inputs)
    if out.data.size != 1:
        raise ContractError("check_gradients requires a scalar-valued computation")
    backward(out, parameters=[t for t in inputs if t.requires_grad])

    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        flat = t.data.reshape(-1)
        if not np.shares_memory(flat, t.data):
            raise ContractError("check_gradients needs contiguous input data")
        n = flat.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        analytic = t.grad.reshape(-1)
        for idx in coords:
            original = flat[idx]
            flat[idx] = original + epsilon
            f_plus = fn(*inputs).item()
            flat[idx] = original - epsilon
            f_minus = fn(*inputs).item()
            flat[idx] = original
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError("non-finite value during finite-difference probe")
            numeric = (f_plus - f_minus) / (2 * epsilon)
            a = float(analytic[idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
            worst = max(worst, err)
    return worst


# -- Adam ------------------------------------------------------------------


@dataclass
class AdamState:
    """First/second moment accumulators keyed by parameter name."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    def reset(self):
        self.m.clear()
        self.v.clear()
        self.step = 0


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update with bias correction, applied in place.

    ``params`` maps names to leaf Tensors, ``grads`` names to arrays. A
    missing gradient counts as zero, which leaves that parameter unchanged.
    Returns the (mutated) params and state for convenience.
    """
    if lr <= 0:
        raise ContractError("learning rate must be positive")
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.data.shape:
            raise DimensionError(f"gradient shape {g.shape} does not match parameter {name} {p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * np.square(g)
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
    return params, state
