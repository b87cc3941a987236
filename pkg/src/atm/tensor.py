"""Dense float64 tensor with reverse-mode autodiff and the spatial primitives
(convolution, pooling, upsampling) used by the rest of the package.

Forward kernels that are checked bit-for-bit against loop oracles accumulate in
a fixed order (see ``_conv2d_fwd``); backward passes are free to use BLAS.
"""
from __future__ import annotations

import contextlib
import math

import numba
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_GRAD_ENABLED = True
_KINKS: list | None = None  # branch decisions of non-smooth ops, when recording


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def record_kinks():
    """Collect the branch taken by every relu and min evaluated inside the block."""
    global _KINKS
    prev = _KINKS
    _KINKS = []
    try:
        yield _KINKS
    finally:
        _KINKS = prev


def _as_array(data) -> np.ndarray:
    if isinstance(data, Tensor):
        return data.data
    return np.asarray(data, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    """n-d float64 array that records the operations applied to it."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) else data
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward = None

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple:
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
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self):
        return len(self.data)

    # ---------------------------------------------------------------- autodiff
    def backward(self):
        """Accumulate d(self)/d(node) into ``.grad`` of every tracked ancestor."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        order, seen = [], set()
        stack = [(self, False)]
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
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -------------------------------------------------------------- operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(Tensor(_as_array(other)), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(Tensor(_as_array(other)), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def log(self):
        return log(self)

    def exp(self):
        return exp(self)

    def relu(self):
        return relu(self)


def make_node(data: np.ndarray, parents: tuple, backward) -> Tensor:
    """Wrap ``data`` as the output of an op; ``backward(g)`` returns one grad per parent."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def tensor(data, requires_grad: bool = False) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data, requires_grad=requires_grad)


# ---------------------------------------------------------------- elementwise
def add(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    return make_node(a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    return make_node(a.data - b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    return make_node(a.data * b.data, (a, b),
                     lambda g: (_unbroadcast(g * b.data, a.shape),
                                _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    return make_node(a.data / b.data, (a, b),
                     lambda g: (_unbroadcast(g / b.data, a.shape),
                                _unbroadcast(-g * a.data / b.data ** 2, b.shape)))


def power(a, exponent: float) -> Tensor:
    a = tensor(a)
    return make_node(a.data ** exponent, (a,),
                     lambda g: (g * exponent * a.data ** (exponent - 1),))


@numba.njit(cache=True)
def _log_kernel(x):
    # libm log, so results agree bit-for-bit with math.log
    flat = x.ravel()
    out = np.empty(flat.size)
    for i in range(flat.size):
        out[i] = math.log(flat[i])
    return out.reshape(x.shape)


def log(a) -> Tensor:
    a = tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("log of non-positive value")
    x = np.ascontiguousarray(a.data)
    return make_node(_log_kernel(x), (a,), lambda g: (g / a.data,))


def exp(a) -> Tensor:
    a = tensor(a)
    out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (g * out,))


def relu(a) -> Tensor:
    a = tensor(a)
    mask = a.data > 0
    if _KINKS is not None:
        _KINKS.append(mask)
    return make_node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def tanh(a) -> Tensor:
    a = tensor(a)
    out = np.tanh(a.data)
    return make_node(out, (a,), lambda g: (g * (1.0 - out * out),))


def gelu(a) -> Tensor:
    """tanh approximation of GELU."""
    a = tensor(a)
    inner = (a + power(a, 3.0) * 0.044715) * math.sqrt(2.0 / math.pi)
    return a * (tanh(inner) + 1.0) * 0.5


def elementwise(op: str, a, b=None) -> Tensor:
    """Strict (non-broadcasting) elementwise op: one of add, sub, mul, log."""
    a = tensor(a)
    if op == "log":
        if b is not None:
            raise ValueError("log is unary")
        return log(a)
    if op not in ("add", "sub", "mul"):
        raise ValueError(f"unknown elementwise op {op!r}")
    b = tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return {"add": add, "sub": sub, "mul": mul}[op](a, b)


# --------------------------------------------------------------- reductions
def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = tensor(a)
    # contiguous copy: summation order must not depend on memory layout
    out = np.ascontiguousarray(a.data).sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_node(np.asarray(out, dtype=np.float64), (a,), bw)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = tensor(a)
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def sorted_mean(a, axis: int) -> Tensor:
    """Mean along ``axis`` whose value is independent of element order.

    Values are sorted before summation, so permuting ``a`` along ``axis`` gives
    a bit-identical result.
    """
    a = tensor(a)
    n = a.shape[axis]
    s = np.sort(a.data, axis=axis)
    acc = np.take(s, 0, axis=axis).copy()
    for i in range(1, n):
        acc = acc + np.take(s, i, axis=axis)
    out = acc / n

    def bw(g):
        g = np.expand_dims(g, axis) / n
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_node(out, (a,), bw)


def amin(a, axis=None, keepdims=False) -> Tensor:
    """Minimum; the gradient flows to the first minimal element."""
    a = tensor(a)
    axes = tuple(range(a.ndim)) if axis is None else tuple(np.atleast_1d(axis) % a.ndim)
    keep = [i for i in range(a.ndim) if i not in axes]
    perm = keep + list(axes)
    moved = a.data.transpose(perm)
    lead = moved.shape[:len(keep)]
    flat = moved.reshape(lead + (-1,))
    arg = flat.argmin(axis=-1)
    if _KINKS is not None:
        _KINKS.append(arg)
    vals = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    out_shape = tuple(1 if i in axes else a.shape[i] for i in range(a.ndim))
    out = vals.reshape(out_shape) if keepdims else vals

    def bw(g):
        gf = np.zeros_like(flat)
        np.put_along_axis(gf, arg[..., None], np.reshape(g, lead)[..., None], axis=-1)
        return (gf.reshape(moved.shape).transpose(np.argsort(perm)),)

    return make_node(np.asarray(out, dtype=np.float64), (a,), bw)


# ------------------------------------------------------------------- shape
def reshape(a, shape) -> Tensor:
    a = tensor(a)
    return make_node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a, idx) -> Tensor:
    a = tensor(a)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return make_node(np.array(a.data[idx]), (a,), bw)


def take(a, indices, axis: int) -> Tensor:
    """Gather along ``axis`` with an integer index array (any shape)."""
    a = tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    axis = axis % a.ndim
    out = np.take(a.data, indices, axis=axis)

    def bw(g):
        # scatter-add as a one-hot matmul; much faster than np.add.at
        k, n = indices.ndim, a.shape[axis]
        flat = indices.ravel()
        onehot = np.zeros((n, flat.size))
        onehot[flat, np.arange(flat.size)] = 1.0
        gm = np.moveaxis(g.reshape(g.shape[:axis] + (flat.size,) + g.shape[axis + k:]), axis, 0)
        rest = gm.shape[1:]
        full = (onehot @ gm.reshape(flat.size, -1)).reshape((n,) + rest)
        return (np.moveaxis(full, 0, axis),)

    return make_node(out, (a,), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    return make_node(np.ascontiguousarray(np.concatenate([t.data for t in ts], axis=axis)), tuple(ts),
                     lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(tensors, axis: int = 0) -> Tensor:
    ts = [tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)
    return make_node(out, tuple(ts),
                     lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(ts))))


def pad_axis(a, axis: int, before: int, after: int) -> Tensor:
    a = tensor(a)
    widths = [(0, 0)] * a.ndim
    widths[axis] = (before, after)
    out = np.pad(a.data, widths)
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(before, before + a.shape[axis])
    sl = tuple(sl)
    return make_node(out, (a,), lambda g: (g[sl],))


# ------------------------------------------------------------------ linear
def matmul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if b.ndim > 1 else np.multiply.outer(g, b.data)
        gb = np.swapaxes(a.data, -1, -2) @ g if a.ndim > 1 else np.multiply.outer(a.data, g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_node(a.data @ b.data, (a, b), bw)


def softmax(a, axis: int = -1) -> Tensor:
    a = tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return make_node(s, (a,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    logits = tensor(logits)
    labels = np.asarray(labels, dtype=np.intp)
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(lse - z[np.arange(n), labels]))

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return make_node(np.array(loss), (logits,), bw)


# ------------------------------------------------------------------ conv2d
@numba.njit(cache=True)
def _conv2d_fwd(xp, w, b, stride, ho, wo):
    # per output element: acc = 0; acc += x*w over (c, i, j) in order; acc + bias
    n_, c_, _, _ = xp.shape
    o_, _, kh, kw = w.shape
    out = np.empty((n_, o_, ho, wo))
    for n in range(n_):
        for o in range(o_):
            acc = np.zeros((ho, wo))
            for c in range(c_):
                for i in range(kh):
                    for j in range(kw):
                        wv = w[o, c, i, j]
                        if stride == 1:
                            for h in range(ho):
                                row = xp[n, c, h + i, j:j + wo]
                                a = acc[h]
                                for q in range(wo):
                                    a[q] += row[q] * wv
                        else:
                            for h in range(ho):
                                hi = h * stride + i
                                for q in range(wo):
                                    acc[h, q] += xp[n, c, hi, q * stride + j] * wv
            for h in range(ho):
                for q in range(wo):
                    out[n, o, h, q] = acc[h, q] + b[o]
    return out


class ConvParams:
    """Weight (out_ch, in_ch, kh, kw), bias (out_ch,), stride and padding."""

    def __init__(self, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0):
        kh, kw = weight.shape[2:]
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError("kernel sizes must be odd")
        if stride < 1 or padding < 0:
            raise ValueError("stride must be positive and padding non-negative")
        if bias.shape != (weight.shape[0],):
            raise ValueError("bias must have shape (out_ch,)")
        self.weight, self.bias = weight, bias
        self.stride, self.padding = stride, padding


def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x (N, C_in, H, W) with weight (C_out, C_in, kh, kw)."""
    if isinstance(weight, ConvParams):
        weight, bias, stride, padding = weight.weight, weight.bias, weight.stride, weight.padding
    x, weight = tensor(x), tensor(weight)
    bias = Tensor(np.zeros(weight.shape[0])) if bias is None else tensor(bias)
    if x.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input, got shape {x.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, weight expects {weight.shape[1]}")
    kh, kw = weight.shape[2:]
    n, c, h, w = x.shape
    ho, wo = conv_output_size(h, kh, stride, padding), conv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError("kernel larger than padded input")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    xp = np.ascontiguousarray(xp)
    out = _conv2d_fwd(xp, np.ascontiguousarray(weight.data), bias.data, stride, ho, wo)

    def bw(g):
        cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        gb = g.sum(axis=(0, 2, 3))
        dcols = np.tensordot(g, weight.data, axes=([1], [0]))  # N, ho, wo, C, kh, kw
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
        return gx, gw, gb

    return make_node(out, (x, weight, bias), bw)


# ------------------------------------------------------- pooling/upsampling
def avg_pool2(x) -> Tensor:
    """2x2 mean pooling with stride 2 over the last two axes."""
    x = tensor(x)
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2 needs even spatial dims, got {h}x{w}")
    d = x.data
    # pairwise order keeps constants exact
    out = ((d[..., 0::2, 0::2] + d[..., 0::2, 1::2]) + (d[..., 1::2, 0::2] + d[..., 1::2, 1::2])) * 0.25

    def bw(g):
        return (np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) * 0.25,)

    return make_node(out, (x,), bw)


def _upsample_taps(n: int):
    # half-pixel centres, edge-clamped: out[2k] leans on k-1, out[2k+1] on k+1
    k = np.arange(n)
    near = np.repeat(k, 2)
    far = near + np.tile([-1, 1], n)
    return near, np.clip(far, 0, n - 1)


def _interp_matrix(n: int) -> np.ndarray:
    near, far = _upsample_taps(n)
    m = np.zeros((2 * n, n))
    rows = np.arange(2 * n)
    np.add.at(m, (rows, near), 0.75)
    np.add.at(m, (rows, far), 0.25)
    return m


def upsample2(x) -> Tensor:
    """2x bilinear enlargement of the last two axes (half-pixel centres)."""
    x = tensor(x)
    h, w = x.shape[-2:]
    nh, fh = _upsample_taps(h)
    nw, fw = _upsample_taps(w)
    d = x.data
    a = d[..., nh, :]
    rows = a + 0.25 * (d[..., fh, :] - a)
    b = rows[..., nw]
    out = b + 0.25 * (rows[..., fw] - b)
    mh, mw = _interp_matrix(h), _interp_matrix(w)
    return make_node(out, (x,), lambda g: (mh.T @ g @ mw,))


# --------------------------------------------------------- gradient check
def _same_branches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(u, v) for u, v in zip(a, b))


def finite_diff_check(f, x, step: float = 1e-4, coords=None, smooth_only: bool = False) -> float:
    """Max relative error between backprop and central differences.

    ``f`` maps a Tensor to a scalar Tensor. Relative error per coordinate is
    ``|a - n| / max(1e-12, |a| + |n|)``. ``coords`` restricts the check to a
    subset of flat indices. With ``smooth_only``, coordinates whose +-step
    probe flips a relu or min branch are skipped, since central differences
    are meaningless across a kink.
    """
    base = np.array(_as_array(x), dtype=np.float64)
    xt = Tensor(base.copy(), requires_grad=True)
    with record_kinks() as ref:
        f(xt).backward()
    analytic = np.zeros_like(base) if xt.grad is None else xt.grad
    flat = base.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            with record_kinks() as kp:
                fp = f(Tensor(base.copy())).item()
            flat[i] = orig - step
            with record_kinks() as km:
                fm = f(Tensor(base.copy())).item()
            flat[i] = orig
            if smooth_only and not (_same_branches(kp, ref) and _same_branches(km, ref)):
                continue
            num = (fp - fm) / (2 * step)
            an = analytic.reshape(-1)[i]
            err = abs(an - num) / max(1e-12, abs(an) + abs(num))
            worst = max(worst, err)
    return worst
