"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

A :class:`Tape` records operations in creation order (which is automatically
topological); :func:`backward` replays it in reverse, accumulating gradients
into every tracked ancestor. Tensors without a tape are constants and never
receive gradients.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Inputs violate an operation's shape contract."""


class DomainError(ValueError):
    """Inputs are outside an operation's numeric domain."""


class Tape:
    """Ordered record of operations plus a registry of named parameters.

    One tape per training step; discard after backward. No higher-order
    gradients.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.params: dict[str, Tensor] = {}

    def param(self, name, data):
        t = Tensor(data, tape=self)
        self.params[name] = t
        return t


class Tensor:
    __slots__ = ("data", "grad", "tape", "_parents", "_backward", "_grad_owned")

    # make ndarray <op> Tensor defer to the Tensor reflected operators
    __array_ufunc__ = None

    def __init__(self, data, tape: Tape | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.tape = tape
        self._parents = ()
        self._backward = None
        self._grad_owned = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, tracked={self.tape is not None})"

    # operator sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _track(data, parents, backward_fn) -> Tensor:
    """Create the result tensor, recording it if any parent is tracked."""
    tape = None
    for p in parents:
        if p.tape is not None:
            if tape is not None and tape is not p.tape:
                raise ShapeError("inputs recorded on different tapes")
            tape = p.tape
    out = Tensor(data, tape=tape)
    if tape is not None:
        out._parents = tuple(parents)
        out._backward = backward_fn
        tape.nodes.append(out)
    return out


def _accum(t: Tensor, g):
    # first contribution aliases g (read-only downstream); later ones copy
    if t.tape is None:
        return
    if t.grad is None:
        t.grad = g
        t._grad_owned = False
    elif t._grad_owned:
        t.grad += g
    else:
        t.grad = t.grad + g
        t._grad_owned = True


def _unbroadcast(g, shape):
    """Sum gradient g down to `shape` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor):
    """Accumulate gradients of a scalar loss into every tracked ancestor."""
    if loss.tape is None:
        raise ShapeError("loss is not tracked on any tape")
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.data.shape}")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(loss.tape.nodes):
        if node.grad is None or node._backward is None:
            continue
        node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise primitives


def _operand(t: Tensor):
    """0-d operands participate as python scalars so they do not widen the
    dtype of array operands (weak scalar promotion)."""
    return t.data.item() if t.data.ndim == 0 else t.data


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad_, bd = _operand(a), _operand(b)
    out_data = ad_ + bd

    def bwd(g):
        if a.tape is not None:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.tape is not None:
            _accum(b, _unbroadcast(g, b.data.shape))

    return _track(out_data, (a, b), bwd)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad_, bd = _operand(a), _operand(b)
    out_data = ad_ - bd

    def bwd(g):
        if a.tape is not None:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.tape is not None:
            _accum(b, _unbroadcast(-g, b.data.shape))

    return _track(out_data, (a, b), bwd)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad_, bd = _operand(a), _operand(b)
    out_data = ad_ * bd

    def bwd(g):
        if a.tape is not None:
            _accum(a, _unbroadcast(g * bd, a.data.shape))
        if b.tape is not None:
            _accum(b, _unbroadcast(g * ad_, b.data.shape))

    return _track(out_data, (a, b), bwd)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if np.any(b.data == 0):
        raise DomainError("division by zero")
    ad_, bd = _operand(a), _operand(b)
    out_data = ad_ / bd

    def bwd(g):
        if a.tape is not None:
            _accum(a, _unbroadcast(g / bd, a.data.shape))
        if b.tape is not None:
            _accum(b, _unbroadcast(-g * ad_ / (bd * bd), b.data.shape))

    return _track(out_data, (a, b), bwd)


def negate(a):
    a = as_tensor(a)

    def bwd(g):
        _accum(a, -g)

    return _track(-a.data, (a,), bwd)


def exp(a):
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def bwd(g):
        _accum(a, g * out_data)

    return _track(out_data, (a,), bwd)


def log(a):
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of non-positive value")
    out_data = np.log(a.data)

    def bwd(g):
        _accum(a, g / a.data)

    return _track(out_data, (a,), bwd)


def absval(a):
    a = as_tensor(a)
    sign = np.sign(a.data)

    def bwd(g):
        _accum(a, g * sign)

    return _track(np.abs(a.data), (a,), bwd)


def sqrt(a):
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt of negative value")
    out_data = np.sqrt(a.data)

    def bwd(g):
        _accum(a, g * (0.5 / np.maximum(out_data, 1e-300)))

    return _track(out_data, (a,), bwd)


def sin(a):
    a = as_tensor(a)

    def bwd(g):
        _accum(a, g * np.cos(a.data))

    return _track(np.sin(a.data), (a,), bwd)


def cos(a):
    a = as_tensor(a)

    def bwd(g):
        _accum(a, -g * np.sin(a.data))

    return _track(np.cos(a.data), (a,), bwd)


def minimum(a, b):
    """Elementwise min; ties route the gradient to the first argument."""
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data <= b.data

    def bwd(g):
        if a.tape is not None:
            _accum(a, _unbroadcast(np.where(take_a, g, 0.0), a.data.shape))
        if b.tape is not None:
            _accum(b, _unbroadcast(np.where(take_a, 0.0, g), b.data.shape))

    return _track(np.minimum(a.data, b.data), (a, b), bwd)


def clamp(a, lo, hi):
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)

    def bwd(g):
        _accum(a, g * inside)

    return _track(np.clip(a.data, lo, hi), (a,), bwd)


def sigmoid(a):
    a = as_tensor(a)
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        _accum(a, g * out_data * (1.0 - out_data))

    return _track(out_data, (a,), bwd)


def relu(a):
    a = as_tensor(a)
    pos = a.data > 0

    def bwd(g):
        _accum(a, g * pos)

    return _track(np.where(pos, a.data, 0.0), (a,), bwd)


def elu(a, alpha: float = 1.0):
    a = as_tensor(a)
    neg = a.data <= 0
    expm = alpha * np.expm1(np.minimum(a.data, 0.0))
    out_data = np.where(neg, expm, a.data)

    def bwd(g):
        _accum(a, g * np.where(neg, expm + alpha, 1.0))

    return _track(out_data, (a,), bwd)


def where(cond, a, b):
    """Select per element by a constant boolean mask."""
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    out_data = np.where(cond, a.data, b.data)

    def bwd(g):
        if a.tape is not None:
            _accum(a, _unbroadcast(np.where(cond, g, 0.0), a.data.shape))
        if b.tape is not None:
            _accum(b, _unbroadcast(np.where(cond, 0.0, g), b.data.shape))

    return _track(out_data, (a, b), bwd)


def softmax(a):
    """Softmax over the last axis."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        _accum(a, out_data * (g - dot))

    return _track(out_data, (a,), bwd)


# ---------------------------------------------------------------------------
# shape / reduction primitives


def reshape(a, shape):
    a = as_tensor(a)
    old = a.data.shape

    def bwd(g):
        _accum(a, g.reshape(old))

    return _track(a.data.reshape(shape), (a,), bwd)


def transpose_last2(a):
    a = as_tensor(a)

    def bwd(g):
        _accum(a, np.swapaxes(g, -1, -2))

    return _track(np.swapaxes(a.data, -1, -2), (a,), bwd)


def getitem(a, idx):
    a = as_tensor(a)
    out_data = a.data[idx]

    basic = isinstance(idx, (int, np.integer, slice, type(Ellipsis))) or (
        isinstance(idx, tuple) and all(
            isinstance(i, (int, np.integer, slice, type(Ellipsis), type(None)))
            for i in idx))

    def bwd(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        _accum(a, full)

    return _track(np.array(out_data, copy=True), (a,), bwd)


def concat(tensors, axis: int = 0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of empty list")
    sizes = [t.data.shape[axis] for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return _track(out_data, tuple(tensors), bwd)


def tsum(a, axis=None, keepdims: bool = False):
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).copy())
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(g, a.data.shape).copy())

    return _track(out_data, (a,), bwd)


def tmean(a, axis=None, keepdims: bool = False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def bwd(g):
        if a.tape is not None:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        if b.tape is not None:
            _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    return _track(out_data, (a, b), bwd)


# ---------------------------------------------------------------------------
# spatial primitives (NCHW or CHW layouts)


def _as_nchw(x):
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected CHW or NCHW input, got shape {x.shape}")


def conv2d(x, w, b=None, stride: int = 1):
    """3x3 convolution with zero padding 1; stride 1 or 2."""
    x, w = as_tensor(x), as_tensor(w)
    xd, single = _as_nchw(x.data)
    cout, cin, kh, kw = w.data.shape
    if (kh, kw) != (3, 3):
        raise ShapeError(f"conv2d supports 3x3 kernels, got {kh}x{kw}")
    n, cx, h, wdt = xd.shape
    if cx != cin:
        raise ShapeError(f"conv2d channel mismatch: input {cx}, weight expects {cin}")
    if stride not in (1, 2):
        raise ShapeError(f"conv2d stride must be 1 or 2, got {stride}")
    xp = np.zeros((n, cx, h + 2, wdt + 2), dtype=xd.dtype)
    xp[:, :, 1:-1, 1:-1] = xd
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    # (n, cin*9, ho*wo) patch matrix; one copy, consumed by a single GEMM
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, cin * 9, ho * wo)
    wmat = w.data.reshape(cout, cin * 9)
    out = wmat @ cols  # (n, cout, ho*wo)
    if b is not None:
        b = as_tensor(b)
        out += b.data[:, None]
    out_data = out.reshape(n, cout, ho, wo)
    if single:
        out_data = out_data[0]

    parents = (x, w) if b is None else (x, w, b)

    def bwd(g):
        gd = g[None] if single else g
        gr = gd.reshape(n, cout, ho * wo)
        if w.tape is not None:
            dw = np.tensordot(gr, cols, axes=([0, 2], [0, 2]))  # cout, cin*9
            _accum(w, dw.reshape(w.data.shape))
        if b is not None and b.tape is not None:
            _accum(b, gr.sum(axis=(0, 2)))
        if x.tape is not None:
            dcols = (wmat.T @ gr).reshape(n, cin, 3, 3, ho, wo)
            dxp = np.zeros_like(xp)
            for i in range(3):
                for j in range(3):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        dcols[:, :, i, j]
            dx = dxp[:, :, 1:-1, 1:-1]
            _accum(x, dx[0] if single else dx)

    return _track(out_data, parents, bwd)


def pool3_np(xd: np.ndarray) -> np.ndarray:
    """Plain-numpy 3x3 mean pooling, stride 1, edge padding."""
    if xd.ndim < 2:
        raise ShapeError("pooling needs at least 2 spatial dims")
    h, w = xd.shape[-2], xd.shape[-1]
    xp = np.empty(xd.shape[:-2] + (h + 2, w + 2), dtype=xd.dtype)
    xp[..., 1:-1, 1:-1] = xd
    xp[..., 0, 1:-1] = xd[..., 0, :]
    xp[..., -1, 1:-1] = xd[..., -1, :]
    xp[..., :, 0] = xp[..., :, 1]
    xp[..., :, -1] = xp[..., :, -2]
    out = np.zeros_like(xd)
    for i in range(3):
        for j in range(3):
            out += xp[..., i:i + h, j:j + w]
    out *= 1.0 / 9.0
    return out


def pool3_adjoint_np(g: np.ndarray) -> np.ndarray:
    """Adjoint of pool3_np (edge-padded windows fold back onto the border)."""
    h, w = g.shape[-2], g.shape[-1]
    dxp = np.zeros(g.shape[:-2] + (h + 2, w + 2), dtype=g.dtype)
    g9 = g * (1.0 / 9.0)
    for i in range(3):
        for j in range(3):
            dxp[..., i:i + h, j:j + w] += g9
    dx = dxp[..., 1:-1, 1:-1].copy()
    dx[..., 0, :] += dxp[..., 0, 1:-1]
    dx[..., -1, :] += dxp[..., -1, 1:-1]
    dx[..., :, 0] += dxp[..., 1:-1, 0]
    dx[..., :, -1] += dxp[..., 1:-1, -1]
    dx[..., 0, 0] += dxp[..., 0, 0]
    dx[..., 0, -1] += dxp[..., 0, -1]
    dx[..., -1, 0] += dxp[..., -1, 0]
    dx[..., -1, -1] += dxp[..., -1, -1]
    return dx


def avg_pool3(x):
    """3x3 mean pooling, stride 1, edge padding; output size equals input."""
    x = as_tensor(x)
    out_data = pool3_np(x.data)

    def bwd(g):
        _accum(x, pool3_adjoint_np(g))

    return _track(out_data, (x,), bwd)


def upsample2x(x):
    """Nearest-neighbor 2x upsampling over the last two axes."""
    x = as_tensor(x)
    out_data = x.data.repeat(2, axis=-2).repeat(2, axis=-1)

    def bwd(g):
        s = g.shape
        gr = g.reshape(s[:-2] + (s[-2] // 2, 2, s[-1] // 2, 2))
        _accum(x, gr.sum(axis=(-3, -1)))

    return _track(out_data, (x,), bwd)


def grid_sample(inp, grid, channels_first: bool = False):
    """Bilinearly sample feature maps at continuous (x, y) pixel coordinates.

    Accepts CxHxW input with a Px2 grid, or a batched NxCxHxW input with an
    NxPx2 grid. Output is PxC (points by channels) by default; CxP with
    `channels_first`, which skips a transpose for image-shaped consumers.
    Out-of-bounds coordinates clamp to the border; the gradient w.r.t. the
    grid is zero in any clamped direction.
    """
    inp, grid = as_tensor(inp), as_tensor(grid)
    if inp.ndim == 3 and grid.ndim == 2:
        single = True
        idata = inp.data[None]
        gdata = grid.data[None]
    elif inp.ndim == 4 and grid.ndim == 3:
        single = False
        idata = inp.data
        gdata = grid.data
        if idata.shape[0] != gdata.shape[0]:
            raise ShapeError(f"batch mismatch: input {inp.shape} vs grid {grid.shape}")
    else:
        raise ShapeError(f"grid_sample expects CxHxW with Px2 or NxCxHxW with "
                         f"NxPx2, got {inp.shape} and {grid.shape}")
    if gdata.shape[-1] != 2:
        raise ShapeError(f"grid coordinates must be 2-D, got {grid.shape}")
    if not np.all(np.isfinite(gdata)):
        raise DomainError("non-finite grid coordinates")
    n, c, h, w = idata.shape
    p = gdata.shape[1]
    gx = np.clip(gdata[..., 0], 0.0, w - 1.0)       # (N, P)
    gy = np.clip(gdata[..., 1], 0.0, h - 1.0)
    x0 = np.clip(np.floor(gx).astype(np.int64), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(gy).astype(np.int64), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = (gx - x0.astype(gx.dtype))[:, None, :]     # (N, 1, P)
    wy = (gy - y0.astype(gy.dtype))[:, None, :]

    flat = idata.reshape(n, c, h * w)
    i00 = (y0 * w + x0)[:, None, :]                 # (N, 1, P)
    i01 = (y0 * w + x1)[:, None, :]
    i10 = (y1 * w + x0)[:, None, :]
    i11 = (y1 * w + x1)[:, None, :]
    v00 = np.take_along_axis(flat, i00, axis=2)     # (N, C, P)
    v01 = np.take_along_axis(flat, i01, axis=2)
    v10 = np.take_along_axis(flat, i10, axis=2)
    v11 = np.take_along_axis(flat, i11, axis=2)
    w00 = (1 - wy) * (1 - wx)
    w01 = (1 - wy) * wx
    w10 = wy * (1 - wx)
    w11 = wy * wx
    out_data = (v00 * w00 + v01 * w01 + v10 * w10 + v11 * w11)  # (N, C, P)
    if not channels_first:
        out_data = np.swapaxes(out_data, 1, 2)      # (N, P, C)
    if single:
        out_data = out_data[0]

    inb_x = (gdata[..., 0] > 0.0) & (gdata[..., 0] < w - 1.0)
    inb_y = (gdata[..., 1] > 0.0) & (gdata[..., 1] < h - 1.0)

    def bwd(g):
        gt = g[None] if single else g
        if not channels_first:
            gt = np.swapaxes(gt, 1, 2)              # (N, C, P)
        if inp.tape is not None:
            off = (np.arange(n * c, dtype=np.int64) * (h * w)).reshape(n, c, 1)
            di = np.zeros(n * c * h * w)
            for idx, wt in ((i00, w00), (i01, w01), (i10, w10), (i11, w11)):
                di += np.bincount((off + idx).ravel(),
                                  weights=(gt * wt).ravel(),
                                  minlength=n * c * h * w)
            di = di.reshape(idata.shape).astype(idata.dtype, copy=False)
            _accum(inp, di[0] if single else di)
        if grid.tape is not None:
            dx = ((1 - wy) * (v01 - v00) + wy * (v11 - v10))  # (N, C, P)
            dy = ((1 - wx) * (v10 - v00) + wx * (v11 - v01))
            gx_grad = (gt * dx).sum(axis=1) * inb_x
            gy_grad = (gt * dy).sum(axis=1) * inb_y
            dg = np.stack([gx_grad, gy_grad], axis=-1)
            _accum(grid, dg[0] if single else dg)

    return _track(out_data, (inp, grid), bwd)


# ---------------------------------------------------------------------------
# verification oracle


def grad_check(f, x, eps: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` maps a Tensor to a scalar Tensor; evaluated in double precision.
    """
    x = np.asarray(x, dtype=np.float64)
    tape = Tape()
    xt = tape.param("x", x)
    y = f(xt)
    if not np.all(np.isfinite(y.data)):
        raise DomainError("f(x) is not finite")
    if y.data.size != 1:
        raise ShapeError("grad_check requires a scalar-valued function")
    backward(y)
    analytic = xt.grad if xt.grad is not None else np.zeros_like(x)

    numeric = np.zeros_like(x)
    flat = x.ravel()
    nflat = numeric.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(Tensor(x.copy())).data)
        flat[i] = orig - eps
        fm = float(f(Tensor(x.copy())).data)
        flat[i] = orig
        nflat[i] = (fp - fm) / (2 * eps)

    denom = np.maximum(1.0, np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))
