"""Dense float32 tensors with reverse-mode automatic differentiation.

The computation graph is an implicit tape: every op returns a new Tensor
holding references to its parents and a closure that scatters the incoming
gradient back to them.  ``backward`` walks the tape once, in reverse
topological (reverse insertion) order, then consumes it, so a graph is
built fresh on every forward pass.  That rebuild-per-pass design is load
bearing here: stochastic feature masks change the active architecture on
every pass.

Storage is float32 throughout; full reductions accumulate in float64.
Broadcasting is deliberately restricted: ``mul`` accepts equal shapes or a
same-rank mask whose dims are 1 where they differ (a spatial or channel
mask); everything else requires explicit reshape.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .errors import ContractError, DimensionError

_ACTIVE_DTYPE = np.float32


def active_dtype():
    return _ACTIVE_DTYPE


@contextmanager
def use_dtype(dtype):
    """Temporarily switch tensor storage precision.

    Production code runs float32; finite-difference gradient verification
    switches to float64, where the h=1e-3 stencil is far above roundoff.
    """
    global _ACTIVE_DTYPE
    prev = _ACTIVE_DTYPE
    _ACTIVE_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _ACTIVE_DTYPE = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_ACTIVE_DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def zeros(shape, requires_grad=False) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=_ACTIVE_DTYPE), requires_grad)

    @staticmethod
    def ones(shape, requires_grad=False) -> "Tensor":
        return Tensor(np.ones(shape, dtype=_ACTIVE_DTYPE), requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- tape machinery -------------------------------------------------------

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Backpropagate from a scalar node; consumes the graph."""
        if self.data.size != 1:
            raise ContractError("backward() requires a scalar loss node")
        order: list[Tensor] = []
        seen = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)
            # consume the tape: frees activations, forbids double backward
            node._backward = None
            node._parents = ()
            if not node.requires_grad:
                node.grad = None

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, shape):
        return reshape(self, shape)


def _result(data, parents, backward_fn) -> Tensor:
    """Wrap an op result, attaching the tape entry only when a parent needs it."""
    out = Tensor(data)
    if any(p.requires_grad or p._backward is not None for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _as_const(x) -> np.ndarray:
    return np.asarray(x, dtype=_ACTIVE_DTYPE)


# -- elementwise arithmetic ----------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, (int, float)):
        out_data = a.data + a.data.dtype.type(b)
        return _result(out_data, (a,), lambda g: a._accumulate(g))
    if a.shape != b.shape:
        raise DimensionError(f"add shapes differ: {a.shape} vs {b.shape}")

    def bw(g):
        a._accumulate(g)
        b._accumulate(g)

    return _result(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, (int, float)):
        return add(a, -b)
    if a.shape != b.shape:
        raise DimensionError(f"sub shapes differ: {a.shape} vs {b.shape}")

    def bw(g):
        a._accumulate(g)
        b._accumulate(-g)

    return _result(a.data - b.data, (a, b), bw)


def _mask_axes(shape_a, shape_b):
    """Axes of b that are 1 where a differs; None if shapes are incompatible."""
    if len(shape_a) != len(shape_b):
        return None
    axes = []
    for d, (da, db) in enumerate(zip(shape_a, shape_b)):
        if db == da:
            continue
        if db == 1:
            axes.append(d)
        else:
            return None
    return tuple(axes)


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; b may be a scalar or a same-rank mask (dims 1 or equal)."""
    if isinstance(b, (int, float)):
        return scale(a, float(b))
    axes = _mask_axes(a.shape, b.shape)
    if axes is None:
        raise DimensionError(f"mul shapes differ: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        a._accumulate(g * bd)
        gb = g * ad
        if axes:
            gb = gb.sum(axis=axes, keepdims=True)
        b._accumulate(gb.astype(bd.dtype))

    return _result(ad * bd, (a, b), bw)


def div(a: Tensor, b) -> Tensor:
    if isinstance(b, (int, float)):
        return scale(a, 1.0 / float(b))
    if a.shape != b.shape:
        raise DimensionError(f"div shapes differ: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        a._accumulate(g / bd)
        b._accumulate(-g * ad / (bd * bd))

    return _result(ad / bd, (a, b), bw)


def scale(a: Tensor, s: float) -> Tensor:
    s = a.data.dtype.type(s)
    return _result(a.data * s, (a,), lambda g: a._accumulate(g * s))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _result(ad * ad, (a,), lambda g: a._accumulate(g * 2.0 * ad))


# -- activations and pointwise transcendentals ---------------------------------


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0.0)
    return _result(out_data, (a,), lambda g: a._accumulate(g * (a.data > 0)))


def leaky_relu(a: Tensor, alpha: float = 0.1) -> Tensor:
    ad = a.data
    out_data = np.where(ad > 0, ad, ad.dtype.type(alpha) * ad)

    def bw(g):
        a._accumulate(g * np.where(ad > 0, ad.dtype.type(1.0), ad.dtype.type(alpha)))

    return _result(out_data, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    ad = a.data.astype(np.float64)
    s = (1.0 / (1.0 + np.exp(-ad))).astype(a.data.dtype)
    return _result(s, (a,), lambda g: a._accumulate(g * s * (1.0 - s)))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _result(e, (a,), lambda g: a._accumulate(g * e))


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: a._accumulate(g / a.data))


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x), computed stably; gradient is sigmoid(x)."""
    ad = a.data.astype(np.float64)
    out_data = (np.maximum(ad, 0.0) + np.log1p(np.exp(-np.abs(ad)))).astype(a.data.dtype)

    def bw(g):
        a._accumulate((g * (1.0 / (1.0 + np.exp(-ad)))).astype(a.data.dtype))

    return _result(out_data, (a,), bw)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; on ties the gradient routes to the first argument."""
    if a.shape != b.shape:
        raise DimensionError(f"minimum shapes differ: {a.shape} vs {b.shape}")
    take_a = a.data <= b.data

    def bw(g):
        a._accumulate(g * take_a)
        b._accumulate(g * ~take_a)

    return _result(np.where(take_a, a.data, b.data), (a, b), bw)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; on ties the gradient routes to the first argument."""
    if a.shape != b.shape:
        raise DimensionError(f"maximum shapes differ: {a.shape} vs {b.shape}")
    take_a = a.data >= b.data

    def bw(g):
        a._accumulate(g * take_a)
        b._accumulate(g * ~take_a)

    return _result(np.where(take_a, a.data, b.data), (a, b), bw)


# -- shape ops ------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: a._accumulate(g.reshape(old)))


def getitem(a: Tensor, idx) -> Tensor:
    """Slice/gather with ints, slices, or integer index arrays.

    Integer-array gathers scatter-add on backward, so repeated indices
    accumulate correctly.
    """
    if not isinstance(idx, tuple):
        idx = (idx,)
    norm = tuple(np.asarray(i) if isinstance(i, (list, np.ndarray)) else i for i in idx)
    fancy = any(isinstance(i, np.ndarray) for i in norm)
    pure_arrays = fancy and all(
        isinstance(i, np.ndarray) or isinstance(i, int) for i in norm
    )

    def bw(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        if pure_arrays:
            np.add.at(a.grad, norm, g)
        else:
            # basic indexing (and mixed slice+array with unique indices)
            a.grad[norm] += g

    return _result(a.data[norm], (a,), bw)


# -- reductions -------------------------------------------------------------------


def tsum(a: Tensor) -> Tensor:
    out_data = np.float64(a.data.sum(dtype=np.float64))

    def bw(g):
        a._accumulate(np.full_like(a.data, a.data.dtype.type(g.reshape(-1)[0])))

    return _result(a.data.dtype.type(out_data), (a,), bw)


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    out_data = np.float64(a.data.sum(dtype=np.float64)) / n

    def bw(g):
        a._accumulate(np.full_like(a.data, a.data.dtype.type(g.reshape(-1)[0] / n)))

    return _result(a.data.dtype.type(out_data), (a,), bw)


def max_pool2d(a: Tensor, k: int, stride: int | None = None) -> Tensor:
    """Max pooling on [N,C,H,W]; gradient routes to the (first) argmax cell."""
    if a.data.ndim != 4:
        raise DimensionError("max_pool2d expects a [N,C,H,W] tensor")
    stride = k if stride is None else stride
    n, c, h, w = a.shape
    if k > h or k > w:
        raise DimensionError(f"pool window {k} exceeds map {h}x{w}")
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    sn, sc, sh, sw = a.data.strides
    win = np.lib.stride_tricks.as_strided(
        a.data,
        shape=(n, c, ho, wo, k, k),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw),
    )
    flat = win.reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out_data = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        ki, kj = np.unravel_index(arg, (k, k))
        ni, ci, oi, oj = np.indices(arg.shape, sparse=False)
        np.add.at(a.grad, (ni, ci, oi * stride + ki, oj * stride + kj), g)

    return _result(out_data, (a,), bw)


# -- softmax family ---------------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        a._accumulate(s * (g - dot))

    return _result(s, (a,), bw)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = (a.data - a.data.max(axis=axis, keepdims=True)).astype(np.float64)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = (shifted - lse).astype(a.data.dtype)
    s = np.exp(out_data)

    def bw(g):
        a._accumulate(g - s * g.sum(axis=axis, keepdims=True))

    return _result(out_data, (a,), bw)


# -- affine / convolution -----------------------------------------------------------


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x[N,D] @ w[D,K] (+ b[K])."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"dense shapes incompatible: {x.shape} @ {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise DimensionError(f"dense bias shape {b.shape} != ({w.shape[1]},)")
    out_data = x.data @ w.data
    if b is not None:
        out_data = out_data + b.data

    def bw(g):
        x._accumulate(g @ w.data.T)
        w._accumulate(x.data.T @ g)
        if b is not None:
            b._accumulate(g.sum(axis=0, dtype=np.float64).astype(b.data.dtype))

    parents = (x, w) if b is None else (x, w, b)
    return _result(out_data, parents, bw)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int):
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kh, kw, ho, wo),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
    )
    # [N, Ho, Wo, C*kh*kw], contiguous for the GEMM
    return np.ascontiguousarray(win.transpose(0, 4, 5, 1, 2, 3)).reshape(
        n * ho * wo, c * kh * kw
    )


def conv2d(x: Tensor, k: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of x[N,C,H,W] with k[F,C,kH,kW], zero padded."""
    if x.data.ndim != 4 or k.data.ndim != 4:
        raise DimensionError("conv2d expects 4-d input and kernel")
    n, c, h, w = x.shape
    f, ck, kh, kw = k.shape
    if ck != c:
        raise DimensionError(f"conv2d channels differ: input {c}, kernel {ck}")
    if stride < 1:
        raise DimensionError("conv2d stride must be >= 1")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(f"kernel {kh}x{kw} exceeds padded map {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    kmat = k.data.reshape(f, c * kh * kw)
    out_data = (cols @ kmat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def bw(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, f)
        k._accumulate((gmat.T @ cols).reshape(f, c, kh, kw))
        dcols = (gmat @ kmat).reshape(n, ho, wo, c, kh, kw)
        dxp = np.zeros((n, c, hp, wp), dtype=x.data.dtype)
        for i in range(kh):
            hi = i + stride * ho
            for j in range(kw):
                wj = j + stride * wo
                dxp[:, :, i:hi:stride, j:wj:stride] += dcols[:, :, :, :, i, j].transpose(
                    0, 3, 1, 2
                )
        if padding:
            dxp = dxp[:, :, padding:-padding, padding:-padding]
        x._accumulate(dxp)

    return _result(out_data, (x, k), bw)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias b[C] to x[N,C,H,W]."""
    if x.data.ndim != 4 or b.shape != (x.shape[1],):
        raise DimensionError(f"bias_add: bias {b.shape} vs input {x.shape}")
    out_data = x.data + b.data[None, :, None, None]

    def bw(g):
        x._accumulate(g)
        b._accumulate(g.sum(axis=(0, 2, 3), dtype=np.float64).astype(b.data.dtype))

    return _result(out_data, (x, b), bw)


# -- fused ops used by masking and losses ---------------------------------------------


def masked_scale(x: Tensor, mask: np.ndarray, s: float) -> Tensor:
    """x * mask * s with a constant mask; gradient flows only through kept cells."""
    axes = _mask_axes(x.shape, mask.shape)
    if axes is None:
        raise DimensionError(f"mask shape {mask.shape} not alignable with {x.shape}")
    m = np.asarray(mask, dtype=x.data.dtype) * x.data.dtype.type(s)
    return _result(x.data * m, (x,), lambda g: x._accumulate(g * m))


def bce_with_logits(x: Tensor, target: np.ndarray) -> Tensor:
    """Elementwise binary cross entropy on logits against constant 0/1 targets."""
    if np.shape(target) != x.shape:
        raise DimensionError(f"bce target shape {np.shape(target)} != {x.shape}")
    t = np.asarray(target, dtype=np.float64)
    xd = x.data.astype(np.float64)
    out_data = (np.maximum(xd, 0.0) - xd * t + np.log1p(np.exp(-np.abs(xd)))).astype(x.data.dtype)

    def bw(g):
        sig = 1.0 / (1.0 + np.exp(-xd))
        x._accumulate((g * (sig - t)).astype(x.data.dtype))

    return _result(out_data, (x,), bw)


# -- optimizer --------------------------------------------------------------------


class Sgd:
    """SGD with classical momentum; any weight penalty lives in the loss."""

    def __init__(self, params: list[Tensor], lr: float, momentum: float = 0.9):
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.data -= p.data.dtype.type(self.lr) * v

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
