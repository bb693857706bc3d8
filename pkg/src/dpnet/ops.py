"""Differentiable forward operations over :class:`~dpnet.tensor.Tensor`.

Feature maps are ``(C, H, W)`` or batched ``(N, C, H, W)``. Every op returns a
new tensor; a backward closure is attached only when an input needs
gradients.
"""

from __future__ import annotations

from typing import Optional, Sequence, Tuple, Union

import numpy as np

from dpnet import counting
from dpnet.tensor import ShapeError, Tensor

Operand = Union[Tensor, float, int, np.ndarray]


def _wrap(x: Operand, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, name: str) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- element-wise -------------------------------------------------------------


def add(a: Operand, b: Operand) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return Tensor.from_op(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a: Operand, b: Operand) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return Tensor.from_op(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a: Operand, b: Operand) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor.from_op(ad * bd, (a, b), backward, "mul")


def div(a: Operand, b: Operand) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor.from_op(out, (a, b), backward, "div")


def elementwise(a: Operand, b: Operand, mode: str) -> Tensor:
    if mode == "add":
        return add(a, b)
    if mode == "mul":
        return mul(a, b)
    raise ValueError(f"unknown elementwise mode {mode!r}")


def maximum(a: Tensor, b: Operand) -> Tensor:
    """Element-wise max; ties send the gradient to ``a``."""
    b = _wrap(b, a)
    _check_broadcast(a, b, "maximum")
    pick_a = a.data >= b.data
    return Tensor.from_op(
        np.where(pick_a, a.data, b.data), (a, b),
        lambda g: (_unbroadcast(np.where(pick_a, g, 0), a.shape),
                   _unbroadcast(np.where(pick_a, 0, g), b.shape)), "maximum")


def minimum(a: Tensor, b: Operand) -> Tensor:
    """Element-wise min; ties send the gradient to ``a``."""
    b = _wrap(b, a)
    _check_broadcast(a, b, "minimum")
    pick_a = a.data <= b.data
    return Tensor.from_op(
        np.where(pick_a, a.data, b.data), (a, b),
        lambda g: (_unbroadcast(np.where(pick_a, g, 0), a.shape),
                   _unbroadcast(np.where(pick_a, 0, g), b.shape)), "minimum")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor.from_op(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor.from_op(np.log(xd), (x,), lambda g: (g / xd,), "log")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so neither branch overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return Tensor.from_op(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    # np.maximum keeps NaN visible to the non-finite checks downstream
    return Tensor.from_op(np.maximum(x.data, 0).astype(x.dtype), (x,),
                          lambda g: (g * mask,), "relu")


def activation(x: Tensor, mode: str) -> Tensor:
    if mode == "sigmoid":
        return sigmoid(x)
    if mode == "relu":
        return relu(x)
    raise ValueError(f"unknown activation {mode!r}")


def bce_with_logits(logits: Tensor, targets: Operand) -> Tensor:
    """Per-element binary cross-entropy on logits. Targets are constants."""
    t = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=logits.dtype)
    z = logits.data
    loss = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    return Tensor.from_op(loss, (logits,), lambda g: (g * (_sigmoid(z) - t),), "bce_with_logits")


# -- reductions and layout ----------------------------------------------------


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor.from_op(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return Tensor.from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor.from_op(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                          lambda g: (g.transpose(inv),), "transpose")


def gather(x: Tensor, index: Tuple) -> Tensor:
    """Advanced indexing ``x.data[index]``; repeated indices accumulate."""
    shape = x.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, index, g)
        return (out,)

    return Tensor.from_op(x.data[index], (x,), backward, "gather")


def _batched(x: Tensor, name: str) -> Tuple[Tensor, bool]:
    if x.ndim == 4:
        return x, False
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    raise ShapeError(f"{name}: expected (C,H,W) or (N,C,H,W), got shape {x.shape}")


def _unbatched(x: Tensor, squeeze: bool) -> Tensor:
    return reshape(x, x.shape[1:]) if squeeze else x


def channel_shuffle(x: Tensor, groups: int) -> Tensor:
    x, sq = _batched(x, "channel_shuffle")
    n, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise ShapeError(f"channel_shuffle: C={c} not divisible by groups={groups}")
    perm = shuffle_permutation(c, groups)
    inv = np.argsort(perm)
    out = Tensor.from_op(x.data[:, perm], (x,), lambda g: (g[:, inv],), "channel_shuffle")
    return _unbatched(out, sq)


def shuffle_permutation(channels: int, groups: int) -> np.ndarray:
    """Source channel for each output position under reshape-transpose-flatten."""
    return np.arange(channels).reshape(groups, channels // groups).T.reshape(-1)


def split_channels(x: Tensor) -> Tuple[Tensor, Tensor]:
    x, sq = _batched(x, "split")
    c = x.shape[1]
    if c % 2:
        raise ShapeError(f"split: channel count {c} is odd")
    half = c // 2
    return (_unbatched(slice_channels(x, 0, half), sq),
            _unbatched(slice_channels(x, half, c), sq))


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[:, start:stop] = g
        return (out,)

    return Tensor.from_op(x.data[:, start:stop].copy(), (x,), backward, "slice_channels")


def concat(xs: Sequence[Tensor], axis: int = -3) -> Tensor:
    xs = list(xs)
    ndim = xs[0].ndim
    ax = axis % ndim
    for t in xs[1:]:
        if t.ndim != ndim or any(t.shape[d] != xs[0].shape[d] for d in range(ndim) if d != ax):
            raise ShapeError(f"concat: shapes {[t.shape for t in xs]} differ off axis {ax}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in xs])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(xs)))

    return Tensor.from_op(np.concatenate([t.data for t in xs], axis=ax), xs, backward, "concat")


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch broadcasting over leading axes."""
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd
    counting.record(int(np.prod(out.shape)) * ad.shape[-1])

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor.from_op(out, (a, b), backward, "matmul")


# -- convolution --------------------------------------------------------------


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``weight`` is ``(C_out, C_in / groups, Kh, Kw)``. A depth-wise conv with a
    channel multiplier m is ``groups=C_in, C_out=m*C_in``.
    """
    x, sq = _batched(x, "conv2d")
    n, c_in, h, w = x.shape
    c_out, cg, kh, kw = weight.shape
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: stride={stride} padding={padding} invalid")
    if groups < 1 or c_in % groups or c_out % groups:
        raise ShapeError(f"conv2d: C_in={c_in}, C_out={c_out} not divisible by groups={groups}")
    if cg != c_in // groups:
        raise ShapeError(f"conv2d: weight expects {cg} channels per group, input gives C_in/groups={c_in // groups}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({c_out},)")

    og = c_out // groups
    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    wg = weight.data.reshape(groups, og, cg, kh, kw)
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    pointwise = kh == kw == 1 and stride == 1 and groups == 1

    def window(i, j):
        return xp[:, :, i:i + hs:stride, j:j + ws:stride].reshape(n, groups, cg, ho * wo)

    if pointwise:
        out = wg[0, :, :, 0, 0] @ xd.reshape(n, c_in, h * w)
        out = out.reshape(n, groups, og, ho * wo)
    else:
        out = np.zeros((n, groups, og, ho * wo), dtype=np.result_type(xd, weight.data))
        for i in range(kh):
            for j in range(kw):
                xs = window(i, j)
                if cg == 1:
                    out += wg[None, :, :, 0, i, j, None] * xs
                else:
                    out += wg[:, :, :, i, j] @ xs
    out = out.reshape(n, c_out, ho, wo)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    counting.record(c_out * ho * wo * cg * kh * kw * n)

    def backward(g):
        gg = g.reshape(n, groups, og, ho * wo)
        gx = gw = gb = None
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if pointwise:
            xf = xd.reshape(n, c_in, h * w)
            if weight.requires_grad:
                gw = np.einsum("nos,ncs->oc", gg[:, 0], xf, optimize=True).reshape(weight.shape)
            if x.requires_grad:
                gx = (wg[0, :, :, 0, 0].T @ gg[:, 0]).reshape(xd.shape)
            return gx, gw, gb
        gwg = np.zeros_like(wg) if weight.requires_grad else None
        gxp = np.zeros_like(xp) if x.requires_grad else None
        for i in range(kh):
            for j in range(kw):
                if gwg is not None:
                    xs = window(i, j)
                    if cg == 1:
                        gwg[:, :, 0, i, j] = np.einsum("ngos,ngs->go", gg, xs[:, :, 0], optimize=True)
                    else:
                        gwg[:, :, :, i, j] = np.einsum("ngos,ngcs->goc", gg, xs, optimize=True)
                if gxp is not None:
                    if cg == 1:
                        d = np.einsum("go,ngos->ngs", wg[:, :, 0, i, j], gg, optimize=True)
                    else:
                        d = np.swapaxes(wg[:, :, :, i, j], -1, -2) @ gg
                    gxp[:, :, i:i + hs:stride, j:j + ws:stride] += d.reshape(n, c_in, ho, wo)
        if gwg is not None:
            gw = gwg.reshape(weight.shape)
        if gxp is not None:
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _unbatched(Tensor.from_op(out, parents, backward, "conv2d"), sq)


# -- pooling and resampling ---------------------------------------------------


def pool2d(x: Tensor, mode: str, size, stride: Optional[int] = None) -> Tensor:
    """Max / average pooling over square windows, or adaptive average to ``size``."""
    if mode == "adaptive-average":
        return adaptive_avg_pool2d(x, size)
    if mode not in ("max", "average"):
        raise ValueError(f"unknown pool mode {mode!r}")
    x, sq = _batched(x, "pool2d")
    n, c, h, w = x.shape
    k = int(size)
    s = k if stride is None else int(stride)
    if k > h or k > w:
        raise ShapeError(f"pool2d: window {k} larger than input {h}x{w}")
    ho, wo = (h - k) // s + 1, (w - k) // s + 1
    hs, ws = s * (ho - 1) + 1, s * (wo - 1) + 1
    offsets = [(i, j) for i in range(k) for j in range(k)]
    stack = np.stack([x.data[:, :, i:i + hs:s, j:j + ws:s] for i, j in offsets])
    if mode == "max":
        arg = np.argmax(stack, axis=0)  # first maximum wins ties
        out = np.take_along_axis(stack, arg[None], axis=0)[0]

        def backward(g):
            gx = np.zeros(x.shape, dtype=g.dtype)
            for idx, (i, j) in enumerate(offsets):
                gx[:, :, i:i + hs:s, j:j + ws:s] += np.where(arg == idx, g, 0)
            return (gx,)
    else:
        out = stack.mean(axis=0)

        def backward(g):
            gx = np.zeros(x.shape, dtype=g.dtype)
            for i, j in offsets:
                gx[:, :, i:i + hs:s, j:j + ws:s] += g / (k * k)
            return (gx,)

    return _unbatched(Tensor.from_op(out, (x,), backward, f"pool2d_{mode}"), sq)


def adaptive_pool_matrix(size: int, target: int, dtype=np.float64) -> np.ndarray:
    """(target, size) averaging matrix; row i covers [floor(i*size/target), floor((i+1)*size/target))."""
    m = np.zeros((target, size), dtype=dtype)
    for i in range(target):
        lo, hi = (i * size) // target, ((i + 1) * size) // target
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


def adaptive_avg_pool2d(x: Tensor, target: int) -> Tensor:
    x, sq = _batched(x, "adaptive_avg_pool2d")
    n, c, h, w = x.shape
    if not 1 <= target <= min(h, w):
        raise ShapeError(f"adaptive_avg_pool2d: target {target} outside [1, {min(h, w)}]")
    ph = adaptive_pool_matrix(h, target, x.dtype)
    pw = adaptive_pool_matrix(w, target, x.dtype)
    out = ph @ x.data @ pw.T
    return _unbatched(Tensor.from_op(out, (x,), lambda g: (ph.T @ g @ pw,), "adaptive_avg_pool2d"), sq)


def resample2d(x: Tensor, mode: str) -> Tensor:
    """``up2``: nearest-neighbour x2. ``down2``: 2x2 block mean."""
    x, sq = _batched(x, "resample2d")
    n, c, h, w = x.shape
    if mode == "up2":
        out = x.data.repeat(2, axis=2).repeat(2, axis=3)
        back = lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)  # noqa: E731
    elif mode == "down2":
        if h % 2 or w % 2:
            raise ShapeError(f"resample2d down2: odd spatial size {h}x{w}")
        out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
        back = lambda g: ((g / 4).repeat(2, axis=2).repeat(2, axis=3),)  # noqa: E731
    else:
        raise ValueError(f"unknown resample mode {mode!r}")
    return _unbatched(Tensor.from_op(out, (x,), back, f"resample_{mode}"), sq)


# -- normalization ------------------------------------------------------------


def layer_norm(x: Tensor, axis: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over ``axis`` then apply ``gamma * x_hat + beta``.

    ``gamma``/``beta`` broadcast against ``x`` (scalars of shape ``(1,)`` here).
    """
    if eps <= 0:
        raise ValueError(f"layer_norm: eps must be positive, got {eps}")
    xd = x.data
    try:
        np.broadcast_shapes(gamma.shape, xd.shape)
        np.broadcast_shapes(beta.shape, xd.shape)
    except ValueError:
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} vs input {xd.shape}") from None
    mu = xd.mean(axis=axis, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd, bd = gamma.data, beta.data
    out = xhat * gd + bd

    def backward(g):
        gg = _unbroadcast(g * xhat, gd.shape) if gamma.requires_grad else None
        gb = _unbroadcast(g, bd.shape) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=axis, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=axis, keepdims=True))
        return gx, gg, gb

    return Tensor.from_op(out, (x, gamma, beta), backward, "layer_norm")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: Tensor, running_var: Tensor,
               training: bool = False, momentum: float = 0.9, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over axis 1.

    In training mode batch statistics are used and the running buffers are
    updated in place as ``running = momentum * running + (1 - momentum) * batch``.
    """
    if eps <= 0:
        raise ValueError(f"batch_norm: eps must be positive, got {eps}")
    x, sq = _batched(x, "batch_norm")
    c = x.shape[1]
    for name, t in (("gamma", gamma), ("beta", beta), ("running_mean", running_mean), ("running_var", running_var)):
        if t.shape != (c,):
            raise ShapeError(f"batch_norm: {name} shape {t.shape} != ({c},)")
    xd = x.data
    gd = gamma.data[None, :, None, None]
    bd = beta.data[None, :, None, None]
    if training:
        axes = (0, 2, 3)
        mu = xd.mean(axis=axes, keepdims=True)
        xc = xd - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        count = xd.size // c
        unbiased = var.reshape(c) * (count / max(count - 1, 1))
        running_mean.data[...] = momentum * running_mean.data + (1 - momentum) * mu.reshape(c)
        running_var.data[...] = momentum * running_var.data + (1 - momentum) * unbiased

        def backward(g):
            gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
            gb = g.sum(axis=axes) if beta.requires_grad else None
            gx = None
            if x.requires_grad:
                gh = g * gd
                gx = inv * (gh - gh.mean(axis=axes, keepdims=True)
                            - xhat * (gh * xhat).mean(axis=axes, keepdims=True))
            return gx, gg, gb
    else:
        inv = 1.0 / np.sqrt(running_var.data[None, :, None, None] + eps)
        xhat = (xd - running_mean.data[None, :, None, None]) * inv

        def backward(g):
            gg = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
            gb = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
            gx = g * gd * inv if x.requires_grad else None
            return gx, gg, gb

    out = (xhat * gd + bd).astype(xd.dtype, copy=False)
    return _unbatched(Tensor.from_op(out, (x, gamma, beta), backward, "batch_norm"), sq)


def normalize(x: Tensor, mode: str, gamma: Tensor, beta: Tensor, eps: float = 1e-5, *,
              axis: int = -1, running_mean: Optional[Tensor] = None,
              running_var: Optional[Tensor] = None, training: bool = False) -> Tensor:
    if mode == "layer":
        return layer_norm(x, axis, gamma, beta, eps)
    if mode == "batch":
        if running_mean is None or running_var is None:
            raise ValueError("batch normalization needs running statistics")
        return batch_norm(x, gamma, beta, running_mean, running_var, training=training, eps=eps)
    raise ValueError(f"unknown normalization mode {mode!r}")


def iou_xyxy(a: Tensor, b: Tensor) -> Tensor:
    """Differentiable IoU of corresponding boxes, both ``(..., 4)`` as x1,y1,x2,y2."""
    ax1, ay1, ax2, ay2 = (gather(a, (Ellipsis, i)) for i in range(4))
    bx1, by1, bx2, by2 = (gather(b, (Ellipsis, i)) for i in range(4))
    iw = relu(sub(minimum(ax2, bx2), maximum(ax1, bx1)))
    ih = relu(sub(minimum(ay2, by2), maximum(ay1, by1)))
    inter = mul(iw, ih)
    area_a = mul(sub(ax2, ax1), sub(ay2, ay1))
    area_b = mul(sub(bx2, bx1), sub(by2, by1))
    union = sub(add(area_a, area_b), inter)
    return div(inter, add(union, 1e-12))

