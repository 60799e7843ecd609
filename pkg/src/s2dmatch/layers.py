"""Forward and backward kernels for the fixed op set of the matcher.

All ops take and return :class:`~s2dmatch.tensor.Tensor` objects laid out as
``(C, H, W)``. Correlation maps for many keypoints are batched by using the
keypoint index as the channel axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor


class ShapeError(ValueError):
    """Raised when operand dimensions are incompatible."""


def _check_chw(x: Tensor, op: str) -> None:
    if x.ndim != 3:
        raise ShapeError(f"{op}: expected a (C, H, W) tensor, got shape {x.shape}")


# convolution ---------------------------------------------------------------


@dataclass
class ConvParams:
    """Kernel ``(out_ch, in_ch, kh, kw)``, bias ``(out_ch,)``, stride and zero padding."""

    weight: Tensor
    bias: Tensor | None = None
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        self.weight = as_tensor(self.weight)
        if self.bias is not None:
            self.bias = as_tensor(self.bias)
        if self.weight.ndim != 4:
            raise ShapeError(f"conv weight must be 4-D, got {self.weight.shape}")
        kh, kw = self.weight.shape[2:]
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"conv kernels must have odd size, got {kh}x{kw}")
        if self.stride < 1 or self.padding < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")

    @classmethod
    def same(cls, weight, bias=None) -> ConvParams:
        kh = np.shape(weight.data if isinstance(weight, Tensor) else weight)[2]
        return cls(weight, bias, stride=1, padding=(kh - 1) // 2)


def conv2d(input: Tensor, params: ConvParams) -> Tensor:
    """2-D cross-correlation with zero padding (im2col + one matrix product)."""
    _check_chw(input, "conv2d")
    w = params.weight
    out_ch, in_ch, kh, kw = w.shape
    c, h, wd = input.shape
    if c != in_ch:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {in_ch}")
    s, p = params.stride, params.padding
    oh = (h + 2 * p - kh) // s + 1
    ow = (wd + 2 * p - kw) // s + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d: {kh}x{kw} kernel does not fit a padded {h}x{wd} input")

    xp = np.pad(input.data, ((0, 0), (p, p), (p, p))) if p else input.data
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, : s * (oh - 1) + 1 : s, : s * (ow - 1) + 1 : s]
    cols = win.transpose(0, 3, 4, 1, 2).reshape(c * kh * kw, oh * ow)
    wmat = w.data.reshape(out_ch, -1)
    out = wmat @ cols
    bias = params.bias
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(out_ch, oh, ow)

    parents = (input, w) if bias is None else (input, w, bias)

    def backward(g):
        g2 = g.reshape(out_ch, -1)
        gw = (g2 @ cols.T).reshape(w.shape) if w.requires_grad else None
        gx = None
        if input.requires_grad:
            gcols = (wmat.T @ g2).reshape(c, kh, kw, oh, ow)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + s * oh : s, j : j + s * ow : s] += gcols[:, i, j]
            gx = gxp[:, p : p + h, p : p + wd] if p else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=1)

    return Tensor.from_op(out, parents, backward)


# pointwise / pooling ---------------------------------------------------------


def relu(input: Tensor) -> Tensor:
    mask = input.data > 0
    return Tensor.from_op(input.data * mask, (input,), lambda g: (g * mask,))


def maxpool2(input: Tensor) -> Tensor:
    """2x2 max-pool, stride 2. Odd sizes are padded right/bottom by edge replication.

    The gradient goes to the first maximal element of each window in row-major
    order.
    """
    _check_chw(input, "maxpool2")
    c, h, w = input.shape
    ph, pw = h % 2, w % 2
    x = np.pad(input.data, ((0, 0), (0, ph), (0, pw)), mode="edge") if (ph or pw) else input.data
    hh, ww = x.shape[1] // 2, x.shape[2] // 2
    win = x.reshape(c, hh, 2, ww, 2).transpose(0, 1, 3, 2, 4).reshape(c, hh, ww, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gx = gw.reshape(c, hh, ww, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, 2 * hh, 2 * ww)
        if pw:
            gx[:, :, w - 1] += gx[:, :, w]
        if ph:
            gx[:, h - 1, :] += gx[:, h, :]
        return (gx[:, :h, :w],)

    return Tensor.from_op(out, (input,), backward)


# batch normalization ---------------------------------------------------------


@dataclass
class BatchNormParams:
    """Affine batch-norm over the spatial axes of each channel.

    ``running_mean`` and ``running_var`` are plain arrays updated in place in
    training mode.
    """

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1
    training: bool = False

    def __post_init__(self):
        self.gamma = as_tensor(self.gamma)
        self.beta = as_tensor(self.beta)
        if self.eps <= 0:
            raise ValueError("batchnorm eps must be positive")
        if not 0.0 < self.momentum < 1.0:
            raise ValueError("batchnorm momentum must lie in (0, 1)")
        if np.any(np.asarray(self.running_var) < 0):
            raise ValueError("running_var must be non-negative")


def batchnorm(input: Tensor, params: BatchNormParams) -> Tensor:
    _check_chw(input, "batchnorm")
    c, h, w = input.shape
    if c != params.gamma.shape[0]:
        raise ShapeError(f"batchnorm: {c} channels, params have {params.gamma.shape[0]}")
    n = h * w
    if n == 0:
        raise ShapeError("batchnorm: zero spatial extent")
    gamma, beta = params.gamma, params.beta
    x = input.data
    dt = x.dtype
    g3 = gamma.data.astype(dt)[:, None, None]

    if params.training:
        mean = x.mean(axis=(1, 2))
        var = x.var(axis=(1, 2))
        m = params.momentum
        unbiased = var * (n / (n - 1)) if n > 1 else var
        params.running_mean[...] = (1 - m) * params.running_mean + m * mean
        params.running_var[...] = (1 - m) * params.running_var + m * unbiased
    else:
        mean = np.asarray(params.running_mean, dtype=dt)
        var = np.asarray(params.running_var, dtype=dt)

    inv_std = (1.0 / np.sqrt(var + dt.type(params.eps))).astype(dt)
    xhat = (x - mean[:, None, None]) * inv_std[:, None, None]
    out = g3 * xhat + beta.data.astype(dt)[:, None, None]
    training = params.training

    def backward(g):
        gg = (g * xhat).sum(axis=(1, 2)) if gamma.requires_grad else None
        gb = g.sum(axis=(1, 2)) if beta.requires_grad else None
        gx = None
        if input.requires_grad:
            dxhat = g * g3
            if training:
                gx = (inv_std[:, None, None] / n) * (
                    n * dxhat
                    - dxhat.sum(axis=(1, 2), keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=(1, 2), keepdims=True)
                )
            else:
                gx = dxhat * inv_std[:, None, None]
        return gx, gg, gb

    return Tensor.from_op(out, (input, gamma, beta), backward)


# interpolation -----------------------------------------------------------------


def lerp_indices(n_src: int, n_dst: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Align-corners source indices and weights for resampling ``n_src`` -> ``n_dst``.

    Destination index ``i`` reads ``src = i * (n_src - 1) / (n_dst - 1)``;
    returns ``(i0, i1, t)`` with ``value = v[i0] + t * (v[i1] - v[i0])``.
    """
    if n_dst == 1 or n_src == 1:
        z = np.zeros(n_dst, dtype=np.intp)
        return z, z, np.zeros(n_dst)
    src = np.arange(n_dst) * (n_src - 1) / (n_dst - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_src - 1)
    return i0, i1, src - i0


def _interp_matrix(i0, i1, t, n_src, dtype) -> np.ndarray:
    m = np.zeros((len(t), n_src), dtype=dtype)
    rows = np.arange(len(t))
    np.add.at(m, (rows, i0), 1 - t)
    np.add.at(m, (rows, i1), t)
    return m


def bilinear_upsample(input: Tensor, target_h: int, target_w: int) -> Tensor:
    """Align-corners bilinear resize to a size at least as large as the input."""
    _check_chw(input, "bilinear_upsample")
    c, h, w = input.shape
    if target_h < h or target_w < w:
        raise ShapeError(f"bilinear_upsample: target {target_h}x{target_w} smaller than source {h}x{w}")
    if (target_h, target_w) == (h, w):
        return Tensor.from_op(input.data, (input,), lambda g: (g,))
    dt = input.dtype
    y0, y1, ty = lerp_indices(h, target_h)
    x0, x1, tx = lerp_indices(w, target_w)
    x = input.data
    a = x[:, :, x0]
    rows = a + tx.astype(dt) * (x[:, :, x1] - a)
    top = rows[:, y0, :]
    out = top + ty.astype(dt)[:, None] * (rows[:, y1, :] - top)

    def backward(g):
        my = _interp_matrix(y0, y1, ty, h, g.dtype)
        mx = _interp_matrix(x0, x1, tx, w, g.dtype)
        return (my.T @ g @ mx,)

    return Tensor.from_op(out, (input,), backward)


def sample_points(fmap: Tensor, xs, ys) -> Tensor:
    """Bilinearly sample a ``(D, h, w)`` map at fractional points, giving ``(N, D)``.

    Coordinates are clamped to the valid lattice ``[0, w-1] x [0, h-1]``.
    """
    _check_chw(fmap, "sample_points")
    d, h, w = fmap.shape
    xs = np.clip(np.asarray(xs, dtype=np.float64), 0, w - 1)
    ys = np.clip(np.asarray(ys, dtype=np.float64), 0, h - 1)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    dt = fmap.dtype
    tx = (xs - x0).astype(dt)[:, None]
    ty = (ys - y0).astype(dt)[:, None]
    f = fmap.data
    v00, v01 = f[:, y0, x0].T, f[:, y0, x1].T
    v10, v11 = f[:, y1, x0].T, f[:, y1, x1].T
    top = v00 + tx * (v01 - v00)
    bottom = v10 + tx * (v11 - v10)
    out = top + ty * (bottom - top)

    def backward(g):
        gm = np.zeros((d, h * w), dtype=g.dtype)
        for yy, xx, wt in (
            (y0, x0, (1 - tx) * (1 - ty)),
            (y0, x1, tx * (1 - ty)),
            (y1, x0, (1 - tx) * ty),
            (y1, x1, tx * ty),
        ):
            np.add.at(gm.T, yy * w + xx, g * wt)
        return (gm.reshape(d, h, w),)

    return Tensor.from_op(out, (fmap,), backward)


# correlation and classification heads ---------------------------------------------


def correlate_1x1(descriptor: Tensor, fmap: Tensor) -> Tensor:
    """Dot product of descriptor(s) with every pixel column of ``fmap``.

    ``descriptor`` is ``(D,)`` for a single score map or ``(N, D)`` for N maps
    stacked on the channel axis of the ``(N, h, w)`` result.
    """
    descriptor = as_tensor(descriptor)
    _check_chw(fmap, "correlate_1x1")
    single = descriptor.ndim == 1
    dmat = descriptor.data[None, :] if single else descriptor.data
    d, h, w = fmap.shape
    if dmat.shape[1] != d:
        raise ShapeError(f"correlate_1x1: descriptor length {dmat.shape[1]} vs {d} map channels")
    m2 = fmap.data.reshape(d, h * w)
    out = (dmat @ m2).reshape(-1, h, w)

    def backward(g):
        g2 = g.reshape(-1, h * w)
        gd = g2 @ m2.T if descriptor.requires_grad else None
        if gd is not None and single:
            gd = gd[0]
        gm = (dmat.T @ g2).reshape(d, h, w) if fmap.requires_grad else None
        return gd, gm

    return Tensor.from_op(out, (descriptor, fmap), backward)


def concat_channels(tensors, axis: int = 0) -> Tensor:
    """Concatenate tensors along ``axis`` (the channel axis by default)."""
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(sizes)))

    return Tensor.from_op(out, tuple(tensors), backward)


def _log_softmax_np(x: np.ndarray) -> np.ndarray:
    flat = x.reshape(x.shape[0], -1)
    mx = flat.max(axis=1, keepdims=True)
    shifted = flat - mx
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return (shifted - lse).reshape(x.shape)


def softmax2d(logits: Tensor) -> Tensor:
    """Softmax over all spatial positions of each channel."""
    _check_chw(logits, "softmax2d")
    p = np.exp(_log_softmax_np(logits.data))

    def backward(g):
        inner = (g * p).sum(axis=(1, 2), keepdims=True)
        return (p * (g - inner),)

    return Tensor.from_op(p, (logits,), backward)


def log_softmax2d(logits: Tensor) -> Tensor:
    _check_chw(logits, "log_softmax2d")
    out = _log_softmax_np(logits.data)
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=(1, 2), keepdims=True),)

    return Tensor.from_op(out, (logits,), backward)


def cross_entropy2d(logits: Tensor, targets) -> Tensor:
    """Mean over channels of ``-log softmax(logits[n])[y_n, x_n]``.

    ``targets`` is an ``(N, 2)`` integer array of ``(x, y)`` lattice points,
    one per channel of ``logits``.
    """
    _check_chw(logits, "cross_entropy2d")
    n, h, w = logits.shape
    targets = np.asarray(targets, dtype=np.intp).reshape(-1, 2)
    if len(targets) != n:
        raise ShapeError(f"cross_entropy2d: {n} maps but {len(targets)} targets")
    tx, ty = targets[:, 0], targets[:, 1]
    if np.any((tx < 0) | (tx >= w) | (ty < 0) | (ty >= h)):
        bad = int(np.flatnonzero((tx < 0) | (tx >= w) | (ty < 0) | (ty >= h))[0])
        raise IndexError(f"cross_entropy2d: target {bad} = {tuple(targets[bad])} outside {w}x{h} map")
    logp = _log_softmax_np(logits.data)
    idx = np.arange(n)
    loss = -logp[idx, ty, tx].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[idx, ty, tx] -= 1
        return (grad * (g / n),)

    return Tensor.from_op(np.asarray(loss, dtype=logits.dtype), (logits,), backward)
