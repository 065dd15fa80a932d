"""Neural-network operations built from the autodiff primitives.

Convolutions are lowered to gather (im2col) + matmul, warping and
upsampling to gathers with interpolation weights; every op is therefore
differentiable to arbitrary order for free. Index arrays depend only on
shapes and are cached.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    _make,
    clip,
    concat,
    crop,
    matmul,
    mul,
    reshape,
    scatter_add,
    sub,
    take,
    tmean,
    transpose,
    tsum,
    zero_pad,
)


@lru_cache(maxsize=None)
def _im2col_idx(n, c, h, w, kh, kw, stride):
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    ci = np.arange(c)[:, None, None]
    ki = np.arange(kh)[None, :, None]
    kj = np.arange(kw)[None, None, :]
    row = (ci * h + ki) * w + kj                       # (c, kh, kw)
    ni = np.arange(n)[:, None, None]
    oy = (np.arange(oh) * stride)[None, :, None]
    ox = (np.arange(ow) * stride)[None, None, :]
    col = ni * (c * h * w) + oy * w + ox               # (n, oh, ow)
    return row.reshape(-1, 1) + col.reshape(1, -1)     # (c*kh*kw, n*oh*ow)


@lru_cache(maxsize=None)
def _dilate_idx(n, c, h, w, stride):
    hd = (h - 1) * stride + 1
    wd = (w - 1) * stride + 1
    ni = np.arange(n)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]
    yi = (np.arange(h) * stride)[None, None, :, None]
    xi = (np.arange(w) * stride)[None, None, None, :]
    idx = ((ni * c + ci) * hd + yi) * wd + xi
    return idx, (n, c, hd, wd)


@lru_cache(maxsize=None)
def _flip_spatial_idx(cout, cin, kh, kw):
    # indices into a (cout, cin, kh, kw) array with both spatial axes reversed
    co = np.arange(cout)[:, None, None, None]
    ci = np.arange(cin)[None, :, None, None]
    yi = (kh - 1 - np.arange(kh))[None, None, :, None]
    xi = (kw - 1 - np.arange(kw))[None, None, None, :]
    return ((co * cin + ci) * kh + yi) * kw + xi


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input and OIHW kernel."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input/kernel, got {x.shape} and {kernel.shape}")
    n, cin, h, w = x.shape
    cout, cink, kh, kw = kernel.shape
    if cin != cink:
        raise ShapeError(f"conv2d: input shape {x.shape} does not match kernel shape {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride {stride} or padding {padding}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(f"conv2d: kernel {kernel.shape} larger than padded input {x.shape}")
    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        cols = reshape(transpose(x, (1, 0, 2, 3)), (cin, n * h * w))
        out = matmul(reshape(kernel, (cout, cin)), cols)
        return transpose(reshape(out, (cout, n, h, w)), (1, 0, 2, 3))
    if padding:
        x = zero_pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        h, w = h + 2 * padding, w + 2 * padding
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    cols = take(x, _im2col_idx(n, cin, h, w, kh, kw, stride))
    out = matmul(reshape(kernel, (cout, cin * kh * kw)), cols)
    return transpose(reshape(out, (cout, n, oh, ow)), (1, 0, 2, 3))


def conv_transpose2d(x: Tensor, kernel: Tensor, stride: int = 2, padding: int = 0) -> Tensor:
    """Transposed convolution, NCHW input and (in, out, kh, kw) kernel."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv_transpose2d expects 4-D input/kernel, got {x.shape} and {kernel.shape}")
    n, cin, h, w = x.shape
    cink, cout, kh, kw = kernel.shape
    if cin != cink:
        raise ShapeError(
            f"conv_transpose2d: input shape {x.shape} does not match kernel shape {kernel.shape}")
    if padding > kh - 1 or padding > kw - 1:
        raise ShapeError(f"conv_transpose2d: padding {padding} exceeds kernel size {kernel.shape}")
    if stride > 1:
        idx, dshape = _dilate_idx(n, cin, h, w, stride)
        x = reshape(scatter_add(x, idx, int(np.prod(dshape))), dshape)
    kt = transpose(kernel, (1, 0, 2, 3))
    kf = take(kt, _flip_spatial_idx(cout, cin, kh, kw))
    return conv2d(x, kf, stride=1, padding=kh - 1 - padding)


def shift_right(x: Tensor, d: int) -> Tensor:
    """out[..., i] = x[..., i - d]; vacated columns are zero."""
    if d == 0:
        return x
    data = np.zeros(x.shape)
    data[..., d:] = x.data[..., :-d]

    def vjp(g):
        return (shift_left(g, d),)

    return _make("shift_right", data, (x,), vjp)


def shift_left(x: Tensor, d: int) -> Tensor:
    """out[..., i] = x[..., i + d]; vacated columns are zero."""
    if d == 0:
        return x
    data = np.zeros(x.shape)
    data[..., :-d] = x.data[..., d:]

    def vjp(g):
        return (shift_right(g, d),)

    return _make("shift_left", data, (x,), vjp)


def correlate1d(left_feat: Tensor, right_feat: Tensor, max_disp: int) -> Tensor:
    """Horizontal correlation volume.

    out[n, d, y, x] = mean_c left[n, c, y, x] * right[n, c, y, x - d];
    positions with x - d < 0 give 0.
    """
    if left_feat.shape != right_feat.shape:
        raise ShapeError(
            f"correlate1d: left shape {left_feat.shape} != right shape {right_feat.shape}")
    if max_disp < 0:
        raise ShapeError(f"correlate1d: max_disp must be >= 0, got {max_disp}")
    planes = []
    for d in range(max_disp + 1):
        shifted = shift_right(right_feat, d)
        planes.append(tmean(mul(left_feat, shifted), axis=1, keepdims=True))
    return concat(planes, axis=1)


@lru_cache(maxsize=None)
def _warp_base_idx(n, c, h, w):
    ni = np.arange(n)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]
    yi = np.arange(h)[None, None, :, None]
    return ((ni * c + ci) * h + yi) * w


def warp_horizontal(image: Tensor, disparity: Tensor) -> tuple[Tensor, np.ndarray]:
    """Sample the image at x - disparity with bilinear interpolation.

    Returns the warped image and a boolean validity mask (False where
    the sampling position fell outside the image and was border-clamped).
    Differentiable with respect to both image and disparity.
    """
    if image.ndim != 4 or disparity.ndim != 4:
        raise ShapeError(f"warp expects 4-D tensors, got {image.shape} and {disparity.shape}")
    n, c, h, w = image.shape
    if disparity.shape != (n, 1, h, w):
        raise ShapeError(
            f"warp: disparity shape {disparity.shape} does not match image shape {image.shape}")
    xgrid = Tensor(np.arange(w, dtype=np.float64).reshape(1, 1, 1, w))
    xs = sub(xgrid, disparity)
    valid = (xs.data >= 0.0) & (xs.data <= w - 1.0)
    xc = clip(xs, 0.0, float(w - 1))
    x0 = np.minimum(np.floor(xc.data), w - 2.0)
    frac = sub(xc, Tensor(x0))
    base = _warp_base_idx(n, c, h, w)
    idx0 = (base + x0.astype(np.int64)).reshape(n, c, h, w)
    g0 = take(image, idx0)
    g1 = take(image, idx0 + 1)
    out = add_weighted(g0, g1, frac)
    return out, valid


def add_weighted(a: Tensor, b: Tensor, frac: Tensor) -> Tensor:
    """a * (1 - frac) + b * frac."""
    return mul(a, sub(Tensor(1.0), frac)) + mul(b, frac)


@lru_cache(maxsize=None)
def _upsample_plan(n, c, h, w, factor):
    def axis_plan(size, out_size):
        src = (np.arange(out_size) + 0.5) / factor - 0.5
        src = np.clip(src, 0.0, size - 1.0)
        i0 = np.minimum(np.floor(src), size - 2.0).astype(np.int64) if size > 1 else np.zeros(out_size, np.int64)
        f = src - i0
        return i0, f

    oh, ow = h * factor, w * factor
    y0, fy = axis_plan(h, oh)
    x0, fx = axis_plan(w, ow)
    ni = np.arange(n)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]
    base = (ni * c + ci) * (h * w)
    ys = y0[None, None, :, None] * w
    xs = x0[None, None, None, :]
    idx00 = base + ys + xs
    idx01 = idx00 + (1 if w > 1 else 0)
    idx10 = idx00 + (w if h > 1 else 0)
    idx11 = idx10 + (1 if w > 1 else 0)
    fy = fy[None, None, :, None]
    fx = fx[None, None, None, :]
    w00 = (1 - fy) * (1 - fx)
    w01 = (1 - fy) * fx
    w10 = fy * (1 - fx)
    w11 = fy * fx
    return (idx00, idx01, idx10, idx11), (w00, w01, w10, w11)


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    """Bilinear upsampling by an integer factor (2 or 4)."""
    if x.ndim != 4:
        raise ShapeError(f"bilinear_upsample expects a 4-D tensor, got {x.shape}")
    if factor not in (2, 4):
        raise ShapeError(f"bilinear_upsample: factor must be 2 or 4, got {factor}")
    n, c, h, w = x.shape
    idxs, weights = _upsample_plan(n, c, h, w, factor)
    out = None
    for idx, wt in zip(idxs, weights):
        term = mul(take(x, idx), Tensor(wt))
        out = term if out is None else out + term
    return out


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2 requires even spatial dims, got {x.shape}")
    r = reshape(x, (n, c, h // 2, 2, w // 2, 2))
    return mul(tsum(r, axis=(3, 5)), Tensor(0.25))


def _box_sum_raw(x: np.ndarray, size: int) -> np.ndarray:
    r = size // 2
    n, c, h, w = x.shape
    padded = np.zeros((n, c, h + 2 * r, w + 2 * r))
    padded[:, :, r:r + h, r:r + w] = x
    out = np.zeros((n, c, h, w))
    for dy in range(size):
        for dx in range(size):
            out += padded[:, :, dy:dy + h, dx:dx + w]
    return out


def box_sum(x: Tensor, size: int) -> Tensor:
    """Sum over a size x size window with zero padding; self-adjoint."""

    def vjp(g):
        return (box_sum(g, size),)

    return _make("box_sum", _box_sum_raw(x.data, size), (x,), vjp)


@lru_cache(maxsize=None)
def _box_counts(h, w, size):
    return 1.0 / _box_sum_raw(np.ones((1, 1, h, w)), size)


def box_filter(x: Tensor, size: int) -> Tensor:
    """Local mean over a size x size window, renormalized at borders."""
    n, c, h, w = x.shape
    return mul(box_sum(x, size), Tensor(_box_counts(h, w, size)))


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    In training mode batch statistics are used and the running buffers
    are updated in place; otherwise the running statistics are applied.
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: expected ({c},) scale/shift, got {gamma.shape}/{beta.shape}")
    if training:
        m = tmean(x, axis=(0, 2, 3), keepdims=True)
        v = tmean(pow2(sub(x, m)), axis=(0, 2, 3), keepdims=True)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * m.data.reshape(-1)
        running_var *= momentum
        running_var += (1.0 - momentum) * v.data.reshape(-1)
    else:
        m = Tensor(running_mean.reshape(1, c, 1, 1))
        v = Tensor(running_var.reshape(1, c, 1, 1))
    inv = pow_neg_half(v, eps)
    xhat = mul(sub(x, m), inv)
    return add_bias(mul(xhat, reshape(gamma, (1, c, 1, 1))), beta)


def pow2(x: Tensor) -> Tensor:
    return mul(x, x)


def pow_neg_half(v: Tensor, eps: float) -> Tensor:
    from .autodiff import pow_const
    return pow_const(v + Tensor(eps), -0.5)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias to an NCHW tensor."""
    return x + reshape(b, (1, b.size, 1, 1))
