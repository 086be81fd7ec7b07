"""Dense tensor primitives with hand-written adjoints.

Feature maps are numpy arrays laid out ``[batch, height, width, channels]``.
Every forward op here is a pure function; each ``*_backward`` takes the
upstream gradient of the forward output (plus whatever the forward needed)
and returns gradients for every input and parameter.

Convolutions use "same" zero padding and stride 1.  Two evaluation paths
exist: ``"direct"`` loops over kernel taps and does one channel matmul per
tap, ``"im2col"`` gathers all taps first and does a single matmul.  They
agree to rounding.
"""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .errors import NonFiniteError, ShapeError, StateError

Tensor = np.ndarray

KERNEL_SIZES = (1, 3, 5)


def check_finite(*arrays: Tensor, where: str = "op") -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(f"non-finite values at {where} boundary")


def _check_nhwc(x: Tensor, name: str = "x") -> None:
    if x.ndim != 4:
        raise ShapeError(f"{name} must be 4-d [B,H,W,C], got shape {x.shape}", axis="rank")


@dataclass
class ConvKernel:
    weights: Tensor  # [kh, kw, c_in, c_out]
    bias: Tensor  # [c_out]

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise ShapeError(f"conv weights must be 4-d, got {self.weights.shape}", axis="rank")
        kh, kw, _, cout = self.weights.shape
        if kh not in KERNEL_SIZES or kw not in KERNEL_SIZES:
            raise ShapeError(f"kernel size {kh}x{kw} not in {KERNEL_SIZES}", axis="kernel")
        if self.bias.shape != (cout,):
            raise ShapeError(f"bias shape {self.bias.shape} != ({cout},)", axis="c_out")

    @property
    def size(self) -> int:
        return self.weights.size + self.bias.size


@dataclass
class DepthwiseKernel:
    weights: Tensor  # [kh, kw, c]
    bias: Tensor  # [c]

    def __post_init__(self):
        if self.weights.ndim != 3:
            raise ShapeError(f"depthwise weights must be 3-d, got {self.weights.shape}", axis="rank")
        kh, kw, c = self.weights.shape
        if kh not in KERNEL_SIZES or kw not in KERNEL_SIZES:
            raise ShapeError(f"kernel size {kh}x{kw} not in {KERNEL_SIZES}", axis="kernel")
        if self.bias.shape != (c,):
            raise ShapeError(f"bias shape {self.bias.shape} != ({c},)", axis="channels")

    @property
    def size(self) -> int:
        return self.weights.size + self.bias.size


@dataclass
class BatchNormState:
    """Affine parameters and running statistics of one batch-norm layer.

    ``initialized`` is false until the first training-mode update or an
    explicit :meth:`seed`; inference on an uninitialized state is an error.
    """

    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    momentum: float = 0.9
    epsilon: float = 1e-5
    training: bool = True
    initialized: bool = False

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        c = self.gamma.shape
        for name in ("beta", "running_mean", "running_var"):
            if getattr(self, name).shape != c:
                raise ShapeError(f"{name} shape {getattr(self, name).shape} != {c}", axis="channels")
        if np.any(self.running_var < 0):
            raise ValueError("running_var must be non-negative")

    def seed(self, mean=0.0, var=1.0) -> None:
        self.running_mean[...] = mean
        self.running_var[...] = var
        self.initialized = True


def _same_pad(x: Tensor, kh: int, kw: int) -> Tensor:
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))


def _im2col(xp: Tensor, kh: int, kw: int, H: int, W: int) -> Tensor:
    # [B,H,W,C,kh,kw] -> [B*H*W, kh*kw*C] matching the weight layout
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(-1, kh * kw * xp.shape[3])


def _col2im(cols: Tensor, shape, kh: int, kw: int) -> Tensor:
    B, H, W, C = shape
    cols = cols.reshape(B, H, W, kh, kw, C)
    dxp = np.zeros((B, H + kh - 1, W + kw - 1, C), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + H, j:j + W, :] += cols[:, :, :, i, j, :]
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    return dxp[:, ph:ph + H, pw:pw + W, :]


def _check_conv(x: Tensor, k: ConvKernel) -> None:
    _check_nhwc(x)
    if k.weights.shape[2] != x.shape[3]:
        raise ShapeError(
            f"conv2d: input has {x.shape[3]} channels, kernel expects {k.weights.shape[2]}",
            axis="channels",
        )


def conv2d(x: Tensor, k: ConvKernel, method: str = "direct") -> Tensor:
    """Stride-1, same-zero-padded 2-d convolution (cross-correlation)."""
    _check_conv(x, k)
    check_finite(x, k.weights, k.bias, where="conv2d")
    B, H, W, C = x.shape
    kh, kw, _, cout = k.weights.shape
    if kh == 1 and kw == 1:
        out = x.reshape(-1, C) @ k.weights.reshape(C, cout)
    elif method == "im2col":
        cols = _im2col(_same_pad(x, kh, kw), kh, kw, H, W)
        out = cols @ k.weights.reshape(-1, cout)
    elif method == "direct":
        xp = _same_pad(x, kh, kw)
        out = np.zeros((B * H * W, cout), dtype=np.result_type(x, k.weights))
        for i in range(kh):
            for j in range(kw):
                out += xp[:, i:i + H, j:j + W, :].reshape(-1, C) @ k.weights[i, j]
    else:
        raise ValueError(f"unknown conv method {method!r}")
    out += k.bias
    return out.reshape(B, H, W, cout)


def conv2d_backward(dout: Tensor, x: Tensor, k: ConvKernel, method: str = "direct"):
    """Returns ``(dx, dweights, dbias)``."""
    B, H, W, C = x.shape
    kh, kw, _, cout = k.weights.shape
    if dout.shape != (B, H, W, cout):
        raise ShapeError(f"conv2d_backward: upstream shape {dout.shape} != {(B, H, W, cout)}", axis="output")
    d2 = dout.reshape(-1, cout)
    db = d2.sum(axis=0)
    if kh == 1 and kw == 1:
        x2 = x.reshape(-1, C)
        dw = (x2.T @ d2).reshape(k.weights.shape)
        dx = (d2 @ k.weights.reshape(C, cout).T).reshape(x.shape)
        return dx, dw, db
    xp = _same_pad(x, kh, kw)
    if method == "im2col":
        cols = _im2col(xp, kh, kw, H, W)
        wmat = k.weights.reshape(-1, cout)
        dw = (cols.T @ d2).reshape(k.weights.shape)
        dx = _col2im(d2 @ wmat.T, x.shape, kh, kw)
    elif method == "direct":
        dw = np.empty_like(k.weights)
        dxp = np.zeros(xp.shape, dtype=np.result_type(dout, k.weights))
        for i in range(kh):
            for j in range(kw):
                dw[i, j] = xp[:, i:i + H, j:j + W, :].reshape(-1, C).T @ d2
                dxp[:, i:i + H, j:j + W, :] += (d2 @ k.weights[i, j].T).reshape(B, H, W, C)
        ph, pw = (kh - 1) // 2, (kw - 1) // 2
        dx = dxp[:, ph:ph + H, pw:pw + W, :]
    else:
        raise ValueError(f"unknown conv method {method!r}")
    return dx, dw, db


def depthwise_conv2d(x: Tensor, k: DepthwiseKernel) -> Tensor:
    """One spatial filter per channel; no mixing across channels."""
    _check_nhwc(x)
    if k.weights.shape[2] != x.shape[3]:
        raise ShapeError(
            f"depthwise_conv2d: input has {x.shape[3]} channels, kernel has {k.weights.shape[2]}",
            axis="channels",
        )
    check_finite(x, k.weights, k.bias, where="depthwise_conv2d")
    _, H, W, _ = x.shape
    kh, kw, _ = k.weights.shape
    xp = _same_pad(x, kh, kw)
    out = np.zeros(x.shape, dtype=np.result_type(x, k.weights))
    for i in range(kh):
        for j in range(kw):
            out += xp[:, i:i + H, j:j + W, :] * k.weights[i, j]
    out += k.bias
    return out


def depthwise_conv2d_backward(dout: Tensor, x: Tensor, k: DepthwiseKernel):
    """Returns ``(dx, dweights, dbias)``."""
    if dout.shape != x.shape:
        raise ShapeError(f"upstream shape {dout.shape} != {x.shape}", axis="output")
    _, H, W, _ = x.shape
    kh, kw, _ = k.weights.shape
    xp = _same_pad(x, kh, kw)
    dw = np.empty_like(k.weights)
    dxp = np.zeros(xp.shape, dtype=np.result_type(dout, k.weights))
    for i in range(kh):
        for j in range(kw):
            dw[i, j] = np.einsum("bhwc,bhwc->c", xp[:, i:i + H, j:j + W, :], dout)
            dxp[:, i:i + H, j:j + W, :] += dout * k.weights[i, j]
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    db = dout.sum(axis=(0, 1, 2))
    return dxp[:, ph:ph + H, pw:pw + W, :], dw, db


_relu_masks = None


@contextmanager
def record_relu_masks():
    """Collect the ``x > 0`` mask of every relu call made inside the block.

    Used by the gradient checker to spot probes that cross a kink.
    """
    global _relu_masks
    prev, _relu_masks = _relu_masks, []
    try:
        yield _relu_masks
    finally:
        _relu_masks = prev


def relu(x: Tensor) -> Tensor:
    check_finite(x, where="relu")
    if _relu_masks is not None:
        _relu_masks.append(x > 0)
    return np.maximum(x, 0)


def relu_backward(dout: Tensor, x: Tensor) -> Tensor:
    # subgradient at 0 is 0
    return dout * (x > 0)


def batchnorm(x: Tensor, s: BatchNormState):
    """Per-channel batch normalization over the ``B*H*W`` samples.

    Returns ``(out, cache)``.  The running statistics are *not* touched
    here; call :func:`update_running_stats` with the cache to apply the
    momentum update.
    """
    _check_nhwc(x)
    if x.shape[3] != s.gamma.shape[0]:
        raise ShapeError(f"batchnorm: {x.shape[3]} channels vs state {s.gamma.shape[0]}", axis="channels")
    check_finite(x, s.gamma, s.beta, where="batchnorm")
    if s.training:
        mean = x.mean(axis=(0, 1, 2))
        var = x.var(axis=(0, 1, 2))
    else:
        if not s.initialized:
            raise StateError("uninitialized running statistics")
        mean, var = s.running_mean, s.running_var
    inv_std = 1.0 / np.sqrt(var + s.epsilon)
    xhat = (x - mean) * inv_std
    out = s.gamma * xhat + s.beta
    cache = (xhat, inv_std, s.gamma, s.training, mean, var)
    return out.astype(x.dtype, copy=False), cache


def update_running_stats(s: BatchNormState, cache) -> None:
    _, _, _, training, mean, var = cache
    if not training:
        return
    m = s.momentum
    s.running_mean[...] = m * s.running_mean + (1 - m) * mean
    s.running_var[...] = m * s.running_var + (1 - m) * var
    s.initialized = True


def batchnorm_backward(dout: Tensor, cache):
    """Returns ``(dx, dgamma, dbeta)``."""
    xhat, inv_std, gamma, training, _, _ = cache
    dgamma = (dout * xhat).sum(axis=(0, 1, 2))
    dbeta = dout.sum(axis=(0, 1, 2))
    dxhat = dout * gamma
    if not training:
        return dxhat * inv_std, dgamma, dbeta
    n = xhat.shape[0] * xhat.shape[1] * xhat.shape[2]
    dx = (inv_std / n) * (
        n * dxhat - dxhat.sum(axis=(0, 1, 2)) - xhat * (dxhat * xhat).sum(axis=(0, 1, 2))
    )
    return dx, dgamma, dbeta


@lru_cache(maxsize=64)
def bilinear_matrix(n: int, s: int) -> sp.csr_matrix:
    """Sparse ``[s*n, n]`` interpolation operator along one axis.

    Half-pixel centres: ``src = (dst + 0.5) / s - 0.5``, clamped to
    ``[0, n - 1]``.
    """
    dst = np.arange(n * s, dtype=np.float64)
    src = np.clip((dst + 0.5) / s - 0.5, 0.0, n - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n - 1)
    frac = src - i0
    rows = np.concatenate([np.arange(n * s), np.arange(n * s)])
    cols = np.concatenate([i0, i1])
    vals = np.concatenate([1.0 - frac, frac])
    return sp.csr_matrix((vals, (rows, cols)), shape=(n * s, n))


def _apply_along(mat: sp.spmatrix, x: Tensor, axis: int) -> Tensor:
    moved = np.moveaxis(x, axis, 0)
    flat = moved.reshape(moved.shape[0], -1)
    out = np.asarray(mat.astype(x.dtype) @ flat)
    return np.moveaxis(out.reshape((mat.shape[0],) + moved.shape[1:]), 0, axis)


def bilinear_resize(x: Tensor, s: int) -> Tensor:
    """Bilinear upsampling of the two spatial axes by an integer factor."""
    _check_nhwc(x)
    if int(s) != s or s < 1:
        raise ValueError(f"scale must be a positive integer, got {s}")
    check_finite(x, where="bilinear_resize")
    if s == 1:
        return x.copy()
    _, H, W, _ = x.shape
    y = _apply_along(bilinear_matrix(H, s), x, 1)
    return np.ascontiguousarray(_apply_along(bilinear_matrix(W, s), y, 2))


def bilinear_resize_backward(dout: Tensor, s: int) -> Tensor:
    if s == 1:
        return dout.copy()
    _, sH, sW, _ = dout.shape
    if sH % s or sW % s:
        raise ShapeError(f"upstream spatial dims {sH}x{sW} not divisible by {s}", axis="spatial")
    y = _apply_along(bilinear_matrix(sH // s, s).T.tocsr(), dout, 1)
    return np.ascontiguousarray(_apply_along(bilinear_matrix(sW // s, s).T.tocsr(), y, 2))


def area_downsample(x: Tensor, s: int) -> Tensor:
    """Block-mean decimation by ``s`` (the LR degradation operator)."""
    _check_nhwc(x)
    B, H, W, C = x.shape
    if int(s) != s or s < 1:
        raise ValueError(f"scale must be a positive integer, got {s}")
    if H % s:
        raise ShapeError(f"height {H} not divisible by scale {s}", axis="height")
    if W % s:
        raise ShapeError(f"width {W} not divisible by scale {s}", axis="width")
    check_finite(x, where="area_downsample")
    return x.reshape(B, H // s, s, W // s, s, C).mean(axis=(2, 4))


def area_downsample_backward(dout: Tensor, s: int) -> Tensor:
    g = np.repeat(np.repeat(dout, s, axis=1), s, axis=2)
    return g / (s * s)


def concat_channels(xs) -> Tensor:
    if not xs:
        raise ShapeError("concat_channels needs at least one tensor", axis="count")
    lead = xs[0].shape[:3]
    for i, x in enumerate(xs):
        _check_nhwc(x, f"xs[{i}]")
        if x.shape[:3] != lead:
            raise ShapeError(f"concat_channels: xs[{i}] has leading dims {x.shape[:3]}, expected {lead}", axis="spatial")
    return np.concatenate(xs, axis=3)


def concat_channels_backward(dout: Tensor, sizes) -> list:
    bounds = np.cumsum(sizes)[:-1]
    return np.split(dout, bounds, axis=3)


def add(x: Tensor, y: Tensor) -> Tensor:
    if x.shape != y.shape:
        raise ShapeError(f"add: shapes {x.shape} and {y.shape} differ", axis="shape")
    return x + y


def add_backward(dout: Tensor):
    return dout, dout
