"""Dense tensor operators on numpy arrays.

Every forward operator here is a pure function of its inputs. Storage follows
the dtype of the inputs (float32 for inference, float64 for gradient checks);
sums, means and variances are accumulated in float64 before being cast back.

Convolution uses the cross-correlation convention: the kernel is not flipped,
so ``out[o, y, x] = bias[o] + sum_{c,i,j} w[o, c, i, j] * in[c, y*s + i - p, x*s + j - p]``
with zero padding. This matches the memory layout of common pretrained weights.

The ``*_backward`` companions return gradients with respect to the inputs given
the gradient of the output; the graph engine in :mod:`rapnet.tensorops.graph`
wires them together.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

NORM_FLOOR = 1e-12
BN_MOMENTUM = 0.1
BN_EPS = 1e-5


class ShapeError(ValueError):
    """Operator inputs have incompatible extents."""


def check_finite(value: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(value)):
        raise FloatingPointError(f"{op}: produced non-finite values")
    return value


def _dtype(*arrays) -> np.dtype:
    dt = np.result_type(*arrays)
    return dt if np.issubdtype(dt, np.floating) else np.dtype(np.float32)


def _out_extent(size: int, k: int, stride: int, padding: int, op: str, exact: bool) -> int:
    span = size + 2 * padding - k
    if span < 0:
        raise ShapeError(f"{op}: window {k} larger than padded input {size + 2 * padding}")
    if exact and span % stride:
        raise ShapeError(
            f"{op}: non-integer output extent ({size} + 2*{padding} - {k}) / {stride} + 1"
        )
    return span // stride + 1


# --------------------------------------------------------------------------- conv


def _conv_windows(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (k, k), axis=(1, 2))  # (C, H', W', k, k) at stride 1
    return win[:, ::stride, ::stride]


def conv2d(
    x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None, stride: int = 1, padding: int = 0
) -> np.ndarray:
    """2-D cross-correlation of a ``(Cin, H, W)`` map with ``(Cout, Cin, k, k)`` kernels."""
    if x.ndim != 3 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected input rank 3 and weight rank 4, got {x.ndim} and {weight.ndim}")
    cout, cin, kh, kw = weight.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square and odd, got {kh}x{kw}")
    if x.shape[0] != cin:
        raise ShapeError(f"conv2d: input has {x.shape[0]} channels, weight expects {cin}")
    if stride < 1 or padding < 0:
        raise ShapeError("conv2d: stride must be positive and padding non-negative")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {cout} output channels")
    ho = _out_extent(x.shape[1], kh, stride, padding, "conv2d", exact=True)
    wo = _out_extent(x.shape[2], kw, stride, padding, "conv2d", exact=True)
    dt = _dtype(x, weight)
    win = _conv_windows(x.astype(np.float64, copy=False), kh, stride, padding)
    out = np.tensordot(weight.astype(np.float64, copy=False), win, axes=([1, 2, 3], [0, 3, 4]))
    if bias is not None:
        out += bias.astype(np.float64)[:, None, None]
    assert out.shape == (cout, ho, wo)
    return out.astype(dt)


def conv2d_backward(
    grad: np.ndarray, x: np.ndarray, weight: np.ndarray, stride: int, padding: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of :func:`conv2d` for every argument that has one."""
    k = weight.shape[2]
    g = grad.astype(np.float64, copy=False)
    win = _conv_windows(x.astype(np.float64, copy=False), k, stride, padding)
    grad_w = np.tensordot(g, win, axes=([1, 2], [1, 2]))  # (Cout, Cin, k, k)
    grad_b = g.sum(axis=(1, 2))
    # scatter every kernel tap back onto the padded input grid
    taps = np.tensordot(weight.astype(np.float64, copy=False), g, axes=([0], [0]))  # (Cin, k, k, H', W')
    ho, wo = g.shape[1:]
    gx = np.zeros((x.shape[0], x.shape[1] + 2 * padding, x.shape[2] + 2 * padding))
    for i in range(k):
        for j in range(k):
            gx[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += taps[:, i, j]
    if padding:
        gx = gx[:, padding:-padding, padding:-padding]
    return gx, grad_w, grad_b


# ------------------------------------------------------------------------ maxpool


def _pool_windows(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    return win.reshape(win.shape[:3] + (k * k,))


def maxpool(x: np.ndarray, k: int, stride: int, padding: int = 0) -> np.ndarray:
    """Windowed maximum; padded cells hold -inf so they never win over a real cell."""
    if x.ndim != 3:
        raise ShapeError(f"maxpool: expected rank-3 input, got rank {x.ndim}")
    if padding >= k:
        # a window made only of padding would yield -inf
        raise ShapeError(f"maxpool: padding {padding} too large for kernel {k}")
    _out_extent(x.shape[1], k, stride, padding, "maxpool", exact=False)
    _out_extent(x.shape[2], k, stride, padding, "maxpool", exact=False)
    return _pool_windows(x, k, stride, padding).max(axis=-1).astype(x.dtype, copy=False)


def maxpool_backward(grad: np.ndarray, x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    """Route each output gradient to its window's argmax (first cell in row-major order on ties)."""
    arg = _pool_windows(x, k, stride, padding).argmax(axis=-1)  # (C, H', W')
    c, ho, wo = arg.shape
    rows = np.arange(ho)[:, None] * stride + arg // k
    cols = np.arange(wo)[None, :] * stride + arg % k
    hp, wp = x.shape[1] + 2 * padding, x.shape[2] + 2 * padding
    flat = np.arange(c)[:, None, None] * (hp * wp) + rows * wp + cols
    gx = np.zeros(c * hp * wp)
    np.add.at(gx, flat.ravel(), grad.astype(np.float64, copy=False).ravel())
    gx = gx.reshape(c, hp, wp)
    if padding:
        gx = gx[:, padding:-padding, padding:-padding]
    return gx


# -------------------------------------------------------------------- activations


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def softplus(x: np.ndarray) -> np.ndarray:
    """ln(1 + e^x), computed as ``max(x, 0) + log1p(e^-|x|)`` so large |x| cannot overflow."""
    return np.logaddexp(0, x).astype(_dtype(x), copy=False)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def activate(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return relu(x)
    if kind == "softplus":
        return softplus(x)
    raise ValueError(f"unknown activation {kind!r}")


def activate_backward(grad: np.ndarray, x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return grad * (x > 0)
    return grad * sigmoid(x)


# ---------------------------------------------------------------------- batchnorm


class BatchNormStats(NamedTuple):
    mean: np.ndarray
    var: np.ndarray


def batchnorm(
    x: np.ndarray,
    scale: np.ndarray,
    shift: np.ndarray,
    mode: str,
    stats: BatchNormStats,
    eps: float = BN_EPS,
    momentum: float = BN_MOMENTUM,
) -> tuple[np.ndarray, BatchNormStats]:
    """Per-channel standardization over spatial positions followed by an affine map.

    In ``"train"`` mode the statistics of ``x`` itself are used and updated
    running statistics are returned (the running variance uses the unbiased
    estimate). In ``"infer"`` mode the running statistics are used and returned
    unchanged. Nothing is mutated in place.
    """
    if x.ndim != 3:
        raise ShapeError(f"batchnorm: expected rank-3 input, got rank {x.ndim}")
    c = x.shape[0]
    for name, arr in (("scale", scale), ("shift", shift), ("mean", stats.mean), ("var", stats.var)):
        if arr.shape != (c,):
            raise ShapeError(f"batchnorm: {name} has shape {arr.shape}, expected ({c},)")
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    x64 = x.astype(np.float64, copy=False)
    if mode == "train":
        mean = x64.mean(axis=(1, 2))
        var = ((x64 - mean[:, None, None]) ** 2).mean(axis=(1, 2))
        n = x.shape[1] * x.shape[2]
        unbiased = var * n / (n - 1) if n > 1 else var
        new_stats = BatchNormStats(
            ((1 - momentum) * stats.mean + momentum * mean).astype(stats.mean.dtype),
            ((1 - momentum) * stats.var + momentum * unbiased).astype(stats.var.dtype),
        )
    else:
        mean = stats.mean.astype(np.float64)
        var = stats.var.astype(np.float64)
        new_stats = stats
    denom = var + eps
    if np.any(denom <= 0):
        raise FloatingPointError("batchnorm: variance plus eps is not positive")
    xhat = (x64 - mean[:, None, None]) / np.sqrt(denom)[:, None, None]
    out = xhat * scale.astype(np.float64)[:, None, None] + shift.astype(np.float64)[:, None, None]
    return out.astype(_dtype(x, scale)), new_stats


def batchnorm_backward(
    grad: np.ndarray, x: np.ndarray, scale: np.ndarray, mode: str, stats: BatchNormStats, eps: float = BN_EPS
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of :func:`batchnorm` for the input and the affine parameters.

    ``stats`` must be the statistics passed to the forward call.
    """
    g = grad.astype(np.float64, copy=False)
    x64 = x.astype(np.float64, copy=False)
    if mode == "train":
        mean = x64.mean(axis=(1, 2))
        var = ((x64 - mean[:, None, None]) ** 2).mean(axis=(1, 2))
    else:
        mean, var = stats.mean.astype(np.float64), stats.var.astype(np.float64)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x64 - mean[:, None, None]) * inv_std[:, None, None]
    grad_scale = (g * xhat).sum(axis=(1, 2))
    grad_shift = g.sum(axis=(1, 2))
    dxhat = g * scale.astype(np.float64)[:, None, None]
    if mode == "infer":
        return dxhat * inv_std[:, None, None], grad_scale, grad_shift
    n = x.shape[1] * x.shape[2]
    gx = (
        inv_std[:, None, None]
        / n
        * (n * dxhat - dxhat.sum(axis=(1, 2))[:, None, None] - xhat * (dxhat * xhat).sum(axis=(1, 2))[:, None, None])
    )
    return gx, grad_scale, grad_shift


# ------------------------------------------------------------------------ resizing


def upsample_nearest(x: np.ndarray, factor: int = 2) -> np.ndarray:
    if factor != 2:
        raise ValueError("upsample_nearest only supports factor 2")
    if x.ndim != 3:
        raise ShapeError(f"upsample_nearest: expected rank-3 input, got rank {x.ndim}")
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def upsample_nearest_backward(grad: np.ndarray) -> np.ndarray:
    c, h, w = grad.shape
    return grad.reshape(c, h // 2, 2, w // 2, 2).sum(axis=(2, 4))


def pad_to_even(x: np.ndarray) -> np.ndarray:
    """Reflect-pad the bottom row / right column when an extent is odd."""
    ph, pw = x.shape[1] % 2, x.shape[2] % 2
    if not (ph or pw):
        return x
    return np.pad(x, ((0, 0), (0, ph), (0, pw)), mode="reflect")


def pad_to_even_backward(grad: np.ndarray, shape: tuple[int, int, int]) -> np.ndarray:
    _, h, w = shape
    g = grad.astype(np.float64, copy=True)
    if h % 2:
        # reflected row h is a copy of row h - 2
        g[:, h - 2, :] += g[:, h, :]
        g = g[:, :h, :]
    if w % 2:
        g[:, :, w - 2] += g[:, :, w]
        g = g[:, :, :w]
    return g


# ---------------------------------------------------------------------- vectors


def l2_normalize(v: np.ndarray, floor: float = NORM_FLOOR) -> np.ndarray:
    """Scale ``v`` to unit Euclidean norm; raises instead of dividing by ~0."""
    norm = float(np.sqrt(np.sum(np.square(v, dtype=np.float64))))
    if not norm > floor:
        raise FloatingPointError(f"l2_normalize: norm {norm:.3g} is below floor {floor:g}")
    return (v.astype(np.float64) / norm).astype(_dtype(v))


def l2_normalize_backward(grad: np.ndarray, v: np.ndarray) -> np.ndarray:
    v64 = v.astype(np.float64, copy=False)
    norm = np.sqrt(np.sum(v64 * v64))
    u = v64 / norm
    return (grad - u * np.sum(grad * u)) / norm


def l2_normalize_rows(m: np.ndarray, floor: float = NORM_FLOOR) -> np.ndarray:
    norms = np.sqrt(np.sum(np.square(m, dtype=np.float64), axis=1, keepdims=True))
    if np.any(norms <= floor):
        raise FloatingPointError("l2_normalize_rows: a row norm is below the floor")
    return (m / norms).astype(_dtype(m))
