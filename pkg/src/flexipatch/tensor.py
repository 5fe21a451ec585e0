"""Dense numerical primitives: strided convolution, its transpose, and 2D FFTs.

Arrays are plain numpy ``ndarray`` objects in channels-last layout:
fields are ``(B, H, W, C)`` and kernels are ``(k, k, Cin, Cout)``.
Convolution is cross-correlation (no kernel flip).

FFT normalization is fixed for the whole package: the forward transform is
unnormalized and the inverse carries ``1/(H*W)``.
"""
from __future__ import annotations

import contextlib
import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "conv_out_size",
    "conv2d",
    "conv2d_weight_grad",
    "conv_transpose2d",
    "rfft2",
    "irfft2",
    "parseval_energy",
    "deterministic",
    "set_num_threads",
]


def conv_out_size(n: int, k: int, stride: int, pad: int = 0) -> int:
    """Output extent of a strided convolution along one axis."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if n + 2 * pad < k:
        raise ValueError(f"kernel {k} larger than padded extent {n + 2 * pad}")
    return (n + 2 * pad - k) // stride + 1


def _check_conv_shapes(x: np.ndarray, w: np.ndarray) -> None:
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(
            f"conv2d expects x (B,H,W,Cin) and w (k,k,Cin,Cout); got {x.shape} and {w.shape}"
        )
    if w.shape[0] != w.shape[1]:
        raise ValueError(f"kernel must be square, got {w.shape}")
    if x.shape[-1] != w.shape[2]:
        raise ValueError(
            f"channel mismatch: x {x.shape} has Cin={x.shape[-1]}, w {w.shape} has Cin={w.shape[2]}"
        )


def _pad_hw(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))


def _patches(x: np.ndarray, k: int, stride: int, nh: int, nw: int) -> np.ndarray:
    """im2col: (B*nh*nw, k*k*C) rows ordered (kh, kw, c)."""
    B, _, _, C = x.shape
    if stride == k:
        x = x[:, : nh * k, : nw * k]
        p = x.reshape(B, nh, k, nw, k, C).transpose(0, 1, 3, 2, 4, 5)
        return p.reshape(B * nh * nw, k * k * C)
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :nh, :nw]
    # win: (B, nh, nw, C, k, k)
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(B * nh * nw, k * k * C)


def conv2d(x: np.ndarray, w: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Strided 2D cross-correlation with symmetric zero padding.

    ``x`` is ``(B, H, W, Cin)``, ``w`` is ``(k, k, Cin, Cout)``; the result is
    ``(B, N_h, N_w, Cout)`` with ``N = (H + 2*pad - k) // stride + 1``.
    """
    _check_conv_shapes(x, w)
    k = w.shape[0]
    B, H, W, C = x.shape
    nh = conv_out_size(H, k, stride, pad)
    nw = conv_out_size(W, k, stride, pad)
    xp = _pad_hw(x, pad)
    cols = _patches(xp, k, stride, nh, nw)
    out = cols @ w.reshape(k * k * C, -1)
    return out.reshape(B, nh, nw, w.shape[3])


def conv2d_weight_grad(x: np.ndarray, g: np.ndarray, k: int, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Gradient of ``sum(g * conv2d(x, w, stride, pad))`` with respect to ``w``."""
    B, H, W, C = x.shape
    nh, nw = g.shape[1], g.shape[2]
    if nh != conv_out_size(H, k, stride, pad) or nw != conv_out_size(W, k, stride, pad):
        raise ValueError(f"gradient grid {g.shape} inconsistent with input {x.shape}, k={k}, s={stride}")
    xp = _pad_hw(x, pad)
    cols = _patches(xp, k, stride, nh, nw)
    dw = cols.T @ g.reshape(-1, g.shape[3])
    return dw.reshape(k, k, C, g.shape[3])


def conv_transpose2d(y: np.ndarray, w: np.ndarray, stride: int = 1, crop: int = 0) -> np.ndarray:
    """Transposed convolution, the adjoint of :func:`conv2d` with ``pad=crop``.

    ``y`` is ``(B, N_h, N_w, Cout)`` and ``w`` is ``(k, k, Cin, Cout)``; the
    output is ``(B, (N_h-1)*stride + k - 2*crop, ..., Cin)``. Overlapping
    contributions are summed.
    """
    if y.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv_transpose2d expects y (B,Nh,Nw,Cout) and w (k,k,Cin,Cout); got {y.shape}, {w.shape}")
    if y.shape[-1] != w.shape[3]:
        raise ValueError(f"channel mismatch: y {y.shape} vs w {w.shape}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    k = w.shape[0]
    B, nh, nw, Cout = y.shape
    Cin = w.shape[2]
    full_h = (nh - 1) * stride + k
    full_w = (nw - 1) * stride + k
    if full_h - 2 * crop <= 0 or full_w - 2 * crop <= 0 or crop < 0:
        raise ValueError(f"crop {crop} leaves non-positive extent from ({full_h}, {full_w})")
    cols = y.reshape(-1, Cout) @ w.reshape(k * k * Cin, Cout).T
    cols = cols.reshape(B, nh, nw, k, k, Cin)
    if stride == k:
        out = cols.transpose(0, 1, 3, 2, 4, 5).reshape(B, full_h, full_w, Cin)
    else:
        out = np.zeros((B, full_h, full_w, Cin), dtype=cols.dtype)
        span_h = (nh - 1) * stride + 1
        span_w = (nw - 1) * stride + 1
        for a in range(k):
            for b in range(k):
                out[:, a : a + span_h : stride, b : b + span_w : stride] += cols[:, :, :, a, b]
    if crop:
        out = out[:, crop : full_h - crop, crop : full_w - crop]
    return out


def rfft2(x: np.ndarray) -> np.ndarray:
    """Real-input 2D DFT over the last two axes, unnormalized.

    Returns the half-spectrum ``(..., H, W//2 + 1)``; the missing columns are
    the complex conjugates of the stored ones (Hermitian symmetry).
    """
    if x.ndim < 2 or x.shape[-1] < 1 or x.shape[-2] < 1:
        raise ValueError(f"rfft2 needs at least a 2D array, got {x.shape}")
    return np.fft.rfft2(x, axes=(-2, -1))


def irfft2(X: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Inverse of :func:`rfft2`; ``shape`` is the real ``(H, W)``. Scales by 1/(H*W)."""
    return np.fft.irfft2(X, s=shape, axes=(-2, -1))


def parseval_energy(X: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Spatial energy ``sum(x**2)`` recovered from a half-spectrum.

    Columns other than 0 and (for even W) W/2 appear twice in the full
    spectrum, hence the doubling.
    """
    H, W = shape
    p = np.abs(X) ** 2
    weights = np.full(X.shape[-1], 2.0)
    weights[0] = 1.0
    if W % 2 == 0:
        weights[-1] = 1.0
    return (p * weights).sum(axis=(-2, -1)) / (H * W)


def set_num_threads(n: int | None):
    """Limit BLAS threads; returns a controller usable as a context manager."""
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


@contextlib.contextmanager
def deterministic():
    """Single-threaded BLAS for bit-reproducible reductions."""
    with set_num_threads(1):
        yield


def threads_from_env() -> int | None:
    v = os.environ.get("FLEXIPATCH_THREADS")
    if not v:
        return None
    try:
        n = int(v)
    except ValueError:
        n = 0
    if n < 1:
        raise ValueError(f"FLEXIPATCH_THREADS must be a positive integer, got {v!r}")
    return n
