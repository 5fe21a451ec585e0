"""Pseudoinverse kernel resizing.

A kernel ``W_base`` learned for ``k_base x k_base`` patches is mapped to a
``k x k`` kernel ``W`` so that a resized patch produces the same token as the
original patch: ``<x, W_base> ~= <B x, W>`` where ``B`` bicubically resizes a
``k_base`` patch to ``k``. The least-squares answer is ``W = pinv(B.T) W_base``;
with a patch second-moment matrix ``Sigma`` it becomes
``pinv(sqrt(Sigma) B.T) sqrt(Sigma) W_base``.
"""
from __future__ import annotations

import hashlib
import threading
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

CATMULL_ROM_A = -0.5


def cubic_weight(t: np.ndarray, a: float = CATMULL_ROM_A) -> np.ndarray:
    """Keys cubic convolution kernel."""
    t = np.abs(t)
    w = np.zeros_like(t, dtype=np.float64)
    m1 = t <= 1
    m2 = (t > 1) & (t < 2)
    w[m1] = ((a + 2) * t[m1] - (a + 3)) * t[m1] ** 2 + 1
    w[m2] = a * (((t[m2] - 5) * t[m2] + 8) * t[m2] - 4)
    return w


@dataclass(frozen=True)
class ResizeMatrix:
    k_from: int
    k_to: int
    B1d: np.ndarray
    B2d: np.ndarray


@lru_cache(maxsize=None)
def _resize_1d(k_from: int, k_to: int) -> np.ndarray:
    if k_from == k_to:
        return np.eye(k_to)
    B = np.zeros((k_to, k_from))
    scale = k_from / k_to
    for i in range(k_to):
        # align-corners-false: pixel centres at (i + 0.5)
        src = (i + 0.5) * scale - 0.5
        base = int(np.floor(src))
        for tap in range(base - 1, base + 3):
            wgt = float(cubic_weight(np.array([src - tap]))[0])
            B[i, min(max(tap, 0), k_from - 1)] += wgt
    return B


def resize_matrix(k_from: int, k_to: int) -> ResizeMatrix:
    """Separable bicubic resize of a ``k_from``-square patch to ``k_to``.

    ``B2d`` acts on row-major flattened patches.
    """
    if k_from < 2 or k_to < 2:
        raise ValueError(f"bicubic resize needs sizes >= 2, got {k_from} -> {k_to}")
    B1 = _resize_1d(k_from, k_to)
    B1.setflags(write=False)
    B2 = np.kron(B1, B1)
    B2.setflags(write=False)
    return ResizeMatrix(k_from, k_to, B1, B2)


def pinv(M: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Moore-Penrose pseudoinverse via SVD.

    Singular values at or below ``tol * sigma_max`` are treated as zero.
    """
    M = np.asarray(M, dtype=np.float64)
    if not np.all(np.isfinite(M)):
        raise ValueError("pinv input has non-finite entries")
    if M.size == 0:
        return M.T.copy()
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    if s.size == 0 or s[0] == 0:
        return np.zeros(M.T.shape)
    keep = s > tol * s[0]
    s_inv = np.zeros_like(s)
    s_inv[keep] = 1.0 / s[keep]
    return (Vt.T * s_inv) @ U.T


def _sqrt_psd(S: np.ndarray) -> np.ndarray:
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError(f"covariance must be square, got {S.shape}")
    if not np.allclose(S, S.T, atol=1e-12 * max(1.0, np.abs(S).max())):
        raise ValueError("covariance is not symmetric")
    evals, evecs = np.linalg.eigh(S)
    if evals.min() < -1e-10 * max(1.0, abs(evals).max()):
        raise ValueError(f"covariance is not positive semidefinite (min eigenvalue {evals.min():.3e})")
    return (evecs * np.sqrt(np.clip(evals, 0, None))) @ evecs.T


@dataclass
class PIResizeConfig:
    k_base: int
    covariance: np.ndarray | None = None
    pinv_tolerance: float = 1e-10

    def key(self) -> str:
        if self.covariance is None:
            return "identity"
        return hashlib.sha1(np.ascontiguousarray(self.covariance, dtype=np.float64).tobytes()).hexdigest()


_LOCK = threading.Lock()
_MATRICES: dict[tuple, np.ndarray] = {}


def resize_operator(k_base: int, k_target: int, cfg: PIResizeConfig | None = None) -> np.ndarray:
    """The ``(k_target**2, k_base**2)`` matrix taking flattened ``W_base`` to ``W``.

    Cached per ``(k_base, k_target, covariance)``; the result is read-only.
    """
    cfg = cfg or PIResizeConfig(k_base)
    key = (k_base, k_target, cfg.key(), cfg.pinv_tolerance)
    M = _MATRICES.get(key)
    if M is not None:
        return M
    Bt = resize_matrix(k_base, k_target).B2d.T  # (k_base^2, k_target^2)
    if cfg.covariance is None:
        M = pinv(Bt, cfg.pinv_tolerance)
    else:
        S = _sqrt_psd(cfg.covariance)
        if S.shape[0] != k_base * k_base:
            raise ValueError(f"covariance must be {k_base**2}x{k_base**2}, got {S.shape}")
        M = pinv(S @ Bt, cfg.pinv_tolerance) @ S
    M.setflags(write=False)
    with _LOCK:
        _MATRICES.setdefault(key, M)
    return _MATRICES[key]


def pi_resize_kernel(W_base: np.ndarray, k_target: int, cfg: PIResizeConfig | None = None) -> np.ndarray:
    """Resize a ``(k_base, k_base, Cin, Cout)`` kernel to ``(k_target, k_target, Cin, Cout)``.

    At ``k_target == k_base`` the input array itself is returned.
    """
    k_base = W_base.shape[0]
    if W_base.shape[1] != k_base:
        raise ValueError(f"kernel must be square, got {W_base.shape}")
    if cfg is not None and cfg.k_base != k_base:
        raise ValueError(f"config k_base {cfg.k_base} does not match kernel {k_base}")
    if k_target == k_base and (cfg is None or cfg.covariance is None):
        return W_base
    if not np.all(np.isfinite(W_base)):
        raise ValueError("W_base has non-finite entries")
    M = resize_operator(k_base, k_target, cfg).astype(W_base.dtype, copy=False)
    flat = W_base.reshape(k_base * k_base, -1)
    return (M @ flat).reshape((k_target, k_target) + W_base.shape[2:])
