"""Error metrics and spectral diagnostics for predicted fields.

Wavenumbers are integers in cycles per domain along each axis. All metrics
take channels-last fields ``(..., H, W, C)`` unless noted.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import irfft2, rfft2

EPS_VRMSE = 1e-7
SPIKE_WINDOW = 5
EMPTY_BAND = 1e-20


def vrmse(pred: np.ndarray, truth: np.ndarray, eps: float = EPS_VRMSE) -> np.ndarray:
    """Variance-scaled RMSE per channel over the spatial axes of ``(..., H, W, C)`` fields.

    Returns an array of shape ``(..., C)``; average it for a single number.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs truth {truth.shape}")
    axes = (-3, -2)
    mse = np.mean((pred - truth) ** 2, axis=axes)
    var = np.mean((truth - truth.mean(axis=axes, keepdims=True)) ** 2, axis=axes)
    return np.sqrt(mse) / np.sqrt(var + eps)


def wavenumber_magnitude(H: int, W: int, half: bool = False) -> np.ndarray:
    """``|k|`` on the full (or rfft half) grid, in cycles per domain."""
    mx = np.fft.fftfreq(H) * H
    my = (np.fft.rfftfreq(W) if half else np.fft.fftfreq(W)) * W
    return np.sqrt(mx[:, None] ** 2 + my[None, :] ** 2)


@dataclass(frozen=True)
class FrequencyBands:
    """Three log-spaced ``|k|`` intervals ``[1, r)``, ``[r, r^2)``, ``[r^2, k_max]``."""

    H: int
    W: int
    edges: tuple[float, float, float, float]

    def masks(self, half: bool = False) -> list[np.ndarray]:
        kmag = wavenumber_magnitude(self.H, self.W, half)
        e = self.edges
        out = []
        for b in range(3):
            m = (kmag >= e[b]) & (kmag < e[b + 1]) if b < 2 else (kmag >= e[2]) & (kmag <= e[3])
            out.append(m)
        return out

    def band_of(self, kmag: float) -> int | None:
        """Band index of a single magnitude, or None for the zero mode."""
        e = self.edges
        if kmag < e[0]:
            return None
        if kmag < e[1]:
            return 0
        if kmag < e[2]:
            return 1
        return 2


def log_bands(H: int, W: int) -> FrequencyBands:
    if H < 4 or W < 4:
        raise ValueError(f"grid must be at least 4x4, got {H}x{W}")
    k_max = float(np.hypot(H // 2, W // 2))
    r = k_max ** (1.0 / 3.0)
    return FrequencyBands(H, W, (1.0, r, r * r, k_max))


def band_filter(u: np.ndarray, mask_half: np.ndarray) -> np.ndarray:
    """Keep only the Fourier modes in ``mask_half`` of ``(..., H, W)`` fields."""
    H, W = u.shape[-2:]
    return irfft2(rfft2(u) * mask_half, (H, W))


def bsnmse(pred: np.ndarray, truth: np.ndarray, bands: FrequencyBands | None = None) -> np.ndarray:
    """Band-filtered normalized MSE, shape ``(3,)`` per channel-averaged field pair.

    Inputs are ``(..., H, W, C)``; errors and truth energies are pooled over all
    leading axes and channels. A band whose truth energy is zero (below
    ``EMPTY_BAND`` times the total) yields NaN.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs truth {truth.shape}")
    H, W = truth.shape[-3:-1]
    bands = bands or log_bands(H, W)
    u = np.moveaxis(pred, -1, -3)
    v = np.moveaxis(truth, -1, -3)
    out = np.empty(3)
    # round-off leaves ~1e-33 in bands the truth never touches; treat that as empty
    floor = EMPTY_BAND * np.mean(v**2)
    for b, m in enumerate(bands.masks(half=True)):
        vb = band_filter(v, m)
        err = np.mean((band_filter(u, m) - vb) ** 2)
        energy = np.mean(vb**2)
        out[b] = err / energy if energy > floor else np.nan
    return out


def band_errors(pred: np.ndarray, truth: np.ndarray, bands: FrequencyBands | None = None) -> np.ndarray:
    """Unnormalized per-band ``mean|u_B - v_B|^2``; sums to the nonzero-mode MSE."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    H, W = truth.shape[-3:-1]
    bands = bands or log_bands(H, W)
    r = np.moveaxis(pred - truth, -1, -3)
    return np.array([np.mean(band_filter(r, m) ** 2) for m in bands.masks(half=True)])


# ---------------------------------------------------------------- spectra


@dataclass
class SpectralReport:
    """Radially averaged residual power ``P(|k|)`` with ``|k| = 0 .. len-1``."""

    power: np.ndarray
    scores: dict[int, float] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def k(self) -> np.ndarray:
        return np.arange(len(self.power))


def radial_power(r: np.ndarray) -> np.ndarray:
    """Mean ``|FFT|^2`` of ``(..., H, W)`` fields in integer ``|k|`` bins ``0 .. min(H,W)//2``.

    Leading axes are averaged. Power is normalized by ``(H*W)^2`` so that a
    field's total power equals its mean square.
    """
    r = np.asarray(r, dtype=np.float64)
    H, W = r.shape[-2:]
    p = np.abs(np.fft.fft2(r, axes=(-2, -1))) ** 2 / (H * W) ** 2
    p = p.reshape(-1, H, W).mean(axis=0)
    nbins = min(H, W) // 2 + 1
    idx = np.rint(wavenumber_magnitude(H, W)).astype(int).ravel()
    keep = idx < nbins
    sums = np.bincount(idx[keep], weights=p.ravel()[keep], minlength=nbins)
    counts = np.bincount(idx[keep], minlength=nbins)
    return sums / np.maximum(counts, 1)


def residual_spectrum(pred: np.ndarray, truth: np.ndarray, meta: dict | None = None) -> SpectralReport:
    """Isotropic power spectrum of ``pred - truth``; 2D slices, optionally stacked ``(..., H, W)``."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs truth {truth.shape}")
    if pred.ndim < 2:
        raise ValueError(f"need at least 2D slices, got {pred.shape}")
    return SpectralReport(radial_power(pred - truth), meta=dict(meta or {}))


def harmonic_bins(p: int, H: int, n_bins: int) -> list[int]:
    """Bins ``m * H / p`` strictly below the last radial bin (Nyquist)."""
    if p < 1 or H % p:
        raise ValueError(f"patch size {p} must divide H={H}")
    step = H // p
    return [m * step for m in range(1, n_bins) if m * step < n_bins - 1]


def harmonic_spike_score(report: SpectralReport, p: int, H: int, window: int = SPIKE_WINDOW) -> float:
    """Sum of relative excesses of ``P`` at harmonics of ``H/p`` over a local median.

    The baseline at each harmonic is the median of ``P`` over ``window`` bins
    on each side, skipping the zero bin and every harmonic bin. Spectra that
    are identically zero score 0.
    """
    P = np.asarray(report.power, dtype=np.float64)
    harms = harmonic_bins(p, H, len(P))
    if len(harms) < 2:
        raise ValueError(f"patch size {p} on H={H} leaves {len(harms)} harmonic(s) below Nyquist; need 2")
    excluded = set(harms) | {0}
    floor = 1e-12 * max(P.max(), 0.0)
    score = 0.0
    for h in harms:
        nb = [j for j in range(h - window, h + window + 1) if 0 <= j < len(P) and j not in excluded]
        base = float(np.median(P[nb])) if nb else 0.0
        base = max(base, floor)
        if base <= 0:
            continue
        score += max(0.0, P[h] - base) / base
    report.scores[p] = score
    return score


# ---------------------------------------------------------------- output


def write_csv(path, rows: list[dict]) -> None:
    """Rows with identical keys; floats written with ``repr`` precision."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        path.write_text("")
        return
    keys = list(rows[0])
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row[k]) for k in keys})


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o)}")


def write_spectrum_csv(path, report: SpectralReport) -> None:
    write_csv(path, [{"k": int(k), "power": float(p)} for k, p in zip(report.k, report.power)])
