"""Synthetic periodic advection-diffusion trajectories.

Each channel evolves independently under

    du/dt + c . grad(u) = nu * laplacian(u)

on a periodic ``H x W`` grid with unit pixel spacing (domain lengths ``H`` and
``W``). Stepping is exact in Fourier space (integrating factor), so it is
unconditionally stable and bit-deterministic.

Axis convention: ``x`` runs along the first grid axis (``H``), ``y`` along the
second (``W``); ``velocity = (c_x, c_y)`` is in pixels per unit time.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fileio
from .tensor import irfft2, rfft2

DATASET_FORMAT = "flexipatch-dataset"
SPLITS = ("train", "valid", "test")


@dataclass
class PDEParams:
    H: int = 64
    W: int = 64
    velocity: tuple[float, float] = (0.6, 0.35)
    diffusivity: float = 0.02
    dt: float = 1.0
    steps: int = 60
    channels: int = 1
    k_min: float = 1.0
    k_max: float = 14.0
    slope: float = 1.5

    def __post_init__(self):
        self.velocity = tuple(float(v) for v in self.velocity)
        if self.H < 4 or self.W < 4:
            raise ValueError(f"grid must be at least 4x4, got {self.H}x{self.W}")
        if self.diffusivity < 0:
            raise ValueError(f"diffusivity must be >= 0, got {self.diffusivity}")
        if not (0 < self.k_min <= self.k_max):
            raise ValueError(f"need 0 < k_min <= k_max, got {self.k_min}, {self.k_max}")
        if self.steps < 2 or self.channels < 1:
            raise ValueError("steps must be >= 2 and channels >= 1")
        vals = (*self.velocity, self.diffusivity, self.dt, self.k_min, self.k_max, self.slope)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError("PDE parameters must be finite")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["velocity"] = list(self.velocity)
        return d


def wavenumbers(H: int, W: int) -> tuple[np.ndarray, np.ndarray]:
    """Angular wavenumbers (radians per pixel) on the rfft2 half grid, shapes (H,1) and (1,W//2+1)."""
    kx = 2 * np.pi * np.fft.fftfreq(H)[:, None]
    ky = 2 * np.pi * np.fft.rfftfreq(W)[None, :]
    return kx, ky


def step_spectral(u: np.ndarray, p: PDEParams, n: int = 1) -> np.ndarray:
    """Advance ``u`` (``(..., H, W)``) by ``n`` steps of length ``p.dt``.

    Nyquist modes are dropped: a real field cannot carry a fractional shift
    there, and keeping them would make ``n`` single steps differ from one
    ``n``-step.
    """
    H, W = u.shape[-2:]
    kx, ky = wavenumbers(H, W)
    cx, cy = p.velocity
    factor = np.exp((-1j * (cx * kx + cy * ky) - p.diffusivity * (kx**2 + ky**2)) * p.dt * n)
    if H % 2 == 0:
        factor[H // 2, :] = 0
    if W % 2 == 0:
        factor[:, W // 2] = 0
    return irfft2(rfft2(u) * factor, (H, W))


def random_initial_condition(p: PDEParams, rng: np.random.Generator) -> np.ndarray:
    """Band-limited random field ``(H, W)`` with shell energy ``E(k) ~ k**-slope``.

    ``k`` is measured in cycles per domain; modes outside ``[k_min, k_max]``
    are zero. The field is scaled to zero mean and unit variance.
    """
    H, W = p.H, p.W
    mx = np.fft.fftfreq(H) * H
    my = np.fft.rfftfreq(W) * W
    kmag = np.sqrt(mx[:, None] ** 2 + my[None, :] ** 2)
    band = (kmag >= p.k_min) & (kmag <= p.k_max)
    amp = np.zeros_like(kmag)
    # shell area grows ~k in 2D, so per-mode power ~ E(k)/k
    amp[band] = kmag[band] ** (-(p.slope + 1) / 2)
    coef = amp * (rng.standard_normal(kmag.shape) + 1j * rng.standard_normal(kmag.shape))
    u = irfft2(coef, (H, W))
    u -= u.mean()
    s = u.std()
    return u / s if s > 0 else u


def simulate(p: PDEParams, rng: np.random.Generator) -> np.ndarray:
    """One trajectory ``(steps, H, W, C)``; channels are independent fields."""
    out = np.empty((p.steps, p.H, p.W, p.channels))
    for c in range(p.channels):
        u = random_initial_condition(p, rng)
        for t in range(p.steps):
            out[t, :, :, c] = u
            u = step_spectral(u, p)
    return out


def split_counts(n_traj: int) -> dict[str, int]:
    if n_traj < 10:
        raise ValueError(f"need at least 10 trajectories for an 80/10/10 split, got {n_traj}")
    n_valid = n_test = n_traj // 10
    return {"train": n_traj - n_valid - n_test, "valid": n_valid, "test": n_test}


@dataclass
class TrajectoryDataset:
    """Trajectories per split, stored as ``(n_traj, T, H, W, C)`` float32 arrays."""

    params: PDEParams
    seed: int
    splits: dict[str, np.ndarray]
    mean: np.ndarray
    std: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def channels(self) -> int:
        return self.params.channels

    def normalize(self, a: np.ndarray) -> np.ndarray:
        return ((a - self.mean) / self.std).astype(np.float32)

    def denormalize(self, a: np.ndarray) -> np.ndarray:
        return a * self.std + self.mean

    def normalized(self, split: str) -> np.ndarray:
        return self.normalize(self.splits[split])

    def save(self, directory) -> dict[str, Path]:
        directory = Path(directory)
        paths = {}
        for name, arr in self.splits.items():
            meta = {
                "params": self.params.to_dict(),
                "seed": self.seed,
                "split": name,
                "n_traj": int(arr.shape[0]),
                "layout": "traj,t,H,W,C",
                "norm": {"mean": self.mean.tolist(), "std": self.std.tolist()},
            }
            path = directory / f"{name}.flxd"
            fileio.write(path, DATASET_FORMAT, meta, {"fields": arr.astype("<f4")})
            paths[name] = path
        return paths

    @classmethod
    def load(cls, directory) -> "TrajectoryDataset":
        directory = Path(directory)
        splits = {}
        meta = None
        for name in SPLITS:
            path = directory / f"{name}.flxd"
            if not path.exists():
                raise FileNotFoundError(f"missing dataset split {path}")
            meta, arrays = fileio.read(path, DATASET_FORMAT)
            splits[name] = arrays["fields"]
        params = PDEParams(**meta["params"])
        norm = meta["norm"]
        return cls(
            params,
            meta["seed"],
            splits,
            np.asarray(norm["mean"], dtype=np.float32),
            np.asarray(norm["std"], dtype=np.float32),
        )


def generate_dataset(p: PDEParams, n_traj: int, seed: int) -> TrajectoryDataset:
    """Deterministic in ``(p, n_traj, seed)``; trajectory ``i`` draws from RNG stream ``(seed, i)``."""
    counts = split_counts(n_traj)
    trajs = [simulate(p, np.random.default_rng([seed, i])).astype(np.float32) for i in range(n_traj)]
    splits = {}
    start = 0
    for name in SPLITS:
        n = counts[name]
        splits[name] = np.stack(trajs[start : start + n])
        start += n
    train = splits["train"].astype(np.float64)
    mean = train.mean(axis=(0, 1, 2, 3)).astype(np.float32)
    std = train.std(axis=(0, 1, 2, 3)).astype(np.float32)
    return TrajectoryDataset(p, seed, splits, mean, std)


def windows(trajs: np.ndarray, context: int, horizon: int, starts=None) -> tuple[np.ndarray, np.ndarray]:
    """Cut ``(n, T, H, W, C)`` trajectories into model inputs and targets.

    Returns ``context (M, H, W, context, C)`` and ``target (M, H, W, horizon, C)``
    for every trajectory and every start index.
    """
    n, T = trajs.shape[:2]
    if starts is None:
        starts = range(T - context - horizon + 1)
    ctx, tgt = [], []
    for i in range(n):
        for s in starts:
            if s + context + horizon > T:
                raise ValueError(f"window at {s} with {context}+{horizon} frames exceeds T={T}")
            ctx.append(trajs[i, s : s + context])
            tgt.append(trajs[i, s + context : s + context + horizon])
    to_bhwtc = lambda a: np.moveaxis(np.stack(a), 1, 3)
    return to_bhwtc(ctx), to_bhwtc(tgt)
