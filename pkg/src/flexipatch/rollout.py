"""Autoregressive rollouts under fixed, cyclic or random patch-size schedules."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import metrics

CYCLE = (4, 8, 16)
KINDS = ("fixed", "cyclic", "random")


@dataclass(frozen=True)
class PatchSchedule:
    kind: str
    sizes: tuple[int, ...]
    base: tuple[int, ...]
    seed: int | None = None

    def __len__(self) -> int:
        return len(self.sizes)

    def __getitem__(self, t: int) -> int:
        return self.sizes[t]

    def label(self) -> str:
        if self.kind == "fixed":
            return f"fixed:{self.base[0]}"
        if self.kind == "random":
            return f"random:{self.seed}"
        return "cyclic"


def make_schedule(kind: str, steps: int, size: int = 16, cycle=CYCLE, phase: int = 0,
                  seed: int = 0) -> PatchSchedule:
    """Materialize ``steps`` sizes.

    ``fixed`` repeats ``size``; ``cyclic`` yields ``cycle[(t + phase) % len]``;
    ``random`` draws uniformly from ``cycle`` with its own seeded stream.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    cycle = tuple(int(c) for c in cycle)
    if kind == "fixed":
        return PatchSchedule(kind, (int(size),) * steps, (int(size),))
    if kind == "cyclic":
        n = len(cycle)
        return PatchSchedule(kind, tuple(cycle[(t + phase) % n] for t in range(steps)), cycle)
    if kind == "random":
        rng = np.random.default_rng(seed)
        return PatchSchedule(kind, tuple(int(cycle[i]) for i in rng.integers(len(cycle), size=steps)), cycle, seed)
    raise ValueError(f"unknown schedule kind {kind!r}; expected one of {KINDS}")


def parse_schedule(text: str, steps: int, phase: int = 0) -> PatchSchedule:
    """``cyclic``, ``fixed:<size>``, ``random`` or ``random:<seed>``."""
    kind, _, arg = text.partition(":")
    if kind == "fixed":
        if not arg:
            raise ValueError("fixed schedule needs a size, e.g. fixed:16")
        return make_schedule("fixed", steps, size=int(arg))
    if kind == "random":
        return make_schedule("random", steps, seed=int(arg) if arg else 0)
    if kind == "cyclic" and not arg:
        return make_schedule("cyclic", steps, phase=phase)
    raise ValueError(f"unknown schedule {text!r}; expected cyclic, fixed:<size> or random[:<seed>]")


def check_schedule(model, schedule: PatchSchedule, hw: tuple[int, int]) -> None:
    H, W = hw
    for s in sorted(set(schedule.sizes)):
        model.check_size(s)
        if H % s or W % s:
            raise ValueError(f"field {H}x{W} is not divisible by scheduled size {s}")


def rollout(model, context: np.ndarray, schedule: PatchSchedule) -> np.ndarray:
    """Predict ``len(schedule)`` frames from ``context`` ``(B, H, W, T, C)``.

    Each prediction is appended and the oldest frame dropped. Returns
    ``(B, H, W, steps, C)``.
    """
    context = np.asarray(context, dtype=model.config.dtype)
    if context.ndim != 5:
        raise ValueError(f"context must be (B, H, W, T, C), got {context.shape}")
    check_schedule(model, schedule, context.shape[1:3])
    window = context
    preds = []
    for size in schedule.sizes:
        nxt = model.forward(window, size)
        preds.append(nxt)
        window = np.concatenate([window[:, :, :, 1:], nxt], axis=3)
    return np.concatenate(preds, axis=3)


def eval_starts(T: int, context: int, horizon: int, n: int) -> list[int]:
    """Up to ``n`` evenly spaced window starts that leave room for ``context + horizon`` frames."""
    last = T - context - horizon
    if last < 0:
        raise ValueError(f"trajectory length {T} too short for {context} context + {horizon} steps")
    return sorted({int(round(x)) for x in np.linspace(0, last, max(n, 1))})


@dataclass
class RolloutResult:
    schedule: PatchSchedule
    pred: np.ndarray  # (M, H, W, steps, C), physical units
    truth: np.ndarray
    vrmse: np.ndarray  # (M, steps, C)

    def rows(self) -> list[dict]:
        """One row per field x step, averaged over windows."""
        m = self.vrmse.mean(axis=0)
        return [
            {"step": t, "size": self.schedule.sizes[t], "field": c, "vrmse": float(m[t, c])}
            for t in range(m.shape[0])
            for c in range(m.shape[1])
        ]

    def step_vrmse(self) -> np.ndarray:
        return self.vrmse.mean(axis=(0, 2))


def evaluate_rollout(model, dataset, split: str, starts, schedule: PatchSchedule, batch: int = 8) -> RolloutResult:
    """Roll out from every (trajectory, start) window of ``split`` and score against truth."""
    from .pdegen import windows

    ctx, truth = windows(dataset.splits[split], model.config.context, len(schedule), starts)
    ctx = dataset.normalize(ctx)
    preds = [rollout(model, ctx[i : i + batch], schedule) for i in range(0, len(ctx), batch)]
    pred = dataset.denormalize(np.concatenate(preds).astype(np.float64))
    truth = truth.astype(np.float64)
    v = metrics.vrmse(np.moveaxis(pred, 3, 1), np.moveaxis(truth, 3, 1))  # (M, steps, C)
    return RolloutResult(schedule, pred, truth, v)


def evaluate_sizes(model, dataset, split: str, starts, sizes, batch: int = 8) -> dict[int, float]:
    """One-step VRMSE at each size, averaged over windows and fields."""
    out = {}
    for s in sizes:
        res = evaluate_rollout(model, dataset, split, starts, make_schedule("fixed", 1, size=s), batch)
        out[int(s)] = float(res.vrmse.mean())
    return out
