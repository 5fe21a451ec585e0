"""Next-step training with a patch size drawn once per optimizer step."""
from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import metrics
from .pdegen import TrajectoryDataset
from .processor import SurrogateModel
from .rollout import evaluate_sizes, eval_starts
from .tensor import deterministic, set_num_threads, threads_from_env

EPS_LOSS = 1e-7


class NumericalError(FloatingPointError):
    """Non-finite loss during training; carries where it happened."""

    def __init__(self, message: str, batch_index: int, seed: int):
        super().__init__(f"{message} (batch {batch_index}, seed {seed})")
        self.batch_index = batch_index
        self.seed = seed


def nmse_loss(pred, target, eps: float = EPS_LOSS) -> ag.Var:
    """Mean over batch and channels of ``mean_space((p - t)^2) / (mean_space(t^2) + eps)``.

    Fields are ``(B, H, W, ..., C)``; axes 1 and 2 are spatial.
    """
    pv = pred.value if isinstance(pred, ag.Var) else np.asarray(pred)
    target = np.asarray(target, dtype=pv.dtype)
    if pv.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {pv.shape} vs target {target.shape}")
    num = ag.mean(ag.square(ag.sub(pred, target)), axis=(1, 2))
    den = np.mean(target**2, axis=(1, 2)) + eps
    return ag.mean(ag.mul(num, (1.0 / den).astype(pv.dtype)))


def uniform_dist(sizes) -> dict[int, float]:
    sizes = sorted(int(s) for s in sizes)
    return {s: 1.0 / len(sizes) for s in sizes}


def sample_size(rng: np.random.Generator, dist: dict[int, float]) -> int:
    """One size for the whole optimizer step."""
    sizes = list(dist)
    return int(sizes[rng.choice(len(sizes), p=list(dist.values()))])


class AdamW:
    """Adam with decoupled weight decay; updates the parameter arrays in place.

    Parameters absent from ``grads`` are left untouched, moments included.
    """

    def __init__(self, params: ag.ParameterSet, lr: float, weight_decay: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:  # not on the tape this step (e.g. a pad token at a size that needs no padding)
                continue
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            if self.weight_decay:
                p -= (self.lr * self.weight_decay) * p
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 2
    epochs: int = 10
    epoch_size: int = 100
    size_dist: dict[int, float] | None = None
    seed: int = 0
    val_starts: int = 4
    val_batch: int = 8
    checkpoint: str | None = None
    restore_best: bool = True
    deterministic: bool = True

    def __post_init__(self):
        if self.size_dist is not None:
            self.size_dist = {int(k): float(v) for k, v in self.size_dist.items()}
        self.validate()

    def validate(self) -> None:
        # lr = 0 is allowed: it freezes parameters for equivalence checks
        if not (self.lr >= 0 and np.isfinite(self.lr)):
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if not (self.weight_decay >= 0 and np.isfinite(self.weight_decay)):
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1 or self.epochs < 1 or self.epoch_size < self.batch_size:
            raise ValueError("need batch_size >= 1, epochs >= 1 and epoch_size >= batch_size")
        if self.size_dist is not None:
            probs = np.array(list(self.size_dist.values()))
            if np.any(probs < 0) or abs(probs.sum() - 1) > 1e-9:
                raise ValueError(f"size probabilities must be >= 0 and sum to 1, got {self.size_dist}")

    @property
    def steps_per_epoch(self) -> int:
        return self.epoch_size // self.batch_size

    @property
    def total_samples(self) -> int:
        return self.epochs * self.steps_per_epoch * self.batch_size

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if self.size_dist is not None:
            d["size_dist"] = {str(k): v for k, v in self.size_dist.items()}
        return d


def matched_budget(fixed: TrainConfig, n_fixed: int) -> TrainConfig:
    """Config for one flexible model that sees as many samples as ``n_fixed`` fixed models."""
    return dataclasses.replace(fixed, epochs=fixed.epochs * n_fixed, size_dist=None)


@dataclass
class TrainStats:
    sizes: tuple[int, ...]
    train_loss: list[float] = field(default_factory=list)
    val_vrmse: list[dict[int, float]] = field(default_factory=list)
    step_loss: list[float] = field(default_factory=list)
    step_size: list[int] = field(default_factory=list)
    samples_seen: int = 0
    best_epoch: int = -1
    best_val: float = float("inf")
    wall_clock: list[float] = field(default_factory=list)

    def rows(self) -> list[dict]:
        out = []
        for e, (loss, val) in enumerate(zip(self.train_loss, self.val_vrmse)):
            row = {"epoch": e, "train_loss": loss}
            row.update({f"val_vrmse_{s}": val[s] for s in self.sizes})
            row["val_vrmse_mean"] = float(np.mean([val[s] for s in self.sizes]))
            out.append(row)
        return out

    def summary(self) -> dict:
        return {
            "sizes": list(self.sizes),
            "epochs": self.rows(),
            "samples_seen": self.samples_seen,
            "best_epoch": self.best_epoch,
            "best_val_vrmse_mean": self.best_val,
            "size_counts": {str(s): self.step_size.count(s) for s in self.sizes},
        }

    def write(self, directory) -> None:
        """``train_stats.csv``/``.json`` (deterministic) and ``timing.json`` (wall clock)."""
        directory = Path(directory)
        metrics.write_csv(directory / "train_stats.csv", self.rows())
        metrics.write_json(directory / "train_stats.json", self.summary())
        metrics.write_json(directory / "timing.json", {"epoch_seconds": self.wall_clock})


def train(model: SurrogateModel, dataset: TrajectoryDataset, cfg: TrainConfig) -> TrainStats:
    ctx = deterministic() if cfg.deterministic else set_num_threads(threads_from_env())
    with ctx:
        return _train(model, dataset, cfg)


def _train(model: SurrogateModel, dataset: TrajectoryDataset, cfg: TrainConfig) -> TrainStats:
    for split in ("train", "valid"):
        if split not in dataset.splits or len(dataset.splits[split]) == 0:
            raise ValueError(f"dataset has no {split!r} split")
    mc = model.config
    dist = cfg.size_dist or uniform_dist(mc.size_set)
    for s in dist:
        model.check_size(s)
    train_data = dataset.normalized("train").astype(mc.dtype)
    n_traj, T = train_data.shape[:2]
    n_starts = T - mc.context
    if n_starts < 1:
        raise ValueError(f"trajectories of length {T} are too short for context {mc.context}")
    starts = eval_starts(dataset.splits["valid"].shape[1], mc.context, 1, cfg.val_starts)
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(model.params, cfg.lr, cfg.weight_decay)
    stats = TrainStats(tuple(sorted(mc.size_set)))
    best = None
    batch_index = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        losses = []
        for _ in range(cfg.steps_per_epoch):
            size = sample_size(rng, dist)
            ti = rng.integers(n_traj, size=cfg.batch_size)
            si = rng.integers(n_starts, size=cfg.batch_size)
            win = np.stack([train_data[i, s : s + mc.context + 1] for i, s in zip(ti, si)])
            win = np.moveaxis(win, 1, 3)  # (B, H, W, T+1, C)
            context, target = win[:, :, :, : mc.context], win[:, :, :, mc.context]
            delta_target = target - context[:, :, :, -1]
            with ag.Tape() as tape:
                delta = model.forward_delta(context, size, tape)
                loss = nmse_loss(delta, delta_target)
            lv = float(loss.value)
            if not np.isfinite(lv):
                raise NumericalError("non-finite training loss", batch_index, cfg.seed)
            grads = tape.backward(loss)
            opt.step(grads)
            losses.append(lv)
            stats.step_loss.append(lv)
            stats.step_size.append(size)
            stats.samples_seen += cfg.batch_size
            batch_index += 1
        val = evaluate_sizes(model, dataset, "valid", starts, stats.sizes, cfg.val_batch)
        # select on trained sizes only, so held-out sizes never steer the checkpoint
        val_mean = float(np.mean([val[s] for s in stats.sizes if dist.get(s, 0) > 0]))
        if not np.isfinite(val_mean):
            raise NumericalError("non-finite validation VRMSE", batch_index, cfg.seed)
        stats.train_loss.append(float(np.mean(losses)))
        stats.val_vrmse.append(val)
        stats.wall_clock.append(time.perf_counter() - t0)
        if val_mean < stats.best_val:
            stats.best_val = val_mean
            stats.best_epoch = epoch
            best = model.params.copy()
            if cfg.checkpoint:
                model.save(cfg.checkpoint, {"epoch": epoch, "val_vrmse_mean": val_mean, "seed": cfg.seed})
    if cfg.restore_best and best is not None:
        for k, v in best.items():
            model.params[k][...] = v
    return stats
