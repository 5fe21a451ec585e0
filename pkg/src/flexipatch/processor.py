"""Spatio-temporal transformer surrogate.

Each block is pre-norm: temporal attention, then spatial attention (full or
axial), then an MLP, each as a residual branch. Rotary position embedding
rotates queries and keys: over the time index for temporal attention, and over
token-centre coordinates (measured in pixels / ``pos_unit``) for spatial
attention, so grids produced by different patch sizes share one coordinate
frame. For full attention, half of each head's rotary pairs encode the row
coordinate and half the column coordinate.

The model predicts a delta: ``next = last_context_frame + decode(tokens)``.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import fileio
from .tokenizer import TokenTensor, Tokenizer

CHECKPOINT_FORMAT = "flexipatch-checkpoint"


@dataclass
class ModelConfig:
    in_channels: int = 1
    embed_dim: int = 64
    mlp_dim: int = 256
    n_heads: int = 4
    n_blocks: int = 2
    attention: str = "full"
    tokenizer: str = "ckm"
    size_set: tuple[int, ...] = (4, 8, 16)
    k_base: int = 16
    hidden_dim: int | None = None
    pad_mode: str = "learned"
    context: int = 6
    dtype: str = "float32"
    rope_base: float = 100.0
    pos_unit: int = 4

    def __post_init__(self):
        self.size_set = tuple(int(s) for s in self.size_set)
        self.validate()

    def validate(self) -> None:
        if self.embed_dim % self.n_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")
        if (self.embed_dim // self.n_heads) % 4:
            raise ValueError("head dimension must be a multiple of 4 for 2D rotary embedding")
        if self.mlp_dim < self.embed_dim:
            raise ValueError(f"mlp_dim {self.mlp_dim} < embed_dim {self.embed_dim}")
        if self.attention not in ("full", "axial"):
            raise ValueError(f"attention must be 'full' or 'axial', got {self.attention!r}")
        if self.tokenizer not in ("ckm", "csm", "fixed"):
            raise ValueError(f"tokenizer must be ckm, csm or fixed, got {self.tokenizer!r}")
        if self.tokenizer == "fixed" and self.size_set != (self.k_base,):
            raise ValueError(f"fixed tokenizer only runs at its own size {self.k_base}, got size_set {self.size_set}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.context < 1:
            raise ValueError("context must be >= 1")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["size_set"] = list(self.size_set)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def rope_angles(pos: np.ndarray, n_pairs: int, base: float) -> np.ndarray:
    """Angles ``(L, n_pairs)`` for 1D positions."""
    freqs = base ** (-np.arange(n_pairs) / max(n_pairs, 1))
    return pos[:, None] * freqs[None, :]


class SurrogateModel:
    """Tokenizer + transformer blocks + zero-initialized output head."""

    def __init__(self, config: ModelConfig, params: ag.ParameterSet | None = None, seed: int = 0):
        self.config = config
        self.tokenizer = Tokenizer(
            config.tokenizer,
            config.in_channels,
            config.embed_dim,
            config.hidden_dim,
            k_base=config.k_base,
            pad_mode=config.pad_mode,
        )
        self.score_entries = {"temporal": 0, "spatial": 0}
        if params is None:
            params = self.init_params(seed)
        self.params = params

    # ------------------------------------------------------------ parameters

    def init_params(self, seed: int) -> ag.ParameterSet:
        cfg = self.config
        dtype = np.dtype(cfg.dtype)
        rng = np.random.default_rng(seed)
        P = ag.ParameterSet()
        self.tokenizer.init_params(P, rng, dtype)
        D, M = cfg.embed_dim, cfg.mlp_dim

        def lin(name, n_in, n_out, zero=False):
            w = np.zeros((n_in, n_out)) if zero else rng.standard_normal((n_in, n_out)) / np.sqrt(n_in)
            P[name + ".w"] = w.astype(dtype)
            P[name + ".b"] = np.zeros(n_out, dtype)

        def norm(name):
            P[name + ".g"] = np.ones(D, dtype)
            P[name + ".b"] = np.zeros(D, dtype)

        for i in range(cfg.n_blocks):
            b = f"blocks.{i}"
            for part in ("tattn", "sattn"):
                norm(f"{b}.{part}.norm")
                for proj in ("q", "k", "v", "o"):
                    lin(f"{b}.{part}.{proj}", D, D)
            norm(f"{b}.mlp.norm")
            lin(f"{b}.mlp.fc1", D, M)
            lin(f"{b}.mlp.fc2", M, D)
        norm("out.norm")
        lin("head", D, D, zero=True)
        return P

    def getter(self, tape: ag.Tape | None = None):
        params = self.params
        if tape is None:
            return lambda name: ag.Var(params[name])
        return lambda name: tape.param(name, params[name])

    # ------------------------------------------------------------ attention

    def _attend(self, P, prefix: str, x, cos, sin, counter: str):
        S, L, D = x.shape
        H = self.config.n_heads
        dh = D // H

        def heads(t):
            return ag.transpose(ag.reshape(t, (S, L, H, dh)), (0, 2, 1, 3))

        q = heads(ag.linear(x, P(prefix + ".q.w"), P(prefix + ".q.b")))
        k = heads(ag.linear(x, P(prefix + ".k.w"), P(prefix + ".k.b")))
        v = heads(ag.linear(x, P(prefix + ".v.w"), P(prefix + ".v.b")))
        q = ag.rope(ag.mul(q, x.dtype.type(1.0 / np.sqrt(dh))), cos, sin)
        k = ag.rope(k, cos, sin)
        scores = ag.matmul(q, ag.transpose(k, (0, 1, 3, 2)))
        self.score_entries[counter] += S * H * L * L
        attn = ag.softmax(scores, axis=-1)
        o = ag.matmul(attn, v)
        o = ag.reshape(ag.transpose(o, (0, 2, 1, 3)), (S, L, D))
        return ag.linear(o, P(prefix + ".o.w"), P(prefix + ".o.b"))

    def _trig(self, angles: np.ndarray, dtype):
        return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)

    def temporal_attention(self, P, prefix: str, x):
        """Attention along T independently at every token location. ``x``: (B,T,Nh,Nw,D)."""
        B, T, Nh, Nw, D = x.shape
        dh = D // self.config.n_heads
        cos, sin = self._trig(rope_angles(np.arange(T, dtype=np.float64), dh // 2, self.config.rope_base), x.dtype)
        seq = ag.reshape(ag.transpose(x, (0, 2, 3, 1, 4)), (B * Nh * Nw, T, D))
        y = self._attend(P, prefix, seq, cos, sin, "temporal")
        return ag.transpose(ag.reshape(y, (B, Nh, Nw, T, D)), (0, 3, 1, 2, 4))

    def _coords(self, n: int, size: int) -> np.ndarray:
        return (np.arange(n, dtype=np.float64) + 0.5) * size / self.config.pos_unit

    def spatial_attention(self, P, prefix: str, x, size: int, kind: str | None = None):
        """Full attention over all tokens of a frame, or row- then column-wise (axial)."""
        kind = kind or self.config.attention
        B, T, Nh, Nw, D = x.shape
        dh = D // self.config.n_heads
        n = dh // 2
        base = self.config.rope_base
        rows, cols = self._coords(Nh, size), self._coords(Nw, size)
        if kind == "full":
            nr = n // 2
            ar = rope_angles(rows, nr, base)  # (Nh, nr)
            ac = rope_angles(cols, n - nr, base)  # (Nw, n - nr)
            ang = np.concatenate(
                [np.repeat(ar, Nw, axis=0), np.tile(ac, (Nh, 1))], axis=1
            )  # token order is row-major (i, j)
            cos, sin = self._trig(ang, x.dtype)
            seq = ag.reshape(x, (B * T, Nh * Nw, D))
            y = self._attend(P, prefix, seq, cos, sin, "spatial")
            return ag.reshape(y, (B, T, Nh, Nw, D))
        if kind != "axial":
            raise ValueError(f"unknown attention kind {kind!r}")
        cos, sin = self._trig(rope_angles(cols, n, base), x.dtype)
        seq = ag.reshape(x, (B * T * Nh, Nw, D))
        h = ag.reshape(self._attend(P, prefix, seq, cos, sin, "spatial"), (B, T, Nh, Nw, D))
        cos, sin = self._trig(rope_angles(rows, n, base), x.dtype)
        seq = ag.reshape(ag.transpose(h, (0, 1, 3, 2, 4)), (B * T * Nw, Nh, D))
        y = self._attend(P, prefix, seq, cos, sin, "spatial")
        return ag.transpose(ag.reshape(y, (B, T, Nw, Nh, D)), (0, 1, 3, 2, 4))

    def mlp(self, P, prefix: str, x):
        h = ag.gelu(ag.linear(x, P(prefix + ".fc1.w"), P(prefix + ".fc1.b")))
        return ag.linear(h, P(prefix + ".fc2.w"), P(prefix + ".fc2.b"))

    def _norm(self, P, name, x):
        return ag.layer_norm(x, P(name + ".g"), P(name + ".b"))

    def process(self, P, x, size: int):
        """Run the transformer blocks on ``(B, T, N_h, N_w, D)`` tokens."""
        for i in range(self.config.n_blocks):
            b = f"blocks.{i}"
            x = ag.add(x, self.temporal_attention(P, f"{b}.tattn", self._norm(P, f"{b}.tattn.norm", x)))
            x = ag.add(x, self.spatial_attention(P, f"{b}.sattn", self._norm(P, f"{b}.sattn.norm", x), size))
            x = ag.add(x, self.mlp(P, f"{b}.mlp", self._norm(P, f"{b}.mlp.norm", x)))
        return x

    # ------------------------------------------------------------ forward

    def check_size(self, size: int) -> None:
        if size not in self.config.size_set:
            if self.config.tokenizer == "fixed":
                raise ValueError(f"fixed-patch model only runs at size {self.config.k_base}, got {size}")
            raise ValueError(f"size {size} outside the trained set {self.config.size_set}")

    def forward_delta(self, context, size: int, tape: ag.Tape | None = None) -> ag.Var:
        """Predicted change from the last context frame, ``(B, H, W, C)``."""
        self.check_size(size)
        P = self.getter(tape)
        cv = context.value if isinstance(context, ag.Var) else np.asarray(context)
        if cv.ndim != 5:
            raise ValueError(f"context must be (B, H, W, T, C), got {cv.shape}")
        B, H, W, T, C = cv.shape
        if T != self.config.context:
            raise ValueError(f"context length {T} != configured {self.config.context}")
        x = np.asarray(cv, dtype=self.config.dtype) if not isinstance(context, ag.Var) else context
        tokens = self.tokenizer.encode(P, x, size)
        z = self.process(P, tokens.data, size)
        z = ag.getitem(z, (slice(None), -1))
        z = ag.linear(self._norm(P, "out.norm", z), P("head.w"), P("head.b"))
        return self.tokenizer.decode(P, TokenTensor(z, size, tokens.kind), size, (H, W))

    def forward(self, context, size: int, tape: ag.Tape | None = None):
        """Next frame ``(B, H, W, 1, C)``. Returns a Var when a tape is given, else an array."""
        delta = self.forward_delta(context, size, tape)
        cv = context.value if isinstance(context, ag.Var) else np.asarray(context, dtype=self.config.dtype)
        last = cv[:, :, :, -1]
        if tape is None:
            return (last + delta.value)[:, :, :, None]
        return ag.reshape(ag.add(delta, last), delta.shape[:3] + (1, delta.shape[3]))

    def __call__(self, context, size: int):
        return self.forward(context, size)

    # ------------------------------------------------------------ checkpoints

    def save(self, path, extra: dict | None = None) -> None:
        meta = {"config": self.config.to_dict(), "extra": extra or {}}
        fileio.write(path, CHECKPOINT_FORMAT, meta, self.params)

    @classmethod
    def load(cls, path) -> "SurrogateModel":
        meta, arrays = fileio.read(path, CHECKPOINT_FORMAT)
        cfg = ModelConfig.from_dict(meta["config"])
        params = ag.ParameterSet()
        for k, v in arrays.items():
            params[k] = v
        model = cls(cfg, params=params)
        expected = model.init_params(0)
        if list(expected) != list(params) or any(expected[k].shape != params[k].shape for k in expected):
            raise fileio.FormatError(f"{path}: parameters do not match the stored config")
        model.checkpoint_meta = meta.get("extra", {})
        return model
