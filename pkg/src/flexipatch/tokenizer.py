"""Two-stage convolutional patch encoders/decoders with run-time size control.

Three kinds share one parameter layout:

``fixed``
    kernel == stride == the stage plan of one size.
``ckm``
    base kernels are resized (PI-resize) to the stage plan of the requested
    patch size; stride equals the resized kernel.
``csm``
    base kernels stay fixed; the requested size sets the stage strides and
    each stage pads by ``(k_i - s_i) / 2`` so the token grid is ``H/s x W/s``.

Encoder: conv -> LayerNorm -> GELU -> conv. Decoder mirrors it with
transposed convolutions; in CSM it crops the ``(k_i - s_i) / 2`` overhang, or
wraps it back onto the field in periodic mode (the adjoint of periodic padding).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autograd as ag
from .piresize import resize_operator

# total size -> per-stage sizes (stage 1 first)
SPLIT_TABLE = {16: (4, 4), 8: (4, 2), 4: (2, 2)}

PAD_MODES = ("learned", "periodic", "zero")


def token_grid(H: int, W: int, k: int, s: int, pad: int = 0) -> tuple[int, int]:
    """Token grid ``(N_h, N_w)`` of a conv tokenizer with kernel k, stride s."""
    if s < 1 or k < 1:
        raise ValueError(f"kernel and stride must be positive, got k={k}, s={s}")
    if H + 2 * pad < k or W + 2 * pad < k:
        raise ValueError(f"kernel {k} exceeds padded field ({H + 2 * pad}, {W + 2 * pad})")
    return (H + 2 * pad - k) // s + 1, (W + 2 * pad - k) // s + 1


@dataclass(frozen=True)
class StagePlan:
    total: int
    per_stage: tuple[int, ...]

    def __post_init__(self):
        if int(np.prod(self.per_stage)) != self.total:
            raise ValueError(f"stage sizes {self.per_stage} do not multiply to {self.total}")


def split_stages(total: int) -> StagePlan:
    if total not in SPLIT_TABLE:
        raise ValueError(f"unsupported patch/stride size {total}; expected one of {sorted(SPLIT_TABLE)}")
    return StagePlan(total, SPLIT_TABLE[total])


@dataclass(frozen=True)
class PadSpec:
    mode: str
    amounts: tuple[int, ...]

    def __post_init__(self):
        if self.mode not in PAD_MODES:
            raise ValueError(f"pad mode must be one of {PAD_MODES}, got {self.mode!r}")


def csm_pads(kernels: tuple[int, ...], strides: tuple[int, ...]) -> tuple[int, ...]:
    pads = []
    for k, s in zip(kernels, strides):
        if k < s or (k - s) % 2:
            raise ValueError(f"CSM stage with kernel {k} and stride {s} needs k >= s and k - s even")
        pads.append((k - s) // 2)
    return tuple(pads)


@dataclass
class TokenTensor:
    """Tokens ``(B, T, N_h, N_w, D)`` (or ``(B, N_h, N_w, D)``) plus the size that made them."""

    data: ag.Var
    size: int
    kind: str


ParamGetter = Callable[[str], ag.Var]


class Tokenizer:
    """Encoder/decoder pair of one kind. Parameters live outside, named ``enc.*``/``dec.*``."""

    def __init__(
        self,
        kind: str,
        in_channels: int,
        embed_dim: int,
        hidden_dim: int | None = None,
        k_base: int = 16,
        pad_mode: str = "learned",
    ):
        if kind not in ("fixed", "ckm", "csm"):
            raise ValueError(f"unknown tokenizer kind {kind!r}")
        self.kind = kind
        self.in_channels = in_channels
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim or max(embed_dim // 4, 4)
        self.k_base = k_base
        self.base_plan = split_stages(k_base)
        if pad_mode not in PAD_MODES:
            raise ValueError(f"pad mode must be one of {PAD_MODES}, got {pad_mode!r}")
        self.pad_mode = pad_mode

    # ------------------------------------------------------------ parameters

    def init_params(self, params: ag.ParameterSet, rng: np.random.Generator, dtype=np.float32) -> None:
        k1, k2 = self.base_plan.per_stage
        C, Dh, D = self.in_channels, self.hidden_dim, self.embed_dim

        def conv(name, k, cin, cout, fan_in):
            params[name + ".w"] = (rng.standard_normal((k, k, cin, cout)) / np.sqrt(fan_in)).astype(dtype)

        conv("enc.conv0", k1, C, Dh, k1 * k1 * C)
        params["enc.conv0.b"] = np.zeros(Dh, dtype)
        params["enc.norm.g"] = np.ones(Dh, dtype)
        params["enc.norm.b"] = np.zeros(Dh, dtype)
        conv("enc.conv1", k2, Dh, D, k2 * k2 * Dh)
        params["enc.conv1.b"] = np.zeros(D, dtype)
        if self.kind == "csm" and self.pad_mode == "learned":
            params["enc.pad0"] = np.zeros(C, dtype)
            params["enc.pad1"] = np.zeros(Dh, dtype)
        # transposed-conv weights are (k, k, out_channels, in_channels)
        conv("dec.conv1", k2, Dh, D, D)
        params["dec.conv1.b"] = np.zeros(Dh, dtype)
        params["dec.norm.g"] = np.ones(Dh, dtype)
        params["dec.norm.b"] = np.zeros(Dh, dtype)
        conv("dec.conv0", k1, C, Dh, Dh)
        params["dec.conv0.b"] = np.zeros(C, dtype)

    # ------------------------------------------------------------ geometry

    def supports(self, size: int) -> bool:
        if self.kind == "fixed":
            return size == self.k_base
        return size in SPLIT_TABLE

    def stage_geometry(self, size: int) -> tuple[tuple[int, ...], tuple[int, ...], tuple[int, ...]]:
        """Per-stage ``(kernels, strides, pads)`` for a requested size."""
        if not self.supports(size):
            raise ValueError(f"{self.kind} tokenizer (base {self.k_base}) cannot run at size {size}")
        plan = split_stages(size).per_stage
        if self.kind == "fixed":
            return plan, plan, (0, 0)
        if self.kind == "ckm":
            return plan, plan, (0, 0)
        kernels = self.base_plan.per_stage
        return kernels, plan, csm_pads(kernels, plan)

    def grid(self, H: int, W: int, size: int) -> tuple[int, int]:
        kernels, strides, pads = self.stage_geometry(size)
        for k, s, p in zip(kernels, strides, pads):
            H, W = token_grid(H, W, k, s, p)
        return H, W

    def _kernel(self, P: ParamGetter, name: str, k_target: int) -> ag.Var:
        w = P(name)
        k_base = w.shape[0]
        if self.kind != "ckm" or k_target == k_base:
            return w
        M = resize_operator(k_base, k_target).astype(w.dtype)
        flat = ag.reshape(w, (k_base * k_base, -1))
        return ag.reshape(ag.matmul(M, flat), (k_target, k_target) + w.shape[2:])

    def _pad(self, P: ParamGetter, x, stage: int, p: int):
        if p == 0:
            return x
        if self.pad_mode == "learned":
            return ag.pad_fill(x, P(f"enc.pad{stage}"), p)
        if self.pad_mode == "periodic":
            return ag.pad_periodic(x, p)
        return ag.pad_zero(x, p)

    # ------------------------------------------------------------ linear skeleton

    def encode_stage(self, P: ParamGetter, x, stage: int, size: int, bias: bool = True) -> ag.Var:
        kernels, strides, pads = self.stage_geometry(size)
        x = self._pad(P, x, stage, pads[stage])
        w = self._kernel(P, f"enc.conv{stage}.w", kernels[stage])
        y = ag.conv2d(x, w, strides[stage])
        return ag.add(y, P(f"enc.conv{stage}.b")) if bias else y

    def decode_stage(self, P: ParamGetter, z, stage: int, size: int, bias: bool = True, prefix: str = "dec") -> ag.Var:
        kernels, strides, pads = self.stage_geometry(size)
        w = self._kernel(P, f"{prefix}.conv{stage}.w", kernels[stage])
        p = pads[stage]
        if p and self.pad_mode == "periodic":
            # adjoint of periodic padding: wrap the overhang back instead of cropping it
            y = ag.fold_periodic(ag.conv_transpose2d(z, w, strides[stage]), p)
        else:
            y = ag.conv_transpose2d(z, w, strides[stage], crop=p)
        return ag.add(y, P(f"{prefix}.conv{stage}.b")) if bias else y

    # ------------------------------------------------------------ full passes

    def encode(self, P: ParamGetter, x, size: int) -> TokenTensor:
        """``x`` is ``(B, H, W, C)`` or ``(B, H, W, T, C)``; frames are tokenized independently."""
        xv = x.value if isinstance(x, ag.Var) else np.asarray(x)
        frames = xv.ndim == 5
        if frames:
            B, H, W, T, C = xv.shape
            x = ag.reshape(ag.transpose(x, (0, 3, 1, 2, 4)), (B * T, H, W, C))
        else:
            B, H, W, C = xv.shape
        if C != self.in_channels:
            raise ValueError(f"tokenizer expects {self.in_channels} channels, got {C}")
        if self.kind != "csm" and (H % size or W % size):
            raise ValueError(f"field {H}x{W} is not divisible by patch size {size}")
        if self.kind == "csm" and (H % size or W % size):
            raise ValueError(f"field {H}x{W} is not divisible by stride {size}")
        h = self.encode_stage(P, x, 0, size)
        h = ag.gelu(ag.layer_norm(h, P("enc.norm.g"), P("enc.norm.b")))
        h = self.encode_stage(P, h, 1, size)
        nh, nw = h.shape[1], h.shape[2]
        expect = self.grid(H, W, size)
        if (nh, nw) != expect:
            raise AssertionError(f"token grid {(nh, nw)} != expected {expect}")
        if frames:
            h = ag.reshape(h, (B, T, nh, nw, self.embed_dim))
        return TokenTensor(h, size, self.kind)

    def decode(self, P: ParamGetter, tokens: TokenTensor, size: int, out_hw: tuple[int, int]) -> ag.Var:
        """Tokens ``(B, N_h, N_w, D)`` to a field ``(B, H, W, C)``."""
        if tokens.size != size:
            raise ValueError(f"decode size {size} does not match encode size {tokens.size}")
        z = tokens.data
        if len(z.shape) != 4:
            raise ValueError(f"decode expects (B, N_h, N_w, D) tokens, got {z.shape}")
        h = self.decode_stage(P, z, 1, size)
        h = ag.gelu(ag.layer_norm(h, P("dec.norm.g"), P("dec.norm.b")))
        h = self.decode_stage(P, h, 0, size)
        if tuple(h.shape[1:3]) != tuple(out_hw):
            raise ValueError(f"decoded extent {h.shape[1:3]} != declared field {out_hw}")
        return h
