"""Transformer vector-field predictor with frame-wise modulation and gating.

Each frame's condition embedding is built from three ingredients: the
frame's condition channels, a sinusoidal embedding of the flow time t
(identical across frames of one sample), and a projected summary of the
preceding context latents broadcast to every frame. One linear layer per
block turns that embedding into six per-frame coefficient vectors
(gamma1, beta1, alpha1, gamma2, beta2, alpha2): gamma/beta modulate a
parameter-free layer norm before each sublayer, alpha gates the sublayer
output before the residual add.

Self-attention is masked to a temporal band: frame f attends to f' only
when |f - f'| <= T.

Two initializations make the untrained field exactly zero: the output
projection weight, and the alpha rows of every modulation layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .params import Linear, ParamStore
from .rng import SeededRng
from .tensor import Tensor, concat, gelu, layer_norm, no_grad, softmax

__all__ = [
    "PredictorConfig",
    "FieldPredictor",
    "build_mask",
    "time_embedding",
    "modulation_coeffs",
    "frame_adaln",
    "gate",
    "masked_attention",
    "predict_field",
]


@dataclass(frozen=True)
class PredictorConfig:
    d: int = 32           # latent channels per frame
    h: int = 64           # hidden width
    heads: int = 4
    layers: int = 2
    T: int = 4            # temporal half-window
    F: int = 16           # frames per window
    time_dim: int = 16    # sinusoidal flow-time embedding width
    cond_dim: int = 14    # condition channels per frame
    context: int = 4      # preceding frames summarized into the conditioning

    def __post_init__(self):
        if self.h % self.heads != 0:
            raise ValueError(f"h={self.h} not divisible by heads={self.heads}")
        if self.T < 0:
            raise ValueError(f"T must be >= 0, got {self.T}")
        if self.F < 1:
            raise ValueError(f"F must be >= 1, got {self.F}")
        if self.time_dim % 2 != 0:
            raise ValueError(f"time_dim must be even, got {self.time_dim}")
        if not 0 <= self.context < self.F:
            raise ValueError(f"context must be in [0, F), got {self.context}")


def build_mask(F: int, T: int) -> np.ndarray:
    """Boolean band mask: allow[f, f'] iff |f - f'| <= T."""
    idx = np.arange(F)
    return np.abs(idx[:, None] - idx[None, :]) <= T


def time_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding of flow time; accepts a scalar or a (B,) vector.

    t is stretched by 1000 before hitting the standard 10000^(-2i/dim)
    frequency ladder so that [0,1] covers a useful phase range.
    """
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    phases = 1000.0 * t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(phases), np.cos(phases)], axis=1)


# -- spec'd single-frame ops -----------------------------------------------------


def frame_adaln(x: Tensor, gamma, beta) -> Tensor:
    """gamma * LN(x) + beta over the last axis; plain LN at gamma=1, beta=0."""
    gamma = gamma if isinstance(gamma, Tensor) else Tensor(gamma)
    beta = beta if isinstance(beta, Tensor) else Tensor(beta)
    return gamma * layer_norm(x) + beta


def gate(x: Tensor, alpha) -> Tensor:
    """alpha * x elementwise; alpha=0 silences the branch."""
    alpha = alpha if isinstance(alpha, Tensor) else Tensor(alpha)
    return alpha * x


def modulation_coeffs(layer: Linear, c: Tensor):
    """Run one frame's condition embedding through a block's modulation layer.

    Returns (gamma1, beta1, alpha1, gamma2, beta2, alpha2), each of width h.
    """
    h = layer.in_dim
    if c.shape != (h,):
        raise ValueError(f"condition embedding must have shape ({h},), got {c.shape}")
    out = layer(c.reshape(1, h)).reshape(6 * h)
    return tuple(out[i * h:(i + 1) * h] for i in range(6))


# -- attention ----------------------------------------------------------------------


class Attention:
    """Multi-head scaled dot-product attention with a shared boolean mask."""

    def __init__(self, store: ParamStore, name: str, h: int, heads: int, rng: SeededRng):
        self.h = h
        self.heads = heads
        self.head_dim = h // heads
        self.q = Linear(store, f"{name}.q", h, h, rng=rng.spawn("q"))
        self.k = Linear(store, f"{name}.k", h, h, rng=rng.spawn("k"))
        self.v = Linear(store, f"{name}.v", h, h, rng=rng.spawn("v"))
        self.o = Linear(store, f"{name}.o", h, h, rng=rng.spawn("o"))

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        b, f, h = x.shape
        hd, nh = self.head_dim, self.heads

        def split(t: Tensor) -> Tensor:
            return t.reshape(b, f, nh, hd).transpose((0, 2, 1, 3))  # B,H,F,hd

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = (q @ k.transpose((0, 1, 3, 2))) * (1.0 / np.sqrt(hd))
        weights = softmax(scores, mask=mask)  # mask broadcasts over B,H
        mixed = (weights @ v).transpose((0, 2, 1, 3)).reshape(b, f, h)
        return self.o(mixed)


def masked_attention(attn: Attention, x: Tensor, mask: np.ndarray) -> Tensor:
    """Single-sequence (F, h) attention pass through ``attn``."""
    f, h = x.shape
    if mask.shape != (f, f):
        raise ValueError(f"mask shape {mask.shape} does not match F={f}")
    return attn(x.reshape(1, f, h), mask).reshape(f, h)


# -- predictor -------------------------------------------------------------------------


class Block:
    """Pre-norm residual block: modulated attention, then a modulated MLP."""

    def __init__(self, store: ParamStore, name: str, config: PredictorConfig, rng: SeededRng):
        h = config.h
        self.h = h
        self.attn = Attention(store, f"{name}.attn", h, config.heads, rng.spawn("attn"))
        self.fc1 = Linear(store, f"{name}.fc1", h, 4 * h, rng=rng.spawn("fc1"))
        self.fc2 = Linear(store, f"{name}.fc2", 4 * h, h, rng=rng.spawn("fc2"))
        # one linear layer emits all six modulation vectors; the alpha (gate)
        # rows start at zero so every block begins as the identity map
        self.mod = Linear(store, f"{name}.mod", h, 6 * h, rng=rng.spawn("mod"))
        w = self.mod.weight.data.copy()
        w[2 * h:3 * h] = 0.0
        w[5 * h:6 * h] = 0.0
        w.flags.writeable = False
        self.mod.weight.data = w

    def coeffs(self, cemb: Tensor):
        h = self.h
        out = self.mod(cemb)  # B,F,6h
        return tuple(out[:, :, i * h:(i + 1) * h] for i in range(6))

    def __call__(self, x: Tensor, cemb: Tensor, mask: np.ndarray) -> Tensor:
        g1, b1, a1, g2, b2, a2 = self.coeffs(cemb)
        x = x + gate(self.attn(frame_adaln(x, g1, b1), mask), a1)
        x = x + gate(self.fc2(gelu(self.fc1(frame_adaln(x, g2, b2)))), a2)
        return x


class FieldPredictor:
    """v(x_t, c, t): batched transformer over fixed-length frame windows."""

    def __init__(self, config: PredictorConfig, seed: int = 0):
        self.config = config
        self.store = ParamStore()
        rng = SeededRng(seed).spawn("field-init")
        c = config
        self.in_proj = Linear(self.store, "in_proj", c.d, c.h, rng=rng.spawn("in"))
        self.cond_proj = Linear(self.store, "cond_proj", c.cond_dim + c.time_dim, c.h,
                                rng=rng.spawn("cond"))
        prev_width = max(1, c.context * c.d)
        self.prev_proj = Linear(self.store, "prev_proj", prev_width, c.h, rng=rng.spawn("prev"))
        self.blocks = [Block(self.store, f"block{i}", c, rng.spawn(f"b{i}"))
                       for i in range(c.layers)]
        self.out_proj = Linear(self.store, "out_proj", c.h, c.d, zero_init=True)
        self.mask = build_mask(c.F, c.T)

    # -- conditioning -------------------------------------------------------------

    def condition_embedding(self, cond: Tensor, t, prev: Tensor | None) -> Tensor:
        """Per-frame (B, F, h) embedding; flow time is shared across frames."""
        c = self.config
        b, f, _ = cond.shape
        t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
        if t_arr.size == 1:
            t_arr = np.full(b, t_arr[0])
        if np.any(t_arr < 0.0) or np.any(t_arr > 1.0):
            raise ValueError(f"flow time must lie in [0, 1], got {t_arr}")
        temb = np.broadcast_to(time_embedding(t_arr, c.time_dim)[:, None, :],
                               (b, f, c.time_dim))
        per_frame = concat([cond, Tensor(temb.copy())], axis=-1)
        emb = self.cond_proj(per_frame)
        if c.context > 0:
            if prev is None:
                prev = Tensor(np.zeros((b, c.context, c.d)))
            summary = self.prev_proj(prev.reshape(b, 1, c.context * c.d))
            emb = emb + summary  # broadcast one summary vector over all frames
        return emb

    # -- forward ---------------------------------------------------------------------

    def __call__(self, x: Tensor, cond: Tensor, t, prev: Tensor | None = None) -> Tensor:
        c = self.config
        x = x if isinstance(x, Tensor) else Tensor(x)
        cond = cond if isinstance(cond, Tensor) else Tensor(cond)
        if prev is not None and not isinstance(prev, Tensor):
            prev = Tensor(prev)
        if x.ndim != 3 or x.shape[1:] != (c.F, c.d):
            raise ValueError(f"x must be (B, {c.F}, {c.d}), got {x.shape}")
        if cond.ndim != 3 or cond.shape != (x.shape[0], c.F, c.cond_dim):
            raise ValueError(f"cond must be (B, {c.F}, {c.cond_dim}), got {cond.shape}")
        if prev is not None and prev.shape != (x.shape[0], c.context, c.d):
            raise ValueError(f"prev must be (B, {c.context}, {c.d}), got {prev.shape}")
        cemb = self.condition_embedding(cond, t, prev)
        hstate = self.in_proj(x)
        for block in self.blocks:
            hstate = block(hstate, cemb, self.mask)
        return self.out_proj(hstate)

    def field(self, x: np.ndarray, cond: np.ndarray, t: float,
              prev: np.ndarray | None = None) -> np.ndarray:
        """Frozen-parameter single-window pass for samplers: (F,d) -> (F,d)."""
        with no_grad():
            out = self(Tensor(x[None]), Tensor(cond[None]), float(t),
                       None if prev is None else Tensor(prev[None]))
        return out.numpy()[0]


def predict_field(predictor: FieldPredictor, x, cond, t: float, prev=None) -> Tensor:
    """Differentiable single-window forward pass: (F, d) in, (F, d) out."""
    c = predictor.config
    x = x if isinstance(x, Tensor) else Tensor(x)
    cond = cond if isinstance(cond, Tensor) else Tensor(cond)
    if x.shape != (c.F, c.d):
        raise ValueError(f"x must be ({c.F}, {c.d}), got {x.shape}")
    out = predictor(x.reshape(1, c.F, c.d), cond.reshape(1, c.F, c.cond_dim), t,
                    None if prev is None else
                    (prev if isinstance(prev, Tensor) else Tensor(prev)).reshape(1, c.context, c.d))
    return out.reshape(c.F, c.d)
