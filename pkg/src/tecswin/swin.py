"""Swin blocks conditioned on text and time.

Window attention here attends over the window's own tokens *and* the
projected context tokens: the image-image logits and the image-context
logits are concatenated before a single softmax, and the value sets are
concatenated the same way.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .nn import MLP, LayerNorm, Linear, Module, parameter
from .rng import Rng
from .tensor import ShapeError, Tensor

SCALE_SHIFT_VARIANTS = tuple(range(1, 11))
DEFAULT_VARIANT = 4


@dataclass(frozen=True)
class AttentionConfig:
    num_heads: int
    head_dim: int = 32
    window: int = 8
    mlp_ratio_self: int = 4
    mlp_ratio_cross: int = 2
    use_relative_bias: bool = True

    def __post_init__(self):
        if self.num_heads < 1 or self.head_dim < 1:
            raise ValueError("num_heads and head_dim must be positive")
        if self.mlp_ratio_self < 1 or self.mlp_ratio_cross < 1:
            raise ValueError("mlp ratios must be >= 1")

    @property
    def dim(self) -> int:
        return self.num_heads * self.head_dim

    @classmethod
    def for_channels(cls, channels: int, head_dim: int = 32, **kw) -> "AttentionConfig":
        """Heads of width ``head_dim``; narrow layers fall back to one head spanning all channels."""
        if channels < head_dim:
            return cls(num_heads=1, head_dim=channels, **kw)
        if channels % head_dim:
            raise ShapeError(f"{channels} channels not divisible by head_dim {head_dim}")
        return cls(num_heads=channels // head_dim, head_dim=head_dim, **kw)


@dataclass
class ContextBundle:
    """Conditioning tokens for one batch.

    ``tokens`` holds projected text tokens followed by two time tokens,
    ``pooled`` the pooled text vector, ``masked`` which samples carry the
    null text block.
    """

    tokens: Tensor  # [B, Lctx, D]
    pooled: Tensor  # [B, D]
    masked: np.ndarray  # [B] bool

    @property
    def batch(self) -> int:
        return self.tokens.shape[0]

    @classmethod
    def empty(cls, batch: int, dim: int) -> "ContextBundle":
        return cls(Tensor(np.zeros((batch, 0, dim), np.float32)), Tensor(np.zeros((batch, dim), np.float32)),
                   np.zeros(batch, bool))


# ---------------------------------------------------------------------------
# index tables


def relative_position_index(win: int) -> np.ndarray:
    """[win², win²] indices into a (2·win−1)² bias table."""
    coords = np.stack(np.meshgrid(np.arange(win), np.arange(win), indexing="ij")).reshape(2, -1)
    rel = (coords[:, :, None] - coords[:, None, :]).transpose(1, 2, 0) + (win - 1)
    return rel[..., 0] * (2 * win - 1) + rel[..., 1]


def shift_region_ids(h: int, w: int, win: int, shift: int) -> np.ndarray:
    """Region label of every pixel of the shifted map; tokens in different regions must not mix."""
    img = np.zeros((h, w), dtype=np.int64)
    cuts = (slice(0, -win), slice(-win, -shift), slice(-shift, None))
    label = 0
    for hs in cuts:
        for ws in cuts:
            img[hs, ws] = label
            label += 1
    return img


def shift_attention_mask(h: int, w: int, win: int, shift: int) -> np.ndarray:
    """[nW, win², win²] additive mask: 0 within a region, −inf across regions."""
    ids = shift_region_ids(h, w, win, shift)
    mw = ids.reshape(h // win, win, w // win, win).transpose(0, 2, 1, 3).reshape(-1, win * win)
    cross = mw[:, None, :] != mw[:, :, None]
    return np.where(cross, -np.inf, 0.0).astype(np.float32)


# ---------------------------------------------------------------------------
# attention layers


class WindowAttention(Module):
    def __init__(self, cfg: AttentionConfig, ctx_dim: int | None, rng: Rng | None,
                 rel_bias_table: Tensor | None = None):
        self.cfg = cfg
        c = cfg.dim
        self.qkv = Linear(c, 3 * c, rng)
        self.ctx_kv = Linear(ctx_dim, 2 * c, rng) if ctx_dim else None
        self.proj = Linear(c, c, rng)
        self.rel_bias_table = rel_bias_table
        self._rel_index = relative_position_index(cfg.window).reshape(-1) if rel_bias_table is not None else None
        self.record_attention = False  # keep the last softmax weights in ``last_attention`` (probes)
        self.last_attention = None

    def forward(self, xw: Tensor, ctx_tokens: Tensor | None, batch: int, mask: np.ndarray | None = None) -> Tensor:
        return window_attention_context(self, xw, ctx_tokens, batch, mask)


def window_attention_context(layer: WindowAttention, xw: Tensor, ctx_tokens: Tensor | None, batch: int,
                             mask: np.ndarray | None = None) -> Tensor:
    """Window attention whose keys/values are [window tokens ‖ context tokens].

    ``xw`` is [B·nW, win², C] as produced by ``window_partition`` (after the
    caller's cyclic shift for SW-MSA); ``mask`` is the matching [nW, win², win²]
    additive shift mask or None.
    """
    cfg = layer.cfg
    n, length, c = xw.shape
    if c != cfg.dim:
        raise ShapeError(f"window attention expects {cfg.dim} channels, got {c}")
    if n % batch:
        raise ShapeError("window count not divisible by batch")
    h, d = cfg.num_heads, cfg.head_dim
    nw = n // batch
    scale = d ** -0.5

    qkv = layer.qkv(xw).reshape(batch, nw, length, 3, h, d).transpose(3, 0, 1, 4, 2, 5)
    q = qkv[0] * scale
    k, v = qkv[1], qkv[2]
    logits = q @ k.transpose(0, 1, 2, 4, 3)  # [B, nW, h, L, L]
    if layer.rel_bias_table is not None:
        bias = T.take(layer.rel_bias_table, layer._rel_index).reshape(length, length, h).transpose(2, 0, 1)
        logits = logits + bias
    if mask is not None:
        logits = logits + Tensor(mask[None, :, None].astype(logits.dtype))

    has_ctx = ctx_tokens is not None and ctx_tokens.shape[1] > 0 and layer.ctx_kv is not None
    if has_ctx:
        lc = ctx_tokens.shape[1]
        kv = layer.ctx_kv(ctx_tokens).reshape(batch, lc, 2, h, d).transpose(2, 0, 3, 1, 4)
        kc = kv[0].reshape(batch, 1, h, lc, d)
        vc = kv[1].reshape(batch, 1, h, lc, d)
        logits_c = q @ kc.transpose(0, 1, 2, 4, 3)  # [B, nW, h, L, Lc]
        attn = T.softmax(T.concat([logits, logits_c], axis=-1), axis=-1)
        out = attn[..., :length] @ v + attn[..., length:] @ vc
    else:
        attn = T.softmax(logits, axis=-1)
        out = attn @ v
    if layer.record_attention:
        layer.last_attention = attn.data
    out = out.transpose(0, 1, 3, 2, 4).reshape(n, length, c)
    return layer.proj(out)


class CrossAttentionLayer(Module):
    """Cross-attention onto the context tokens, then an MLP; both residual."""

    def __init__(self, cfg: AttentionConfig, ctx_dim: int, rng: Rng | None):
        c = cfg.dim
        self.cfg = cfg
        self.norm_q = LayerNorm(c)
        self.q = Linear(c, c, rng)
        self.kv = Linear(ctx_dim, 2 * c, rng)
        self.proj = Linear(c, c, rng)
        self.norm_mlp = LayerNorm(c)
        self.mlp = MLP(c, cfg.mlp_ratio_cross, rng)

    def attend(self, x: Tensor, ctx_tokens: Tensor) -> Tensor:
        """Plain multi-head attention of ``x`` [B, L, C] onto ``ctx_tokens`` [B, Lc, D]."""
        b, length, c = x.shape
        if ctx_tokens.shape[0] != b:
            raise ShapeError("context batch differs from feature batch")
        h, d = self.cfg.num_heads, self.cfg.head_dim
        lc = ctx_tokens.shape[1]
        q = self.q(x).reshape(b, length, h, d).transpose(0, 2, 1, 3) * (d ** -0.5)
        kv = self.kv(ctx_tokens).reshape(b, lc, 2, h, d).transpose(2, 0, 3, 1, 4)
        attn = T.softmax(q @ kv[0].transpose(0, 1, 3, 2), axis=-1)
        out = (attn @ kv[1]).transpose(0, 2, 1, 3).reshape(b, length, c)
        return self.proj(out)

    def forward(self, x: Tensor, ctx: ContextBundle) -> Tensor:
        x = x + self.attend(self.norm_q(x), ctx.tokens)
        return x + self.mlp(self.norm_mlp(x))


def cross_attention(layer: CrossAttentionLayer, x: Tensor, ctx: ContextBundle) -> Tensor:
    return layer(x, ctx)


# ---------------------------------------------------------------------------
# scale/shift placement


def _ss(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    return x * (scale + 1.0) + shift


def scale_shift_apply(x: Tensor, scale: Tensor, shift: Tensor, variant: int,
                      inner: Callable[[Tensor], Tensor],
                      norm: Callable[[Tensor], Tensor] | None = None,
                      norm_extra: Callable[[Tensor], Tensor] | None = None) -> Tensor:
    """Attention sub-block with the scale/shift placed according to ``variant``.

    Variant 4 (default)::

        short_cut = x
        x = gelu(norm(x) * (scale + 1) + shift)
        out = short_cut + inner(x)

    1 and 7 modulate after the attention (whole residual sum / branch only);
    2, 3, 5, 6 and 10 reorder norm, modulation and activation inside the
    residual; 8 and 9 behave like 4 here and additionally modulate the MLP
    input (handled by :class:`SwinBlock`).
    """
    if variant not in SCALE_SHIFT_VARIANTS:
        raise ValueError(f"scale-shift variant must be in 1..10, got {variant}")
    norm = norm or T.layer_norm
    if variant == 1:
        return _ss(x + inner(norm(x)), scale, shift)
    if variant == 2:
        return x + inner(norm(T.gelu(_ss(x, scale, shift))))
    if variant == 3:
        return x + inner(norm(T.gelu(x)))
    if variant in (4, 8, 9):
        return x + inner(T.gelu(_ss(norm(x), scale, shift)))
    if variant == 5:
        return x + inner(_ss(norm(x), scale, shift))
    if variant == 6:
        second = norm_extra or T.layer_norm
        return x + inner(second(T.gelu(_ss(norm(x), scale, shift))))
    if variant == 7:
        return x + _ss(inner(norm(x)), scale, shift)
    return x + inner(T.silu(_ss(norm(x), scale, shift)))  # 10


# ---------------------------------------------------------------------------
# blocks


class SwinBlock(Module):
    """One W-MSA or SW-MSA block, optionally followed by a cross-attention layer."""

    def __init__(self, cfg: AttentionConfig, resolution: int, shifted: bool, with_cross: bool,
                 ctx_dim: int, emb_dim: int, rng: Rng | None, variant: int = DEFAULT_VARIANT,
                 rel_bias_table: Tensor | None = None):
        if variant not in SCALE_SHIFT_VARIANTS:
            raise ValueError(f"scale-shift variant must be in 1..10, got {variant}")
        if resolution % cfg.window:
            raise ShapeError(f"resolution {resolution} not divisible by window {cfg.window}")
        c = cfg.dim
        self.cfg = cfg
        self.resolution = resolution
        self.variant = variant
        self.shift = cfg.window // 2 if shifted else 0
        self.norm1 = LayerNorm(c)
        self.norm_extra = LayerNorm(c) if variant == 6 else None
        self.attn = WindowAttention(cfg, ctx_dim, rng, rel_bias_table)
        self.norm2 = LayerNorm(c)
        self.mlp = MLP(c, cfg.mlp_ratio_self, rng)
        self.ss_proj = Linear(emb_dim, 2 * c, rng) if variant != 3 else None
        self.cross = CrossAttentionLayer(cfg, ctx_dim, rng) if with_cross else None
        self._mask = (shift_attention_mask(resolution, resolution, cfg.window, self.shift)
                      if self.shift else None)

    def _attention(self, x: Tensor, ctx: ContextBundle) -> Tensor:
        b, h, w, c = x.shape
        win = self.cfg.window
        if self.shift:
            x = T.cyclic_shift(x, -self.shift, -self.shift)
        xw = T.window_partition(x, win)
        out = self.attn(xw, ctx.tokens, b, self._mask)
        out = T.window_reverse(out, win, h, w)
        if self.shift:
            out = T.cyclic_shift(out, self.shift, self.shift)
        return out

    def forward(self, x: Tensor, ctx: ContextBundle, emb: Tensor) -> Tensor:
        b, h, w, c = x.shape
        if h != self.resolution or w != self.resolution:
            raise ShapeError(f"block built for {self.resolution}², got {h}x{w}")
        if self.ss_proj is not None:
            mod = self.ss_proj(T.silu(emb))
            scale = mod[:, :c].reshape(b, 1, 1, c)
            shift = mod[:, c:].reshape(b, 1, 1, c)
        else:
            scale = shift = None
        x = scale_shift_apply(x, scale, shift, self.variant, lambda y: self._attention(y, ctx),
                              self.norm1, self.norm_extra)
        if self.variant in (8, 9):
            x = x + self.mlp(T.gelu(_ss(self.norm2(x), scale, shift)))
        else:
            x = x + self.mlp(self.norm2(x))
        if self.cross is not None:
            seq = self.cross(x.reshape(b, h * w, c), ctx)
            x = seq.reshape(b, h, w, c)
        return x


def swin_block_forward(block: SwinBlock, x: Tensor, ctx: ContextBundle, emb: Tensor) -> Tensor:
    return block(x, ctx, emb)


class SwinStage(Module):
    """Blocks at one resolution.

    While the map is larger than the window, blocks alternate W-MSA / SW-MSA
    and cross-attention follows each SW-MSA. Once the map is window-sized
    every block is W-MSA and each one gets cross-attention.
    """

    def __init__(self, dim: int, resolution: int, depth: int, head_dim: int, window: int, ctx_dim: int,
                 emb_dim: int, rng: Rng | None, variant: int = DEFAULT_VARIANT, mlp_ratio_self: int = 4,
                 mlp_ratio_cross: int = 2, use_relative_bias: bool = True):
        win = min(window, resolution)
        windowed_only = resolution <= window
        if not windowed_only and depth % 2:
            raise ValueError(f"stage at {resolution}² alternates W-MSA/SW-MSA, depth {depth} must be even")
        cfg = AttentionConfig.for_channels(dim, head_dim, window=win, mlp_ratio_self=mlp_ratio_self,
                                           mlp_ratio_cross=mlp_ratio_cross, use_relative_bias=use_relative_bias)
        self.cfg = cfg
        self.windowed_only = windowed_only
        self.rel_bias = (parameter(rng, ((2 * win - 1) ** 2, cfg.num_heads), std=0.02)
                         if use_relative_bias else None)
        self.blocks = []
        for i in range(depth):
            shifted = (not windowed_only) and i % 2 == 1
            with_cross = windowed_only or shifted
            self.blocks.append(SwinBlock(cfg, resolution, shifted, with_cross, ctx_dim, emb_dim, rng,
                                         variant, self.rel_bias))

    def forward(self, x: Tensor, ctx: ContextBundle, emb: Tensor) -> Tensor:
        for blk in self.blocks:
            x = blk(x, ctx, emb)
        return x
