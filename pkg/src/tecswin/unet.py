"""The Swin U-Net denoiser: 1x1 stem, 4 encoder stages, middle group, 4 decoder stages."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Module
from .rng import Rng
from .swin import DEFAULT_VARIANT, ContextBundle, SwinStage
from .tensor import ShapeError, Tensor
from .textcond import ContextAssembler, TimeEmbedding

NUM_STAGES = 4


@dataclass
class ModelConfig:
    image_size: int = 16
    in_channels: int = 3
    base_channels: int = 32
    depths: tuple[int, ...] = (2, 2, 4, 2)
    window: int = 2
    head_dim: int = 32
    mlp_ratio_self: int = 4
    mlp_ratio_cross: int = 2
    scale_shift_variant: int = DEFAULT_VARIANT
    ctx_dim: int = 64
    ctx_tokens: int = 16
    text_tokens: int = 16
    enc_dim: int = 32
    mid_depth: int = 2
    use_relative_bias: bool = True

    def __post_init__(self):
        self.depths = tuple(int(d) for d in self.depths)
        self.validate()

    @classmethod
    def toy(cls, **kw) -> "ModelConfig":
        return cls(**kw)

    @classmethod
    def tiny(cls, **kw) -> "ModelConfig":
        base = dict(image_size=8, base_channels=8, depths=(2, 2, 2, 2), window=2, ctx_dim=8,
                    ctx_tokens=4, text_tokens=4, enc_dim=8)
        base.update(kw)
        return cls(**base)

    @classmethod
    def full(cls, **kw) -> "ModelConfig":
        base = dict(image_size=64, base_channels=128, depths=(2, 2, 18, 2), window=8, ctx_dim=512,
                    ctx_tokens=256, text_tokens=512, enc_dim=1024)
        base.update(kw)
        return cls(**base)

    def stage_resolutions(self) -> list[int]:
        return [self.image_size >> i for i in range(NUM_STAGES)]

    def stage_channels(self) -> list[int]:
        return [self.base_channels << i for i in range(NUM_STAGES)]

    def validate(self) -> None:
        if len(self.depths) != NUM_STAGES:
            raise ValueError(f"need {NUM_STAGES} stage depths, got {self.depths}")
        if self.image_size % (1 << (NUM_STAGES - 1)):
            raise ValueError("image_size must be divisible by 8")
        for res, depth in zip(self.stage_resolutions(), self.depths):
            if res > self.window and res % self.window:
                raise ValueError(f"stage resolution {res} not divisible by window {self.window}")
            if res > self.window and depth % 2:
                raise ValueError(f"stage at {res}² alternates W-MSA/SW-MSA; depth {depth} must be even")
        if self.ctx_dim % 2:
            raise ValueError("ctx_dim must be even (sinusoidal time embedding)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["depths"] = list(self.depths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class PatchMerge(Module):
    """2x2 neighbourhood -> channels (4C), 1x1 conv to 2C, then LayerNorm."""

    def __init__(self, dim: int, rng: Rng | None):
        self.reduction = Linear(4 * dim, 2 * dim, rng)
        self.norm = LayerNorm(2 * dim)

    def forward(self, x: Tensor) -> Tensor:
        b, h, w, c = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"patch merge needs even spatial dims, got {h}x{w}")
        return self.norm(T.conv_1x1(T.pixel_unshuffle(x, 2), self.reduction.weight, self.reduction.bias))


class PatchExpand(Module):
    """1x1 conv C->2C, SiLU, pixel shuffle to (2H, 2W, C/2), then LayerNorm."""

    def __init__(self, dim: int, rng: Rng | None):
        if dim % 2:
            raise ShapeError(f"patch expand needs an even channel count, got {dim}")
        self.expand = Linear(dim, 2 * dim, rng)
        self.norm = LayerNorm(dim // 2)

    def forward(self, x: Tensor) -> Tensor:
        y = T.silu(T.conv_1x1(x, self.expand.weight, self.expand.bias))
        return self.norm(T.pixel_shuffle(y, 2))


class SkipFuse(Module):
    """Concatenate decoder and encoder features along channels, 1x1 conv back to C."""

    def __init__(self, dim: int, rng: Rng | None):
        self.proj = Linear(2 * dim, dim, rng)

    def forward(self, dec: Tensor, enc: Tensor) -> Tensor:
        if dec.shape != enc.shape:
            raise ShapeError(f"skip shapes differ: {dec.shape} vs {enc.shape}")
        return T.conv_1x1(T.concat([dec, enc], axis=-1), self.proj.weight, self.proj.bias)


def patch_merge(layer: PatchMerge, x: Tensor) -> Tensor:
    return layer(x)


def patch_expand(layer: PatchExpand, x: Tensor) -> Tensor:
    return layer(x)


def skip_fuse(layer: SkipFuse, dec: Tensor, enc: Tensor) -> Tensor:
    return layer(dec, enc)


class TecSwinUNet(Module):
    """Predicts the injected noise from ``(x_t, t, context)``.

    Calling the model with ``(x_t, t, text_emb, mask)`` assembles the context
    bundle first; :meth:`forward` takes a prebuilt :class:`ContextBundle`.
    ``rng=None`` builds zero-filled placeholder weights (cheap to instantiate,
    used to count parameters of large configs).
    """

    def __init__(self, cfg: ModelConfig, rng: Rng | None):
        self.cfg = cfg
        chans = cfg.stage_channels()
        res = cfg.stage_resolutions()
        emb = cfg.ctx_dim

        def stage(i: int, depth: int, key: str) -> SwinStage:
            return SwinStage(chans[i], res[i], depth, cfg.head_dim, cfg.window, cfg.ctx_dim, emb,
                             rng.fork(key) if rng else None, cfg.scale_shift_variant, cfg.mlp_ratio_self,
                             cfg.mlp_ratio_cross, cfg.use_relative_bias)

        def sub(key):
            return rng.fork(key) if rng else None

        self.time_embed = TimeEmbedding(emb, sub("time"))
        self.context_assembler = ContextAssembler(cfg.text_tokens, cfg.enc_dim, cfg.ctx_tokens, cfg.ctx_dim,
                                                  sub("context"))
        self.stem = Linear(cfg.in_channels, chans[0], sub("stem"))
        self.encoder = [stage(i, cfg.depths[i], f"enc{i}") for i in range(NUM_STAGES)]
        self.merges = [PatchMerge(chans[i], sub(f"merge{i}")) for i in range(NUM_STAGES - 1)]
        self.middle = stage(NUM_STAGES - 1, cfg.mid_depth, "middle")
        order = list(range(NUM_STAGES - 1, -1, -1))
        self.fuses = [SkipFuse(chans[i], sub(f"fuse{i}")) for i in order]
        self.decoder = [stage(i, cfg.depths[i], f"dec{i}") for i in order]
        self.expands = [PatchExpand(chans[i], sub(f"expand{i}")) for i in order[:-1]]
        self.final_norm = LayerNorm(chans[0])
        self.head = Linear(chans[0], cfg.in_channels, sub("head"))

    def context(self, text_emb, t, mask) -> ContextBundle:
        return self.context_assembler(text_emb, self.time_embed(t), mask)

    def forward(self, x_t: Tensor, t, ctx: ContextBundle) -> Tensor:
        cfg = self.cfg
        if not isinstance(x_t, Tensor):
            x_t = Tensor(np.asarray(x_t, np.float32))
        b = x_t.shape[0]
        expected = (b, cfg.image_size, cfg.image_size, cfg.in_channels)
        if x_t.shape != expected:
            raise ShapeError(f"expected input {expected}, got {x_t.shape}")
        if ctx.batch != b:
            raise ShapeError("context batch differs from image batch")
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
        emb = self.time_embed(t) + ctx.pooled

        h = T.conv_1x1(x_t, self.stem.weight, self.stem.bias)
        skips = []
        for i, st in enumerate(self.encoder):
            h = st(h, ctx, emb)
            skips.append(h)
            if i < NUM_STAGES - 1:
                h = self.merges[i](h)
        h = self.middle(h, ctx, emb)
        for j, st in enumerate(self.decoder):
            h = self.fuses[j](h, skips[NUM_STAGES - 1 - j])
            h = st(h, ctx, emb)
            if j < NUM_STAGES - 1:
                h = self.expands[j](h)
        h = self.final_norm(h)
        return T.conv_1x1(h, self.head.weight, self.head.bias)

    def predict_eps(self, x_t, t, text_emb, mask) -> Tensor:
        b = np.shape(text_emb)[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
        return self.forward(x_t, t, self.context(text_emb, t, mask))

    def __call__(self, x_t, t, *args):
        if len(args) == 1 and isinstance(args[0], ContextBundle):
            return self.forward(x_t, t, args[0])
        return self.predict_eps(x_t, t, *args)


def unet_forward(model: TecSwinUNet, x_t: Tensor, t, ctx: ContextBundle) -> Tensor:
    return model.forward(x_t, t, ctx)


def count_parameters(cfg: ModelConfig) -> int:
    """Parameter count of ``cfg`` from a placeholder instantiation."""
    return TecSwinUNet(cfg, None).num_parameters()
