"""Text encoder boundary, layer averaging and context assembly."""

from __future__ import annotations

import hashlib
import math
import re
import unicodedata
from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

import numpy as np

from . import tensor as T
from .nn import Linear, Module, parameter
from .rng import Rng
from .swin import ContextBundle
from .tensor import ShapeError, Tensor

_TOKEN_RE = re.compile(r"[㐀-䶿一-鿿豈-﫿]|[^\s㐀-䶿一-鿿豈-﫿]+")


@dataclass
class EncoderOutput:
    layer_outputs: np.ndarray  # [L, Ltok, D]
    pooled: np.ndarray  # [D]
    length: int  # real (unpadded) tokens

    @property
    def num_layers(self) -> int:
        return self.layer_outputs.shape[0]


class TextEncoder(Protocol):
    num_layers: int
    dim: int
    max_tokens: int

    def encode(self, prompt: str) -> EncoderOutput: ...


@dataclass(frozen=True)
class StubEncoderSpec:
    seed: int = 0
    dim: int = 32
    num_layers: int = 6
    max_tokens: int = 16
    vocab_size: int = 1 << 20


def normalize_prompt(prompt: str) -> str:
    return " ".join(unicodedata.normalize("NFKC", prompt).lower().split())


def tokenize(prompt: str) -> list[str]:
    """Whitespace-delimited words; CJK ideographs become one token each."""
    return _TOKEN_RE.findall(normalize_prompt(prompt))


class StubTextEncoder:
    """Deterministic stand-in for a multilingual CLIP text tower.

    Tokens are hashed into a large vocabulary; each id gets a seeded
    Gaussian embedding plus a positional sinusoid (layer 0). Layer ``l``
    is layer 0 times a fixed seeded matrix, so every layer differs.
    """

    def __init__(self, spec: StubEncoderSpec = StubEncoderSpec()):
        if spec.num_layers < 2:
            raise ValueError("encoder needs at least 2 layers")
        self.spec = spec
        self.num_layers = spec.num_layers
        self.dim = spec.dim
        self.max_tokens = spec.max_tokens
        rng = Rng(spec.seed).fork("layers")
        mats = [np.eye(spec.dim, dtype=np.float32)]
        for _ in range(1, spec.num_layers):
            mats.append(rng.normal((spec.dim, spec.dim), std=1.0 / math.sqrt(spec.dim)))
        self._layer_maps = np.stack(mats)
        pos = np.arange(spec.max_tokens)[:, None]
        freq = np.exp(-math.log(100.0) * np.arange(spec.dim // 2) / max(1, spec.dim // 2))
        pe = np.zeros((spec.max_tokens, spec.dim), np.float32)
        pe[:, 0 : 2 * (spec.dim // 2) : 2] = np.sin(pos * freq)
        pe[:, 1 : 2 * (spec.dim // 2) : 2] = np.cos(pos * freq)
        self._pos = 0.1 * pe
        self._cache: dict[int, np.ndarray] = {}

    def token_id(self, token: str) -> int:
        h = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=self.spec.seed.to_bytes(8, "little"))
        return 1 + int.from_bytes(h.digest(), "little") % (self.spec.vocab_size - 1)

    def _embed(self, tid: int) -> np.ndarray:
        vec = self._cache.get(tid)
        if vec is None:
            vec = Rng(self.spec.seed).fork("tok", tid).normal(self.spec.dim)
            self._cache[tid] = vec
        return vec

    def encode(self, prompt: str) -> EncoderOutput:
        tokens = tokenize(prompt)
        if not tokens:
            raise ValueError("prompt is empty after normalisation")
        tokens = tokens[: self.max_tokens]
        base = np.zeros((self.max_tokens, self.dim), np.float32)
        for i, tok in enumerate(tokens):
            base[i] = self._embed(self.token_id(tok)) + self._pos[i]
        layers = np.einsum("td,lde->lte", base, self._layer_maps).astype(np.float32)
        pooled = layers[-1, : len(tokens)].mean(axis=0)
        return EncoderOutput(layers, pooled, len(tokens))


_PROVIDERS: dict[str, Callable[..., TextEncoder]] = {"stub": StubTextEncoder}


def register_encoder(name: str, factory: Callable[..., TextEncoder]) -> None:
    """Make an encoder available by name (e.g. an adapter around a real M-CLIP model)."""
    _PROVIDERS[name] = factory


def get_encoder(name: str = "stub", **kwargs) -> TextEncoder:
    try:
        return _PROVIDERS[name](**kwargs)
    except KeyError:
        raise KeyError(f"no text encoder registered as {name!r}") from None


def encode(prompt: str, spec: StubEncoderSpec = StubEncoderSpec()) -> EncoderOutput:
    return StubTextEncoder(spec).encode(prompt)


# two readings of which layers get averaged, expressed relative to the depth
LAYER_PRESETS: dict[str, Callable[[int], tuple[int, ...]]] = {
    "first-23rd-24th": lambda n: (0, n - 2, n - 1),
    "first-22nd-last": lambda n: (0, n - 3, n - 1),
    "first-last": lambda n: (0, n - 1),
    "last": lambda n: (n - 1,),
}
DEFAULT_LAYER_PRESET = "first-23rd-24th"


def layer_indices(preset: str, num_layers: int) -> tuple[int, ...]:
    return LAYER_PRESETS[preset](num_layers)


def average_layers(out: EncoderOutput, indices: Sequence[int]) -> np.ndarray:
    indices = list(indices)
    if not indices:
        raise ValueError("need at least one layer index")
    n = out.num_layers
    for i in indices:
        if not -n <= i < n:
            raise IndexError(f"layer index {i} out of range for {n} layers")
    return out.layer_outputs[indices].mean(axis=0)


def embed_prompts(prompts: Sequence[str], encoder: TextEncoder, preset: str = DEFAULT_LAYER_PRESET) -> np.ndarray:
    """[B, Ltok, D_enc] averaged text embeddings for a batch of prompts."""
    idx = layer_indices(preset, encoder.num_layers)
    return np.stack([average_layers(encoder.encode(p), idx) for p in prompts]).astype(np.float32)


# ---------------------------------------------------------------------------
# time embedding


def time_embedding(t, dim: int) -> np.ndarray:
    """Raw sinusoidal embedding, [B, dim] (cos half then sin half)."""
    if dim % 2:
        raise ValueError("time embedding dim must be even")
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if (t < 0).any():
        raise ValueError("timesteps must be >= 0")
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1).astype(np.float32)


class TimeEmbedding(Module):
    def __init__(self, dim: int, rng: Rng | None):
        self.dim = dim
        self.fc1 = Linear(dim, dim, rng)
        self.fc2 = Linear(dim, dim, rng)

    def forward(self, t) -> Tensor:
        raw = Tensor(time_embedding(t, self.dim))
        return self.fc2(T.silu(self.fc1(raw)))


# ---------------------------------------------------------------------------
# context assembly


def _resample_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Row-stochastic linear interpolation from ``n_in`` token slots to ``n_out``."""
    m = np.zeros((n_out, n_in), np.float32)
    pos = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    lo = np.clip(np.floor(pos).astype(int), 0, n_in - 1)
    hi = np.clip(lo + 1, 0, n_in - 1)
    frac = np.clip(pos - lo, 0.0, 1.0)
    m[np.arange(n_out), lo] += 1.0 - frac
    m[np.arange(n_out), hi] += frac
    return m


class ContextAssembler(Module):
    """Project encoder tokens to the context width and append the two time tokens.

    Text tokens are mapped linearly on both axes (token count
    ``text_tokens -> ctx_tokens`` and width ``enc_dim -> ctx_dim``).
    Masked samples get the learned null block instead. The time tokens are
    ``[t_emb, t_emb + pooled]`` where ``pooled`` is the mean text token.
    """

    def __init__(self, text_tokens: int, enc_dim: int, ctx_tokens: int, ctx_dim: int, rng: Rng | None):
        self.text_tokens = text_tokens
        self.enc_dim = enc_dim
        self.ctx_tokens = ctx_tokens
        self.ctx_dim = ctx_dim
        self.token_proj = Tensor(_resample_matrix(ctx_tokens, text_tokens) if rng is not None
                                 else np.zeros((ctx_tokens, text_tokens), np.float32), requires_grad=True)
        self.feat_proj = Linear(enc_dim, ctx_dim, rng, bias=False, std=1.0 / math.sqrt(enc_dim))
        self.null_tokens = parameter(rng, (ctx_tokens, ctx_dim), std=0.02)

    def project(self, text_emb) -> Tensor:
        te = text_emb if isinstance(text_emb, Tensor) else Tensor(np.asarray(text_emb, np.float32))
        if te.ndim != 3 or te.shape[1:] != (self.text_tokens, self.enc_dim):
            raise ShapeError(f"text embeddings must be [B, {self.text_tokens}, {self.enc_dim}], got {te.shape}")
        return self.token_proj @ self.feat_proj(te)

    def forward(self, text_emb, t_emb: Tensor, mask) -> ContextBundle:
        mask = np.asarray(mask, dtype=bool).reshape(-1)
        proj = self.project(text_emb)
        b = proj.shape[0]
        if t_emb.shape != (b, self.ctx_dim):
            raise ShapeError(f"time embedding must be [{b}, {self.ctx_dim}], got {t_emb.shape}")
        if mask.shape != (b,):
            raise ShapeError("mask length differs from batch")
        text = T.where(mask[:, None, None], self.null_tokens.reshape(1, self.ctx_tokens, self.ctx_dim), proj)
        pooled = text.mean(axis=1)
        tokens = T.concat([text, t_emb.reshape(b, 1, self.ctx_dim),
                           (t_emb + pooled).reshape(b, 1, self.ctx_dim)], axis=1)
        return ContextBundle(tokens, pooled, mask)


def assemble_context(assembler: ContextAssembler, text_emb, t_emb: Tensor, mask) -> ContextBundle:
    return assembler(text_emb, t_emb, mask)
