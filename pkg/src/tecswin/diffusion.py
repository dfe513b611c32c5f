"""DDPM noising, the ε-prediction loss, and guided ancestral sampling.

Schedule arithmetic runs in float64 on numpy arrays; only the model sees
float32 tensors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .rng import Rng
from .tensor import ShapeError, Tensor

COSINE_OFFSET = 0.008

# model(x_t [B,S,S,C], t [B], text_emb [B,Ltok,D], mask [B]) -> eps_hat [B,S,S,C]
EpsModel = Callable[[Tensor, np.ndarray, np.ndarray, np.ndarray], Tensor]


def cosine_alpha_bar(t, s: float = COSINE_OFFSET):
    """Continuous cosine schedule ᾱ(t) for t in [0, 1], normalised so ᾱ(0) = 1."""
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0) or np.any(t_arr > 1):
        raise ValueError("t must lie in [0, 1]")
    f = np.cos((t_arr + s) / (1 + s) * math.pi / 2) ** 2
    f0 = math.cos(s / (1 + s) * math.pi / 2) ** 2
    out = f / f0
    return float(out) if np.ndim(t) == 0 else out


@dataclass(frozen=True)
class NoiseSchedule:
    """Discrete cosine schedule on the grid t = 0..T.

    β_t is clipped at ``max_beta`` (the raw ᾱ(1) is ~0) and ᾱ is rebuilt as
    the product of (1 − β), which keeps ᾱ strictly decreasing and positive.
    """

    T: int = 1000
    s: float = COSINE_OFFSET
    max_beta: float = 0.999

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        grid = cosine_alpha_bar(np.arange(self.T + 1) / self.T, self.s)
        betas = np.clip(1.0 - grid[1:] / grid[:-1], 0.0, self.max_beta)
        alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        object.__setattr__(self, "betas", np.concatenate([[0.0], betas]))
        object.__setattr__(self, "alpha_bar", alpha_bar)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    def check_t(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise ValueError(f"timestep out of range [0, {self.T}]")
        return t.astype(np.int64)


@dataclass(frozen=True)
class GuidanceConfig:
    cond_scale: float = 1.14
    mask_prob: float = 0.2

    def __post_init__(self):
        if self.cond_scale < 0:
            raise ValueError("cond_scale must be >= 0")
        if not 0 <= self.mask_prob < 1:
            raise ValueError("mask_prob must be in [0, 1)")


def _bcast(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape(v.shape + (1,) * (ndim - v.ndim))


def q_sample(x0, t, noise, schedule: NoiseSchedule) -> np.ndarray:
    """x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·noise; ``t`` scalar or one per sample."""
    x0 = np.asarray(x0)
    noise = np.asarray(noise)
    if noise.shape != x0.shape:
        raise ShapeError("noise must match x0")
    ab = schedule.alpha_bar[schedule.check_t(t)]
    if np.ndim(ab):
        ab = _bcast(ab, x0.ndim)
    return np.sqrt(ab) * x0.astype(np.float64) + np.sqrt(1.0 - ab) * noise.astype(np.float64)


def draw_text_mask(rng: Rng, n: int, p: float) -> np.ndarray:
    """Which samples have their prompt replaced by the null context."""
    return rng.bernoulli(p, n)


def eps_loss(model: EpsModel, x0, text_emb, rng: Rng, schedule: NoiseSchedule,
             mask_prob: float = 0.2) -> Tensor:
    """Mean squared error between injected noise and the model's prediction.

    Timesteps are uniform over 1..T per sample; each prompt is masked with
    probability ``mask_prob``.
    """
    x0 = np.asarray(x0, dtype=np.float32)
    b = x0.shape[0]
    t = rng.integers(1, schedule.T + 1, b)
    noise = rng.normal(x0.shape)
    mask = draw_text_mask(rng, b, mask_prob)
    x_t = q_sample(x0, t, noise, schedule).astype(np.float32)
    eps_hat = model(Tensor(x_t), t, text_emb, mask)
    diff = eps_hat - Tensor(noise)
    return (diff * diff).mean()


def guided_eps(eps_c, eps_u, s: float):
    """eps_u + s·(eps_c − eps_u); s = 1 returns eps_c and s = 0 returns eps_u untouched."""
    a = eps_c.data if isinstance(eps_c, Tensor) else np.asarray(eps_c)
    u = eps_u.data if isinstance(eps_u, Tensor) else np.asarray(eps_u)
    if a.shape != u.shape:
        raise ShapeError(f"guidance operands differ: {a.shape} vs {u.shape}")
    if s == 1:
        return eps_c
    if s == 0:
        return eps_u
    out = u + s * (a - u)
    return Tensor(out) if isinstance(eps_c, Tensor) else out


def predict_x0(x_t, t: int, eps_hat, schedule: NoiseSchedule) -> np.ndarray:
    ab = schedule.alpha_bar[schedule.check_t(t)]
    return (np.asarray(x_t, np.float64) - math.sqrt(1.0 - ab) * np.asarray(eps_hat, np.float64)) / math.sqrt(ab)


def ddpm_step(x_t, t: int, t_prev: int, eps_hat, rng: Rng | None, schedule: NoiseSchedule,
              clip_x0: bool = False) -> np.ndarray:
    """Ancestral step from t to any earlier t_prev (respaced posterior).

    Uses the posterior q(x_{t_prev} | x_t, x̂0) with the jump coefficient
    ᾱ_t/ᾱ_{t_prev} and the small variance β̃. No noise is drawn when
    t_prev = 0.
    """
    t, t_prev = int(t), int(t_prev)
    if not t_prev < t:
        raise ValueError(f"t_prev ({t_prev}) must be < t ({t})")
    schedule.check_t([t, t_prev])
    eps = eps_hat.data if isinstance(eps_hat, Tensor) else eps_hat
    x_t = np.asarray(x_t, np.float64)
    x0 = predict_x0(x_t, t, eps, schedule)
    if clip_x0:
        x0 = np.clip(x0, -1.0, 1.0)
    if t_prev == 0:
        return x0
    ab_t = schedule.alpha_bar[t]
    ab_p = schedule.alpha_bar[t_prev]
    beta = 1.0 - ab_t / ab_p
    c0 = math.sqrt(ab_p) * beta / (1.0 - ab_t)
    ct = math.sqrt(ab_t / ab_p) * (1.0 - ab_p) / (1.0 - ab_t)
    mean = c0 * x0 + ct * x_t
    var = (1.0 - ab_p) / (1.0 - ab_t) * beta
    if rng is None:
        return mean
    return mean + math.sqrt(var) * rng.normal(x_t.shape, dtype=np.float64)


def posterior_variance(t: int, t_prev: int, schedule: NoiseSchedule) -> float:
    ab_t, ab_p = schedule.alpha_bar[t], schedule.alpha_bar[t_prev]
    return float((1.0 - ab_p) / (1.0 - ab_t) * (1.0 - ab_t / ab_p))


def uniform_timesteps(steps: int, T: int) -> list[int]:
    """``steps`` evenly spaced timesteps from T down to 1, followed by the terminal 0."""
    if not 1 <= steps <= T:
        raise ValueError(f"steps must be in [1, {T}]")
    ts = np.round(np.linspace(T, 0, steps + 1)).astype(int)
    return [int(v) for v in ts]


def sample_loop(model: EpsModel, text_emb, timesteps: Sequence[int], guidance: GuidanceConfig, rng: Rng,
                schedule: NoiseSchedule, image_shape: tuple[int, int, int],
                callback: Callable[[int, np.ndarray], None] | None = None) -> np.ndarray:
    """Guided ancestral sampling from pure noise over ``timesteps`` (strictly decreasing, ending at 0).

    Each step evaluates the model on the prompt and on the null context and
    combines them with :func:`guided_eps`; with cond_scale 1 the null pass
    is skipped since it cannot affect the result.
    """
    if hasattr(timesteps, "timesteps_on"):
        timesteps = timesteps.timesteps_on(schedule.T)
    ts = [int(v) for v in timesteps]
    if len(ts) < 2 or ts[-1] != 0 or any(a <= b for a, b in zip(ts, ts[1:])):
        raise ValueError("timesteps must be strictly decreasing and end at 0")
    text_emb = np.asarray(text_emb, np.float32)
    b = text_emb.shape[0]
    s = guidance.cond_scale
    x = rng.normal((b,) + tuple(image_shape), dtype=np.float64)
    cond_mask = np.zeros(b, bool)
    both_emb = np.concatenate([text_emb, text_emb]) if s != 1 else None
    both_mask = np.concatenate([cond_mask, np.ones(b, bool)]) if s != 1 else None
    with T.no_grad():
        for i, (t, t_prev) in enumerate(zip(ts[:-1], ts[1:])):
            x32 = x.astype(np.float32)
            if s == 1:
                eps = model(Tensor(x32), np.full(b, t), text_emb, cond_mask).data
            else:
                out = model(Tensor(np.concatenate([x32, x32])), np.full(2 * b, t), both_emb, both_mask).data
                eps = guided_eps(out[:b], out[b:], s)
            x = ddpm_step(x, t, t_prev, eps, rng, schedule, clip_x0=True)
            if callback is not None:
                callback(i, x)
    return np.clip(x, -1.0, 1.0).astype(np.float32)
