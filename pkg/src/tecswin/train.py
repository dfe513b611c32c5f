"""Run configuration, Adam with cosine warm-up schedule, and the training loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .datapipe import preprocess_image, read_manifest, template_prompt
from .diffusion import GuidanceConfig, NoiseSchedule, eps_loss
from .io import load_checkpoint, save_checkpoint
from .nn import Module
from .rng import Rng
from .tensor import Tensor, no_grad
from .textcond import DEFAULT_LAYER_PRESET, StubEncoderSpec, embed_prompts, get_encoder
from .toy import SyntheticShapes
from .unet import ModelConfig, TecSwinUNet

log = logging.getLogger(__name__)

PAPER_BATCH_SIZE = 1024


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 1.5e-4
    min_lr: float = 1.5e-5
    warmup_frac: float = 0.005
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    constant_lr: bool = False
    grad_clip: float | None = None
    checkpoint_every: int = 500
    eval_batch: int = 64

    @classmethod
    def finetune(cls, steps_per_epoch: int, epochs: int = 5, **kw) -> "TrainConfig":
        """Constant 1e-6 learning rate for a few epochs."""
        return cls(steps=steps_per_epoch * epochs, lr=1e-6, min_lr=1e-6, constant_lr=True, **kw)


@dataclass
class EncoderConfig:
    provider: str = "stub"
    seed: int = 0
    dim: int = 32
    num_layers: int = 6
    max_tokens: int = 16
    layer_preset: str = DEFAULT_LAYER_PRESET

    def build(self):
        if self.provider == "stub":
            return get_encoder("stub", spec=StubEncoderSpec(self.seed, self.dim, self.num_layers, self.max_tokens))
        return get_encoder(self.provider)


@dataclass
class DataConfig:
    kind: str = "synthetic-shapes"  # or "manifest"
    manifest: str | None = None
    num_classes: int = 4
    seed: int = 1


@dataclass
class DiffusionConfig:
    T: int = 1000
    s: float = 0.008

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule(self.T, self.s)


@dataclass
class SamplingConfig:
    steps: int = 190
    stages: int = 19
    base_substeps: int = 10
    schedule_file: str | None = None


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    data: DataConfig = field(default_factory=DataConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    seed: int = 0
    output_dir: str = "runs/toy"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        return cls(
            model=ModelConfig.from_dict(d.pop("model", {})),
            diffusion=DiffusionConfig(**d.pop("diffusion", {})),
            guidance=GuidanceConfig(**d.pop("guidance", {})),
            train=TrainConfig(**d.pop("train", {})),
            encoder=EncoderConfig(**d.pop("encoder", {})),
            data=DataConfig(**d.pop("data", {})),
            sampling=SamplingConfig(**d.pop("sampling", {})),
            **d,
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# optimisation


def learning_rate(step: int, total: int, base: float = 1.5e-4, min_lr: float = 1.5e-5,
                  warmup_frac: float = 0.005, constant: bool = False) -> float:
    """Linear warm-up over ``warmup_frac`` of training, then cosine decay to ``min_lr``."""
    if constant:
        return base
    warm = max(1, math.ceil(warmup_frac * total))
    if step < warm:
        return base * (step + 1) / warm
    progress = min(1.0, (step - warm) / max(1, total - warm))
    return min_lr + 0.5 * (base - min_lr) * (1.0 + math.cos(math.pi * progress))


class Adam:
    def __init__(self, params: list[Tensor], beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = params
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p.data -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params if p.grad is not None))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return total


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# data


class PromptedImages:
    """Images with pre-encoded prompt embeddings, drawn with replacement."""

    def __init__(self, images: np.ndarray | None, text_emb: np.ndarray, labels: np.ndarray | None = None,
                 generator: SyntheticShapes | None = None):
        self.images = images
        self.text_emb = text_emb  # per class (synthetic) or per record (manifest)
        self.labels = labels
        self.generator = generator

    def batch(self, rng: Rng, n: int) -> tuple[np.ndarray, np.ndarray]:
        if self.generator is not None:
            imgs, labels = self.generator.sample(rng, n)
            return imgs, self.text_emb[labels]
        idx = rng.integers(0, len(self.images), n)
        return self.images[idx], self.text_emb[idx]


def build_dataset(cfg: RunConfig, encoder) -> PromptedImages:
    size = cfg.model.image_size
    preset = cfg.encoder.layer_preset
    if cfg.data.kind == "synthetic-shapes":
        gen = SyntheticShapes(size, cfg.data.num_classes)
        return PromptedImages(None, embed_prompts(gen.prompts(), encoder, preset), generator=gen)
    if cfg.data.kind == "manifest":
        if not cfg.data.manifest:
            raise ValueError("manifest dataset needs data.manifest")
        root = Path(cfg.data.manifest).resolve().parent
        records = read_manifest(cfg.data.manifest)
        if not records:
            raise ValueError("manifest is empty")
        images = np.stack([preprocess_image(root / r.image, size) for r in records])
        prompts = [r.prompt or template_prompt(r.caption, r.lang) for r in records]
        return PromptedImages(images, embed_prompts(prompts, encoder, preset))
    raise ValueError(f"unknown dataset kind {cfg.data.kind!r}")


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    checkpoint: Path
    losses: list[float]
    eval_initial: float
    eval_final: float


def evaluation_loss(model, dataset: PromptedImages, schedule: NoiseSchedule, n: int, seed: int,
                    mask_prob: float) -> float:
    """ε-loss on a fixed batch (fixed images, timesteps, noise and masks)."""
    rng = Rng(seed).fork("eval")
    x0, emb = dataset.batch(rng.fork("data"), n)
    total = 0.0
    chunk = 32
    with no_grad():
        for i in range(0, n, chunk):
            loss = eps_loss(model, x0[i : i + chunk], emb[i : i + chunk], rng.fork("loss", i), schedule, mask_prob)
            total += loss.item() * len(x0[i : i + chunk])
    return total / n


def save_model(path, model: Module, cfg: RunConfig, step: int) -> None:
    save_checkpoint(path, model.state_dict(), {"config": cfg.to_dict(), "step": step})


def load_model(path) -> tuple[TecSwinUNet, RunConfig]:
    tensors, meta = load_checkpoint(path)
    cfg = RunConfig.from_dict(meta["config"])
    model = TecSwinUNet(cfg.model, None)
    model.load_state_dict(tensors)
    return model, cfg


def run_train(cfg: RunConfig, model: TecSwinUNet | None = None, progress=None) -> TrainResult:
    """Train from scratch (or from ``model``) and write checkpoints plus a JSON-lines loss log."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    root = Rng(cfg.seed)
    encoder = cfg.encoder.build()
    dataset = build_dataset(cfg, encoder)
    schedule = cfg.diffusion.schedule()
    if model is None:
        model = TecSwinUNet(cfg.model, root.fork("init"))
    params = model.parameters()
    tc = cfg.train
    opt = Adam(params, tc.beta1, tc.beta2, tc.adam_eps, tc.weight_decay)
    data_rng = root.fork("data")
    noise_rng = root.fork("noise")
    mask_prob = cfg.guidance.mask_prob

    eval_initial = evaluation_loss(model, dataset, schedule, tc.eval_batch, cfg.seed, mask_prob)
    losses = []
    with open(out / "loss_log.jsonl", "w", encoding="utf-8") as logf:
        for step in range(tc.steps):
            lr = learning_rate(step, tc.steps, tc.lr, tc.min_lr, tc.warmup_frac, tc.constant_lr)
            x0, emb = dataset.batch(data_rng, tc.batch_size)
            loss = eps_loss(model, x0, emb, noise_rng, schedule, mask_prob)
            value = loss.item()
            if not math.isfinite(value):
                norms = {n: float(np.abs(p.data).max()) for n, p in model.named_parameters()}
                worst = sorted(norms.items(), key=lambda kv: -kv[1])[:3]
                raise TrainingDiverged(f"non-finite loss at step {step} (lr={lr:.3g}); largest weights: {worst}")
            loss.backward()
            if tc.grad_clip:
                clip_grad_norm(params, tc.grad_clip)
            opt.step(lr)
            model.zero_grad()
            losses.append(value)
            logf.write(json.dumps({"step": step, "lr": lr, "loss": value}) + "\n")
            if progress is not None:
                progress(step, value)
            if tc.checkpoint_every and (step + 1) % tc.checkpoint_every == 0 and step + 1 < tc.steps:
                save_model(out / f"checkpoint_{step + 1:06d}.tsw", model, cfg, step + 1)
    ckpt = out / "checkpoint.tsw"
    save_model(ckpt, model, cfg, tc.steps)
    eval_final = evaluation_loss(model, dataset, schedule, tc.eval_batch, cfg.seed, mask_prob)
    (out / "train_summary.json").write_text(json.dumps(
        {"eval_initial": eval_initial, "eval_final": eval_final, "steps": tc.steps}, indent=2) + "\n")
    log.info("trained %d steps: eval loss %.4f -> %.4f", tc.steps, eval_initial, eval_final)
    return TrainResult(ckpt, losses, eval_initial, eval_final)
