"""Sample-quality measurement for trained checkpoints: proxy FID and prompt-class accuracy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import GuidanceConfig, sample_loop
from .metrics import FeatureSet, RandomConvExtractor, extract_features, frechet_distance
from .rng import Rng
from .train import RunConfig, build_dataset
from .toy import ColorClassifier, SyntheticShapes


def generate(model, cfg: RunConfig, text_emb: np.ndarray, timesteps, cond_scale: float, seed: int,
             batch: int = 64) -> np.ndarray:
    """Guided samples for each row of ``text_emb``; chunked, each chunk with its own noise stream."""
    size, ch = cfg.model.image_size, cfg.model.in_channels
    schedule = cfg.diffusion.schedule()
    guidance = GuidanceConfig(cond_scale, cfg.guidance.mask_prob)
    rng = Rng(seed).fork("sample")
    out = [sample_loop(model, text_emb[i : i + batch], timesteps, guidance, rng.fork(i), schedule, (size, size, ch))
           for i in range(0, len(text_emb), batch)]
    return np.concatenate(out)


@dataclass
class SampleEvaluator:
    """Proxy FID of a model's samples against a fixed real reference set.

    Prompts, reference images and sampling noise are all fixed by ``seed``,
    so the metric is a deterministic function of (timesteps, cond_scale).
    """

    model: object
    cfg: RunConfig
    num_samples: int = 64
    num_real: int = 256
    seed: int = 0
    extractor: RandomConvExtractor | None = None

    def __post_init__(self):
        self.extractor = self.extractor or RandomConvExtractor()
        data = build_dataset(self.cfg, self.cfg.encoder.build())
        rng = Rng(self.seed).fork("evaluator")
        real, _ = data.batch(rng.fork("real"), self.num_real)
        self.real: FeatureSet = extract_features(real, self.extractor)
        if data.generator is not None:
            self.labels = np.arange(self.num_samples) % data.generator.num_classes
            self.prompt_emb = data.text_emb[self.labels]
        else:
            _, self.prompt_emb = data.batch(rng.fork("prompts"), self.num_samples)
            self.labels = None

    def samples(self, timesteps, cond_scale: float) -> np.ndarray:
        return generate(self.model, self.cfg, self.prompt_emb, timesteps, cond_scale, self.seed)

    def fid(self, timesteps, cond_scale: float) -> float:
        fake = extract_features(self.samples(timesteps, cond_scale), self.extractor)
        return frechet_distance(self.real, fake)

    __call__ = fid


def class_accuracy(model, cfg: RunConfig, timesteps, cond_scale: float, n: int = 200, seed: int = 0,
                   classifier: ColorClassifier | None = None) -> float:
    """Fraction of samples whose held-out colour classification matches the prompt class."""
    gen = SyntheticShapes(cfg.model.image_size, cfg.data.num_classes)
    if classifier is None:
        classifier = ColorClassifier().fit(*gen.sample(Rng(seed).fork("classifier"), 400))
    data = build_dataset(cfg, cfg.encoder.build())
    labels = np.arange(n) % gen.num_classes
    imgs = generate(model, cfg, data.text_emb[labels], timesteps, cond_scale, seed)
    return classifier.accuracy(imgs, labels)

