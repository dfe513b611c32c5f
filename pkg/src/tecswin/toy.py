"""Four-class synthetic coloured shapes and a held-out colour classifier for them."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datapipe import template_prompt
from .rng import Rng

BACKGROUND = np.array([0.05, 0.05, 0.10])
CLASSES = (
    ("red", "square", np.array([0.90, 0.10, 0.10])),
    ("green", "circle", np.array([0.10, 0.85, 0.20])),
    ("blue", "triangle", np.array([0.15, 0.25, 0.95])),
    ("yellow", "cross", np.array([0.95, 0.90, 0.10])),
)


def class_prompts(num_classes: int = 4) -> list[str]:
    return [template_prompt(f"a {color} {shape}", "en") for color, shape, _ in CLASSES[:num_classes]]


def _shape_mask(shape: str, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - cy, xx - cx
    if shape == "square":
        return (np.abs(dy) <= r * 0.85) & (np.abs(dx) <= r * 0.85)
    if shape == "circle":
        return dy * dy + dx * dx <= r * r
    if shape == "triangle":
        return (dy <= r * 0.8) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
    arm = max(1.0, r * 0.35)
    return ((np.abs(dy) <= arm) & (np.abs(dx) <= r)) | ((np.abs(dx) <= arm) & (np.abs(dy) <= r))


@dataclass
class SyntheticShapes:
    size: int = 16
    num_classes: int = 4

    def render(self, label: int, rng: Rng) -> np.ndarray:
        _, shape, color = CLASSES[label]
        r = rng.uniform((), 0.22, 0.32) * self.size
        cy, cx = rng.uniform((2,), r + 0.5, self.size - r - 0.5)
        tint = color + rng.uniform((3,), -0.05, 0.05)
        img = np.broadcast_to(BACKGROUND, (self.size, self.size, 3)).copy()
        img[_shape_mask(shape, self.size, cy, cx, r)] = tint
        return (np.clip(img, 0, 1) * 2 - 1).astype(np.float32)

    def sample(self, rng: Rng, n: int, labels=None) -> tuple[np.ndarray, np.ndarray]:
        """``n`` images in [−1, 1] with their labels (uniform unless given)."""
        if labels is None:
            labels = rng.integers(0, self.num_classes, n)
        labels = np.asarray(labels)
        return np.stack([self.render(int(l), rng) for l in labels]), labels

    def prompts(self) -> list[str]:
        return class_prompts(self.num_classes)


def foreground_color(images: np.ndarray, frac: float = 0.2) -> np.ndarray:
    """Mean colour of the brightest ``frac`` of pixels, per image, in [0, 1]."""
    x = (np.asarray(images, np.float64) + 1) / 2
    b = x.shape[0]
    flat = x.reshape(b, -1, 3)
    k = max(1, int(frac * flat.shape[1]))
    order = np.argsort(flat.max(axis=2), axis=1)[:, -k:]
    return np.take_along_axis(flat, order[..., None], axis=1).mean(axis=1)


class ColorClassifier:
    """Nearest-centroid classifier on foreground colour, fit on real images only."""

    def fit(self, images: np.ndarray, labels: np.ndarray) -> "ColorClassifier":
        feats = foreground_color(images)
        labels = np.asarray(labels)
        self.classes_ = np.unique(labels)
        self.centroids_ = np.stack([feats[labels == c].mean(axis=0) for c in self.classes_])
        return self

    def predict(self, images: np.ndarray) -> np.ndarray:
        feats = foreground_color(images)
        d = ((feats[:, None, :] - self.centroids_[None]) ** 2).sum(-1)
        return self.classes_[d.argmin(axis=1)]

    def accuracy(self, images: np.ndarray, labels: np.ndarray) -> float:
        return float((self.predict(images) == np.asarray(labels)).mean())
