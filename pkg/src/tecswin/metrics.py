"""Fréchet distance between Gaussian fits of image features, with a frozen random-conv extractor."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import Rng

SHRINKAGE = 1e-6
SQRT_RESIDUAL_TOL = 1e-6


class FrechetError(ArithmeticError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (relative residual {residual:.3g})")
        self.residual = residual


@dataclass
class FeatureSet:
    """Feature matrix [N, F] with lazily cached mean and covariance."""

    features: np.ndarray | None
    extractor_id: str = "unknown"
    _mean: np.ndarray | None = field(default=None, repr=False)
    _cov: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def from_moments(cls, mean, cov, extractor_id: str = "moments") -> "FeatureSet":
        mean = np.atleast_1d(np.asarray(mean, np.float64))
        cov = np.atleast_2d(np.asarray(cov, np.float64))
        if cov.shape != (mean.size, mean.size):
            raise ValueError("covariance shape must be [F, F]")
        return cls(None, extractor_id, mean, cov)

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def mean(self) -> np.ndarray:
        if self._mean is None:
            self._mean = np.asarray(self.features, np.float64).mean(axis=0)
        return self._mean

    @property
    def cov(self) -> np.ndarray:
        if self._cov is None:
            f = np.asarray(self.features, np.float64)
            if f.shape[0] < 2:
                raise ValueError("need at least 2 samples for a covariance")
            self._cov = np.atleast_2d(np.cov(f, rowvar=False))
        return self._cov


def _sym_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def trace_sqrt_product(ca: np.ndarray, cb: np.ndarray) -> float:
    """Tr((Ca·Cb)^½) via the symmetric form √Ca·Cb·√Ca; tiny negative eigenvalues are clamped."""
    ra = _sym_sqrt(ca)
    m = ra @ cb @ ra
    m = (m + m.T) / 2
    w, v = np.linalg.eigh(m)
    scale = max(np.abs(m).max(), 1e-300)
    residual = float(np.abs((v * w) @ v.T - m).max() / scale)
    if not np.isfinite(residual) or residual > SQRT_RESIDUAL_TOL:
        raise FrechetError("matrix square root did not converge", residual)
    if w.min() < -1e-6 * max(w.max(), 1.0):
        raise FrechetError("covariance product is not positive semi-definite", float(-w.min() / scale))
    return float(np.sqrt(np.clip(w, 0.0, None)).sum())


def frechet_distance(a: FeatureSet, b: FeatureSet, shrinkage: float = SHRINKAGE) -> float:
    """‖μa − μb‖² + Tr(Ca + Cb − 2(Ca·Cb)^½), with ``shrinkage``·I added to both covariances."""
    if a.dim != b.dim:
        raise ValueError(f"feature dims differ: {a.dim} vs {b.dim}")
    eye = shrinkage * np.eye(a.dim)
    ca, cb = a.cov + eye, b.cov + eye
    diff = a.mean - b.mean
    return float(diff @ diff + np.trace(ca) + np.trace(cb) - 2.0 * trace_sqrt_product(ca, cb))


class RandomConvExtractor:
    """Frozen 3-layer 3×3 stride-2 conv net with ReLU and global average pooling.

    Weights are He-normal from a fixed seed; the output width is ``width``.
    """

    def __init__(self, width: int = 32, seed: int = 0, in_channels: int = 3):
        self.width, self.seed = width, seed
        chans = [in_channels, max(8, width // 2), width, width]
        rng = Rng(seed).fork("random-conv")
        self.weights = []
        for i, (cin, cout) in enumerate(zip(chans, chans[1:])):
            std = np.sqrt(2.0 / (9 * cin))
            self.weights.append(rng.fork(i).normal((3, 3, cin, cout), dtype=np.float64) * std)

    @property
    def id(self) -> str:
        return f"random-conv-w{self.width}-s{self.seed}"

    @staticmethod
    def _conv(x: np.ndarray, w: np.ndarray) -> np.ndarray:
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))[:, ::2, ::2]
        return np.einsum("nhwcij,ijco->nhwo", win, w, optimize=True)

    def __call__(self, images: np.ndarray) -> np.ndarray:
        x = np.asarray(images, np.float64)
        for i, w in enumerate(self.weights):
            x = self._conv(x, w)
            if i < len(self.weights) - 1:
                x = np.maximum(x, 0.0)
        return x.mean(axis=(1, 2))


def extract_features(images, extractor=None, batch: int = 256) -> FeatureSet:
    """Features of an [N, H, W, C] image batch in [−1, 1]."""
    extractor = extractor or RandomConvExtractor()
    images = np.asarray(images)
    if images.ndim != 4:
        raise ValueError("images must be [N, H, W, C]")
    feats = np.concatenate([extractor(images[i : i + batch]) for i in range(0, len(images), batch)])
    return FeatureSet(feats, getattr(extractor, "id", type(extractor).__name__))


def load_image_dir(path, size: int | None = None) -> np.ndarray:
    """All PNG files in ``path`` (sorted by name) as an [N, H, W, 3] array in [−1, 1]."""
    from .datapipe import preprocess_image, load_pixels

    files = sorted(Path(path).glob("*.png"))
    if not files:
        raise FileNotFoundError(f"no PNG images in {path}")
    imgs = []
    for f in files:
        px = load_pixels(f)
        imgs.append(preprocess_image(px, size) if size else px.astype(np.float32) / 127.5 - 1.0)
    shapes = {im.shape for im in imgs}
    if len(shapes) != 1:
        raise ValueError(f"images differ in shape: {sorted(shapes)}")
    return np.stack(imgs)
