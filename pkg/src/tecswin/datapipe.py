"""Streaming filter for image-caption manifests.

A manifest is UTF-8 JSON lines, one :class:`PairRecord` per line. Each
record goes through text rules, image rules, de-duplication and the
text/image similarity rule; the first failing stage decides the rejection.
Records whose inputs are unusable (missing sizes, scorer crash, zero
embedding) are quarantined instead of rejected.
"""

from __future__ import annotations

import hashlib
import json
import re
import unicodedata
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np

MIN_CAPTION_CHARS = 5
MAX_PERPLEXITY = 6.5
MIN_CHARSET_RATIO = 0.70
MIN_SIDE = 64
MAX_ASPECT = 2
MIN_COSINE = 0.20

TEMPLATES = {
    "en": "This is an image of {caption}",
    "zh": "这是一张关于{caption}的图片",
}

MEANINGLESS_PATTERNS = (
    r"^\s*[\w-]*\d+\s*\.(jpe?g|png|gif|bmp|webp)\s*$",
    r"^\s*(image|img|picture|photo|screenshot|untitled|dsc|截图|图片|照片)[\s_-]*\d+\s*$",
    r"click (here )?for more",
    r"点击(查看)?更多",
    r"^\s*[\d\W_]+\s*$",
)

_CJK = re.compile(r"[㐀-䶿一-鿿豈-﫿]")


class Quarantine(Exception):
    """Record cannot be judged (bad metadata, scorer failure); set aside, not dropped."""


@dataclass
class PairRecord:
    image: str
    caption: str
    width: int | None = None
    height: int | None = None
    lang: str = "en"
    text_emb: list[float] | None = None
    image_emb: list[float] | None = None
    perplexity: float | None = None
    sha256: str | None = None
    status: str | None = None
    prompt: str | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for side in (self.width, self.height):
            if side is not None and side <= 0:
                raise ValueError("image dimensions must be positive")

    @classmethod
    def from_json(cls, obj: dict) -> "PairRecord":
        known = {f for f in cls.__dataclass_fields__ if f != "extra"}
        kw = {k: v for k, v in obj.items() if k in known}
        extra = {k: v for k, v in obj.items() if k not in known}
        return cls(**kw, extra=extra)

    def to_json(self) -> dict:
        d = asdict(self)
        extra = d.pop("extra")
        d = {k: v for k, v in d.items() if v is not None}
        d.update(extra)
        return d


@dataclass
class FilterVerdict:
    keep: bool
    reasons: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.keep != (not self.reasons):
            raise ValueError("keep must be true exactly when there are no reasons")

    @classmethod
    def of(cls, reasons: Sequence[str]) -> "FilterVerdict":
        return cls(not reasons, list(reasons))


# ---------------------------------------------------------------------------
# text


def chinese_char_ratio(text: str) -> float:
    chars = [c for c in text if not c.isspace()]
    if not chars:
        return 0.0
    return sum(1 for c in chars if _CJK.match(c)) / len(chars)


def _is_allowed_word(word: str) -> bool:
    for ch in word:
        if not ch.isalpha() or _CJK.match(ch):
            continue
        if "LATIN" not in unicodedata.name(ch, ""):
            return False
    return True


def clean_caption(caption: str) -> str:
    """Drop words written in scripts other than Latin or Chinese; collapse whitespace."""
    words = unicodedata.normalize("NFKC", caption).split()
    return " ".join(w for w in words if _is_allowed_word(w))


class HashPerplexityScorer:
    """Deterministic stand-in for a language-model perplexity, uniform-ish in [1, 10)."""

    def __init__(self, seed: int = 0):
        self.key = seed.to_bytes(8, "little")

    def __call__(self, text: str) -> float:
        h = hashlib.blake2b(text.encode("utf-8"), digest_size=8, key=self.key).digest()
        return 1.0 + 9.0 * int.from_bytes(h, "little") / 2**64


def filter_text(caption: str, perplexity_scorer: Callable[[str], float] | None = None,
                charset_ratio_fn: Callable[[str], float] | None = None, *, perplexity: float | None = None,
                patterns: Sequence[str] = MEANINGLESS_PATTERNS) -> FilterVerdict:
    """Caption rules: length > 5 chars, no boilerplate, perplexity ≤ 6.5, charset ratio ≥ 0.70.

    The perplexity and charset rules only run when a value or function is
    supplied (they apply to translated Chinese captions).
    """
    reasons = []
    text = caption.strip()
    if len(text) <= MIN_CAPTION_CHARS:
        reasons.append("text_length")
    if any(re.search(p, text, flags=re.IGNORECASE) for p in patterns):
        reasons.append("text_meaningless")
    if perplexity is None and perplexity_scorer is not None:
        try:
            perplexity = float(perplexity_scorer(text))
        except Exception as exc:
            raise Quarantine(f"perplexity_scorer_failed: {exc}") from exc
    if perplexity is not None and perplexity > MAX_PERPLEXITY:
        reasons.append("text_perplexity")
    if charset_ratio_fn is not None and charset_ratio_fn(text) < MIN_CHARSET_RATIO:
        reasons.append("text_charset")
    return FilterVerdict.of(reasons)


def template_prompt(caption: str, lang: str = "en") -> str:
    return TEMPLATES.get(lang, TEMPLATES["en"]).format(caption=caption)


_ZH_DIGITS = "零一二三四五六七八九"
_ZH_UNITS = ("", "十", "百", "千")


def chinese_numeral(n: int) -> str:
    """Chinese reading of 1 ≤ n ≤ 9999, e.g. 984 -> 九百八十四."""
    if not 1 <= n <= 9999:
        raise ValueError("supported range is 1..9999")
    digits = [int(d) for d in str(n)]
    out = []
    pending_zero = False
    for pos, d in enumerate(digits):
        unit = _ZH_UNITS[len(digits) - 1 - pos]
        if d == 0:
            pending_zero = bool(out)
            continue
        if pending_zero:
            out.append("零")
            pending_zero = False
        if not (d == 1 and unit == "十" and not out):
            out.append(_ZH_DIGITS[d])
        out.append(unit)
    return "".join(out)


def class_caption_zh(index: int, label: str, ordinal: Callable[[int], str] = chinese_numeral) -> str:
    """Class-conditional caption, e.g. (984, 针筒) -> 这是第九百八十四类针筒的图片."""
    return f"这是第{ordinal(index)}类{label}的图片"


# ---------------------------------------------------------------------------
# images


def filter_image(width: int | None, height: int | None, status: str | None = None) -> FilterVerdict:
    """Reject sides below 64 px and aspect ratios of 2 or more."""
    if status == "failed":
        return FilterVerdict.of(["image_download"])
    if width is None or height is None:
        raise Quarantine("missing image dimensions")
    reasons = []
    if min(width, height) < MIN_SIDE:
        reasons.append("image_resolution")
    if max(width, height) >= MAX_ASPECT * min(width, height):
        reasons.append("image_aspect")
    return FilterVerdict.of(reasons)


def center_crop(pixels: np.ndarray) -> np.ndarray:
    h, w = pixels.shape[:2]
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    return pixels[top : top + side, left : left + side]


def resize_bilinear(img: np.ndarray, size: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize of an [H, W, C] float array to [size, size, C]."""
    h, w = img.shape[:2]
    if (h, w) == (size, size):
        return img

    def axis(n_in):
        pos = (np.arange(size) + 0.5) * n_in / size - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (pos - lo)

    y0, y1, fy = axis(h)
    x0, x1, fx = axis(w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def load_pixels(path) -> np.ndarray:
    from PIL import Image

    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except Exception as exc:
        raise Quarantine(f"decode failure: {exc}") from exc


def preprocess_image(pixels, size: int = 64) -> np.ndarray:
    """Centre-crop to a square, bilinear resize to ``size``, map [0, 255] to [−1, 1]."""
    if isinstance(pixels, (str, Path)):
        pixels = load_pixels(pixels)
    arr = np.asarray(pixels, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3 or min(arr.shape[:2]) == 0:
        raise Quarantine(f"undecodable pixel array of shape {arr.shape}")
    out = resize_bilinear(center_crop(arr), size)
    return (out / 127.5 - 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# pairs


def filter_pair(text_emb, image_emb, threshold: float = MIN_COSINE) -> FilterVerdict:
    """Reject pairs whose embedding cosine similarity is below ``threshold``."""
    a = np.asarray(text_emb, dtype=np.float64).ravel()
    b = np.asarray(image_emb, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise Quarantine("embedding dimensions differ")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise Quarantine("zero embedding vector")
    cos = float(a @ b) / (na * nb)
    return FilterVerdict.of(["pair_similarity"] if cos < threshold else [])


class ImageDetector(Protocol):
    """Watermark / NSFW / near-duplicate detector boundary; returns a score in [0, 1]."""

    name: str
    threshold: float

    def __call__(self, record: PairRecord) -> float: ...


# ---------------------------------------------------------------------------
# pipeline


def normalize_caption(caption: str) -> str:
    return " ".join(unicodedata.normalize("NFKC", caption).casefold().split())


def content_hash(record: PairRecord, root: Path | None = None) -> str:
    if record.sha256:
        return record.sha256
    path = Path(record.image)
    if root is not None and not path.is_absolute():
        path = root / path
    if path.is_file():
        return hashlib.sha256(path.read_bytes()).hexdigest()
    return hashlib.sha256(record.image.encode("utf-8")).hexdigest()


@dataclass
class PipelineResult:
    kept: list[PairRecord]
    rejected: list[tuple[PairRecord, list[str]]]
    quarantined: list[tuple[PairRecord, str]]

    def stats(self) -> dict:
        by_reason: dict[str, int] = {}
        hits: dict[str, int] = {}
        for _, reasons in self.rejected:
            by_reason[reasons[0]] = by_reason.get(reasons[0], 0) + 1
            for r in reasons:
                hits[r] = hits.get(r, 0) + 1
        total = len(self.kept) + len(self.rejected) + len(self.quarantined)
        return {
            "input": total,
            "kept": len(self.kept),
            "rejected": len(self.rejected),
            "quarantined": len(self.quarantined),
            "rejected_by_reason": dict(sorted(by_reason.items())),
            "reason_hits": dict(sorted(hits.items())),
        }


@dataclass
class FilterPipeline:
    perplexity_scorer: Callable[[str], float] | None = None
    detectors: Sequence[ImageDetector] = ()
    root: Path | None = None
    workers: int = 1

    def _judge(self, record: PairRecord) -> tuple[str, PairRecord, list[str] | str]:
        try:
            rec = PairRecord(**{**asdict(record), "caption": clean_caption(record.caption)})
            charset = chinese_char_ratio if rec.lang == "zh" else None
            v = filter_text(rec.caption, self.perplexity_scorer, charset, perplexity=rec.perplexity)
            if not v.keep:
                return "reject", rec, v.reasons
            v = filter_image(rec.width, rec.height, rec.status)
            if not v.keep:
                return "reject", rec, v.reasons
            for det in self.detectors:
                if det(rec) >= det.threshold:
                    return "reject", rec, [f"detector_{det.name}"]
            if rec.text_emb is not None and rec.image_emb is not None:
                v = filter_pair(rec.text_emb, rec.image_emb)
                if not v.keep:
                    return "reject", rec, v.reasons
            rec.prompt = template_prompt(rec.caption, rec.lang)
            return "keep", rec, []
        except Quarantine as exc:
            return "quarantine", record, str(exc)

    def run(self, records: Iterable[PairRecord]) -> PipelineResult:
        records = list(records)
        if self.workers > 1:
            with ThreadPoolExecutor(self.workers) as pool:
                judged = list(pool.map(self._judge, records))
        else:
            judged = [self._judge(r) for r in records]
        kept, rejected, quarantined = [], [], []
        seen: set[tuple[str, str]] = set()
        # dedup runs in input order so the first occurrence survives
        for status, rec, info in judged:
            if status == "quarantine":
                quarantined.append((rec, info))
            elif status == "reject":
                rejected.append((rec, info))
            else:
                key = (content_hash(rec, self.root), normalize_caption(rec.caption))
                if key in seen:
                    rejected.append((rec, ["duplicate_pair"]))
                else:
                    seen.add(key)
                    kept.append(rec)
        return PipelineResult(kept, rejected, quarantined)


def read_manifest(path) -> list[PairRecord]:
    with open(path, encoding="utf-8") as fh:
        return [PairRecord.from_json(json.loads(line)) for line in fh if line.strip()]


def write_manifest(path, records: Iterable[PairRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), ensure_ascii=False, sort_keys=True) + "\n")


def filter_manifest(src, out, quarantine, rejected_path=None, scorer=None, workers: int = 1) -> dict:
    """Run the pipeline file-to-file and return the stats document."""
    root = Path(src).resolve().parent
    result = FilterPipeline(perplexity_scorer=scorer, root=root, workers=workers).run(read_manifest(src))
    write_manifest(out, result.kept)
    with open(quarantine, "w", encoding="utf-8") as fh:
        for rec, why in result.quarantined:
            fh.write(json.dumps({**rec.to_json(), "quarantine_reason": why}, ensure_ascii=False, sort_keys=True)
                     + "\n")
    if rejected_path is not None:
        with open(rejected_path, "w", encoding="utf-8") as fh:
            for rec, reasons in result.rejected:
                fh.write(json.dumps({**rec.to_json(), "reasons": reasons}, ensure_ascii=False, sort_keys=True)
                         + "\n")
    return result.stats()
