"""Synthetic open-vocabulary segmentation data and the SEGB container.

Each object class is a (hue band, shape family) pair rendered on a
low-amplitude noise background; the background itself is a stuff class.
Everything is a pure function of (spec, vocabulary, sample index).
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

IGNORE = 0xFFFF
BACKGROUND = "background"
SHAPES = ("disk", "square", "triangle", "ring", "cross", "diamond")
HUES = {"red": 0.0, "green": 1.0 / 3.0, "blue": 2.0 / 3.0}


@dataclass(frozen=True)
class Recipe:
    shape: str | None
    hue: float | None
    stuff: bool = False


@dataclass
class Vocabulary:
    classes: list[str]
    recipes: dict[str, Recipe]
    train: list[str] = field(default_factory=list)
    test: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.train:
            self.train = list(self.classes)
        if not self.test:
            self.test = list(self.classes)

    def __len__(self) -> int:
        return len(self.classes)

    def index(self, name: str) -> int:
        return self.classes.index(name)

    @property
    def novel(self) -> list[str]:
        return [c for c in self.test if c not in self.train]

    @property
    def objects(self) -> list[str]:
        return [c for c in self.classes if not self.recipes[c].stuff]

    def is_thing(self, name: str) -> bool:
        return not self.recipes[name].stuff


def default_vocabulary(with_background: bool = True) -> Vocabulary:
    classes: list[str] = []
    recipes: dict[str, Recipe] = {}
    if with_background:
        classes.append(BACKGROUND)
        recipes[BACKGROUND] = Recipe(None, None, stuff=True)
    for shape in SHAPES:
        for hue_name, hue in HUES.items():
            name = f"{hue_name}_{shape}"
            classes.append(name)
            recipes[name] = Recipe(shape, hue)
    return Vocabulary(classes, recipes)


def vocabulary_from_names(names: Sequence[str]) -> Vocabulary:
    recipes = {}
    for name in names:
        if name == BACKGROUND:
            recipes[name] = Recipe(None, None, stuff=True)
        else:
            hue, _, shape = name.partition("_")
            recipes[name] = Recipe(shape or None, HUES.get(hue))
    return Vocabulary(list(names), recipes)


def split_vocabulary(vocab: Vocabulary, novel_count: int, seed: int) -> tuple[list[str], list[str]]:
    """Hold out ``novel_count`` seeded-random object classes from training.

    Returns (C_train, C_test) with C_test the full vocabulary. Stuff classes
    are never held out.
    """
    candidates = [c for c in vocab.classes if not vocab.recipes[c].stuff]
    if novel_count < 0 or novel_count >= len(vocab.classes) or novel_count > len(candidates):
        raise ValueError(f"novel_count {novel_count} must be below vocabulary size {len(vocab.classes)}")
    rng = np.random.default_rng(seed)
    held = set(rng.choice(len(candidates), size=novel_count, replace=False).tolist()) if novel_count else set()
    novel = {candidates[i] for i in held}
    train = [c for c in vocab.classes if c not in novel]
    return train, list(vocab.classes)


def with_split(vocab: Vocabulary, novel_count: int, seed: int) -> Vocabulary:
    train, test = split_vocabulary(vocab, novel_count, seed)
    return Vocabulary(list(vocab.classes), dict(vocab.recipes), train, test)


@dataclass(frozen=True)
class DatasetSpec:
    num_samples: int = 500
    image_size: int = 128
    classes_per_image: tuple[int, int] = (1, 3)
    instances_per_class: tuple[int, int] = (1, 2)
    radius: tuple[int, int] = (14, 28)
    seed: int = 0

    def validate(self) -> None:
        if self.image_size <= 0 or self.image_size % 32:
            raise ValueError(f"image_size {self.image_size} must be a positive multiple of 32")
        for name in ("classes_per_image", "instances_per_class", "radius"):
            lo, hi = getattr(self, name)
            if lo < 1 or hi < lo:
                raise ValueError(f"{name} range {lo}..{hi} is empty")
        if self.num_samples < 0:
            raise ValueError("num_samples must be non-negative")


@dataclass
class SegmentationSample:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    semantic: np.ndarray  # (H, W) uint16 class ids, IGNORE for void
    instance: np.ndarray  # (H, W) uint16, 0 = stuff/background
    classes: tuple[str, ...]

    def __eq__(self, other) -> bool:
        if not isinstance(other, SegmentationSample):
            return NotImplemented
        return (
            self.classes == other.classes
            and self.image.tobytes() == other.image.tobytes()
            and self.semantic.tobytes() == other.semantic.tobytes()
            and self.instance.tobytes() == other.instance.tobytes()
        )

    def present_classes(self) -> list[int]:
        ids = np.unique(self.semantic)
        return [int(i) for i in ids if i != IGNORE]

    def instance_segments(self) -> list[tuple[int, np.ndarray]]:
        """(class id, mask) per thing instance, in id order."""
        out = []
        for iid in np.unique(self.instance):
            if iid == 0:
                continue
            m = self.instance == iid
            cls = np.unique(self.semantic[m])
            out.append((int(cls[0]), m))
        return out


# -- rendering -------------------------------------------------------------


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6.0) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return np.array([(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i], dtype=np.float32)


def shape_mask(shape: str, size: int, cx: float, cy: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    dx, dy = xx + 0.5 - cx, yy + 0.5 - cy
    if shape == "disk":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        s = 0.8 * r
        return (np.abs(dx) <= s) & (np.abs(dy) <= s)
    if shape == "triangle":
        # upward triangle inscribed in the circle of radius r
        top, base = -r, 0.5 * r
        half = (dy - top) / (base - top) * (r * 0.866)
        return (dy >= top) & (dy <= base) & (np.abs(dx) <= half)
    if shape == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if shape == "cross":
        arm = 0.33 * r
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    raise ValueError(f"unknown shape family {shape!r}")


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.uniform(0.3, 0.6)
    tint = rng.normal(0.0, 0.02, size=(3, 1, 1))
    noise = rng.normal(0.0, 0.05, size=(3, size, size))
    return np.clip(base + tint + noise, 0.0, 1.0).astype(np.float32)


def _paint(rng: np.random.Generator, image: np.ndarray, mask: np.ndarray, recipe: Recipe) -> None:
    hue = (recipe.hue + rng.uniform(-0.04, 0.04)) % 1.0
    rgb = _hsv_to_rgb(hue, rng.uniform(0.65, 1.0), rng.uniform(0.65, 1.0))
    texture = rng.normal(0.0, 0.04, size=(3, int(mask.sum())))
    image[:, mask] = np.clip(rgb[:, None] + texture, 0.0, 1.0)


def _sample_rng(seed: int, index: int, salt: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, index, salt])


def render_sample(spec: DatasetSpec, vocab: Vocabulary, index: int, pool: Sequence[str] | None = None) -> SegmentationSample:
    """Render sample ``index``: objects drawn back to front from ``pool`` (default: training classes)."""
    rng = _sample_rng(spec.seed, index)
    size = spec.image_size
    pool = [c for c in (pool if pool is not None else vocab.train) if vocab.is_thing(c)]
    image = _background(rng, size)
    bg = vocab.index(BACKGROUND) if BACKGROUND in vocab.classes else IGNORE
    semantic = np.full((size, size), bg, dtype=np.uint16)
    instance = np.zeros((size, size), dtype=np.uint16)
    lo, hi = spec.classes_per_image
    n_cls = int(rng.integers(lo, hi + 1))
    chosen = rng.choice(len(pool), size=n_cls, replace=False)
    placements = []
    for ci in chosen:
        name = pool[int(ci)]
        for _ in range(int(rng.integers(spec.instances_per_class[0], spec.instances_per_class[1] + 1))):
            placements.append(name)
    order = rng.permutation(len(placements))
    next_id = 1
    for k in order:
        name = placements[int(k)]
        recipe = vocab.recipes[name]
        r = float(rng.uniform(*spec.radius))
        cx = float(rng.uniform(r * 0.6, size - r * 0.6))
        cy = float(rng.uniform(r * 0.6, size - r * 0.6))
        mask = shape_mask(recipe.shape, size, cx, cy, r)
        if not mask.any():
            continue
        _paint(rng, image, mask, recipe)
        semantic[mask] = vocab.index(name)
        instance[mask] = next_id
        next_id += 1
    # drop ids fully occluded so instance ids stay dense in order of appearance
    instance = _relabel_dense(instance)
    return SegmentationSample(image, semantic, instance, tuple(vocab.classes))


def _relabel_dense(instance: np.ndarray) -> np.ndarray:
    ids = np.unique(instance)
    ids = ids[ids != 0]
    out = np.zeros_like(instance)
    for new, old in enumerate(ids, start=1):
        out[instance == old] = new
    return out


def generate(spec: DatasetSpec, vocab: Vocabulary, pool: Sequence[str] | None = None) -> list[SegmentationSample]:
    spec.validate()
    pool_list = [c for c in (pool if pool is not None else vocab.train) if vocab.is_thing(c)]
    if spec.classes_per_image[1] > len(pool_list):
        raise ValueError(
            f"classes_per_image up to {spec.classes_per_image[1]} exceeds the {len(pool_list)} available classes"
        )
    return [render_sample(spec, vocab, i, pool_list) for i in range(spec.num_samples)]


def render_pretrain_image(
    vocab: Vocabulary, cls: str, size: int, seed: int, index: int, distractors: int = 2
) -> np.ndarray:
    """One image dominated by a large instance of ``cls`` (pure noise for the stuff class).

    A few small distractor objects of other classes are scattered first so the
    image-level label only describes the dominant region.
    """
    rng = _sample_rng(seed, index, salt=7)
    image = _background(rng, size)
    others = [c for c in vocab.objects if c != cls]
    for _ in range(int(rng.integers(0, distractors + 1))):
        other = others[int(rng.integers(len(others)))]
        r = float(rng.uniform(0.06, 0.1) * size)
        cx, cy = rng.uniform(r, size - r, size=2)
        _paint(rng, image, shape_mask(vocab.recipes[other].shape, size, cx, cy, r), vocab.recipes[other])
    if vocab.is_thing(cls):
        r = float(rng.uniform(0.2, 0.34) * size)
        cx, cy = rng.uniform(r * 0.8, size - r * 0.8, size=2)
        _paint(rng, image, shape_mask(vocab.recipes[cls].shape, size, cx, cy, r), vocab.recipes[cls])
    return image


# -- SEGB container ----------------------------------------------------------

SEGB_MAGIC = b"SEGB"
SEGB_VERSION = 1


class SegbError(ValueError):
    """Base class for SEGB read failures."""


class SegbFormatError(SegbError):
    pass


class SegbTruncatedError(SegbError):
    pass


class SegbChecksumError(SegbError):
    def __init__(self, index: int):
        super().__init__(f"checksum mismatch in sample {index}")
        self.index = index


def encode_segb(samples: Sequence[SegmentationSample], classes: Sequence[str]) -> bytes:
    parts = [SEGB_MAGIC, struct.pack("<I", SEGB_VERSION), struct.pack("<I", len(classes))]
    for name in classes:
        raw = name.encode("utf-8")
        parts += [struct.pack("<I", len(raw)), raw]
    parts.append(struct.pack("<I", len(samples)))
    for s in samples:
        _, H, W = s.image.shape
        payload = b"".join(
            [
                struct.pack("<II", H, W),
                np.ascontiguousarray(s.image.transpose(1, 2, 0), dtype="<f4").tobytes(),
                np.ascontiguousarray(s.semantic, dtype="<u2").tobytes(),
                np.ascontiguousarray(s.instance, dtype="<u2").tobytes(),
            ]
        )
        parts += [payload, struct.pack("<I", zlib.crc32(payload))]
    return b"".join(parts)


def write_segb(samples: Sequence[SegmentationSample], path: str | Path, classes: Sequence[str] | None = None) -> None:
    if classes is None:
        classes = samples[0].classes if samples else ()
    Path(path).write_bytes(encode_segb(samples, classes))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise SegbTruncatedError(f"file truncated at byte {len(self.buf)} (needed {self.pos + n})")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def decode_segb(buf: bytes) -> tuple[list[str], list[SegmentationSample]]:
    if len(buf) < 8 or buf[:4] != SEGB_MAGIC:
        raise SegbFormatError("not a SEGB file (bad magic)")
    r = _Reader(buf)
    r.take(4)
    version = r.u32()
    if version != SEGB_VERSION:
        raise SegbFormatError(f"unsupported SEGB version {version}")
    classes = [r.take(r.u32()).decode("utf-8") for _ in range(r.u32())]
    count = r.u32()
    samples = []
    for i in range(count):
        start = r.pos
        H, W = r.u32(), r.u32()
        image = np.frombuffer(r.take(H * W * 12), dtype="<f4").reshape(H, W, 3).transpose(2, 0, 1)
        semantic = np.frombuffer(r.take(H * W * 2), dtype="<u2").reshape(H, W)
        instance = np.frombuffer(r.take(H * W * 2), dtype="<u2").reshape(H, W)
        payload = buf[start : r.pos]
        if zlib.crc32(payload) != r.u32():
            raise SegbChecksumError(i)
        samples.append(
            SegmentationSample(
                np.ascontiguousarray(image, dtype=np.float32),
                semantic.astype(np.uint16),
                instance.astype(np.uint16),
                tuple(classes),
            )
        )
    return classes, samples


def read_segb(path: str | Path) -> list[SegmentationSample]:
    return decode_segb(Path(path).read_bytes())[1]
