"""Toy vision and text encoders, template prompting, and contrastive pretraining."""

from __future__ import annotations

import copy
import logging
import math
import re
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import Vocabulary, render_pretrain_image
from .nn import Conv2d, LayerNorm, Linear, Module
from .optim import AdamW, ParamGroup
from .tensor import Tensor

logger = logging.getLogger(__name__)

STRIDES = (4, 8, 16, 32)
STAGES = ("S0", "S1", "S2", "S3")

TEMPLATES = (
    "a photo of a {}.",
    "This is a photo of a {}",
    "There is a {} in the scene",
    "There is the {} in the scene",
    "a photo of a {} in the scene",
    "a photo of a small {}.",
    "a photo of a medium {}.",
    "a photo of a large {}.",
    "This is a photo of a small {}.",
    "This is a photo of a medium {}.",
    "This is a photo of a large {}.",
    "There is a small {} in the scene.",
    "There is a medium {} in the scene.",
    "There is a large {} in the scene.",
)


@dataclass(frozen=True)
class PromptTemplateSet:
    templates: tuple[str, ...] = TEMPLATES

    def __post_init__(self):
        for t in self.templates:
            if t.count("{}") != 1:
                raise ValueError(f"template must contain exactly one placeholder: {t!r}")

    def fill(self, name: str) -> list[str]:
        return [t.format(name.lower()) for t in self.templates]


def tokenize(sentence: str) -> list[str]:
    return re.sub(r"[.,;:!?]", " ", sentence.lower()).split()


@dataclass
class FeaturePyramid:
    features: list[Tensor]  # each (B, C_i, H/s_i, W/s_i)
    image_size: tuple[int, int]

    @property
    def F3(self) -> Tensor:
        return self.features[3]

    def __getitem__(self, i: int) -> Tensor:
        return self.features[i]

    def detached(self) -> "FeaturePyramid":
        return FeaturePyramid([f.detach() for f in self.features], self.image_size)


class _Stage(Module):
    def __init__(self, rng, c_in: int, c_out: int, reduce: int):
        self.reduce = Conv2d(rng, c_in, c_out, k=reduce, stride=reduce)
        self.conv = Conv2d(rng, c_out, c_out, k=3, padding=1)
        self.norm = LayerNorm(c_out)

    def __call__(self, x: Tensor) -> Tensor:
        y = self.reduce(x)
        y = y + T.gelu(self.conv(y))
        return self.norm(y)


class VisionBackbone(Module):
    """Four stages reaching cumulative strides 4, 8, 16, 32; the last stage has width d."""

    def __init__(self, rng: np.random.Generator, widths: tuple[int, int, int, int] = (16, 32, 64, 64)):
        self.widths = tuple(widths)
        c_in = 3
        stages = []
        for i, w in enumerate(widths):
            stages.append(_Stage(rng, c_in, w, reduce=4 if i == 0 else 2))
            c_in = w
        self.stages = stages
        self._frozen: set[str] = set()

    @property
    def dim(self) -> int:
        return self.widths[-1]

    @property
    def frozen_stages(self) -> set[str]:
        return set(self._frozen)

    def freeze_stages(self, names) -> None:
        for name in names:
            if name not in STAGES:
                raise ValueError(f"unknown stage {name!r}")
        self._frozen = set(names)
        for name, stage in zip(STAGES, self.stages):
            stage.set_trainable(name not in self._frozen)

    def __call__(self, image) -> FeaturePyramid:
        x = image.data if isinstance(image, Tensor) else np.asarray(image)
        if x.ndim == 3:
            x = x[None]
        B, C, H, W = x.shape
        if H % 32 or W % 32:
            raise ValueError(f"input extents {H}x{W} must be multiples of 32")
        dtype = self.stages[0].reduce.weight.dtype
        h = Tensor(np.ascontiguousarray(x.transpose(0, 2, 3, 1), dtype=dtype))
        feats = []
        for stage in self.stages:
            h = stage(h)
            feats.append(T.transpose(h, (0, 3, 1, 2)))
        return FeaturePyramid(feats, (H, W))


def vision_encode(backbone: VisionBackbone, image) -> FeaturePyramid:
    return backbone(image)


def freeze_copy(backbone: VisionBackbone) -> VisionBackbone:
    """Deep copy with every stage frozen; later updates to ``backbone`` never reach it."""
    clone = copy.deepcopy(backbone)
    for p in clone.parameters():
        p.data = p.data.copy()
    clone.freeze_stages(STAGES)
    return clone


class TextEncoder(Module):
    """Mean of token embeddings followed by one linear map, unit-normalized."""

    def __init__(self, rng: np.random.Generator, tokens: list[str], dim: int = 64, embed_dim: int = 64):
        self.tokens = list(tokens)
        self._index = {t: i for i, t in enumerate(self.tokens)}
        self.embedding = Tensor(rng.normal(0, 1.0, size=(len(tokens), embed_dim)).astype(np.float32), requires_grad=True)
        self.proj = Linear(rng, embed_dim, dim)
        self.frozen = False

    def freeze(self) -> None:
        self.frozen = True
        self.set_trainable(False)

    def bag_matrix(self, sentences: list[str]) -> np.ndarray:
        """Row i holds the token-averaging weights of sentence i."""
        A = np.zeros((len(sentences), len(self.tokens)), dtype=self.embedding.dtype)
        for i, s in enumerate(sentences):
            toks = tokenize(s)
            for tok in toks:
                if tok not in self._index:
                    raise KeyError(f"unknown token {tok!r}")
                A[i, self._index[tok]] += 1.0 / len(toks)
        return A

    def encode_sentences(self, sentences: list[str]) -> Tensor:
        bag = Tensor(self.bag_matrix(sentences))
        return T.l2_normalize(self.proj(bag @ self.embedding))


def build_token_list(classes, templates: PromptTemplateSet = PromptTemplateSet()) -> list[str]:
    toks: list[str] = []
    for t in templates.templates:
        for tok in tokenize(t.replace("{}", " ")):
            if tok not in toks:
                toks.append(tok)
    for c in classes:
        if c.lower() not in toks:
            toks.append(c.lower())
    return toks


@dataclass
class TextEmbeddingTable:
    classes: list[str]
    T: Tensor  # (|C|, d) unit rows
    T_hat: Tensor | None = field(default=None)

    def __post_init__(self):
        if self.T.shape[0] != len(self.classes):
            raise ValueError("embedding rows must match the class list")
        if self.T_hat is None:
            self.T_hat = self.T


def text_encode(encoder: TextEncoder, classes: list[str], templates: PromptTemplateSet = PromptTemplateSet()) -> TextEmbeddingTable:
    """Per-class mean of template sentence embeddings, re-normalized."""
    if not classes:
        raise ValueError("need at least one class")
    sentences = [s for c in classes for s in templates.fill(c)]
    emb = encoder.encode_sentences(sentences)
    n_t = len(templates.templates)
    avg = np.zeros((len(classes), len(sentences)), dtype=emb.dtype)
    for i in range(len(classes)):
        avg[i, i * n_t : (i + 1) * n_t] = 1.0 / n_t
    table = T.l2_normalize(Tensor(avg) @ emb)
    return TextEmbeddingTable(list(classes), table)


# -- contrastive pretraining -------------------------------------------------


def global_embedding(backbone: VisionBackbone, images) -> Tensor:
    F3 = backbone(images).F3
    return T.l2_normalize(F3.mean(axis=(2, 3)))


def info_nce(img: Tensor, txt: Tensor, temperature: float) -> Tensor:
    """Symmetric InfoNCE with matching pairs on the diagonal."""
    logits = (img @ txt.T) * (1.0 / temperature)
    B = logits.shape[0]
    diag = (np.arange(B), np.arange(B))
    l_i = -T.log_softmax(logits, axis=1)[diag].mean()
    l_t = -T.log_softmax(logits, axis=0)[diag].mean()
    return (l_i + l_t) * 0.5


@dataclass
class PretrainReport:
    steps: int
    final_loss: float
    retrieval_accuracy: float
    losses: list[float]


def _pretrain_batch(vocab: Vocabulary, classes: list[str], size: int, seed: int, step: int, batch: int):
    rng = np.random.default_rng([seed, step, 11])
    picks = rng.choice(len(classes), size=min(batch, len(classes)), replace=False)
    names = [classes[int(i)] for i in picks]
    if len(set(names)) < 2:
        raise ValueError("a contrastive batch needs at least 2 distinct classes")
    imgs = np.stack([render_pretrain_image(vocab, n, size, seed, step * batch + j) for j, n in enumerate(names)])
    return names, imgs


def retrieval_accuracy(
    backbone: VisionBackbone,
    encoder: TextEncoder,
    vocab: Vocabulary,
    classes: list[str],
    size: int,
    seed: int,
    count: int,
    templates: PromptTemplateSet = PromptTemplateSet(),
) -> float:
    """Top-1 image->text accuracy on held-out pretraining-style images."""
    with T.no_grad():
        table = text_encode(encoder, classes, templates).T.data
        hits = 0
        for start in range(0, count, 16):
            names = [classes[(start + j) % len(classes)] for j in range(min(16, count - start))]
            imgs = np.stack(
                [render_pretrain_image(vocab, n, size, seed + 99991, start + j) for j, n in enumerate(names)]
            )
            emb = global_embedding(backbone, imgs).data
            pred = np.argmax(emb @ table.T, axis=1)
            hits += sum(classes[p] == n for p, n in zip(pred, names))
    return hits / count


def pretrain_contrastive(
    backbone: VisionBackbone,
    encoder: TextEncoder,
    vocab: Vocabulary,
    steps: int,
    seed: int,
    image_size: int = 128,
    batch: int = 8,
    lr: float = 2e-3,
    weight_decay: float = 0.01,
    temperature: float = 0.07,
    eval_count: int = 190,
    templates: PromptTemplateSet = PromptTemplateSet(),
    log_every: int = 100,
) -> PretrainReport:
    """Image-level contrastive alignment of the two encoders over all vocabulary classes."""
    classes = list(vocab.classes)
    if len(classes) < 2:
        raise ValueError("a contrastive batch needs at least 2 distinct classes")
    params = [(f"vision.{n}", p) for n, p in backbone.named_parameters() if p.requires_grad]
    params += [(f"text.{n}", p) for n, p in encoder.named_parameters() if p.requires_grad]
    opt = AdamW([ParamGroup("all", params, lr)], weight_decay=weight_decay)
    losses: list[float] = []
    for step in range(steps):
        # cosine decay; a constant rate lets the loss blow up late in the run
        opt.groups[0].lr = 0.5 * lr * (1.0 + math.cos(math.pi * step / steps))
        names, imgs = _pretrain_batch(vocab, classes, image_size, seed, step, batch)
        img = global_embedding(backbone, imgs)
        table = text_encode(encoder, classes, templates).T
        idx = np.array([classes.index(n) for n in names])
        loss = info_nce(img, table[idx], temperature)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if log_every and (step + 1) % log_every == 0:
            logger.info("pretrain step %d loss %.4f", step + 1, np.mean(losses[-log_every:]))
    acc = retrieval_accuracy(backbone, encoder, vocab, classes, image_size, seed, eval_count, templates)
    return PretrainReport(steps, losses[-1] if losses else float("nan"), acc, losses)
