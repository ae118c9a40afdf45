"""Collaborative vision/text fine-tuning: representation compensation, mask pooling,
content-dependent text transfer, IoU-supervised classification and the objective."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import IGNORE, SegmentationSample
from .nn import CrossAttention, LayerNorm, Module
from .tensor import NonFiniteError, Tensor


@dataclass(frozen=True)
class RCConfig:
    grids: tuple[int, ...] = (1, 2, 4)
    weight: float = 0.1

    def __post_init__(self):
        if not self.grids or any(k < 1 for k in self.grids) or any(a >= b for a, b in zip(self.grids, self.grids[1:])):
            raise ValueError(f"grids must be positive and strictly increasing, got {self.grids}")


def rc_loss(F3: Tensor, F3_frozen: Tensor, cfg: RCConfig = RCConfig()) -> Tensor:
    """Mean over grids of SmoothL1 between k x k average-pooled live and frozen features."""
    if F3.shape != F3_frozen.shape:
        raise ValueError(f"feature shapes differ: {F3.shape} vs {F3_frozen.shape}")
    ref = F3_frozen.detach()
    terms = [T.smooth_l1(T.avg_pool_grid(F3, k), T.avg_pool_grid(ref, k)) for k in cfg.grids]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


# -- mask pooling --------------------------------------------------------------


def mask_weights(mask_logits: np.ndarray, h: int, w: int) -> np.ndarray:
    """Per-cell soft mask weights on an h x w grid: area average of the mask probability."""
    probs = T._sigmoid(np.asarray(mask_logits))
    H, W = probs.shape[-2:]
    Ph = T._grid_matrix(H, h, probs.dtype)
    Pw = T._grid_matrix(W, w, probs.dtype)
    return Ph @ probs @ Pw.T


def pool_with_weights(F3: Tensor, weights: np.ndarray) -> Tensor:
    """Weighted spatial mean of F3 (d, h, w) under weights (N, h, w); rows L2-normalized.

    A mask whose total weight is below 1e-6 falls back to the unweighted global mean.
    """
    d, h, w = F3.shape
    Wt = np.asarray(weights, dtype=F3.dtype).reshape(len(weights), h * w).copy()
    mass = Wt.sum(axis=1)
    empty = mass < 1e-6
    Wt[empty] = 1.0
    Wt /= Wt.sum(axis=1, keepdims=True)
    flat = T.reshape(F3, (d, h * w))
    V = Tensor(Wt) @ T.transpose(flat)
    return T.l2_normalize(V)


def mask_pooling(F3: Tensor, masks) -> Tensor:
    """Vision embedding per proposal, V (N, d). ``masks`` are logits at any resolution."""
    logits = masks.logits.data if hasattr(masks, "logits") else (masks.data if isinstance(masks, Tensor) else masks)
    if logits.ndim == 4:
        logits = logits[0]
    _, h, w = F3.shape
    return pool_with_weights(F3, mask_weights(logits, h, w))


# -- content-dependent transfer ----------------------------------------------


class CDTLayer(Module):
    def __init__(self, rng, dim: int, heads: int):
        self.text_norm = LayerNorm(dim)
        self.vision_norm = LayerNorm(dim)
        self.attn = CrossAttention(rng, dim, heads, zero_out=True)

    def __call__(self, text: Tensor, vision: Tensor) -> Tensor:
        return self.attn(self.text_norm(text), self.vision_norm(vision))


class CDTStack(Module):
    """Residual cross-attention layers: text rows query flattened vision tokens."""

    def __init__(self, rng: np.random.Generator, dim: int = 64, depth: int = 2, heads: int = 4):
        self.layers = [CDTLayer(rng, dim, heads) for _ in range(depth)]
        self._dim = dim

    @property
    def dim(self) -> int:
        return self._dim

    def __call__(self, text: Tensor, F3: Tensor) -> Tensor:
        return cdt_forward(self, text, F3)


def cdt_forward(stack: CDTStack, text: Tensor, F3: Tensor) -> Tensor:
    """Condition text embeddings (|C|, d) on F3 (d, h, w); batched F3 (B, d, h, w) gives (B, |C|, d)."""
    single = F3.ndim == 3
    if single:
        F3 = T.reshape(F3, (1,) + F3.shape)
    B, d, h, w = F3.shape
    if d != stack.dim or text.shape[-1] != stack.dim:
        raise ValueError(f"width mismatch: text {text.shape[-1]}, vision {d}, stack {stack.dim}")
    tokens = T.transpose(T.reshape(F3, (B, d, h * w)), (0, 2, 1))
    t = text if text.ndim == 3 else T.reshape(text, (1,) + text.shape)
    if t.shape[0] != B:
        t = t + Tensor(np.zeros((B, 1, 1), text.dtype))
    for layer in stack.layers:
        t = layer(t, tokens) + t
    t = T.l2_normalize(t)
    return t[0] if single else t


# -- scores and targets ----------------------------------------------------------


def classification_scores(V: Tensor, T_hat: Tensor, temperature: float = 0.07) -> Tensor:
    """Softmax over classes of cosine similarity / temperature; (N, |C|) or batched."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    logits = (V @ T.transpose(T_hat, tuple(range(T_hat.ndim - 2)) + (T_hat.ndim - 1, T_hat.ndim - 2))) * (1.0 / temperature)
    return T.softmax(logits, axis=-1)


def _iou_matrix(pred: np.ndarray, regions: np.ndarray) -> np.ndarray:
    pred = pred.astype(np.float64)
    regions = regions.astype(np.float64)
    inter = pred @ regions.T
    union = pred.sum(1)[:, None] + regions.sum(1)[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def iou_targets(
    mask_logits,
    sample: SegmentationSample,
    class_ids: Sequence[int],
    panoptic: bool = False,
    thing_ids: set[int] | None = None,
) -> np.ndarray:
    """(N, |C|) IoU between each binarized proposal and each class's ground truth.

    Panoptic mode scores thing classes by the best single instance instead of
    the union of all instances of that class.
    """
    logits = np.asarray(mask_logits.data if isinstance(mask_logits, Tensor) else mask_logits)
    N = logits.shape[0]
    pred = (logits > 0).reshape(N, -1)  # probability > 0.5
    sem = sample.semantic.reshape(-1)
    valid = sem != IGNORE
    bad = np.unique(sem[valid])
    if bad.size and bad.max() >= len(sample.classes):
        raise ValueError(f"unknown class id {int(bad.max())} in ground truth")
    pred = pred & valid[None, :]
    regions = np.stack([sem == c for c in class_ids])
    out = _iou_matrix(pred, regions)
    if panoptic:
        inst = sample.instance.reshape(-1)
        for col, c in enumerate(class_ids):
            if thing_ids is not None and c not in thing_ids:
                continue
            ids = np.unique(inst[(sem == c) & (inst > 0)])
            if ids.size == 0:
                continue
            per = _iou_matrix(pred, np.stack([inst == i for i in ids]))
            out[:, col] = per.max(axis=1)
    return out.astype(np.float32)


def mask_aware_loss(S_cls: Tensor, S_iou) -> Tensor:
    target = S_iou.detach() if isinstance(S_iou, Tensor) else Tensor(np.asarray(S_iou, dtype=S_cls.dtype))
    if S_cls.shape != target.shape:
        raise ValueError(f"score shapes differ: {S_cls.shape} vs {target.shape}")
    return T.smooth_l1(S_cls, target)


def total_loss(L_P: Tensor, L_ma: Tensor, L_rc: Tensor | None, lambda_ma: float = 1.0, lambda_rc: float = 0.1) -> Tensor:
    for name, v in (("L_P", L_P), ("L_ma", L_ma), ("L_rc", L_rc)):
        if v is not None and not np.all(np.isfinite(v.data)):
            raise NonFiniteError(f"{name} is not finite")
    L = L_P + L_ma * lambda_ma
    if L_rc is not None and lambda_rc:
        L = L + L_rc * lambda_rc
    return L
