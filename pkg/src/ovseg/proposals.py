"""Class-agnostic mask proposals: query head, Hungarian matching, BCE+Dice loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbones import FeaturePyramid
from .nn import CrossAttention, LayerNorm, Linear, Module
from .tensor import Tensor


@dataclass
class MaskProposalSet:
    logits: Tensor  # (B, N, H, W) or (N, H, W)
    queries: Tensor  # (B, N, m)

    @property
    def count(self) -> int:
        return self.logits.shape[-3]

    def probabilities(self) -> np.ndarray:
        return T._sigmoid(self.logits.data)


class ProposalHead(Module):
    """N learned queries attend to F3; masks are query . per-pixel-feature at stride 4."""

    def __init__(
        self,
        rng: np.random.Generator,
        widths: tuple[int, ...],
        num_queries: int = 16,
        mask_dim: int = 32,
        heads: int = 4,
        layers: int = 2,
    ):
        d = widths[-1]
        self.laterals = [Linear(rng, w, mask_dim) for w in widths]
        self.pixel_proj = Linear(rng, mask_dim, mask_dim)
        self.queries = Tensor(rng.normal(0.0, 1.0, size=(num_queries, d)).astype(np.float32), requires_grad=True)
        self.query_norms = [LayerNorm(d) for _ in range(layers)]
        self.memory_norm = LayerNorm(d)
        self.attn = [CrossAttention(rng, d, heads) for _ in range(layers)]
        self.mask_norm = LayerNorm(d)
        self.mask_embed = Linear(rng, d, mask_dim)
        self._num_queries = num_queries

    @property
    def num_queries(self) -> int:
        return self._num_queries

    def pixel_features(self, pyramid: FeaturePyramid) -> Tensor:
        f0 = pyramid[0]
        B, _, h0, w0 = f0.shape
        acc = None
        for lateral, f in zip(self.laterals, pyramid.features):
            y = lateral(T.transpose(f, (0, 2, 3, 1)))  # (B, h, w, m)
            y = T.resize_bilinear(T.transpose(y, (0, 3, 1, 2)), h0, w0)
            acc = y if acc is None else acc + y
        acc = T.gelu(T.transpose(acc, (0, 2, 3, 1)))
        return T.transpose(self.pixel_proj(acc), (0, 3, 1, 2))  # (B, m, h0, w0)

    def __call__(self, pyramid: FeaturePyramid) -> MaskProposalSet:
        # stop-gradient: the head never back-propagates into the vision encoder
        pyramid = pyramid.detached()
        pix = self.pixel_features(pyramid)
        B, m, h0, w0 = pix.shape
        F3 = pyramid.F3
        memory = self.memory_norm(T.transpose(T.reshape(F3, (B, F3.shape[1], -1)), (0, 2, 1)))
        q = T.reshape(self.queries, (1,) + self.queries.shape) + Tensor(np.zeros((B, 1, 1), self.queries.dtype))
        for norm, attn in zip(self.query_norms, self.attn):
            q = q + attn(norm(q), memory)
        emb = self.mask_embed(self.mask_norm(q))  # (B, N, m)
        logits = T.reshape(emb @ T.reshape(pix, (B, m, h0 * w0)), (B, -1, h0, w0))
        H, W = pyramid.image_size
        return MaskProposalSet(T.resize_bilinear(logits, H, W), emb)


def generate_proposals(head: ProposalHead, pyramid: FeaturePyramid) -> MaskProposalSet:
    return head(pyramid)


# -- matching --------------------------------------------------------------------


@dataclass
class Assignment:
    pairs: list[tuple[int, int]]  # (gt index, proposal index)
    cost: float

    def as_dict(self) -> dict[int, int]:
        return dict(self.pairs)


def hungarian_match(cost) -> Assignment:
    """Minimum-cost injective map from rows (G) to columns (N), G <= N.

    Shortest augmenting path with row/column potentials, O(G^2 N).
    """
    C = np.asarray(cost.data if isinstance(cost, Tensor) else cost, dtype=np.float64)
    if C.ndim != 2:
        raise ValueError("cost must be a matrix")
    n, m = C.shape
    if n > m:
        raise ValueError(f"more ground-truth segments ({n}) than proposals ({m})")
    if n == 0:
        return Assignment([], 0.0)
    if not np.all(np.isfinite(C)):
        raise ValueError("costs must be finite")
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=int)  # p[j]: row (1-based) matched to column j
    way = np.zeros(m + 1, dtype=int)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = C[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    pairs = sorted((int(p[j]) - 1, j - 1) for j in range(1, m + 1) if p[j])
    return Assignment(pairs, float(sum(C[g, k] for g, k in pairs)))


# -- loss ---------------------------------------------------------------------


def _dice_terms(probs: np.ndarray, gt: np.ndarray) -> np.ndarray:
    inter = gt @ probs.T  # (G, N)
    return 1.0 - (2.0 * inter + 1.0) / (gt.sum(1)[:, None] + probs.sum(1)[None, :] + 1.0)


def matching_cost(logits: np.ndarray, gt: np.ndarray, w_bce: float = 1.0, w_dice: float = 1.0) -> np.ndarray:
    """(G, N) pairwise mask cost; logits (N, P) and gt (G, P) flattened over pixels."""
    sp_pos = np.logaddexp(0.0, logits)  # -log(1 - sigmoid)
    sp_neg = np.logaddexp(0.0, -logits)  # -log(sigmoid)
    P = logits.shape[1]
    bce = (gt @ sp_neg.T + (1.0 - gt) @ sp_pos.T) / P
    return w_bce * bce + w_dice * _dice_terms(T._sigmoid(logits), gt)


def _match(logits: np.ndarray, gt_masks: np.ndarray, w_bce: float, w_dice: float) -> Assignment:
    N, H, W = logits.shape
    # matching runs on a regular subgrid of at most 32 x 32 points
    sh, sw = max(1, H // 32), max(1, W // 32)
    sub_logits = logits[:, ::sh, ::sw].reshape(N, -1).astype(np.float64)
    sub_gt = np.asarray(gt_masks)[:, ::sh, ::sw].reshape(len(gt_masks), -1).astype(np.float64)
    return hungarian_match(matching_cost(sub_logits, sub_gt, w_bce, w_dice))


def proposal_loss(
    logits: Tensor,
    gt_masks: np.ndarray,
    w_bce: float = 1.0,
    w_dice: float = 1.0,
    assignment: Assignment | None = None,
) -> tuple[Tensor, Assignment]:
    """Matched BCE + Dice for one image; logits (N, H, W), gt_masks (G, H, W) binary.

    Averaged over matched pairs; unmatched proposals get no mask loss. A given
    ``assignment`` skips the matching step.
    """
    N = logits.shape[0]
    G = len(gt_masks)
    if G > N:
        raise ValueError(f"{G} ground-truth segments exceed {N} proposals")
    if G == 0:
        return Tensor(np.zeros((), logits.dtype)), Assignment([], 0.0)
    if assignment is None:
        assignment = _match(logits.data, gt_masks, w_bce, w_dice)
    flat = T.reshape(logits, (N, -1))
    gt = np.asarray(gt_masks, dtype=logits.dtype).reshape(G, -1)
    rows = np.array([g for g, _ in assignment.pairs])
    cols = np.array([k for _, k in assignment.pairs])
    sel = flat[cols]
    target = gt[rows]
    bce = T.bce_with_logits(sel, target).mean(axis=1)
    prob = T.sigmoid(sel)
    inter = (prob * target).sum(axis=1)
    dice = 1.0 - (inter * 2.0 + 1.0) / (prob.sum(axis=1) + 1.0 + Tensor(target.sum(1)))
    return (bce * w_bce + dice * w_dice).mean(), assignment
