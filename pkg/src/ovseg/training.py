"""Pipeline assembly, the fine-tuning loop, evaluation and the component ablation."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .backbones import (
    STAGES,
    FeaturePyramid,
    PretrainReport,
    PromptTemplateSet,
    TextEncoder,
    VisionBackbone,
    build_token_list,
    freeze_copy,
    pretrain_contrastive,
    text_encode,
)
from .checkpoint import Checkpoint
from .config import RunConfig, dump_config, parse_config
from .core import (
    CDTStack,
    RCConfig,
    classification_scores,
    iou_targets,
    mask_aware_loss,
    mask_weights,
    pool_with_weights,
    rc_loss,
    total_loss,
)
from .data import BACKGROUND, DatasetSpec, SegmentationSample, Vocabulary, default_vocabulary, generate, with_split
from .metrics import (
    ConfusionAccumulator,
    PQStat,
    SimilarityMatrix,
    gt_segments,
    normalize_similarity,
    panoptic_inference,
    pq_matching,
    semantic_inference,
)
from .optim import AdamW, ParamGroup
from .proposals import ProposalHead, proposal_loss
from .tensor import Tensor

logger = logging.getLogger(__name__)


class CompatibilityError(ValueError):
    """Checkpoint and configuration disagree (widths, classes)."""


class ContractViolation(AssertionError):
    pass


class EmptyInputError(ValueError):
    pass


# -- benchmark ------------------------------------------------------------------


def benchmark_vocabulary(cfg: RunConfig) -> Vocabulary:
    return with_split(default_vocabulary(), cfg.data.novel_count, cfg.data.seed)


def _spec(cfg: RunConfig, count: int, salt: int) -> DatasetSpec:
    d = cfg.data
    return DatasetSpec(count, d.image_size, d.classes_per_image, d.instances_per_class, d.radius, d.seed * 1000 + salt)


def train_dataset(cfg: RunConfig, vocab: Vocabulary) -> list[SegmentationSample]:
    return generate(_spec(cfg, cfg.data.train_samples, 1), vocab, vocab.train)


def eval_dataset(cfg: RunConfig, vocab: Vocabulary) -> list[SegmentationSample]:
    return generate(_spec(cfg, cfg.data.eval_samples, 2), vocab, vocab.test)


# -- pretraining ----------------------------------------------------------------


def new_encoders(cfg: RunConfig, vocab: Vocabulary, seed: int) -> tuple[VisionBackbone, TextEncoder]:
    rng = np.random.default_rng([seed, 0])
    backbone = VisionBackbone(rng, cfg.model.widths)
    encoder = TextEncoder(rng, build_token_list(vocab.classes), cfg.model.widths[-1], cfg.model.text_embed_dim)
    return backbone, encoder


def run_pretraining(cfg: RunConfig, seed: int | None = None) -> tuple[VisionBackbone, TextEncoder, PretrainReport]:
    seed = cfg.seed if seed is None else seed
    vocab = default_vocabulary()
    backbone, encoder = new_encoders(cfg, vocab, seed)
    p = cfg.pretrain
    report = pretrain_contrastive(
        backbone,
        encoder,
        vocab,
        steps=p.steps,
        seed=seed,
        image_size=cfg.data.image_size,
        batch=p.batch_size,
        lr=p.lr,
        weight_decay=p.weight_decay,
        temperature=p.temperature,
        eval_count=p.eval_count,
        log_every=cfg.log_every,
    )
    return backbone, encoder, report


def pretrained_checkpoint(cfg: RunConfig, backbone: VisionBackbone, encoder: TextEncoder, report: PretrainReport | None = None) -> Checkpoint:
    tensors = {f"vision.{k}": v for k, v in backbone.state_dict().items()}
    tensors.update({f"text.{k}": v for k, v in encoder.state_dict().items()})
    meta = {"kind": "pretrain", "widths": list(backbone.widths), "tokens": encoder.tokens}
    if report is not None:
        meta["final_loss"] = report.final_loss
        meta["retrieval_accuracy"] = report.retrieval_accuracy
    return Checkpoint(tensors, {"config": dump_config(cfg), "meta": meta})


# -- the fine-tuning pipeline ----------------------------------------------------


@dataclass
class Pipeline:
    cfg: RunConfig
    vocab: Vocabulary
    backbone: VisionBackbone
    frozen: VisionBackbone
    encoder: TextEncoder
    head: ProposalHead
    cdt: CDTStack | None
    _text_cache: dict = field(default_factory=dict, repr=False)

    def text_table(self, classes: Sequence[str]) -> Tensor:
        key = tuple(classes)
        if key not in self._text_cache:
            with T.no_grad():
                self._text_cache[key] = text_encode(self.encoder, list(classes), PromptTemplateSet()).T.detach()
        return self._text_cache[key]

    def modules(self) -> dict:
        out = {"vision": self.backbone, "frozen": self.frozen, "text": self.encoder, "head": self.head}
        if self.cdt is not None:
            out["cdt"] = self.cdt
        return out

    def astype(self, dtype) -> "Pipeline":
        for m in self.modules().values():
            m.astype(dtype)
        self._text_cache.clear()
        return self


def build_pipeline(cfg: RunConfig, pretrained: Checkpoint) -> Pipeline:
    vocab = benchmark_vocabulary(cfg)
    backbone, encoder = new_encoders(cfg, vocab, cfg.seed)
    try:
        backbone.load_state_dict(pretrained.section("vision"))
        encoder.load_state_dict(pretrained.section("text"))
    except (KeyError, ValueError) as exc:
        raise CompatibilityError(f"pretrained checkpoint does not fit the configured model: {exc}") from None
    encoder.freeze()
    frozen = freeze_copy(backbone)
    backbone.freeze_stages(cfg.frozen_stages)
    rng = np.random.default_rng([cfg.seed, 1])
    m = cfg.model
    head = ProposalHead(rng, m.widths, m.num_queries, m.mask_dim, m.heads, m.head_layers)
    cdt = CDTStack(rng, m.widths[-1], m.cdt_depth, m.heads) if cfg.ablation.use_cdt else None
    return Pipeline(cfg, vocab, backbone, frozen, encoder, head, cdt)


def segment_masks(sample: SegmentationSample, panoptic: bool, stuff: Sequence[int]) -> np.ndarray:
    """Ground-truth segments supervising the proposal head."""
    if panoptic:
        segs = [m for _, m in gt_segments(sample.semantic, sample.instance, stuff)]
    else:
        segs = [sample.semantic == c for c in sample.present_classes()]
    H, W = sample.semantic.shape
    return np.stack(segs) if segs else np.zeros((0, H, W), bool)


@dataclass
class Losses:
    L_P: Tensor
    L_ma: Tensor
    L_rc: Tensor | None

    def total(self, cfg: RunConfig) -> Tensor:
        return total_loss(self.L_P, self.L_ma, self.L_rc, cfg.loss.lambda_ma, cfg.loss.lambda_rc)


@dataclass
class Targets:
    segments: list[np.ndarray]
    iou: np.ndarray | None = None
    assignments: list | None = None
    pool_weights: list[np.ndarray] | None = None
    head_input: FeaturePyramid | None = None  # the stop-gradient input of the proposal head


def compute_losses(
    pipe: Pipeline,
    samples: Sequence[SegmentationSample],
    classes: Sequence[str],
    targets: Targets | None = None,
) -> tuple[Losses, Targets]:
    """Forward pass of every loss term for one batch.

    Matching, pooling weights, IoU targets and the head's input carry no
    gradient. They are recomputed unless ``targets`` pins them; finite-difference
    checks pin them so that perturbed evaluations see the same constants as the
    backward pass.
    """
    cfg = pipe.cfg
    panoptic = cfg.ablation.panoptic_mode
    vocab = pipe.vocab
    stuff = [vocab.index(BACKGROUND)] if BACKGROUND in vocab.classes else []
    class_ids = [vocab.index(c) for c in classes]
    imgs = np.stack([s.image for s in samples])
    pyr = pipe.backbone(imgs)
    B = len(samples)
    if targets is None:
        targets = Targets([segment_masks(s, panoptic, stuff) for s in samples])
    if targets.head_input is None:
        targets.head_input = pyr.detached()
    props = pipe.head(targets.head_input)
    lp_terms, assignments = [], []
    for b in range(B):
        pinned = targets.assignments[b] if targets.assignments is not None else None
        lp, a = proposal_loss(props.logits[b], targets.segments[b], cfg.loss.w_bce, cfg.loss.w_dice, pinned)
        lp_terms.append(lp)
        assignments.append(a)
    targets.assignments = assignments
    L_P = lp_terms[0]
    for t in lp_terms[1:]:
        L_P = L_P + t
    L_P = L_P * (1.0 / B)

    F3 = pyr.F3
    _, d, h, w = F3.shape
    mask_logits = props.logits.data  # pooling weights carry no gradient to the head
    if targets.pool_weights is None:
        targets.pool_weights = [mask_weights(mask_logits[b], h, w) for b in range(B)]
    V = T.stack([pool_with_weights(F3[b], targets.pool_weights[b]) for b in range(B)])
    text = pipe.text_table(classes)
    T_hat = pipe.cdt(text, F3) if pipe.cdt is not None else T.reshape(text, (1,) + text.shape) + Tensor(np.zeros((B, 1, 1), text.dtype))
    S_cls = classification_scores(V, T_hat, cfg.model.temperature)
    if targets.iou is None:
        thing_ids = {vocab.index(c) for c in vocab.classes if vocab.is_thing(c)}
        targets.iou = np.stack(
            [iou_targets(mask_logits[b], samples[b], class_ids, panoptic, thing_ids) for b in range(B)]
        )
    L_ma = mask_aware_loss(S_cls, targets.iou)

    L_rc = None
    if cfg.ablation.use_rc:
        with T.no_grad():
            F3_ref = pipe.frozen(imgs).F3
        L_rc = rc_loss(F3, F3_ref, RCConfig(tuple(cfg.loss.rc_grids), cfg.loss.lambda_rc))
    return Losses(L_P, L_ma, L_rc), targets


class Trainer:
    """Two learning-rate groups: the vision encoder and everything else."""

    def __init__(self, pipe: Pipeline, train_samples: Sequence[SegmentationSample]):
        self.pipe = pipe
        self.samples = list(train_samples)
        if not self.samples:
            raise EmptyInputError("training set is empty")
        cfg = pipe.cfg
        backbone_params = [(f"vision.{n}", p) for n, p in pipe.backbone.named_parameters() if p.requires_grad]
        other = [(f"head.{n}", p) for n, p in pipe.head.named_parameters() if p.requires_grad]
        if pipe.cdt is not None:
            other += [(f"cdt.{n}", p) for n, p in pipe.cdt.named_parameters() if p.requires_grad]
        self.opt = AdamW(
            [ParamGroup("backbone", backbone_params, cfg.optim.lr_backbone), ParamGroup("other", other, cfg.optim.lr_other)],
            weight_decay=cfg.optim.weight_decay,
        )
        self._check_groups()
        self.step_count = 0
        self.history: list[dict] = []

    def _check_groups(self) -> None:
        grouped = {id(p) for _, p in self.opt.named_params()}
        trainable = []
        for name, mod in self.pipe.modules().items():
            trainable += [(f"{name}.{n}", p) for n, p in mod.named_parameters() if p.requires_grad]
        missing = [n for n, p in trainable if id(p) not in grouped]
        if missing:
            raise ContractViolation(f"trainable parameters outside every group: {missing}")
        counts = {}
        for _, p in self.opt.named_params():
            counts[id(p)] = counts.get(id(p), 0) + 1
        if any(c != 1 for c in counts.values()):
            raise ContractViolation("a parameter belongs to more than one group")

    def batch(self, step: int) -> list[SegmentationSample]:
        rng = np.random.default_rng([self.pipe.cfg.seed, step, 3])
        bs = min(self.pipe.cfg.optim.batch_size, len(self.samples))
        return [self.samples[int(i)] for i in rng.choice(len(self.samples), size=bs, replace=False)]

    def step(self) -> dict:
        try:
            return self._step(self.batch(self.step_count))
        except T.NonFiniteError as exc:
            raise T.NonFiniteError(f"{exc} at step {self.step_count}") from None

    def _step(self, batch: list[SegmentationSample]) -> dict:
        pipe = self.pipe
        cfg = pipe.cfg
        self.opt.zero_grad()
        losses, _ = compute_losses(pipe, batch, pipe.vocab.train)
        L = losses.total(cfg)
        # L_P alone first: its gradient must never reach the vision encoder
        losses.L_P.backward()
        leaked = [n for n, p in pipe.backbone.named_parameters() if p.grad is not None and np.any(p.grad)]
        if leaked:
            raise ContractViolation(f"proposal loss reached the vision encoder: {leaked[:3]}")
        rest = losses.L_ma * cfg.loss.lambda_ma
        if losses.L_rc is not None and cfg.loss.lambda_rc:
            rest = rest + losses.L_rc * cfg.loss.lambda_rc
        rest.backward()
        if any(p.grad is not None for p in pipe.frozen.parameters()):
            raise ContractViolation("frozen copy received a gradient")
        self.opt.step()
        rec = {
            "step": self.step_count,
            "L": float(L.item()),
            "L_P": float(losses.L_P.item()),
            "L_ma": float(losses.L_ma.item()),
            "L_rc": float(losses.L_rc.item()) if losses.L_rc is not None else None,
        }
        self.history.append(rec)
        self.step_count += 1
        return rec

    def run(self, steps: int, log_every: int = 100) -> list[dict]:
        t0 = time.time()
        for _ in range(steps):
            rec = self.step()
            if log_every and self.step_count % log_every == 0:
                recent = self.history[-log_every:]
                logger.info(
                    "step %d  L_P %.4f  L_ma %.4f  L_rc %s  (%.1fs)",
                    self.step_count,
                    np.mean([r["L_P"] for r in recent]),
                    np.mean([r["L_ma"] for r in recent]),
                    "-" if rec["L_rc"] is None else f"{np.mean([r['L_rc'] for r in recent]):.5f}",
                    time.time() - t0,
                )
        return self.history

    # -- checkpointing ----------------------------------------------------------

    def checkpoint(self) -> Checkpoint:
        tensors: dict[str, np.ndarray] = {}
        for name, mod in self.pipe.modules().items():
            for k, v in mod.state_dict().items():
                tensors[f"{name}.{k}"] = v
        for k, v in self.opt.state.m.items():
            tensors[f"optim.m.{k}"] = v
        for k, v in self.opt.state.v.items():
            tensors[f"optim.v.{k}"] = v
        meta = {
            "kind": "train",
            "step": self.step_count,
            "optim_t": self.opt.state.t,
            "widths": list(self.pipe.backbone.widths),
            "frozen_stages": sorted(self.pipe.backbone.frozen_stages),
            "classes": list(self.pipe.vocab.classes),
            "train_classes": list(self.pipe.vocab.train),
            "tokens": self.pipe.encoder.tokens,
        }
        return Checkpoint(tensors, {"config": dump_config(self.pipe.cfg), "meta": meta})

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, train_samples: Sequence[SegmentationSample], cfg: RunConfig | None = None) -> "Trainer":
        cfg = cfg or parse_config(ckpt.snapshot["config"])
        pipe = pipeline_from_checkpoint(ckpt, cfg)
        trainer = cls(pipe, train_samples)
        for k in trainer.opt.state.m:
            trainer.opt.state.m[k] = ckpt.tensors[f"optim.m.{k}"].copy()
            trainer.opt.state.v[k] = ckpt.tensors[f"optim.v.{k}"].copy()
        trainer.opt.state.t = int(ckpt.snapshot["meta"]["optim_t"])
        trainer.step_count = int(ckpt.snapshot["meta"]["step"])
        return trainer


def pipeline_from_checkpoint(ckpt: Checkpoint, cfg: RunConfig | None = None) -> Pipeline:
    cfg = cfg or parse_config(ckpt.snapshot["config"])
    widths = ckpt.snapshot.get("meta", {}).get("widths")
    if widths is not None and tuple(widths) != tuple(cfg.model.widths):
        raise CompatibilityError(f"checkpoint widths {widths} differ from config {cfg.model.widths}")
    pretrained = Checkpoint({k: v for k, v in ckpt.tensors.items() if k.startswith(("vision.", "text."))}, ckpt.snapshot)
    pipe = build_pipeline(cfg, pretrained)
    try:
        pipe.frozen.load_state_dict(ckpt.section("frozen"))
        pipe.head.load_state_dict(ckpt.section("head"))
        if pipe.cdt is not None:
            pipe.cdt.load_state_dict(ckpt.section("cdt"))
    except (KeyError, ValueError) as exc:
        raise CompatibilityError(f"checkpoint does not match the configuration: {exc}") from None
    return pipe


# -- evaluation -------------------------------------------------------------------


Predictor = Callable[[SegmentationSample], tuple[np.ndarray, np.ndarray]]


def model_predictor(pipe: Pipeline, classes: Sequence[str]) -> Predictor:
    """Return (S_cls (N, |C|), mask logits (N, H, W)) for one sample over ``classes``."""

    def predict(sample: SegmentationSample):
        with T.no_grad():
            pyr = pipe.backbone(sample.image)
            props = pipe.head(pyr)
            logits = props.logits.data[0]
            F3 = pyr.F3[0]
            _, h, w = F3.shape
            V = pool_with_weights(F3, mask_weights(logits, h, w))
            text = pipe.text_table(classes)
            T_hat = pipe.cdt(text, F3) if pipe.cdt is not None else text
            S = classification_scores(V, T_hat, pipe.cfg.model.temperature).data
        return S, logits

    return predict


def oracle_predictor(classes: Sequence[str], vocab: Vocabulary, panoptic: bool = False, n: int = 16) -> Predictor:
    """Perfect proposals and scores read straight from ground truth (plumbing check)."""
    ids = [vocab.index(c) for c in classes]
    stuff = [vocab.index(BACKGROUND)] if BACKGROUND in vocab.classes else []

    def predict(sample: SegmentationSample):
        segs = gt_segments(sample.semantic, sample.instance, stuff) if panoptic else [
            (c, sample.semantic == c) for c in sample.present_classes()
        ]
        H, W = sample.semantic.shape
        logits = np.full((max(n, len(segs)), H, W), -30.0)
        S = np.full((logits.shape[0], len(ids)), 1.0 / len(ids))
        for i, (c, m) in enumerate(segs):
            logits[i][m] = 30.0
            S[i] = 0.0
            S[i, ids.index(c)] = 1.0
        return S, logits

    return predict


@dataclass
class EvalReport:
    classes: list[str]
    per_class_iou: dict[str, float]
    miou: float | None
    miou_seen: float | None
    miou_novel: float | None
    pq: dict[str, tuple[float, float, float]] | None = None
    per_class_pq: dict[str, tuple[float, float, float]] | None = None

    def rows(self, seen: Sequence[str]) -> list[dict]:
        out = []
        for c in self.classes:
            row = {"class": c, "split": "seen" if c in seen else "novel", "iou": _fmt(self.per_class_iou.get(c))}
            if self.per_class_pq is not None:
                pq = self.per_class_pq.get(c)
                row.update({"pq": _fmt(pq and pq[0]), "sq": _fmt(pq and pq[1]), "rq": _fmt(pq and pq[2])})
            out.append(row)
        return out


def _fmt(v) -> str:
    return "" if v is None else f"{v:.6f}"


def evaluate(
    predict: Predictor,
    samples: Sequence[SegmentationSample],
    vocab: Vocabulary,
    panoptic: bool = False,
    classes: Sequence[str] | None = None,
) -> EvalReport:
    """mIoU (and PQ/SQ/RQ) over the full test vocabulary, split into seen and novel classes."""
    if not samples:
        raise EmptyInputError("evaluation dataset is empty")
    classes = list(classes or vocab.test)
    ids = [vocab.index(c) for c in classes]
    lut = np.array(ids)
    conf = ConfusionAccumulator(len(vocab.classes))
    stuff = [vocab.index(BACKGROUND)] if BACKGROUND in vocab.classes else []
    pq_stats: dict[int, PQStat] = {}
    for s in samples:
        S, logits = predict(s)
        pred = semantic_inference(S, logits)
        conf.update(lut[pred.labels], s.semantic)
        if panoptic:
            pan = panoptic_inference(S, logits, stuff=[ids.index(c) for c in stuff if c in ids])
            for rec in pan.records:
                rec.category = ids[rec.category]
            for c, st in pq_matching(pan, gt_segments(s.semantic, s.instance, stuff)).items():
                pq_stats.setdefault(c, PQStat()).add(st)
    ious = conf.per_class_iou()
    seen_ids = [vocab.index(c) for c in vocab.train if c in classes]
    novel_ids = [vocab.index(c) for c in vocab.novel if c in classes]
    report = EvalReport(
        classes,
        {vocab.classes[c]: v for c, v in ious.items()},
        conf.mean_iou(ids),
        conf.mean_iou(seen_ids),
        conf.mean_iou(novel_ids),
    )
    if panoptic:
        def pooled(sel):
            tot = PQStat()
            for c in sel:
                if c in pq_stats:
                    tot.add(pq_stats[c])
            return tot.values()

        report.pq = {"all": pooled(ids), "seen": pooled(seen_ids), "novel": pooled(novel_ids)}
        report.per_class_pq = {vocab.classes[c]: st.values() for c, st in pq_stats.items()}
    return report


def similarity_map(
    pipe: Pipeline,
    samples: Sequence[SegmentationSample],
    classes: Sequence[str] | None = None,
    normalize: bool = True,
) -> SimilarityMatrix:
    """Cosine between per-class ground-truth-pooled F3 and (conditioned) text embeddings.

    ``normalize=False`` keeps the raw dataset-averaged cosines.
    """
    vocab = pipe.vocab
    classes = list(classes or vocab.test)
    ids = [vocab.index(c) for c in classes]
    raw = np.zeros((len(classes), len(classes)))
    counts = np.zeros(len(classes))
    text = pipe.text_table(classes)
    with T.no_grad():
        for s in samples:
            F3 = pipe.backbone(s.image).F3[0]
            _, h, w = F3.shape
            present = [i for i, c in enumerate(ids) if np.any(s.semantic == c)]
            if not present:
                continue
            masks = np.stack([(s.semantic == ids[i]).astype(np.float64) for i in present])
            Ph = T._grid_matrix(masks.shape[1], h, np.float64)
            Pw = T._grid_matrix(masks.shape[2], w, np.float64)
            V = pool_with_weights(F3, Ph @ masks @ Pw.T).data
            T_hat = (pipe.cdt(text, F3) if pipe.cdt is not None else text).data
            for row, i in enumerate(present):
                raw[i] += V[row] @ T_hat.T
                counts[i] += 1
    missing = [c for c, n in zip(classes, counts) if n == 0]
    with np.errstate(invalid="ignore", divide="ignore"):
        raw = np.where(counts[:, None] > 0, raw / np.maximum(counts[:, None], 1), np.nan)
    return SimilarityMatrix(classes, normalize_similarity(raw) if normalize else raw, missing)


# -- ablation -----------------------------------------------------------------------

VARIANTS = {
    "frozen CLIP (baseline)": {"use_cdt": False, "use_rc": False, "freeze_backbone": True},
    "+ CDT": {"use_cdt": True, "use_rc": False, "freeze_backbone": True},
    "+ RC": {"use_cdt": False, "use_rc": True, "freeze_backbone": False},
    "+ CDT & RC": {"use_cdt": True, "use_rc": True, "freeze_backbone": False},
}


@dataclass
class RunResult:
    variant: str
    seed: int
    report: EvalReport
    similarity_diag: float
    seconds: float


def train_and_evaluate(
    cfg: RunConfig,
    pretrained: Checkpoint,
    train_samples: Sequence[SegmentationSample],
    eval_samples: Sequence[SegmentationSample],
) -> tuple[Trainer, EvalReport, SimilarityMatrix]:
    pipe = build_pipeline(cfg, pretrained)
    trainer = Trainer(pipe, train_samples)
    trainer.run(cfg.optim.steps, cfg.log_every)
    report = evaluate(model_predictor(pipe, pipe.vocab.test), eval_samples, pipe.vocab, cfg.ablation.panoptic_mode)
    sim = similarity_map(pipe, eval_samples)
    return trainer, report, sim


def summarize(results: Sequence[RunResult]) -> list[dict]:
    rows = []
    for name in VARIANTS:
        rs = [r for r in results if r.variant == name]
        if not rs:
            continue
        novel = np.array([r.report.miou_novel or 0.0 for r in rs]) * 100
        seen = np.array([r.report.miou_seen or 0.0 for r in rs]) * 100
        diag = np.array([r.similarity_diag for r in rs])
        rows.append(
            {
                "variant": name,
                "seeds": len(rs),
                "novel_miou_mean": float(novel.mean()),
                "novel_miou_std": float(novel.std()),
                "seen_miou_mean": float(seen.mean()),
                "seen_miou_std": float(seen.std()),
                "sim_diag_mean": float(diag.mean()),
            }
        )
    return rows


def directional_checks(rows: Sequence[dict], results: Sequence[RunResult] = ()) -> list[tuple[str, bool]]:
    by = {r["variant"]: r["novel_miou_mean"] for r in rows}
    diag = {r["variant"]: r["sim_diag_mean"] for r in rows}
    base, cdt, rc, both = (by[k] for k in VARIANTS)
    names = list(VARIANTS)
    checks = [
        ("baseline < +CDT (novel mIoU)", base < cdt),
        ("baseline < +RC (novel mIoU)", base < rc),
        ("+CDT & RC >= max(+CDT, +RC)", both >= max(cdt, rc)),
        ("+CDT & RC - baseline >= 3 points", both - base >= 3.0),
        ("similarity diagonal: +CDT & RC - baseline >= 0.05", diag[names[3]] - diag[names[0]] >= 0.05),
    ]
    for seed in sorted({r.seed for r in results}):
        per = {r.variant: (r.report.miou_novel or 0.0) * 100 for r in results if r.seed == seed}
        if len(per) == 4:
            b, c, r_, f = (per[k] for k in VARIANTS)
            if not (b < c and b < r_ and f >= max(c, r_)):
                logger.warning("seed %d violates the ablation ordering: %s", seed, per)
    return checks


def markdown_table(rows: Sequence[dict]) -> str:
    lines = [
        "| variant | seeds | novel mIoU | seen mIoU | sim. diag |",
        "|---|---|---|---|---|",
    ]
    for r in rows:
        lines.append(
            f"| {r['variant']} | {r['seeds']} | {r['novel_miou_mean']:.1f} ± {r['novel_miou_std']:.1f} "
            f"| {r['seen_miou_mean']:.1f} ± {r['seen_miou_std']:.1f} | {r['sim_diag_mean']:.3f} |"
        )
    return "\n".join(lines) + "\n"
