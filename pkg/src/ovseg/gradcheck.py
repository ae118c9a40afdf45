"""Finite-difference verification of every differentiable op and of the full objective.

Everything runs in float64. Inputs are drawn away from the kinks of
relu, abs and SmoothL1 so central differences are meaningful.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ConfigError, RunConfig
from .core import CDTStack, RCConfig, cdt_forward, classification_scores, mask_aware_loss, pool_with_weights, rc_loss
from .data import BACKGROUND, DatasetSpec, generate
from .nn import CrossAttention
from .proposals import proposal_loss
from .tensor import Tensor, grad_check
from .training import Targets, benchmark_vocabulary, build_pipeline, compute_losses, new_encoders, pretrained_checkpoint

THRESHOLD = 1e-4
EPS = 1e-6


@dataclass
class CheckResult:
    op: str
    error: float
    checked: int

    @property
    def passed(self) -> bool:
        return self.error < THRESHOLD


def tiny_config() -> RunConfig:
    cfg = RunConfig()
    return cfg.replace(
        data={"image_size": 32, "classes_per_image": (1, 2), "instances_per_class": (1, 1), "radius": (6, 10)},
        model={"widths": (8, 8, 16, 16), "text_embed_dim": 16, "num_queries": 4, "mask_dim": 8, "heads": 2},
        loss={"rc_grids": (1,)},
        ablation={"use_cdt": True, "use_rc": True, "freeze_backbone": False, "frozen_stages": ()},
    )


def check_tiny(cfg: RunConfig) -> None:
    if max(cfg.model.widths) > 16 or cfg.model.num_queries > 4 or cfg.data.image_size != 32:
        raise ConfigError("gradcheck needs a tiny config: widths <= 16, num_queries <= 4, image_size = 32")


def _x(rng, *shape, away=None):
    a = rng.normal(size=shape)
    if away is not None:
        # push entries at least 0.1 away from the kinks at +-away
        for k in away:
            close = np.abs(a - k) < 0.1
            a[close] += 0.2
    return Tensor(a, requires_grad=True)


def _scalar(y: Tensor, w: np.ndarray) -> Tensor:
    """Random linear functional, so every output entry contributes to the check."""
    return T.tsum(y * Tensor(w))


def op_checks(seed: int = 0) -> list[tuple[str, callable, Tensor]]:
    """(name, fn, x) triples; fn maps x to a scalar."""
    rng = np.random.default_rng([seed, 17])
    out = []

    def add(name, f, x, out_shape):
        w = rng.normal(size=out_shape)
        out.append((name, lambda t, f=f, w=w: _scalar(f(t), w), x))

    b = rng.normal(size=(3, 4))
    add("add", lambda t: T.add(t, Tensor(b)), _x(rng, 3, 4), (3, 4))
    add("add.broadcast", lambda t: T.add(Tensor(b), t), _x(rng, 4), (3, 4))
    add("sub", lambda t: T.sub(Tensor(b), t), _x(rng, 3, 1), (3, 4))
    add("mul", lambda t: T.mul(t, t), _x(rng, 3, 4), (3, 4))
    add("div", lambda t: T.div(Tensor(b), T.add(T.mul(t, t), 1.0)), _x(rng, 3, 4), (3, 4))
    add("power", lambda t: T.power(T.add(T.mul(t, t), 0.5), 1.5), _x(rng, 3, 4), (3, 4))
    add("exp", T.exp, _x(rng, 3, 4), (3, 4))
    add("log", lambda t: T.log(T.add(T.mul(t, t), 0.5)), _x(rng, 3, 4), (3, 4))
    add("sqrt", lambda t: T.sqrt(T.add(T.mul(t, t), 0.5)), _x(rng, 3, 4), (3, 4))
    add("abs", T.absolute, _x(rng, 3, 4, away=(0.0,)), (3, 4))
    add("sigmoid", T.sigmoid, _x(rng, 3, 4), (3, 4))
    add("softplus", T.softplus, _x(rng, 3, 4), (3, 4))
    add("relu", T.relu, _x(rng, 3, 4, away=(0.0,)), (3, 4))
    add("gelu", T.gelu, _x(rng, 3, 4), (3, 4))
    add("sum", lambda t: T.tsum(t, axis=1, keepdims=True), _x(rng, 3, 4), (3, 1))
    add("mean", lambda t: T.mean(t, axis=0), _x(rng, 3, 4), (4,))
    add("reshape", lambda t: T.reshape(t, (2, 6)), _x(rng, 3, 4), (2, 6))
    add("transpose", lambda t: T.transpose(t, (2, 0, 1)), _x(rng, 2, 3, 4), (4, 2, 3))
    add("getitem", lambda t: t[np.array([0, 2, 0])], _x(rng, 3, 4), (3, 4))
    add("concat", lambda t: T.concat([t, T.mul(t, t)], axis=1), _x(rng, 3, 4), (3, 8))
    add("stack", lambda t: T.stack([t, T.exp(t)], axis=0), _x(rng, 3, 4), (2, 3, 4))
    m = rng.normal(size=(2, 4, 5))
    add("matmul", lambda t: T.matmul(t, Tensor(m)), _x(rng, 2, 3, 4), (2, 3, 5))
    add("matmul.broadcast", lambda t: T.matmul(Tensor(m), t), _x(rng, 5, 2), (2, 4, 2))
    add("softmax", lambda t: T.softmax(t, axis=-1), _x(rng, 3, 4), (3, 4))
    add("log_softmax", lambda t: T.log_softmax(t, axis=0), _x(rng, 3, 4), (3, 4))
    g, beta = rng.normal(size=4), rng.normal(size=4)
    add("layer_norm", lambda t: T.layer_norm(t, Tensor(g), Tensor(beta)), _x(rng, 3, 4), (3, 4))
    add("layer_norm.gain", lambda t: T.layer_norm(Tensor(m[0]), t, Tensor(beta[:1].repeat(5))), _x(rng, 5), (4, 5))
    add("l2_normalize", T.l2_normalize, _x(rng, 3, 4), (3, 4))
    tgt = rng.normal(size=(3, 4))
    add("smooth_l1", lambda t: T.smooth_l1(t, tgt), Tensor(tgt + _x(rng, 3, 4, away=(-1.0, 1.0)).data, requires_grad=True), ())
    y01 = (rng.random((3, 4)) > 0.5).astype(np.float64)
    add("bce_with_logits", lambda t: T.bce_with_logits(t, y01), _x(rng, 3, 4), (3, 4))
    wconv = rng.normal(size=(3, 3, 2, 3)) * 0.5
    add("conv2d.input", lambda t: T.conv2d(t, Tensor(wconv), None, stride=2, padding=1), _x(rng, 1, 5, 5, 2), (1, 3, 3, 3))
    xconv = rng.normal(size=(2, 6, 6, 2))
    add("conv2d.weight", lambda t: T.conv2d(Tensor(xconv), t, None, stride=1, padding=0), _x(rng, 3, 3, 2, 3), (2, 4, 4, 3))
    bconv = rng.normal(size=(2, 2, 2, 3))
    add("conv2d.bias", lambda t: T.conv2d(Tensor(xconv), Tensor(bconv), t, stride=2), _x(rng, 3), (2, 3, 3, 3))
    for k in (1, 2, 4):
        add(f"avg_pool_grid.k{k}", lambda t, k=k: T.avg_pool_grid(t, k), _x(rng, 2, 5, 6), (2, k, k))
    add("resize_bilinear", lambda t: T.resize_bilinear(t, 7, 5), _x(rng, 2, 3, 4), (2, 7, 5))

    attn = CrossAttention(rng, 8, heads=2).astype(np.float64)
    mem = rng.normal(size=(2, 5, 8))
    add("cross_attention", lambda t: attn(t, Tensor(mem)), _x(rng, 2, 3, 8), (2, 3, 8))

    # model-level ops
    F3_ref = rng.normal(size=(16, 4, 4))
    # offsets stay clear of the SmoothL1 kink after pooling at every grid
    off = rng.uniform(0.2, 0.8, size=(16, 4, 4)) * rng.choice([-1.0, 1.0], size=(16, 1, 1))
    out.append(("rc_loss.K124", lambda t: rc_loss(t, Tensor(F3_ref), RCConfig((1, 2, 4))), Tensor(F3_ref + off, requires_grad=True)))
    weights = rng.random((4, 4, 4))
    add("mask_pooling", lambda t: pool_with_weights(t, weights), _x(rng, 16, 4, 4), (4, 16))
    cdt = CDTStack(rng, 16, depth=2, heads=2).astype(np.float64)
    for p in cdt.parameters():
        p.data = p.data + rng.normal(scale=0.2, size=p.shape)
    F3 = rng.normal(size=(16, 2, 2))
    add("cdt_forward.text", lambda t: cdt_forward(cdt, t, Tensor(F3)), _x(rng, 3, 16), (3, 16))
    text = rng.normal(size=(3, 16))
    add("cdt_forward.vision", lambda t: cdt_forward(cdt, Tensor(text), t), _x(rng, 16, 2, 2), (3, 16))
    Th = T.l2_normalize(Tensor(rng.normal(size=(3, 16)))).data
    add("classification_scores", lambda t: classification_scores(T.l2_normalize(t), Tensor(Th), 0.07), _x(rng, 4, 16), (4, 3))
    iou = rng.random((4, 3))
    out.append(("mask_aware_loss", lambda t: mask_aware_loss(T.softmax(t, axis=-1), iou), _x(rng, 4, 3)))
    gt = rng.random((2, 6, 6)) > 0.5
    out.append(("proposal_loss", lambda t: proposal_loss(t, gt)[0], _x(rng, 4, 6, 6)))
    return out


# -- full objective ----------------------------------------------------------------


def tiny_problem(cfg: RunConfig, seed: int = 0):
    """Tiny float64 pipeline mid-training, a two-image batch and pinned targets."""
    check_tiny(cfg)
    rng = np.random.default_rng([seed, 23])
    backbone, encoder = new_encoders(cfg, benchmark_vocabulary(cfg), seed)
    pipe = build_pipeline(cfg, pretrained_checkpoint(cfg, backbone, encoder))
    pipe.astype(np.float64)
    vocab = pipe.vocab
    # move away from initialization: live encoder differs from its frozen copy,
    # the zero-initialized CDT output maps become nonzero
    for mod in (pipe.backbone, pipe.head) + ((pipe.cdt,) if pipe.cdt is not None else ()):
        for p in mod.parameters():
            p.data = p.data + rng.normal(scale=0.05, size=p.shape)
    pool = [c for c in vocab.train if c != BACKGROUND][:2]
    classes = [BACKGROUND] + pool
    d = cfg.data
    spec = DatasetSpec(2, d.image_size, d.classes_per_image, d.instances_per_class, d.radius, seed + 5)
    samples = generate(spec, vocab, pool)
    _, targets = compute_losses(pipe, samples, classes)
    pinned = Targets(targets.segments, targets.iou, targets.assignments, targets.pool_weights, targets.head_input)

    def objective() -> Tensor:
        losses, _ = compute_losses(pipe, samples, classes, pinned)
        return losses.total(cfg)

    return pipe, objective


def full_loss_checks(cfg: RunConfig, seed: int = 0, per_param: int = 3) -> list[CheckResult]:
    """Check dL/dparam for every trainable parameter tensor on its largest-gradient entries.

    Entries with vanishing gradient are skipped: there the finite difference is
    dominated by rounding and the relative error carries no information.
    """
    pipe, objective = tiny_problem(cfg, seed)
    for m in pipe.modules().values():
        m.zero_grad()
    objective().backward()
    params = []
    for mname in ("vision", "head", "cdt"):
        mod = pipe.modules().get(mname)
        if mod is None:
            continue
        params += [(f"{mname}.{n}", p) for n, p in mod.named_parameters() if p.requires_grad]
    grads = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for name, p in params}
    frozen_grads = [p for p in pipe.frozen.parameters() if p.grad is not None]
    if frozen_grads:
        raise AssertionError("frozen copy received a gradient")
    worst: dict[str, tuple[float, int]] = {}
    for name, p in params:
        g = np.abs(grads[name]).reshape(-1)
        idx = [int(i) for i in np.argsort(-g, kind="stable")[:per_param] if g[i] > 1e-7]
        if not idx:
            continue
        err = grad_check(lambda _t: objective(), p, EPS, idx)
        family = "total_loss." + name.split(".")[0]
        e, n = worst.get(family, (0.0, 0))
        worst[family] = (max(e, err), n + len(idx))
    return [CheckResult(k, e, n) for k, (e, n) in worst.items()]


def run_gradcheck(cfg: RunConfig | None = None, seed: int = 0) -> tuple[list[CheckResult], float]:
    t0 = time.time()
    cfg = cfg or tiny_config()
    check_tiny(cfg)
    results = []
    for name, fn, x in op_checks(seed):
        results.append(CheckResult(name, grad_check(fn, x, EPS), x.size))
    results += full_loss_checks(cfg, seed)
    return results, time.time() - t0


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.op) for r in results)
    lines = [f"{'op':<{width}}  {'entries':>7}  {'max rel err':>11}  status"]
    for r in results:
        lines.append(f"{r.op:<{width}}  {r.checked:>7}  {r.error:>11.3e}  {'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
