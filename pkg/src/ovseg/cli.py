"""Command-line entry point: ``python -m ovseg <command> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import gradcheck as gc
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config, parse_config
from .data import SegbError, read_segb
from .metrics import write_metrics_csv
from .tensor import NonFiniteError
from .training import (
    VARIANTS,
    CompatibilityError,
    ContractViolation,
    EmptyInputError,
    RunResult,
    Trainer,
    benchmark_vocabulary,
    build_pipeline,
    directional_checks,
    eval_dataset,
    evaluate,
    markdown_table,
    model_predictor,
    oracle_predictor,
    pipeline_from_checkpoint,
    pretrained_checkpoint,
    run_pretraining,
    similarity_map,
    summarize,
    train_and_evaluate,
    train_dataset,
)

logger = logging.getLogger("ovseg")

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_IO, EXIT_COMPAT, EXIT_NUMERIC, EXIT_EMPTY = range(7)


class CheckFailed(Exception):
    pass


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def _pipeline(ckpt: Checkpoint, cfg: RunConfig | None):
    """A trained checkpoint restores everything; a pretrained one gets a fresh head."""
    if ckpt.snapshot.get("meta", {}).get("kind") == "pretrain":
        return build_pipeline(cfg or parse_config(ckpt.snapshot["config"]), ckpt)
    return pipeline_from_checkpoint(ckpt, cfg)


def _samples(args, cfg: RunConfig, vocab):
    if getattr(args, "dataset", None):
        samples = read_segb(args.dataset)
        if samples and list(samples[0].classes) != list(vocab.classes):
            raise CompatibilityError("dataset vocabulary differs from the model's")
        return samples
    return eval_dataset(cfg, vocab)


# -- commands -------------------------------------------------------------------


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    out = _outdir(args)
    backbone, encoder, report = run_pretraining(cfg)
    save_checkpoint(pretrained_checkpoint(cfg, backbone, encoder, report), out / "pretrained.ckpt")
    rows = [{"step": i + 1, "loss": f"{v:.6f}"} for i, v in enumerate(report.losses)]
    summary = {"step": "final", "loss": f"{report.final_loss:.6f}", "retrieval_accuracy": f"{report.retrieval_accuracy:.6f}"}
    with open(out / "pretrain_report.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["step", "loss", "retrieval_accuracy"])
        writer.writeheader()
        writer.writerows(rows)
        writer.writerow(summary)
    print(f"pretraining done: final loss {report.final_loss:.4f}, held-out retrieval accuracy {report.retrieval_accuracy:.3f}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _outdir(args)
    vocab = benchmark_vocabulary(cfg)
    samples = train_dataset(cfg, vocab)
    if args.resume:
        trainer = Trainer.from_checkpoint(load_checkpoint(args.resume), samples, cfg)
    else:
        if not args.pretrained:
            raise ConfigError("train needs --pretrained (or --resume)")
        trainer = Trainer(build_pipeline(cfg, load_checkpoint(args.pretrained)), samples)
    trainer.run(max(0, cfg.optim.steps - trainer.step_count), cfg.log_every)
    save_checkpoint(trainer.checkpoint(), out / "model.ckpt")
    if trainer.history:
        rows = [{k: ("" if v is None else v) for k, v in r.items()} for r in trainer.history]
        _write_csv(out / "train_log.csv", rows)
    print(f"trained to step {trainer.step_count}; checkpoint at {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = _config(args) if args.config else None
    pipe = _pipeline(ckpt, cfg)
    cfg = pipe.cfg
    if args.seed is not None:
        cfg.seed = args.seed
    out = _outdir(args)
    vocab = pipe.vocab
    samples = _samples(args, cfg, vocab)
    # classification always runs over the full test vocabulary; --vocabulary
    # only chooses which classes the report covers
    classes = list(vocab.test)
    panoptic = args.panoptic or cfg.ablation.panoptic_mode
    predict = oracle_predictor(classes, vocab, panoptic) if args.oracle else model_predictor(pipe, classes)
    report = evaluate(predict, samples, vocab, panoptic, classes)
    rows = report.rows(vocab.train)
    if args.vocabulary != "full":
        rows = [r for r in rows if r["split"] == args.vocabulary]
    summary = {"class": "mean", "split": args.vocabulary, "iou": _f(report.miou)}
    if report.pq is not None:
        summary.update(dict(zip(("pq", "sq", "rq"), (f"{v:.6f}" for v in report.pq["all"]))))
    write_metrics_csv(out / "eval_per_class.csv", rows, summary)
    agg = [
        {"split": "all", "miou": _f(report.miou)},
        {"split": "seen", "miou": _f(report.miou_seen)},
        {"split": "novel", "miou": _f(report.miou_novel)},
    ]
    if report.pq is not None:
        for row in agg:
            pq, sq, rq = report.pq[row["split"]]
            row.update({"pq": f"{pq:.6f}", "sq": f"{sq:.6f}", "rq": f"{rq:.6f}"})
    _write_csv(out / "eval_summary.csv", agg)
    for row in agg:
        print("  ".join(f"{k} {v}" for k, v in row.items()))
    return EXIT_OK


def _f(v) -> str:
    return "" if v is None else f"{v:.6f}"


def cmd_export_sim(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    pipe = _pipeline(ckpt, _config(args) if args.config else None)
    out = _outdir(args)
    samples = _samples(args, pipe.cfg, pipe.vocab)
    if not samples:
        raise EmptyInputError("no samples for the similarity map")
    sim = similarity_map(pipe, samples)
    snapshot = {"classes": sim.classes, "missing": sim.missing, "rows": "vision class", "cols": "text class"}
    save_checkpoint(Checkpoint({"similarity": sim.values.astype(np.float32)}, snapshot), out / "similarity.ckpt")
    with open(out / "similarity.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class"] + sim.classes)
        for c, row in zip(sim.classes, sim.values):
            writer.writerow([c] + ["" if np.isnan(v) else f"{v:.6f}" for v in row])
    if sim.missing:
        logger.warning("classes absent from the dataset: %s", ", ".join(sim.missing))
    print(f"similarity diagonal mean {sim.diagonal_mean():.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _config(args) if args.config else gc.tiny_config()
    results, seconds = gc.run_gradcheck(cfg, seed=args.seed or 0)
    print(gc.format_table(results))
    print(f"{len(results)} checks in {seconds:.1f}s")
    failed = [r.op for r in results if not r.passed]
    if failed:
        raise CheckFailed(f"gradient check failed for: {', '.join(failed)}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    seeds = (args.seed,) if args.seed is not None else tuple(cfg.ablation.seeds)
    out = _outdir(args)
    vocab = benchmark_vocabulary(cfg)
    train = train_dataset(cfg, vocab)
    test = eval_dataset(cfg, vocab)
    shared = load_checkpoint(args.pretrained) if args.pretrained else None
    results: list[RunResult] = []
    t_all = time.time()
    for seed in seeds:
        base = cfg.replace(seed=seed)
        if shared is None:
            backbone, encoder, report = run_pretraining(base, seed)
            pretrained = pretrained_checkpoint(base, backbone, encoder, report)
            logger.info("seed %d: pretraining retrieval accuracy %.3f", seed, report.retrieval_accuracy)
        else:
            pretrained = shared
        for name, flags in VARIANTS.items():
            run_cfg = base.replace(ablation=flags)
            t0 = time.time()
            _, report, sim = train_and_evaluate(run_cfg, pretrained, train, test)
            results.append(RunResult(name, seed, report, sim.diagonal_mean(), time.time() - t0))
            logger.info(
                "seed %d %-24s novel %.2f seen %.2f diag %.3f",
                seed, name, 100 * (report.miou_novel or 0), 100 * (report.miou_seen or 0), sim.diagonal_mean(),
            )
    rows = summarize(results)
    table = markdown_table(rows)
    (out / "ablation.md").write_text(table, encoding="utf-8")
    _write_csv(out / "ablation.csv", [{k: (f"{v:.4f}" if isinstance(v, float) else v) for k, v in r.items()} for r in rows])
    _write_csv(
        out / "ablation_runs.csv",
        [
            {
                "variant": r.variant,
                "seed": r.seed,
                "novel_miou": _f(r.report.miou_novel),
                "seen_miou": _f(r.report.miou_seen),
                "sim_diag": f"{r.similarity_diag:.6f}",
                "seconds": f"{r.seconds:.1f}",
            }
            for r in results
        ],
    )
    checks = directional_checks(rows, results)
    total = time.time() - t_all
    summary = {"seeds": list(seeds), "total_seconds": total, "checks": {label: ok for label, ok in checks}}
    (out / "ablation_summary.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
    print(table)
    for label, ok in checks:
        print(f"{'ok  ' if ok else 'WARN'} {label}")
    print(f"total {total:.0f}s")
    return EXIT_OK


# -- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI-style run configuration")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--out", default="runs", help="output directory")
    common.add_argument("--threads", type=int, default=1, help="BLAS threads (1 for bit-reproducible runs)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ovseg", description="Open-vocabulary segmentation on synthetic shapes.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", parents=[common], help="contrastive pretraining of the toy encoders")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", parents=[common], help="fine-tune on the training classes")
    p.add_argument("--pretrained", help="checkpoint written by pretrain")
    p.add_argument("--resume", help="continue from a checkpoint written by train")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="mIoU / PQ over the full test vocabulary")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", help="SEGB file; defaults to the configured evaluation split")
    p.add_argument("--vocabulary", choices=("full", "seen", "novel"), default="full", help="classes listed in the report")
    p.add_argument("--panoptic", action="store_true")
    p.add_argument("--oracle", action="store_true", help="score ground-truth masks (plumbing check)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="the four-variant component ablation over seeds")
    p.add_argument("--pretrained", help="share one pretrained checkpoint instead of pretraining per seed")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every op and the objective")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-sim", parents=[common], help="normalized vision/text similarity matrix")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", help="SEGB file; defaults to the configured evaluation split")
    p.set_defaults(func=cmd_export_sim)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr
    )
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except CheckFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except ContractViolation as exc:
        print(f"error: contract violated: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, CheckpointError, SegbError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except CompatibilityError as exc:
        print(f"incompatible input: {exc}", file=sys.stderr)
        return EXIT_COMPAT
    except NonFiniteError as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except EmptyInputError as exc:
        print(f"empty input: {exc}", file=sys.stderr)
        return EXIT_EMPTY
    except ValueError as exc:
        print(f"shape error: {exc}", file=sys.stderr)
        return EXIT_COMPAT


if __name__ == "__main__":
    sys.exit(main())
