"""Pretrain the toy encoders for a few seeds and report held-out retrieval accuracy.

Usage: python scripts/pretrain_health.py [SEED ...]

Chance level is 1/19. A pretraining that stays near chance makes every
fine-tuning variant look alike, so run this after touching the encoders or
the pretraining renderer.
"""

import sys
import time

from ovseg.config import RunConfig
from ovseg.training import run_pretraining


def main(seeds):
    cfg = RunConfig(log_every=0)
    for seed in seeds:
        t0 = time.time()
        _, _, report = run_pretraining(cfg, seed)
        print(
            f"seed {seed}: final loss {report.final_loss:.3f}, "
            f"retrieval accuracy {report.retrieval_accuracy:.3f}, {time.time() - t0:.0f}s"
        )


if __name__ == "__main__":
    main([int(s) for s in sys.argv[1:]] or [0])
