"""Break a similarity map into row offsets and per-row ranking.

Usage: python scripts/similarity_breakdown.py CKPT [CKPT ...]

For each trained checkpoint, prints the raw cosine statistics behind the
normalized diagonal mean: the diagonal and off-diagonal means, the spread of
per-row means (a row offset shifts every class score of one vision class
equally and is invisible to a softmax classifier), the normalized diagonal
mean before and after removing row offsets, and how often the diagonal is the
row maximum.
"""

import sys

import numpy as np

from ovseg.checkpoint import load_checkpoint
from ovseg.metrics import normalize_similarity
from ovseg.training import eval_dataset, pipeline_from_checkpoint, similarity_map


def breakdown(raw: np.ndarray) -> dict:
    n = len(raw)
    keep = ~np.isnan(raw).any(axis=1)
    raw = raw[keep][:, keep]
    n = len(raw)
    off = raw[~np.eye(n, dtype=bool)]
    centered = raw - raw.mean(axis=1, keepdims=True)
    return {
        "raw_diag": float(np.diag(raw).mean()),
        "raw_off": float(off.mean()),
        "row_mean_spread": float(raw.mean(axis=1).std()),
        "norm_diag": float(np.diag(normalize_similarity(raw)).mean()),
        "norm_diag_row_centered": float(np.diag(normalize_similarity(centered)).mean()),
        "diag_is_row_max": float(np.mean(raw.argmax(axis=1) == np.arange(n))),
    }


def main(paths):
    for path in paths:
        pipe = pipeline_from_checkpoint(load_checkpoint(path))
        sim = similarity_map(pipe, eval_dataset(pipe.cfg, pipe.vocab), normalize=False)
        stats = breakdown(sim.values)
        print(path)
        for k, v in stats.items():
            print(f"  {k:24s} {v:+.3f}")


if __name__ == "__main__":
    main(sys.argv[1:])
