import os

# single-threaded BLAS keeps every run bit-reproducible
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")

import pytest

from ovseg.config import RunConfig
from ovseg.data import default_vocabulary
from ovseg.gradcheck import tiny_config
from ovseg.training import new_encoders, pretrained_checkpoint


def small_config(**ablation) -> RunConfig:
    """A seconds-scale run: 64 px images, narrow encoders, a handful of samples."""
    return tiny_config().replace(
        data={"image_size": 64, "train_samples": 8, "eval_samples": 4, "radius": (8, 14)},
        loss={"rc_grids": (1, 2)},
        optim={"steps": 4, "batch_size": 2},
        pretrain={"steps": 4, "batch_size": 4, "eval_count": 8},
        ablation=ablation,
    )


@pytest.fixture
def small_cfg() -> RunConfig:
    return small_config()


@pytest.fixture
def untrained_checkpoint(small_cfg):
    """Encoders straight from initialization, packed like a pretraining result."""
    backbone, encoder = new_encoders(small_cfg, default_vocabulary(), 0)
    return pretrained_checkpoint(small_cfg, backbone, encoder)


# -- acceptance summary -------------------------------------------------------------

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
