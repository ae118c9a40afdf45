import math

import numpy as np
import pytest

from ovseg import tensor as T
from ovseg.backbones import (
    STAGES,
    PromptTemplateSet,
    TextEncoder,
    VisionBackbone,
    build_token_list,
    freeze_copy,
    info_nce,
    pretrain_contrastive,
    text_encode,
    tokenize,
)
from ovseg.data import default_vocabulary
from ovseg.tensor import Tensor


@pytest.fixture
def backbone():
    return VisionBackbone(np.random.default_rng(0), (8, 8, 16, 16))


def test_pyramid_strides(backbone):
    pyr = backbone(np.zeros((2, 3, 64, 96), np.float32))
    shapes = [f.shape for f in pyr.features]
    assert shapes == [(2, 8, 16, 24), (2, 8, 8, 12), (2, 16, 4, 6), (2, 16, 2, 3)]
    assert pyr.F3 is pyr.features[3] and pyr.image_size == (64, 96)
    assert all(f.dtype == np.float32 for f in pyr.features)


def test_single_image_gets_batch_axis(backbone):
    img = np.random.default_rng(1).random((3, 32, 32), dtype=np.float32)
    assert backbone(img).F3.shape == (1, 16, 1, 1)


def test_freeze_stages(backbone):
    backbone.freeze_stages(["S0", "S1"])
    flags = {n.split(".")[1]: p.requires_grad for n, p in backbone.named_parameters()}
    assert flags == {"0": False, "1": False, "2": True, "3": True}
    with pytest.raises(ValueError):
        backbone.freeze_stages(["S9"])


def test_frozen_stages_get_no_gradient(backbone):
    backbone.freeze_stages(["S0"])
    T.tsum(backbone(np.ones((3, 32, 32), np.float32)).F3).backward()
    for name, p in backbone.named_parameters():
        assert (p.grad is None) == name.startswith("stages.0.")


def test_freeze_copy_is_independent(backbone):
    clone = freeze_copy(backbone)
    assert clone.frozen_stages == set(STAGES)
    img = np.random.default_rng(2).random((3, 32, 32), dtype=np.float32)
    before = clone(img).F3.data.copy()
    assert np.array_equal(before, backbone(img).F3.data)
    for p in backbone.parameters():
        p.data += 0.1
    assert np.array_equal(clone(img).F3.data, before)
    assert not np.array_equal(backbone(img).F3.data, before)


def test_tokenize_drops_punctuation():
    assert tokenize("There is a Red_Disk, in the scene.") == ["there", "is", "a", "red_disk", "in", "the", "scene"]


def test_templates_need_one_placeholder():
    with pytest.raises(ValueError):
        PromptTemplateSet(("no slot",))
    assert PromptTemplateSet(("a {}.",)).fill("Blue_Ring") == ["a blue_ring."]


def test_text_table_rows_are_unit_and_distinct():
    vocab = default_vocabulary()
    enc = TextEncoder(np.random.default_rng(0), build_token_list(vocab.classes), dim=16, embed_dim=16)
    table = text_encode(enc, vocab.classes)
    norms = np.linalg.norm(table.T.data, axis=1)
    np.testing.assert_allclose(norms, 1.0, rtol=1e-5)
    assert table.T_hat is table.T
    sim = table.T.data @ table.T.data.T
    assert np.all(sim[~np.eye(len(vocab), dtype=bool)] < 0.9999)


def test_text_encoder_rejects_unknown_tokens():
    enc = TextEncoder(np.random.default_rng(0), ["a", "b"], dim=4, embed_dim=4)
    with pytest.raises(KeyError):
        enc.encode_sentences(["a zebra"])


def test_info_nce_uniform_logits():
    img = Tensor(np.zeros((4, 3)))
    assert info_nce(img, img, 0.07).item() == pytest.approx(math.log(4.0), rel=1e-12)


def test_short_pretraining_lowers_loss():
    vocab = default_vocabulary()
    rng = np.random.default_rng(0)
    bb = VisionBackbone(rng, (8, 8, 16, 16))
    enc = TextEncoder(rng, build_token_list(vocab.classes), dim=16, embed_dim=16)
    report = pretrain_contrastive(bb, enc, vocab, steps=40, seed=0, image_size=32, batch=8, lr=5e-3, eval_count=19)
    assert len(report.losses) == 40 and 0.0 <= report.retrieval_accuracy <= 1.0
    assert np.mean(report.losses[-10:]) < np.mean(report.losses[:10])
