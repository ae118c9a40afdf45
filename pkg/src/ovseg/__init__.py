"""Open-vocabulary segmentation on synthetic shapes, built on a small numpy autograd."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, load_config, parse_config
from .core import cdt_forward, classification_scores, iou_targets, mask_aware_loss, mask_pooling, rc_loss, total_loss
from .data import SegmentationSample, Vocabulary, default_vocabulary, generate, read_segb, write_segb
from .metrics import miou, panoptic_inference, pq_sq_rq, semantic_inference
from .proposals import hungarian_match, proposal_loss
from .tensor import Tensor, grad_check, no_grad

__all__ = [
    "Checkpoint",
    "RunConfig",
    "SegmentationSample",
    "Tensor",
    "Vocabulary",
    "cdt_forward",
    "classification_scores",
    "default_vocabulary",
    "generate",
    "grad_check",
    "hungarian_match",
    "iou_targets",
    "load_checkpoint",
    "load_config",
    "mask_aware_loss",
    "mask_pooling",
    "miou",
    "no_grad",
    "panoptic_inference",
    "parse_config",
    "pq_sq_rq",
    "proposal_loss",
    "rc_loss",
    "read_segb",
    "save_checkpoint",
    "semantic_inference",
    "total_loss",
    "write_segb",
]
