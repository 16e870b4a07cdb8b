"""Surgical instrument segmentation with attention-fused skip connections."""

from .data import DatasetIndex, SplitSpec, load_dataset, load_sample, make_batches, split, synthesize_toy_dataset
from .losses import LossBreakdown, LossConfig, combined_loss, cross_entropy, soft_jaccard
from .metrics import CLASS_NAMES, ConfusionCounts, MetricsReport, confusion_counts, dice, evaluate_dataset, iou
from .model import AttentionFusion, DecoderBlock, ModelConfig, RASNet, build_encoder, build_model, decoder_block
from .training import (TrainConfig, TrainHistory, load_checkpoint, lr_at_step, run_comparison, save_checkpoint,
                       train)

__version__ = "0.1.0"
