"""Contrastive self-supervised pretraining for multivariate time series with
Soft-DTW temporal feature alignment, written against plain numpy."""

from .augment import AugmentationSpec, compose_pipeline, make_views
from .contrastive import cmc_loss, ntxent_loss
from .data import WindowedDataset, generate_synthetic, generate_synthetic_pair, select_labeled_subset
from .softdtw import hard_dtw, softdtw_grad, softdtw_value, tfa_batch_loss
from .training import (
    ContrastiveNet,
    FinetuneConfig,
    ModelConfig,
    PretrainConfig,
    evaluate_macro_f1,
    finetune,
    pretrain_multimodal,
    pretrain_unimodal,
    semi_supervised_protocol,
)

__version__ = "0.1.0"
