"""Contrastive auxiliary objectives for multivariate time-series forecasting.

Backbones (LSTM, dilated TCN, ProbSparse Transformer), contrastive losses
(InfoNCE, hierarchical, momentum contrast), training strategies, metrics,
receptive-field analysis and a config-driven experiment runner.
"""
from .augment import AugmentPolicy, Augmenter, crop_pair
from .backbone import EncoderSpec, build_encoder, param_count
from .config import ExperimentConfig, load_config, parse_config, serialize_config
from .data import PreparedData, RawSeries, SplitSpec, load_csv, prepare, synthetic_series
from .erf import erf_compare, erf_gradient
from .evaluation import ResultsTable, evaluate_model
from .losses import LossConfig, MemoryQueue, hcl_loss, info_nce
from .strategy import (TrainConfig, finetune, fit_frozen_ridge, pretrain_sscl,
                       train_end_to_end, train_frozen_mlp)

__version__ = "0.1.0"
