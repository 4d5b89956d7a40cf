"""Weakly supervised multi-label video classification with attention-based multiple-instance learning."""

from .attention import ClassifierHead, TemporalAttention
from .data import LabelSet, SyntheticDatasetConfig, VideoBag, generate_dataset, split_train_test
from .metrics import PredictionRecord, evaluate, localization_score
from .model import VARIANT_NAMES, VARIANTS, ModelConfig, ModelVariant, VideoMIL, build_model
from .selfsup import BagScorer, bag_embeddings, split_bags
from .temporal import ResidualBiLSTM
from .training import Checkpoint, TrainingConfig, predict_records, train

__version__ = "0.1.0"
