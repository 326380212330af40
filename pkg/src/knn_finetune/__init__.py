"""KNN-augmented fine-tuning of a small text classifier.

Cross entropy is combined with a selected-positive contrastive loss over a
momentum key queue.  Inference blends the linear head with a vote among
the nearest training anchors.
"""

from .data import Dataset, Example, FeaturizerConfig, featurize, few_shot_sample, load_dataset
from .encoder import EncoderParams, HeadParams, encode, init_encoder, init_head
from .knn import AnchorIndex, KNNClassifier, combined_predict, knn_vote
from .losses import (
    combined_loss,
    cross_entropy,
    info_nce,
    select_positives,
    supervised_contrastive_full,
    supervised_contrastive_selected,
)
from .moco import ContrastQueue, momentum_update, partition_by_label
from .trainer import TrainConfig, evaluate, run_experiment, train

__version__ = "0.1.0"

__all__ = [
    "AnchorIndex", "ContrastQueue", "Dataset", "EncoderParams", "Example", "FeaturizerConfig",
    "HeadParams", "KNNClassifier", "TrainConfig", "combined_loss", "combined_predict",
    "cross_entropy", "encode", "evaluate", "featurize", "few_shot_sample", "info_nce",
    "init_encoder", "init_head", "knn_vote", "load_dataset", "momentum_update",
    "partition_by_label", "run_experiment", "select_positives", "supervised_contrastive_full",
    "supervised_contrastive_selected", "train",
]
