"""Masked-sequence transformer recommender for points of interest."""
from .corpus import (
    Catalog,
    Interaction,
    ItemMeta,
    SplitDataset,
    SyntheticSpec,
    UserSequence,
    build_catalog,
    build_sequences,
    dataset_stats,
    generate_synthetic,
    parse_interactions,
    prepare_corpus,
    split_leave_one_out,
    to_implicit,
)
from .evaluator import EvalProtocol, MetricsReport, evaluate, sweep_k
from .model import ModelConfig, ModelParams, init_params, load_checkpoint, predict_next, save_checkpoint
from .trainer import TrainConfig, fit, train_epoch

__version__ = "0.1.0"
