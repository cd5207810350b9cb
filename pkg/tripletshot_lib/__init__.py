"""
tripletshot: triplet-ranking embeddings for one-shot image classification.

A numpy implementation of the embedding CNN with its own reverse-mode
autodiff, the triplet and pairwise losses, dataset ingestion and sampling,
the training and fine-tuning loops and N-way one-shot evaluation.
"""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, load_run_config, write_resolved_config
from .datasets import (
    ClassIndexedDataset,
    OneShotSet,
    SplitSpec,
    ingest_natural,
    ingest_omniglot,
    load_dataset_cache,
    make_splits,
    save_dataset_cache,
)
from .evaluation import (
    EvalReport,
    Episode,
    build_episodes,
    class_distribution,
    evaluate,
    load_omniglot_runs,
    pca_project,
    predict_nn,
    sweep_layers,
)
from .losses import LossConfig, SiameseHead, batch_triplet_loss, embedding_regularizer, total_loss, triplet_loss
from .network import ArchConfig, EmbeddingModel, build_network, embed, he_init, layer_features
from .optim import AdamState, adam_step, lr_schedule
from .sampling import sample_finetune_batch, sample_pair_batch, sample_triplet_batch
from .training import FinetuneConfig, TrainConfig, finetune, train, train_siamese


__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "ArchConfig",
    "Checkpoint",
    "ClassIndexedDataset",
    "EmbeddingModel",
    "Episode",
    "EvalReport",
    "FinetuneConfig",
    "LossConfig",
    "OneShotSet",
    "RunConfig",
    "SiameseHead",
    "SplitSpec",
    "TrainConfig",
    "adam_step",
    "batch_triplet_loss",
    "build_episodes",
    "build_network",
    "class_distribution",
    "embed",
    "embedding_regularizer",
    "evaluate",
    "finetune",
    "he_init",
    "ingest_natural",
    "ingest_omniglot",
    "layer_features",
    "load_checkpoint",
    "load_dataset_cache",
    "load_omniglot_runs",
    "load_run_config",
    "lr_schedule",
    "make_splits",
    "pca_project",
    "predict_nn",
    "sample_finetune_batch",
    "sample_pair_batch",
    "sample_triplet_batch",
    "save_checkpoint",
    "save_dataset_cache",
    "sweep_layers",
    "total_loss",
    "train",
    "train_siamese",
    "triplet_loss",
    "write_resolved_config",
]
