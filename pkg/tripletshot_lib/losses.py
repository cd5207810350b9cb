"""
Training objectives.

    triplet loss   [m + d(p1, p2) - d(p1, n)]+ + [m + d(p1, p2) - d(p2, n)]+
    batch loss     mean of the per-triplet losses
    regularizer    mean over triplets of ||p1||^2 + ||p2||^2 + ||n||^2
    total          batch loss + lambda * regularizer

plus the pairwise (Siamese) baseline: sigmoid(w * d(a, b) + b) scored with
binary cross-entropy against the same-class label.
"""
from dataclasses import dataclass, field
from typing import Callable, Dict, Sequence, Tuple, Union

import numpy as np

from .autodiff import (
    Tensor,
    concat_rows,
    mean,
    relu,
    reshape,
    sigmoid_bce_with_logits,
    square,
    tsum,
)
from .exceptions import ConfigError, ContractError, ShapeError

Distance = Callable[[Tensor, Tensor], Tensor]


def squared_euclidean(a: Tensor, b: Tensor) -> Tensor:
    """Squared Euclidean distance along the last axis."""
    if a.shape != b.shape:
        raise ShapeError(f"distance between mismatched embeddings {a.shape} and {b.shape}")
    return tsum(square(a - b), axis=-1)


DISTANCES: Dict[str, Distance] = {
    "squared_euclidean": squared_euclidean,
}


@dataclass(frozen=True)
class LossConfig:
    margin: float = 2.0
    lambda_reg: float = 1e-3
    distance: str = "squared_euclidean"

    def __post_init__(self):
        if not self.margin > 0:
            raise ConfigError(f"loss.margin must be > 0, got {self.margin}")
        if not self.lambda_reg >= 0:
            raise ConfigError(f"loss.lambda_reg must be >= 0, got {self.lambda_reg}")
        if self.distance not in DISTANCES:
            raise ConfigError(f"loss.distance must be one of {sorted(DISTANCES)}, got {self.distance!r}")

    @property
    def distance_fn(self) -> Distance:
        return DISTANCES[self.distance]


@dataclass
class EmbeddedTriplets:
    """Stacked embeddings of a triplet batch, each [B, E]."""
    pos1: Tensor
    pos2: Tensor
    neg: Tensor

    def __post_init__(self):
        if not (self.pos1.shape == self.pos2.shape == self.neg.shape) or self.pos1.ndim != 2:
            raise ShapeError(f"triplet embeddings must share one [B, E] shape, got {self.pos1.shape}, {self.pos2.shape}, {self.neg.shape}")

    def __len__(self) -> int:
        return self.pos1.shape[0]

    @classmethod
    def from_stacked(cls, embeddings: Tensor, batch_size: int) -> "EmbeddedTriplets":
        """Split a [3B, E] embedding of concatenated (pos1, pos2, neg) images."""
        if embeddings.shape[0] != 3 * batch_size:
            raise ShapeError(f"expected {3 * batch_size} embeddings, got {embeddings.shape[0]}")
        b = batch_size
        return cls(embeddings[0:b], embeddings[b:2 * b], embeddings[2 * b:3 * b])

    @classmethod
    def from_list(cls, triplets: Sequence[Tuple[Tensor, Tensor, Tensor]]) -> "EmbeddedTriplets":
        if not triplets:
            raise ContractError("a triplet batch needs at least one triplet")

        def rows(index):
            return concat_rows([reshape(t[index], (1, -1)) for t in triplets])

        return cls(rows(0), rows(1), rows(2))


def triplet_loss(pos1: Tensor, pos2: Tensor, neg: Tensor, margin: float = 2.0,
                 distance: Distance = squared_euclidean) -> Tensor:
    """Per-triplet ranking loss; scalar for [E] inputs, [B] for [B, E] inputs."""
    if not (pos1.shape == pos2.shape == neg.shape):
        raise ShapeError(f"triplet members have different lengths: {pos1.shape}, {pos2.shape}, {neg.shape}")
    d_pos = distance(pos1, pos2)
    return relu(margin + d_pos - distance(pos1, neg)) + relu(margin + d_pos - distance(pos2, neg))


def _require_batch(batch: EmbeddedTriplets) -> None:
    if len(batch) == 0:
        raise ContractError("a triplet batch needs at least one triplet")


def batch_triplet_loss(batch: EmbeddedTriplets, margin: float = 2.0,
                       distance: Distance = squared_euclidean) -> Tensor:
    _require_batch(batch)
    return mean(triplet_loss(batch.pos1, batch.pos2, batch.neg, margin, distance))


def embedding_regularizer(batch: EmbeddedTriplets) -> Tensor:
    _require_batch(batch)
    norms = tsum(square(batch.pos1), axis=-1) + tsum(square(batch.pos2), axis=-1) + tsum(square(batch.neg), axis=-1)
    return mean(norms)


def loss_terms(batch: EmbeddedTriplets, config: LossConfig) -> Tuple[Tensor, Tensor, Tensor]:
    """(batch loss, regularizer, total) for logging and backward."""
    ranking = batch_triplet_loss(batch, config.margin, config.distance_fn)
    regularizer = embedding_regularizer(batch)
    return ranking, regularizer, ranking + config.lambda_reg * regularizer


def total_loss(batch: EmbeddedTriplets, config: LossConfig) -> Tensor:
    return loss_terms(batch, config)[2]


@dataclass
class SiameseHead:
    """Trainable linear layer on top of the pair distance; starts at w = -1, b = 0."""
    weight: Tensor = field(default_factory=lambda: Tensor(np.array(-1.0), requires_grad=True, name="siamese.weight"))
    bias: Tensor = field(default_factory=lambda: Tensor(np.array(0.0), requires_grad=True, name="siamese.bias"))

    @classmethod
    def with_values(cls, weight: float, bias: float, dtype=np.float32) -> "SiameseHead":
        return cls(Tensor(np.array(weight, dtype=dtype), requires_grad=True, name="siamese.weight"),
                   Tensor(np.array(bias, dtype=dtype), requires_grad=True, name="siamese.bias"))

    def parameters(self) -> Dict[str, Tensor]:
        return {"siamese.weight": self.weight, "siamese.bias": self.bias}

    def logits(self, h_a: Tensor, h_b: Tensor, distance: Distance = squared_euclidean) -> Tensor:
        return self.weight * distance(h_a, h_b) + self.bias

    def same_class_probability(self, distances: np.ndarray) -> np.ndarray:
        z = float(self.weight.item()) * np.asarray(distances, dtype=np.float64) + float(self.bias.item())
        return 1.0 / (1.0 + np.exp(-z))


def siamese_pair_loss(h_a: Tensor, h_b: Tensor, same_class: Union[bool, Sequence[bool], np.ndarray],
                      head: SiameseHead, distance: Distance = squared_euclidean) -> Tensor:
    """Binary cross-entropy of p = sigmoid(w * d(a, b) + b); averaged over a [B, E] batch."""
    if h_a.shape != h_b.shape:
        raise ShapeError(f"pair members have different lengths: {h_a.shape} vs {h_b.shape}")
    labels = np.asarray(same_class, dtype=np.float64)
    return mean(sigmoid_bce_with_logits(head.logits(h_a, h_b, distance), labels))

