"""
N-way one-shot evaluation in embedding space.

Queries are assigned to the nearest support instance under squared Euclidean
distance; equal distances resolve to the smallest class id. Features come
either from the embedding (``fc-1``) or from the per-channel spatial maximum
of a conv layer.
"""
import csv
import io
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .augment import center_crop
from .containers import atomic_write_text
from .datasets import ClassIndexedDataset, OneShotSet, load_omniglot_image
from .exceptions import ConfigError, ContractError, IngestionError, ShapeError
from .losses import SiameseHead
from .network import EMBEDDING_LAYER, EmbeddingModel, layer_features

logger = logging.getLogger(__name__)

FEATURE_BATCH = 128

PairwiseDistance = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass
class Episode:
    """One N-way task: a single support image per class and disjoint queries."""
    run_id: int
    support_images: np.ndarray
    support_classes: np.ndarray
    query_images: np.ndarray
    query_classes: np.ndarray
    class_names: List[str]
    augmentation: str = "affine"
    support_index: Optional[np.ndarray] = None
    query_index: Optional[np.ndarray] = None

    def __post_init__(self):
        self.support_classes = np.asarray(self.support_classes, dtype=np.int64)
        self.query_classes = np.asarray(self.query_classes, dtype=np.int64)
        if len(np.unique(self.support_classes)) != len(self.support_classes):
            raise ContractError(f"episode {self.run_id} has more than one support instance for a class")
        missing = set(self.query_classes.tolist()) - set(self.support_classes.tolist())
        if missing:
            raise ContractError(f"episode {self.run_id} has queries of classes without support: {sorted(missing)}")

    @property
    def way(self) -> int:
        return len(self.support_classes)

    def support_set(self) -> OneShotSet:
        return OneShotSet(self.support_images, self.support_classes, list(self.class_names),
                          augmentation=self.augmentation)


@dataclass
class EvalReport:
    accuracies: List[float]
    run_ids: List[int]
    feature: str = EMBEDDING_LAYER
    degenerate: bool = False
    predictions: Dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def runs(self) -> int:
        return len(self.accuracies)

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies)) if self.accuracies else 0.0

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["run", "accuracy"])
        for run_id, accuracy in zip(self.run_ids, self.accuracies):
            writer.writerow([run_id, f"{accuracy:.6f}"])
        writer.writerow(["mean", f"{self.mean:.6f}"])
        return out.getvalue()

    def write_csv(self, path: Union[str, Path]) -> Path:
        return atomic_write_text(path, self.to_csv())


# ---------------------------------------------------------------------------
# Episodes
# ---------------------------------------------------------------------------

def build_episodes(novel: ClassIndexedDataset, way: int, queries_per_class: int = 1, runs: int = 10,
                   seed: Optional[int] = 0) -> List[Episode]:
    """
    ``runs`` episodes of ``way`` classes drawn without replacement; per class
    one support image and ``queries_per_class`` distinct query images.
    """
    if way < 2:
        raise ConfigError(f"episodes need way >= 2, got {way}")
    if queries_per_class < 1 or runs < 1:
        raise ConfigError("episodes need queries_per_class >= 1 and runs >= 1")
    if novel.num_classes < way:
        raise ConfigError(f"dataset {novel.name!r} has {novel.num_classes} classes, {way}-way episodes need {way}")
    rng = np.random.default_rng(seed)
    episodes = []
    for run in range(1, runs + 1):
        classes = rng.choice(novel.num_classes, size=way, replace=False)
        support_rows, query_rows, query_classes = [], [], []
        for c in classes:
            idx = novel.class_indices(int(c))
            if len(idx) < 1 + queries_per_class:
                raise ConfigError(f"class {novel.class_names[c]!r} has {len(idx)} images, "
                                  f"an episode needs {1 + queries_per_class}")
            order = rng.permutation(idx)
            support_rows.append(order[0])
            query_rows.extend(order[1:1 + queries_per_class])
            query_classes.extend([int(c)] * queries_per_class)
        episodes.append(Episode(
            run_id=run,
            support_images=novel.images[support_rows],
            support_classes=classes.astype(np.int64),
            query_images=novel.images[query_rows],
            query_classes=np.array(query_classes),
            class_names=[novel.class_names[c] for c in classes],
            augmentation=novel.augmentation,
            support_index=np.array(support_rows),
            query_index=np.array(query_rows),
        ))
    return episodes


_RUN_DIR = re.compile(r"^run\d+$")


def _strip_run_prefix(relative: str) -> Path:
    parts = Path(relative).parts
    if parts and _RUN_DIR.match(parts[0]):
        parts = parts[1:]
    return Path(*parts)


def load_omniglot_runs(root: Union[str, Path], resize: Optional[int] = None) -> List[Episode]:
    """
    The fixed 20-way Omniglot test subsets. Each ``runNN`` directory holds
    ``training/classXX.png`` (support), ``test/itemXX.png`` (queries) and a
    ``class_labels.txt`` pairing every query with its support image.
    """
    root = Path(root)
    run_dirs = sorted(p for p in root.iterdir() if p.is_dir() and _RUN_DIR.match(p.name)) if root.is_dir() else []
    if not run_dirs:
        raise IngestionError("no runNN directories found", str(root))
    episodes = []
    for run_dir in run_dirs:
        labels_file = run_dir / "class_labels.txt"
        try:
            lines = [line.split() for line in labels_file.read_text().splitlines() if line.strip()]
        except OSError as e:
            raise IngestionError("cannot read class labels", str(labels_file)) from e
        if any(len(line) != 2 for line in lines):
            raise IngestionError("class_labels.txt lines must be '<query> <support>'", str(labels_file))
        support_files = sorted({_strip_run_prefix(support) for _, support in lines})
        class_of = {path: i for i, path in enumerate(support_files)}
        support = [load_omniglot_image(run_dir / path, resize) for path in support_files]
        queries = [load_omniglot_image(run_dir / _strip_run_prefix(q), resize) for q, _ in lines]
        episodes.append(Episode(
            run_id=int(run_dir.name[3:]),
            support_images=np.stack(support),
            support_classes=np.arange(len(support_files)),
            query_images=np.stack(queries),
            query_classes=np.array([class_of[_strip_run_prefix(s)] for _, s in lines]),
            class_names=[f"{run_dir.name}/{p.stem}" for p in support_files],
            augmentation="affine",
        ))
    logger.info(f"loaded {len(episodes)} fixed Omniglot runs from {root}")
    return episodes


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------

def pairwise_squared_euclidean(queries: np.ndarray, supports: np.ndarray) -> np.ndarray:
    """[Q, E] x [N, E] -> [Q, N] squared distances (float64)."""
    q = np.asarray(queries, dtype=np.float64)
    s = np.asarray(supports, dtype=np.float64)
    return ((q[:, None, :] - s[None, :, :]) ** 2).sum(axis=-1)


def _as_rows(features: np.ndarray) -> Tuple[np.ndarray, bool]:
    features = np.asarray(features)
    return (features[None], True) if features.ndim == 1 else (features, False)


def _check_support(support_features: np.ndarray, support_classes: np.ndarray, queries: np.ndarray) -> None:
    if len(support_features) == 0:
        raise ContractError("nearest-neighbour prediction needs at least one support instance")
    if len(support_classes) != len(support_features):
        raise ShapeError("one class id per support feature is required")
    if queries.shape[-1] != support_features.shape[-1]:
        raise ShapeError(f"query features have length {queries.shape[-1]}, support {support_features.shape[-1]}")


def nearest_by_score(scores: np.ndarray, support_classes: np.ndarray) -> np.ndarray:
    """Row-wise argmin of ``scores`` [Q, N]; exact ties go to the smallest class id."""
    support_classes = np.asarray(support_classes)
    best = scores.min(axis=1, keepdims=True)
    candidates = np.where(scores == best, support_classes[None, :], np.iinfo(np.int64).max)
    return candidates.min(axis=1)


def predict_nn(support_features: np.ndarray, support_classes: Sequence[int], query_features: np.ndarray,
               distance: PairwiseDistance = pairwise_squared_euclidean) -> Union[int, np.ndarray]:
    """Class of the nearest support feature, for one query [E] or a batch [Q, E]."""
    queries, single = _as_rows(query_features)
    support_features = np.asarray(support_features)
    _check_support(support_features, support_classes, queries)
    predicted = nearest_by_score(distance(queries, support_features), np.asarray(support_classes, dtype=np.int64))
    return int(predicted[0]) if single else predicted


def class_distribution(support_features: np.ndarray, query_features: np.ndarray,
                       distance: PairwiseDistance = pairwise_squared_euclidean) -> np.ndarray:
    """softmax(-d) over the support instances, in support order; stable via max-subtraction."""
    queries, single = _as_rows(query_features)
    support_features = np.asarray(support_features)
    _check_support(support_features, np.arange(len(support_features)), queries)
    logits = -distance(queries, support_features)
    logits = logits - logits.max(axis=1, keepdims=True)
    weights = np.exp(logits)
    probabilities = weights / weights.sum(axis=1, keepdims=True)
    return probabilities[0] if single else probabilities


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def prepare_images(model: EmbeddingModel, images: np.ndarray, augmentation: str) -> np.ndarray:
    """Center-crop natural images down to the network's input size."""
    _, h, w = model.arch.input_shape
    if images.shape[-2:] != (h, w) and augmentation == "natural" and h == w:
        images = center_crop(images, h)
    if tuple(images.shape[1:]) != model.arch.input_shape:
        raise ShapeError(f"episode images {tuple(images.shape[1:])} do not match the model input {model.arch.input_shape}")
    return images


def extract_features(model: EmbeddingModel, images: np.ndarray, feature: str) -> np.ndarray:
    chunks = [layer_features(model, images[i:i + FEATURE_BATCH], feature)
              for i in range(0, len(images), FEATURE_BATCH)]
    return np.concatenate(chunks).astype(np.float64)


def _evaluate_episode(model: EmbeddingModel, episode: Episode, feature: str,
                      head: Optional[SiameseHead]) -> Tuple[float, np.ndarray, bool]:
    support = extract_features(model, prepare_images(model, episode.support_images, episode.augmentation), feature)
    queries = extract_features(model, prepare_images(model, episode.query_images, episode.augmentation), feature)
    degenerate = bool(np.all(support == support[0]))
    distances = pairwise_squared_euclidean(queries, support)
    if head is not None:
        # highest same-class probability wins
        predicted = nearest_by_score(-head.same_class_probability(distances), episode.support_classes)
    else:
        predicted = nearest_by_score(distances, episode.support_classes)
    accuracy = float(np.mean(predicted == episode.query_classes))
    return accuracy, predicted, degenerate


def evaluate(model: EmbeddingModel, episodes: Sequence[Episode], feature: str = EMBEDDING_LAYER,
             head: Optional[SiameseHead] = None, workers: int = 0) -> EvalReport:
    """
    Eval-mode accuracy per episode and its mean. Episodes may run on a thread
    pool; the report is ordered by run id either way.
    """
    if feature != EMBEDDING_LAYER and feature not in model.layer_registry:
        raise ConfigError(f"unknown layer {feature!r}; known layers: {', '.join(model.layer_registry + [EMBEDDING_LAYER])}")
    if not episodes:
        raise ContractError("evaluation needs at least one episode")
    if workers > 0:
        with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="evaluate") as pool:
            results = list(pool.map(lambda ep: _evaluate_episode(model, ep, feature, head), episodes))
    else:
        results = [_evaluate_episode(model, ep, feature, head) for ep in episodes]
    order = sorted(range(len(episodes)), key=lambda i: episodes[i].run_id)
    report = EvalReport(
        accuracies=[results[i][0] for i in order],
        run_ids=[episodes[i].run_id for i in order],
        feature=feature,
        degenerate=any(r[2] for r in results),
        predictions={episodes[i].run_id: results[i][1] for i in order},
    )
    if report.degenerate:
        logger.warning(f"{feature}: identical support features in at least one episode, accuracy is at chance level")
    return report


def sweep_layers(model: EmbeddingModel, episodes: Sequence[Episode], workers: int = 0) -> Dict[str, EvalReport]:
    """Evaluate every conv layer and the embedding on the same episodes."""
    reports = {}
    for layer in model.layer_registry + [EMBEDDING_LAYER]:
        reports[layer] = evaluate(model, episodes, feature=layer, workers=workers)
        logger.info(f"layer {layer}: mean accuracy {reports[layer].mean:.4f}")
    return reports


def write_sweep_csv(path: Union[str, Path], means: Dict[str, float]) -> Path:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["layer", "mean_accuracy"])
    for layer, mean_accuracy in means.items():
        writer.writerow([layer, f"{mean_accuracy:.6f}"])
    return atomic_write_text(path, out.getvalue())


# ---------------------------------------------------------------------------
# Model comparison
# ---------------------------------------------------------------------------

COMPARISON_COLUMNS = ("triplet", "siamese", "finetuned", "first_conv", "last_conv", "fc")

# (name, better column, worse column)
COMPARISON_CHECKS = (
    ("triplet>=siamese", "triplet", "siamese"),
    ("finetuned>=pretrained", "finetuned", "triplet"),
    ("fc>=last_conv", "fc", "last_conv"),
    ("last_conv>=first_conv", "last_conv", "first_conv"),
)


@dataclass
class SeedComparison:
    """Mean episode accuracies of one seed's triplet, Siamese and fine-tuned models."""
    seed: int
    triplet: float
    siamese: float
    finetuned: float
    first_conv: float
    last_conv: float
    fc: float

    def value(self, column: str) -> float:
        return getattr(self, column)


def comparison_medians(rows: Sequence[SeedComparison]) -> Dict[str, float]:
    if not rows:
        raise ContractError("a comparison needs at least one seed")
    return {column: float(np.median([r.value(column) for r in rows])) for column in COMPARISON_COLUMNS}


def comparison_checks(rows: Sequence[SeedComparison]) -> List[Tuple[str, float, bool]]:
    """(check, median margin over seeds, holds) for every ordering the comparison expects."""
    checks = []
    for name, better, worse in COMPARISON_CHECKS:
        margin = float(np.median([r.value(better) - r.value(worse) for r in rows]))
        checks.append((name, margin, margin >= 0.0))
    return checks


def write_comparison_csv(path: Union[str, Path], rows: Sequence[SeedComparison]) -> Path:
    """One row per seed, then the median row, then one row per ordering check."""
    medians = comparison_medians(rows)
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["seed"] + list(COMPARISON_COLUMNS))
    for row in rows:
        writer.writerow([row.seed] + [f"{row.value(c):.6f}" for c in COMPARISON_COLUMNS])
    writer.writerow(["median"] + [f"{medians[c]:.6f}" for c in COMPARISON_COLUMNS])
    writer.writerow([])
    writer.writerow(["check", "median_margin", "holds"])
    for name, margin, holds in comparison_checks(rows):
        writer.writerow([name, f"{margin:.6f}", str(holds).lower()])
    return atomic_write_text(path, out.getvalue())


# ---------------------------------------------------------------------------
# PCA projection
# ---------------------------------------------------------------------------

@dataclass
class Projection:
    coordinates: np.ndarray
    explained: np.ndarray
    components: np.ndarray


def pca_project(features: np.ndarray, dims: int = 2) -> Projection:
    """
    Project centered rows onto the top ``dims`` eigenvectors of the sample
    covariance, ordered by decreasing variance. Each component's
    largest-magnitude loading is made positive. Zero-variance input projects
    to all zeros with zero explained variance.
    """
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError(f"pca_project expects a [points, features] matrix, got {X.shape}")
    n, d = X.shape
    if n < dims + 1:
        raise ContractError(f"pca_project to {dims} dims needs at least {dims + 1} points, got {n}")
    if d < dims:
        raise ContractError(f"cannot project {d}-dimensional features onto {dims} components")
    centered = X - X.mean(axis=0)
    covariance = centered.T @ centered / (n - 1)
    eigenvalues, eigenvectors = np.linalg.eigh(covariance)
    order = np.argsort(eigenvalues)[::-1][:dims]
    values = np.clip(eigenvalues[order], 0.0, None)
    components = eigenvectors[:, order]
    for k in range(dims):
        pivot = np.argmax(np.abs(components[:, k]))
        if components[pivot, k] < 0:
            components[:, k] = -components[:, k]
    total = np.clip(eigenvalues, 0.0, None).sum()
    if total <= 0.0:
        return Projection(np.zeros((n, dims)), np.zeros(dims), components)
    return Projection(centered @ components, values / total, components)


def write_projection_csv(path: Union[str, Path], class_ids: Sequence[int], coordinates: np.ndarray,
                         point_ids: Optional[Sequence[int]] = None) -> Path:
    """CSV of point_id, class_id, x, y (one more column per extra dimension)."""
    dims = coordinates.shape[1]
    axes = ["x", "y", "z"][:dims] if dims <= 3 else [f"c{k + 1}" for k in range(dims)]
    point_ids = range(len(class_ids)) if point_ids is None else point_ids
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["point_id", "class_id"] + axes)
    for pid, cid, row in zip(point_ids, class_ids, coordinates):
        writer.writerow([pid, cid] + [f"{v:.9g}" for v in row])
    return atomic_write_text(path, out.getvalue())
