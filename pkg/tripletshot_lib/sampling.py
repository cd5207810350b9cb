"""
Batch samplers: training triplets, the fine-tuning mixture and Siamese pairs.

Every batch is a pure function of (dataset, seed). Training loops derive the
seed of batch ``i`` with ``batch_seed(run_seed, i)`` so a batch does not depend
on which worker built it or on what was sampled before it.
"""
import logging
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterator, List, Optional, Tuple

import numpy as np

from .augment import AugmentParams, augment, present
from .datasets import ClassIndexedDataset, OneShotSet
from .exceptions import ContractError, SamplingError, ShapeError

logger = logging.getLogger(__name__)

SOURCE_BASE = "base"
SOURCE_ONESHOT = "oneshot-synthetic"

_MAX_RESAMPLES = 1000


def batch_seed(seed: int, index: int) -> int:
    """Independent 63-bit seed for batch ``index`` of a run seeded with ``seed``."""
    state = np.random.SeedSequence([int(seed), int(index)]).generate_state(1, dtype=np.uint64)[0]
    return int(state >> np.uint64(1))


@dataclass
class TripletBatch:
    """
    ``pos1``, ``pos2`` and ``neg`` are [B, C, H, W] image stacks. For base
    triplets the indices point into the base dataset; for one-shot triplets
    they point into the OneShotSet (``pos1_index == pos2_index``).
    """
    pos1: np.ndarray
    pos2: np.ndarray
    neg: np.ndarray
    sources: List[str]
    pos_classes: np.ndarray
    neg_classes: np.ndarray
    pos1_index: np.ndarray
    pos2_index: np.ndarray
    neg_index: np.ndarray

    def __len__(self) -> int:
        return len(self.sources)

    def images(self) -> np.ndarray:
        """(pos1, pos2, neg) concatenated along the batch axis: [3B, C, H, W]."""
        return np.concatenate([self.pos1, self.pos2, self.neg])

    def oneshot_fraction(self) -> float:
        return sum(s == SOURCE_ONESHOT for s in self.sources) / len(self.sources)


@dataclass
class PairBatch:
    first: np.ndarray
    second: np.ndarray
    same_class: np.ndarray
    first_classes: np.ndarray
    second_classes: np.ndarray
    first_index: np.ndarray
    second_index: np.ndarray

    def __len__(self) -> int:
        return len(self.same_class)

    def images(self) -> np.ndarray:
        return np.concatenate([self.first, self.second])


def _eligible_classes(dataset: ClassIndexedDataset) -> None:
    if dataset.num_classes < 2:
        raise SamplingError(f"dataset {dataset.name!r} needs at least 2 classes, has {dataset.num_classes}")
    if (dataset.class_counts() < 2).all():
        raise SamplingError(f"dataset {dataset.name!r} has no class with 2 or more instances")


def _draw_positive_class(dataset: ClassIndexedDataset, rng: np.random.Generator) -> int:
    """Uniform class draw; classes with fewer than 2 instances are redrawn."""
    for _ in range(_MAX_RESAMPLES):
        c = int(rng.integers(dataset.num_classes))
        if len(dataset.class_indices(c)) >= 2:
            return c
    raise SamplingError(f"could not draw a class with 2 instances from {dataset.name!r}")


def _draw_other_class(num_classes: int, exclude: int, rng: np.random.Generator) -> int:
    c = int(rng.integers(num_classes - 1))
    return c + 1 if c >= exclude else c


def _view(image: np.ndarray, kind: str, params: AugmentParams, rng: np.random.Generator) -> np.ndarray:
    return augment(image, kind, params, int(rng.integers(2 ** 63)))


def _base_triplet(dataset: ClassIndexedDataset, rng: np.random.Generator, params: AugmentParams):
    c = _draw_positive_class(dataset, rng)
    i, j = rng.choice(dataset.class_indices(c), size=2, replace=False)
    n = _draw_other_class(dataset.num_classes, c, rng)
    k = rng.choice(dataset.class_indices(n))
    kind = dataset.augmentation
    images = tuple(_view(dataset.images[ix], kind, params, rng) for ix in (i, j, k))
    return images, SOURCE_BASE, c, n, (int(i), int(j), int(k))


def _oneshot_triplet(oneshot: OneShotSet, rng: np.random.Generator, params: AugmentParams):
    k = int(rng.integers(len(oneshot)))
    j = _draw_other_class(len(oneshot), k, rng)
    kind = oneshot.augmentation
    anchor = present(oneshot.images[k], kind, params)
    images = (anchor, _view(oneshot.images[k], kind, params, rng), present(oneshot.images[j], kind, params))
    return images, SOURCE_ONESHOT, int(oneshot.class_ids[k]), int(oneshot.class_ids[j]), (k, k, j)


def _assemble(triplets) -> TripletBatch:
    shapes = {img.shape for t in triplets for img in t[0]}
    if len(shapes) != 1:
        raise ShapeError(f"triplet images have mixed shapes {sorted(shapes)}")
    return TripletBatch(
        pos1=np.stack([t[0][0] for t in triplets]),
        pos2=np.stack([t[0][1] for t in triplets]),
        neg=np.stack([t[0][2] for t in triplets]),
        sources=[t[1] for t in triplets],
        pos_classes=np.array([t[2] for t in triplets]),
        neg_classes=np.array([t[3] for t in triplets]),
        pos1_index=np.array([t[4][0] for t in triplets]),
        pos2_index=np.array([t[4][1] for t in triplets]),
        neg_index=np.array([t[4][2] for t in triplets]),
    )


def _check_size(size: int) -> None:
    if size < 1:
        raise ContractError(f"batch size must be positive, got {size}")


def sample_triplet_batch(base: ClassIndexedDataset, size: int = 64, seed: int = 0,
                         params: Optional[AugmentParams] = None) -> TripletBatch:
    """
    ``size`` triplets: class c uniform, two distinct instances of c, a
    negative class c' != c uniform and one instance of c'. Every image passes
    through the dataset's augmentation.
    """
    _check_size(size)
    _eligible_classes(base)
    params = params or AugmentParams()
    rng = np.random.default_rng(seed)
    return _assemble([_base_triplet(base, rng, params) for _ in range(size)])


def sample_finetune_batch(base: ClassIndexedDataset, oneshot: OneShotSet, size: int = 64, seed: int = 0,
                          params: Optional[AugmentParams] = None) -> TripletBatch:
    """
    Each triplet independently: with probability 1/2 a base triplet, otherwise
    (x_k, A(x_k), x_j) with k != j drawn from the one-shot set.
    """
    _check_size(size)
    if base is None or len(base) == 0:
        raise SamplingError("fine-tuning needs a non-empty base dataset")
    if len(oneshot) < 2:
        raise SamplingError(f"fine-tuning needs at least 2 one-shot instances, got {len(oneshot)}")
    _eligible_classes(base)
    params = params or AugmentParams()
    rng = np.random.default_rng(seed)
    triplets = []
    for _ in range(size):
        if rng.random() < 0.5:
            triplets.append(_base_triplet(base, rng, params))
        else:
            triplets.append(_oneshot_triplet(oneshot, rng, params))
    return _assemble(triplets)


def sample_pair_batch(dataset: ClassIndexedDataset, size: int = 64, seed: int = 0,
                      params: Optional[AugmentParams] = None) -> PairBatch:
    """The first ceil(size/2) pairs share a class, the remaining floor(size/2) do not."""
    _check_size(size)
    _eligible_classes(dataset)
    params = params or AugmentParams()
    rng = np.random.default_rng(seed)
    kind = dataset.augmentation
    rows: List[Tuple] = []
    same = (size + 1) // 2
    for p in range(size):
        if p < same:
            c = _draw_positive_class(dataset, rng)
            a, b = rng.choice(dataset.class_indices(c), size=2, replace=False)
            classes = (c, c)
        else:
            c = int(rng.integers(dataset.num_classes))
            d = _draw_other_class(dataset.num_classes, c, rng)
            a, b = rng.choice(dataset.class_indices(c)), rng.choice(dataset.class_indices(d))
            classes = (c, d)
        rows.append((_view(dataset.images[a], kind, params, rng), _view(dataset.images[b], kind, params, rng),
                     classes, (int(a), int(b))))
    return PairBatch(
        first=np.stack([r[0] for r in rows]),
        second=np.stack([r[1] for r in rows]),
        same_class=np.array([p < same for p in range(size)]),
        first_classes=np.array([r[2][0] for r in rows]),
        second_classes=np.array([r[2][1] for r in rows]),
        first_index=np.array([r[3][0] for r in rows]),
        second_index=np.array([r[3][1] for r in rows]),
    )


class BatchPrefetcher:
    """
    Yields ``make_batch(i)`` for i in [start, stop) in index order. With
    ``workers > 0`` up to ``2 * workers`` batches are built ahead on a thread
    pool; results are identical to in-line building.
    """

    def __init__(self, make_batch: Callable[[int], object], start: int, stop: int, workers: int = 0):
        if workers < 0:
            raise ContractError(f"prefetch workers must be >= 0, got {workers}")
        self.make_batch = make_batch
        self.start = start
        self.stop = stop
        self.workers = workers

    def __iter__(self) -> Iterator[Tuple[int, object]]:
        if self.workers == 0:
            for i in range(self.start, self.stop):
                yield i, self.make_batch(i)
            return
        depth = 2 * self.workers
        with ThreadPoolExecutor(max_workers=self.workers, thread_name_prefix="batch-prefetch") as pool:
            pending = deque()
            upcoming = iter(range(self.start, self.stop))
            for i in upcoming:
                pending.append((i, pool.submit(self.make_batch, i)))
                if len(pending) >= depth:
                    break
            while pending:
                i, future = pending.popleft()
                batch = future.result()
                nxt = next(upcoming, None)
                if nxt is not None:
                    pending.append((nxt, pool.submit(self.make_batch, nxt)))
                yield i, batch
