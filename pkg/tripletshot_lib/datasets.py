"""
Class-indexed image datasets: ingestion, binary cache and splits.

Omniglot is read from its alphabet/character/image.png tree; images become
1-channel floats in [0, 1] with ink = 1 (the scans are black on white, so
they are inverted). Natural images are listed in a ``filename,label`` CSV
manifest and resized to 3x132x132.
"""
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from .augment import AUGMENTATION_KINDS
from .containers import read_container, write_container
from .exceptions import ConfigError, IngestionError, ShapeError

logger = logging.getLogger(__name__)

CACHE_MAGIC = b"TSDS"
CACHE_VERSION = 1

OMNIGLOT_IMAGES_PER_CLASS = 20
OMNIGLOT_SPLITS = ("images_background", "images_evaluation")
NATURAL_SIZE = 132
ROLES = ("base", "novel")

PathLike = Union[str, Path]


@dataclass
class ClassIndexedDataset:
    """
    Images grouped by class. ``labels[i]`` indexes ``class_names``; ``groups``
    holds one group name per class (the alphabet for Omniglot).
    """
    name: str
    images: np.ndarray
    labels: np.ndarray
    class_names: List[str]
    groups: List[str]
    role: str = "base"
    augmentation: str = "affine"
    warnings: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ShapeError(f"dataset images must be [M, C, H, W], got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ShapeError("one label per image is required")
        if len(self.groups) != len(self.class_names):
            raise ShapeError("one group per class is required")
        if self.role not in ROLES:
            raise ConfigError(f"dataset role must be one of {ROLES}, got {self.role!r}")
        if self.augmentation not in AUGMENTATION_KINDS:
            raise ConfigError(f"unknown augmentation kind {self.augmentation!r}")
        counts = np.bincount(self.labels, minlength=len(self.class_names))
        if len(counts) != len(self.class_names) or (counts == 0).any():
            raise ShapeError(f"dataset {self.name!r} has empty classes or labels outside the class table")
        self._index = [np.flatnonzero(self.labels == c) for c in range(len(self.class_names))]

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def __len__(self) -> int:
        return self.images.shape[0]

    def class_indices(self, class_id: int) -> np.ndarray:
        return self._index[class_id]

    def class_counts(self) -> np.ndarray:
        return np.array([len(ix) for ix in self._index])

    def class_id(self, class_name: str) -> int:
        try:
            return self.class_names.index(class_name)
        except ValueError:
            raise ConfigError(f"class {class_name!r} not found in dataset {self.name!r}") from None

    def subset(self, class_ids: Sequence[int], name: Optional[str] = None,
               role: Optional[str] = None) -> "ClassIndexedDataset":
        """New dataset holding the given classes, re-indexed in the given order."""
        class_ids = list(class_ids)
        picks = [self._index[c] for c in class_ids]
        rows = np.concatenate(picks) if picks else np.zeros(0, dtype=np.int64)
        labels = np.concatenate([np.full(len(ix), i) for i, ix in enumerate(picks)]) if picks else rows
        return ClassIndexedDataset(
            name=name or self.name,
            images=self.images[rows],
            labels=labels,
            class_names=[self.class_names[c] for c in class_ids],
            groups=[self.groups[c] for c in class_ids],
            role=role or self.role,
            augmentation=self.augmentation,
        )

    def merge(self, other: "ClassIndexedDataset", name: Optional[str] = None) -> "ClassIndexedDataset":
        """Union of two datasets with disjoint classes (e.g. train + validation)."""
        overlap = set(self.class_names) & set(other.class_names)
        if overlap:
            raise ConfigError(f"cannot merge datasets sharing classes: {sorted(overlap)[:5]}")
        if self.image_shape != other.image_shape:
            raise ShapeError(f"cannot merge image shapes {self.image_shape} and {other.image_shape}")
        return ClassIndexedDataset(
            name=name or f"{self.name}+{other.name}",
            images=np.concatenate([self.images, other.images]),
            labels=np.concatenate([self.labels, other.labels + self.num_classes]),
            class_names=self.class_names + other.class_names,
            groups=self.groups + other.groups,
            role=self.role,
            augmentation=self.augmentation,
        )

    def summary(self) -> str:
        c, h, w = self.image_shape
        return (f"dataset: {self.name}\nrole: {self.role}\nclasses: {self.num_classes}\n"
                f"images: {len(self)}\nshape: {c}x{h}x{w}\naugmentation: {self.augmentation}\n")


@dataclass
class OneShotSet:
    """Exactly one image per novel class."""
    images: np.ndarray
    class_ids: np.ndarray
    class_names: List[str]
    augmentation: str = "affine"

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64)
        if len(self.class_ids) != self.images.shape[0] or len(self.class_names) != len(self.class_ids):
            raise ShapeError("one-shot set needs one class id and name per image")
        if len(np.unique(self.class_ids)) != len(self.class_ids):
            raise ShapeError("one-shot set must hold exactly one instance per class")

    def __len__(self) -> int:
        return len(self.class_ids)


def assert_disjoint(base: ClassIndexedDataset, novel: ClassIndexedDataset) -> None:
    shared = set(base.class_names) & set(novel.class_names)
    if shared:
        raise ConfigError(f"base and novel datasets share {len(shared)} classes, e.g. {sorted(shared)[0]}")


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------

def load_omniglot_image(path: Path, resize: Optional[int] = None) -> np.ndarray:
    """One Omniglot scan as a [1, H, W] float array with ink = 1."""
    try:
        with Image.open(path) as img:
            ink = 1.0 - np.asarray(img.convert("L"), dtype=np.float32) / 255.0
    except (OSError, UnidentifiedImageError) as e:
        raise IngestionError("cannot read image", str(path)) from e
    if resize is not None and ink.shape != (resize, resize):
        ink = np.asarray(Image.fromarray(ink).resize((resize, resize), Image.Resampling.BILINEAR), dtype=np.float32)
    return np.clip(ink, 0.0, 1.0)[None]


def _ingest_omniglot_split(split_dir: Path, role: str, resize: Optional[int]) -> ClassIndexedDataset:
    if not split_dir.is_dir():
        raise IngestionError("missing Omniglot split directory", str(split_dir))
    images, labels, class_names, groups, warnings = [], [], [], [], []
    for alphabet in sorted(p for p in split_dir.iterdir() if p.is_dir()):
        for character in sorted(p for p in alphabet.iterdir() if p.is_dir()):
            files = sorted(character.glob("*.png"))
            if not files:
                raise IngestionError("character directory holds no images", str(character))
            class_id = len(class_names)
            class_names.append(f"{alphabet.name}/{character.name}")
            groups.append(alphabet.name)
            if len(files) != OMNIGLOT_IMAGES_PER_CLASS:
                message = f"{alphabet.name}/{character.name} has {len(files)} images, expected {OMNIGLOT_IMAGES_PER_CLASS}"
                logger.warning(message)
                warnings.append(message)
            for path in files:
                images.append(load_omniglot_image(path, resize))
                labels.append(class_id)
    if not class_names:
        raise IngestionError("no alphabets found", str(split_dir))
    shapes = {img.shape for img in images}
    if len(shapes) != 1:
        raise IngestionError(f"images have mixed shapes {sorted(shapes)}; pass a resize", str(split_dir))
    logger.info(f"ingested {split_dir.name}: {len(class_names)} classes, {len(images)} images")
    return ClassIndexedDataset(
        name=f"omniglot-{split_dir.name.replace('images_', '')}",
        images=np.stack(images),
        labels=np.array(labels),
        class_names=class_names,
        groups=groups,
        role=role,
        augmentation="affine",
        warnings=warnings,
    )


def ingest_omniglot(root: PathLike, resize: Optional[int] = None) -> Tuple[ClassIndexedDataset, ClassIndexedDataset]:
    """(background, evaluation) datasets from an Omniglot root holding both split directories."""
    root = Path(root)
    if not root.is_dir():
        raise IngestionError("Omniglot root does not exist", str(root))
    background = _ingest_omniglot_split(root / OMNIGLOT_SPLITS[0], "base", resize)
    evaluation = _ingest_omniglot_split(root / OMNIGLOT_SPLITS[1], "novel", resize)
    return background, evaluation


def load_natural_image(path: Path, size: int = NATURAL_SIZE) -> np.ndarray:
    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB").resize((size, size), Image.Resampling.BILINEAR)
            array = np.asarray(rgb, dtype=np.float32) / 255.0
    except (OSError, UnidentifiedImageError) as e:
        raise IngestionError("cannot decode image", str(path)) from e
    return np.ascontiguousarray(array.transpose(2, 0, 1))


def read_manifest(manifest: PathLike) -> List[Tuple[str, str]]:
    manifest = Path(manifest)
    try:
        with manifest.open(newline="") as handle:
            reader = csv.DictReader(handle)
            if reader.fieldnames is None or not {"filename", "label"} <= set(reader.fieldnames):
                raise IngestionError("manifest needs 'filename' and 'label' columns", str(manifest))
            return [(row["filename"], row["label"]) for row in reader]
    except OSError as e:
        raise IngestionError("cannot read manifest", str(manifest)) from e


def ingest_natural(root: PathLike, manifest: PathLike, role: str = "base", name: Optional[str] = None,
                   size: int = NATURAL_SIZE) -> ClassIndexedDataset:
    """Decode, bilinear-resize to 3 x size x size and group by manifest label."""
    root = Path(root)
    if not root.is_dir():
        raise IngestionError("image root does not exist", str(root))
    entries = read_manifest(manifest)
    if not entries:
        raise IngestionError("manifest lists no images", str(manifest))
    class_names = sorted({label for _, label in entries})
    lookup = {label: i for i, label in enumerate(class_names)}
    images, labels = [], []
    for filename, label in entries:
        path = root / filename
        if not path.exists() and (root / "images" / filename).exists():
            path = root / "images" / filename
        if not path.exists():
            raise IngestionError("missing image", str(path))
        images.append(load_natural_image(path, size))
        labels.append(lookup[label])
    logger.info(f"ingested {manifest}: {len(class_names)} classes, {len(images)} images")
    return ClassIndexedDataset(
        name=name or Path(manifest).stem,
        images=np.stack(images),
        labels=np.array(labels),
        class_names=class_names,
        groups=list(class_names),
        role=role,
        augmentation="natural",
    )


# ---------------------------------------------------------------------------
# Binary cache
# ---------------------------------------------------------------------------

def save_dataset_cache(dataset: ClassIndexedDataset, path: PathLike) -> Path:
    header = {
        "name": dataset.name,
        "role": dataset.role,
        "augmentation": dataset.augmentation,
        "image_shape": list(dataset.image_shape),
        "classes": [{"name": n, "group": g, "count": int(c)}
                    for n, g, c in zip(dataset.class_names, dataset.groups, dataset.class_counts())],
        "warnings": list(dataset.warnings),
    }
    return write_container(path, CACHE_MAGIC, CACHE_VERSION, header,
                           {"images": dataset.images, "labels": dataset.labels})


def load_dataset_cache(path: PathLike) -> ClassIndexedDataset:
    header, arrays = read_container(path, CACHE_MAGIC, (CACHE_VERSION,))
    dataset = ClassIndexedDataset(
        name=header["name"],
        images=arrays["images"],
        labels=arrays["labels"],
        class_names=[c["name"] for c in header["classes"]],
        groups=[c["group"] for c in header["classes"]],
        role=header["role"],
        augmentation=header["augmentation"],
        warnings=header.get("warnings", []),
    )
    if list(dataset.image_shape) != header["image_shape"]:
        raise IngestionError("cache header shape disagrees with its payload", str(path))
    return dataset


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------

SPLIT_KINDS = ("none", "groups", "classes", "one_shot")


@dataclass(frozen=True)
class SplitSpec:
    """
    ``groups``/``classes`` partition by group (alphabet) or by class, either
    by ``counts`` after a seeded shuffle or by explicit ``parts`` (lists of
    group or class names). ``one_shot`` moves one image per class into a
    OneShotSet and leaves the rest as the test pool.
    """
    kind: str = "none"
    counts: Tuple[int, ...] = ()
    parts: Tuple[Tuple[str, ...], ...] = ()
    seed: Optional[int] = None

    def __post_init__(self):
        if self.kind not in SPLIT_KINDS:
            raise ConfigError(f"split.kind must be one of {SPLIT_KINDS}, got {self.kind!r}")
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))
        object.__setattr__(self, "parts", tuple(tuple(p) for p in self.parts))
        if self.counts and self.parts:
            raise ConfigError("split takes either counts or parts, not both")
        if any(c < 1 for c in self.counts):
            raise ConfigError("split.counts must be positive")


def _partition(keys: List[str], spec: SplitSpec) -> List[List[str]]:
    if spec.parts:
        seen: Dict[str, int] = {}
        for i, part in enumerate(spec.parts):
            for key in part:
                if key in seen:
                    raise ConfigError(f"split parts overlap: {key!r} appears in parts {seen[key]} and {i}")
                if key not in keys:
                    raise ConfigError(f"split names unknown {spec.kind[:-1]} {key!r}")
                seen[key] = i
        return [list(part) for part in spec.parts]
    if not spec.counts:
        raise ConfigError(f"split kind {spec.kind!r} needs counts or parts")
    if sum(spec.counts) > len(keys):
        raise ConfigError(f"split counts {spec.counts} exceed the {len(keys)} available {spec.kind}")
    order = [keys[i] for i in np.random.default_rng(spec.seed).permutation(len(keys))]
    parts, start = [], 0
    for count in spec.counts:
        parts.append(sorted(order[start:start + count]))
        start += count
    return parts


def split_one_shot(dataset: ClassIndexedDataset, seed: Optional[int]) -> Tuple[OneShotSet, ClassIndexedDataset]:
    """One random image per class into a OneShotSet; all remaining images form the test pool."""
    rng = np.random.default_rng(seed)
    shots, rest = [], []
    for c in range(dataset.num_classes):
        idx = dataset.class_indices(c)
        if len(idx) < 2:
            raise ConfigError(f"class {dataset.class_names[c]!r} needs at least 2 images for a one-shot split")
        pick = int(rng.integers(len(idx)))
        shots.append(idx[pick])
        rest.append(np.delete(idx, pick))
    rows = np.concatenate(rest)
    oneshot = OneShotSet(dataset.images[shots], np.arange(dataset.num_classes), list(dataset.class_names),
                         augmentation=dataset.augmentation)
    pool = ClassIndexedDataset(
        name=f"{dataset.name}-test",
        images=dataset.images[rows],
        labels=dataset.labels[rows],
        class_names=list(dataset.class_names),
        groups=list(dataset.groups),
        role="novel",
        augmentation=dataset.augmentation,
    )
    return oneshot, pool


def make_splits(dataset: ClassIndexedDataset, spec: SplitSpec) -> tuple:
    """
    Deterministic class-level partition. ``groups``/``classes`` return one
    dataset per part (e.g. (train, validation)); ``one_shot`` returns
    (OneShotSet, test pool); ``none`` returns (dataset,).
    """
    if spec.kind == "none":
        return (dataset,)
    if spec.kind == "one_shot":
        return split_one_shot(dataset, spec.seed)
    if spec.kind == "groups":
        keys = sorted(set(dataset.groups))
        parts = _partition(keys, spec)
        return tuple(
            dataset.subset([c for c in range(dataset.num_classes) if dataset.groups[c] in set(part)],
                           name=f"{dataset.name}-part{i + 1}")
            for i, part in enumerate(parts)
        )
    keys = list(dataset.class_names)
    parts = _partition(keys, spec)
    return tuple(
        dataset.subset([dataset.class_id(name) for name in sorted(part)], name=f"{dataset.name}-part{i + 1}")
        for i, part in enumerate(parts)
    )
