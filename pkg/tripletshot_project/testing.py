"""
Synthetic datasets and image trees for the test suites.
"""
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from tripletshot_lib.datasets import ClassIndexedDataset, save_dataset_cache
from tripletshot_lib.network import ArchConfig

TINY_ARCH = {'input_shape': [1, 8, 8], 'blocks': [[1, 4], [1, 8]], 'embedding_dim': 8}


def tiny_arch(size: int = 8, channels: int = 1, dtype: str = 'float32', batch_norm: bool = True) -> ArchConfig:
    return ArchConfig(input_shape=(channels, size, size), blocks=((1, 4), (1, 8)), embedding_dim=8,
                      batch_norm=batch_norm, dtype=dtype)


def class_pattern(class_id: int, size: int) -> np.ndarray:
    """A bright bar whose position and orientation depend on the class."""
    image = np.zeros((size, size), dtype=np.float32)
    line = class_id % size
    if (class_id // size) % 2 == 0:
        image[line, :] = 1.0
    else:
        image[:, line] = 1.0
    return image


def synthetic_dataset(num_classes: int = 5, per_class: int = 4, size: int = 8, channels: int = 1,
                      seed: int = 0, name: str = 'toy', role: str = 'base', augmentation: str = 'none',
                      prefix: str = 'class', noise: float = 0.05) -> ClassIndexedDataset:
    """Separable toy classes: one pattern per class plus a little noise."""
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for c in range(num_classes):
        pattern = class_pattern(c, size)
        for _ in range(per_class):
            noisy = np.clip(pattern + noise * rng.random((size, size)), 0.0, 1.0)
            images.append(np.repeat(noisy[None], channels, axis=0))
            labels.append(c)
    return ClassIndexedDataset(
        name=name,
        images=np.stack(images),
        labels=np.array(labels),
        class_names=[f'{prefix}{c:02d}' for c in range(num_classes)],
        groups=[f'group{c % 2}' for c in range(num_classes)],
        role=role,
        augmentation=augmentation,
    )


def write_png(path: Path, ink: np.ndarray) -> None:
    """Save an ink-is-1 array as a black-on-white PNG like the Omniglot scans."""
    path.parent.mkdir(parents=True, exist_ok=True)
    pixels = np.round((1.0 - ink) * 255).astype(np.uint8)
    Image.fromarray(pixels).save(path)


def write_omniglot_tree(root: Path, alphabets=2, characters=3, drawings=20, size=12, seed=0) -> Path:
    """images_background and images_evaluation trees with distinct characters."""
    rng = np.random.default_rng(seed)
    class_id = 0
    for split in ('images_background', 'images_evaluation'):
        for a in range(alphabets):
            for k in range(characters):
                pattern = class_pattern(class_id, size)
                class_id += 1
                for d in range(drawings):
                    ink = (pattern + (rng.random((size, size)) < 0.05)).clip(0, 1)
                    write_png(root / split / f'Alphabet_{a}' / f'character{k + 1:02d}' / f'{k + 1:02d}{d + 1:02d}.png', ink)
    return root


def write_omniglot_runs(root: Path, runs=2, way=4, size=12, seed=0) -> Path:
    """runNN directories in the fixed-subset layout: training/, test/ and class_labels.txt."""
    rng = np.random.default_rng(seed)
    for r in range(1, runs + 1):
        run_dir = root / f'run{r:02d}'
        lines = []
        order = rng.permutation(way)
        for c in range(way):
            pattern = class_pattern(c, size)
            write_png(run_dir / 'training' / f'class{c + 1:02d}.png', pattern)
            write_png(run_dir / 'test' / f'item{c + 1:02d}.png', pattern)
        for c in order:
            lines.append(f'run{r:02d}/test/item{c + 1:02d}.png run{r:02d}/training/class{c + 1:02d}.png')
        (run_dir / 'class_labels.txt').write_text('\n'.join(lines) + '\n')
    return root


def write_natural_tree(root: Path, classes=3, per_class=3, size=20, seed=0) -> Path:
    """RGB images plus a filename,label manifest."""
    rng = np.random.default_rng(seed)
    rows = ['filename,label']
    for c in range(classes):
        for i in range(per_class):
            pixels = (rng.random((size, size, 3)) * 255).astype(np.uint8)
            name = f'n{c:02d}_{i:02d}.png'
            path = root / 'images' / name
            path.parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray(pixels).save(path)
            rows.append(f'{name},n{c:02d}')
    (root / 'manifest.csv').write_text('\n'.join(rows) + '\n')
    return root


def write_cache(directory: Path, dataset: ClassIndexedDataset) -> str:
    return str(save_dataset_cache(dataset, Path(directory) / f'{dataset.name}.tsds'))


def write_config(path: Path, **sections) -> str:
    """A run configuration using the tiny architecture unless ``arch`` is given."""
    sections.setdefault('arch', dict(TINY_ARCH))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(sections, sort_keys=True))
    return str(path)
