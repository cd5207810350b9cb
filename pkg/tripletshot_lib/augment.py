"""
Image transformations used to generate A(x).

Handwritten characters get a random affine map (shear, rotation, scale,
translation about the image center, bilinear resampling, background 0).
Natural images get a random crop, an optional horizontal flip and a contrast
change about the image mean.
"""
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage

from .exceptions import ConfigError, ShapeError

AUGMENTATION_KINDS = ("affine", "natural", "none")


@dataclass(frozen=True)
class AugmentParams:
    shear_x: Tuple[float, float] = (-0.3, 0.3)
    shear_y: Tuple[float, float] = (-0.3, 0.3)
    rotation_deg: Tuple[float, float] = (-15.0, 15.0)
    scale: Tuple[float, float] = (0.8, 1.2)
    translate_frac: Tuple[float, float] = (-0.1, 0.1)
    crop_size: int = 105
    flip_prob: float = 0.5
    contrast: Tuple[float, float] = (0.7, 1.3)

    def __post_init__(self):
        for name in ("shear_x", "shear_y", "rotation_deg", "scale", "translate_frac", "contrast"):
            low, high = getattr(self, name)
            if low > high:
                raise ConfigError(f"augment.{name} range is empty: ({low}, {high})")
            object.__setattr__(self, name, (float(low), float(high)))
        if self.scale[0] <= 0 or self.contrast[0] < 0:
            raise ConfigError("augment.scale must be positive and augment.contrast non-negative")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError(f"augment.flip_prob must lie in [0, 1], got {self.flip_prob}")
        if self.crop_size < 1:
            raise ConfigError("augment.crop_size must be positive")


@dataclass(frozen=True)
class AffineSample:
    shear_x: float = 0.0
    shear_y: float = 0.0
    rotation_deg: float = 0.0
    scale: float = 1.0
    translate_x: float = 0.0  # pixels, along columns
    translate_y: float = 0.0  # pixels, along rows


@dataclass(frozen=True)
class NaturalSample:
    top: int
    left: int
    flip: bool
    contrast: float


def sample_affine(params: AugmentParams, rng: np.random.Generator, shape: Tuple[int, int]) -> AffineSample:
    h, w = shape
    return AffineSample(
        shear_x=rng.uniform(*params.shear_x),
        shear_y=rng.uniform(*params.shear_y),
        rotation_deg=rng.uniform(*params.rotation_deg),
        scale=rng.uniform(*params.scale),
        translate_x=rng.uniform(*params.translate_frac) * w,
        translate_y=rng.uniform(*params.translate_frac) * h,
    )


def affine_matrix(sample: AffineSample) -> np.ndarray:
    """Forward 2x2 map in (row, col) coordinates: scale . rotate . shear."""
    theta = np.deg2rad(sample.rotation_deg)
    # (x, y) = (col, row)
    shear = np.array([[1.0, sample.shear_x], [sample.shear_y, 1.0]])
    rotate = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    forward_xy = sample.scale * rotate @ shear
    swap = np.array([[0.0, 1.0], [1.0, 0.0]])
    return swap @ forward_xy @ swap


def apply_affine(image: np.ndarray, sample: AffineSample) -> np.ndarray:
    """Apply one affine sample to a [1, H, W] image; output pixels outside the source are 0."""
    if image.ndim != 3 or image.shape[0] != 1:
        raise ShapeError(f"affine augmentation expects a 1-channel [1, H, W] image, got {image.shape}")
    _, h, w = image.shape
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    shift = np.array([sample.translate_y, sample.translate_x])
    inverse = np.linalg.inv(affine_matrix(sample))
    # ndimage maps output coordinates o to input coordinates inverse @ o + offset
    offset = center - inverse @ (center + shift)
    out = ndimage.affine_transform(image[0].astype(np.float64), inverse, offset=offset,
                                   order=1, mode="constant", cval=0.0)
    return np.clip(out, 0.0, 1.0).astype(image.dtype)[None]


def affine_augment(image: np.ndarray, params: AugmentParams, seed) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return apply_affine(image, sample_affine(params, rng, image.shape[1:]))


def sample_natural(params: AugmentParams, rng: np.random.Generator, shape: Tuple[int, int]) -> NaturalSample:
    h, w = shape
    crop = params.crop_size
    if h < crop or w < crop:
        raise ShapeError(f"image {h}x{w} is smaller than the {crop}x{crop} crop")
    return NaturalSample(
        top=int(rng.integers(0, h - crop + 1)),
        left=int(rng.integers(0, w - crop + 1)),
        flip=bool(rng.random() < params.flip_prob),
        contrast=float(rng.uniform(*params.contrast)),
    )


def apply_natural(image: np.ndarray, sample: NaturalSample, crop: int) -> np.ndarray:
    if image.ndim != 3:
        raise ShapeError(f"natural augmentation expects [C, H, W], got {image.shape}")
    _, h, w = image.shape
    if h < crop or w < crop:
        raise ShapeError(f"image {h}x{w} is smaller than the {crop}x{crop} crop")
    out = image[:, sample.top:sample.top + crop, sample.left:sample.left + crop]
    if sample.flip:
        out = out[:, :, ::-1]
    if sample.contrast != 1.0:
        center = out.mean()
        out = np.clip((out - center) * sample.contrast + center, 0.0, 1.0)
    return np.ascontiguousarray(out, dtype=image.dtype)


def natural_augment(image: np.ndarray, seed, params: Optional[AugmentParams] = None) -> np.ndarray:
    params = params or AugmentParams()
    rng = np.random.default_rng(seed)
    return apply_natural(image, sample_natural(params, rng, image.shape[1:]), params.crop_size)


def center_crop(image: np.ndarray, size: int) -> np.ndarray:
    """Central size x size window of [C, H, W] (or a batch [N, C, H, W])."""
    h, w = image.shape[-2:]
    if h < size or w < size:
        raise ShapeError(f"image {h}x{w} is smaller than the {size}x{size} crop")
    top, left = (h - size) // 2, (w - size) // 2
    return np.ascontiguousarray(image[..., top:top + size, left:left + size])


def augment(image: np.ndarray, kind: str, params: AugmentParams, seed) -> np.ndarray:
    """Dataset-appropriate A(x)."""
    if kind == "affine":
        return affine_augment(image, params, seed)
    if kind == "natural":
        return natural_augment(image, seed, params)
    if kind == "none":
        return image
    raise ConfigError(f"unknown augmentation kind {kind!r}; choose from {AUGMENTATION_KINDS}")


def present(image: np.ndarray, kind: str, params: AugmentParams) -> np.ndarray:
    """Unaugmented view of an image at network resolution."""
    if kind == "natural":
        return center_crop(image, params.crop_size)
    return image
