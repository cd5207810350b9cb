"""
The block-structured embedding CNN.

Each block is ``num_conv_layers`` repetitions of conv(3x3) -> BN -> ReLU with
``num_filters`` filters; blocks are separated by ceil-mode 2x2 max pooling
(no pool after the last block). The last block's output is flattened and
mapped by a fully connected layer followed by ReLU to the embedding.

Conv layers are named ``conv-{block}-{index}`` (1-based) and the embedding
layer ``fc-1``.
"""
import logging
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Tuple, Union

import numpy as np

from .autodiff import (
    BatchNormState,
    Tensor,
    batchnorm,
    conv2d,
    flatten,
    fully_connected,
    maxpool2d_ceil,
    no_tape,
    pooled_extent,
    relu,
)
from .exceptions import ConfigError, ShapeError

logger = logging.getLogger(__name__)

EMBEDDING_LAYER = "fc-1"

PRESETS = {
    "paper": {
        "input_shape": (1, 105, 105),
        "blocks": ((2, 64), (2, 128), (3, 256), (3, 512)),
        "embedding_dim": 1024,
    },
    "small": {
        "input_shape": (1, 28, 28),
        "blocks": ((1, 16), (1, 32), (2, 64), (2, 128)),
        "embedding_dim": 128,
    },
}
PRESETS["full"] = PRESETS["paper"]


@dataclass(frozen=True)
class ArchConfig:
    """Shape of the embedding network. ``preset`` only records where the values came from."""
    input_shape: Tuple[int, int, int] = PRESETS["small"]["input_shape"]
    blocks: Tuple[Tuple[int, int], ...] = PRESETS["small"]["blocks"]
    embedding_dim: int = PRESETS["small"]["embedding_dim"]
    batch_norm: bool = True
    dtype: str = "float32"
    preset: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "blocks", tuple((int(n), int(k)) for n, k in self.blocks))
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError(f"arch.input_shape must be (channels, height, width) of positive ints, got {self.input_shape}")
        if not self.blocks:
            raise ConfigError("arch.blocks needs at least one block")
        for i, (layers, filters) in enumerate(self.blocks, start=1):
            if layers < 1 or filters < 1:
                raise ConfigError(f"arch.blocks[{i}] needs >= 1 conv layer and >= 1 filter, got ({layers}, {filters})")
        if self.embedding_dim < 1:
            raise ConfigError("arch.embedding_dim must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"arch.dtype must be float32 or float64, got {self.dtype!r}")

    @classmethod
    def from_preset(cls, name: str, channels: Optional[int] = None, **overrides) -> "ArchConfig":
        if name not in PRESETS:
            raise ConfigError(f"unknown arch preset {name!r}; choose from {sorted(PRESETS)}")
        values = dict(PRESETS[name])
        if channels is not None:
            values["input_shape"] = (channels,) + tuple(values["input_shape"][1:])
        values.update(overrides)
        return cls(preset=name, **values)

    @classmethod
    def from_dict(cls, raw: Mapping) -> "ArchConfig":
        raw = dict(raw or {})
        name = raw.pop("preset", None)
        if name is None:
            return cls(preset=None, **raw)
        return cls.from_preset(name, **raw)

    def to_dict(self) -> Dict:
        values = asdict(self)
        values["input_shape"] = list(self.input_shape)
        values["blocks"] = [list(b) for b in self.blocks]
        return values

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def spatial_chain(self) -> List[Tuple[int, int]]:
        """(height, width) seen by each block, input first."""
        _, h, w = self.input_shape
        chain = [(h, w)]
        for _ in self.blocks[:-1]:
            h, w = pooled_extent(h), pooled_extent(w)
            chain.append((h, w))
        return chain

    def feature_shape(self) -> Tuple[int, int, int]:
        """(channels, height, width) of the last block's output, before flattening."""
        h, w = self.spatial_chain()[-1]
        return self.blocks[-1][1], h, w

    def layer_names(self) -> List[str]:
        return [f"conv-{b}-{i}" for b, (layers, _) in enumerate(self.blocks, start=1) for i in range(1, layers + 1)]

    def layer_channels(self) -> Dict[str, int]:
        channels = {}
        for b, (layers, filters) in enumerate(self.blocks, start=1):
            for i in range(1, layers + 1):
                channels[f"conv-{b}-{i}"] = filters
        channels[EMBEDDING_LAYER] = self.embedding_dim
        return channels

    def parameter_shapes(self) -> Dict[str, Tuple[int, ...]]:
        shapes: Dict[str, Tuple[int, ...]] = {}
        in_channels = self.input_shape[0]
        for b, (layers, filters) in enumerate(self.blocks, start=1):
            for i in range(1, layers + 1):
                name = f"conv-{b}-{i}"
                shapes[f"{name}.weight"] = (filters, in_channels, 3, 3)
                shapes[f"{name}.bias"] = (filters,)
                if self.batch_norm:
                    shapes[f"{name}.bn.gamma"] = (filters,)
                    shapes[f"{name}.bn.beta"] = (filters,)
                in_channels = filters
        flat = int(np.prod(self.feature_shape()))
        shapes[f"{EMBEDDING_LAYER}.weight"] = (flat, self.embedding_dim)
        shapes[f"{EMBEDDING_LAYER}.bias"] = (self.embedding_dim,)
        return shapes

    def parameter_count(self) -> int:
        return sum(int(np.prod(shape)) for shape in self.parameter_shapes().values())


def fan_in(name: str, shape: Tuple[int, ...]) -> int:
    """Number of input connections of one unit of a weight tensor."""
    if name.endswith(".weight") and len(shape) == 4:
        return shape[1] * shape[2] * shape[3]
    if name.endswith(".weight") and len(shape) == 2:
        return shape[0]
    raise ValueError(f"{name} is not a weight tensor")


class EmbeddingModel:
    """f_phi: parameters, BN running statistics and the forward pass."""

    def __init__(self, arch: ArchConfig, parameters: Dict[str, Tensor],
                 bn_state: Dict[str, BatchNormState]):
        expected = arch.parameter_shapes()
        if list(parameters) != list(expected):
            raise ShapeError("parameter names do not match the architecture")
        for name, shape in expected.items():
            if parameters[name].shape != shape:
                raise ShapeError(f"{name} has shape {parameters[name].shape}, architecture expects {shape}")
        self.arch = arch
        self.parameters = parameters
        self.bn_state = bn_state
        self.layer_registry = arch.layer_names()

    def named_parameters(self) -> Dict[str, Tensor]:
        return self.parameters

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters.values())

    def zero_grad(self) -> None:
        for p in self.parameters.values():
            p.zero_grad()

    def check_input(self, images: Tensor) -> None:
        if images.ndim != 4 or tuple(images.shape[1:]) != self.arch.input_shape:
            raise ShapeError(f"model expects images of shape [B, {', '.join(map(str, self.arch.input_shape))}], got {list(images.shape)}")

    def forward(self, images: Tensor, mode: str = "train",
                capture: Iterable[str] = ()) -> Tuple[Tensor, Dict[str, Tensor]]:
        """Run the network; returns the embedding and the outputs of the requested conv layers."""
        self.check_input(images)
        wanted = set(capture)
        captured: Dict[str, Tensor] = {}
        p = self.parameters
        h = images
        for b, (layers, _) in enumerate(self.arch.blocks, start=1):
            if b > 1:
                h = maxpool2d_ceil(h)
            for i in range(1, layers + 1):
                name = f"conv-{b}-{i}"
                h = conv2d(h, p[f"{name}.weight"], p[f"{name}.bias"], padding=1)
                if self.arch.batch_norm:
                    h = batchnorm(h, p[f"{name}.bn.gamma"], p[f"{name}.bn.beta"], self.bn_state[name], mode=mode)
                h = relu(h)
                if name in wanted:
                    captured[name] = h
        h = fully_connected(flatten(h), p[f"{EMBEDDING_LAYER}.weight"], p[f"{EMBEDDING_LAYER}.bias"])
        return relu(h), captured


def build_network(arch: ArchConfig) -> EmbeddingModel:
    """Allocate every parameter for ``arch``: weights and biases 0, BN gamma 1 and beta 0."""
    dtype = arch.np_dtype
    h, w = arch.spatial_chain()[-1]
    if h < 1 or w < 1:
        raise ConfigError(f"spatial extent collapses to {h}x{w}")
    parameters: Dict[str, Tensor] = {}
    for name, shape in arch.parameter_shapes().items():
        fill = 1.0 if name.endswith(".bn.gamma") else 0.0
        parameters[name] = Tensor(np.full(shape, fill, dtype=dtype), requires_grad=True, name=name)
    bn_state = {}
    if arch.batch_norm:
        for name, channels in arch.layer_channels().items():
            if name != EMBEDDING_LAYER:
                bn_state[name] = BatchNormState.for_channels(channels, dtype=dtype)
    model = EmbeddingModel(arch, parameters, bn_state)
    logger.debug(f"built network with {model.parameter_count()} parameters, layers {model.layer_registry}")
    return model


def he_init(model: EmbeddingModel, seed: int) -> EmbeddingModel:
    """Weights ~ N(0, sqrt(2 / fan_in)); biases 0; BN gamma 1, beta 0. Deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    for name, param in model.parameters.items():
        if name.endswith(".weight"):
            std = np.sqrt(2.0 / fan_in(name, param.shape))
            param.data[...] = rng.normal(0.0, std, size=param.shape)
        elif name.endswith(".bn.gamma"):
            param.data[...] = 1.0
        else:
            param.data[...] = 0.0
        param.zero_grad()
    for state in model.bn_state.values():
        state.running_mean[...] = 0.0
        state.running_var[...] = 1.0
    return model


def _as_batch(model: EmbeddingModel, images: Union[Tensor, np.ndarray]) -> Tensor:
    if isinstance(images, Tensor):
        return images
    return Tensor(np.asarray(images, dtype=model.arch.np_dtype))


def embed(model: EmbeddingModel, images: Union[Tensor, np.ndarray], mode: str = "eval") -> Tensor:
    """
    Embed a batch [B, C, H, W] -> [B, embedding_dim]. Train mode uses batch
    statistics and records onto the active tape; eval mode records nothing.
    """
    batch = _as_batch(model, images)
    if mode == "eval":
        with no_tape():
            out, _ = model.forward(batch, mode="eval")
        return out
    out, _ = model.forward(batch, mode=mode)
    return out


def spatial_max(feature_map: np.ndarray) -> np.ndarray:
    """Per-channel maximum over the spatial axes: [B, C, H, W] -> [B, C]."""
    return feature_map.reshape(feature_map.shape[0], feature_map.shape[1], -1).max(axis=2)


def layer_features(model: EmbeddingModel, images: Union[Tensor, np.ndarray], layer: str) -> np.ndarray:
    """
    Eval-mode features of one layer. Conv layers give the per-channel spatial
    maximum of the layer's output; ``fc-1`` gives the embedding. A single
    image [C, H, W] yields a vector, a batch yields [B, channels].
    """
    if layer != EMBEDDING_LAYER and layer not in model.layer_registry:
        raise ConfigError(f"unknown layer {layer!r}; known layers: {', '.join(model.layer_registry + [EMBEDDING_LAYER])}")
    array = images.data if isinstance(images, Tensor) else np.asarray(images)
    single = array.ndim == 3
    batch = _as_batch(model, array[None] if single else array)
    with no_tape():
        embedding, captured = model.forward(batch, mode="eval", capture=() if layer == EMBEDDING_LAYER else (layer,))
    features = embedding.data if layer == EMBEDDING_LAYER else spatial_max(captured[layer].data)
    return features[0] if single else features


def copy_model(model: EmbeddingModel) -> EmbeddingModel:
    parameters = {name: Tensor(p.data.copy(), requires_grad=True, name=name) for name, p in model.parameters.items()}
    bn_state = {name: BatchNormState(s.running_mean.copy(), s.running_var.copy()) for name, s in model.bn_state.items()}
    return EmbeddingModel(model.arch, parameters, bn_state)
