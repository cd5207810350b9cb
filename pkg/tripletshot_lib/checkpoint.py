"""
Checkpoint files (``.ckpt``): architecture, iteration, parameters, BN running
statistics, Adam moments and, for the pairwise baseline, the Siamese head.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np

from .autodiff import BatchNormState, Tensor
from .containers import read_container, write_container
from .exceptions import IngestionError, ShapeError
from .losses import SiameseHead
from .network import ArchConfig, EmbeddingModel
from .optim import AdamState

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"TSCK"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    model: EmbeddingModel
    iteration: int = 0
    adam: Optional[AdamState] = None
    head: Optional[SiameseHead] = None

    @property
    def arch(self) -> ArchConfig:
        return self.model.arch


def save_checkpoint(path: Union[str, Path], checkpoint: Checkpoint) -> Path:
    model = checkpoint.model
    arrays: Dict[str, np.ndarray] = {}
    for name, p in model.parameters.items():
        arrays[f"param/{name}"] = p.data
    for layer, state in model.bn_state.items():
        arrays[f"bn/{layer}/running_mean"] = state.running_mean
        arrays[f"bn/{layer}/running_var"] = state.running_var
    header = {"arch": model.arch.to_dict(), "iteration": int(checkpoint.iteration)}
    if checkpoint.adam is not None:
        adam = checkpoint.adam
        header["adam"] = {"t": adam.t, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps,
                          "names": list(adam.m)}
        for name in adam.m:
            arrays[f"adam/m/{name}"] = adam.m[name]
            arrays[f"adam/v/{name}"] = adam.v[name]
    if checkpoint.head is not None:
        header["siamese_head"] = True
        arrays["siamese/weight"] = checkpoint.head.weight.data
        arrays["siamese/bias"] = checkpoint.head.bias.data
    path = write_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, header, arrays)
    logger.debug(f"saved checkpoint {path} at iteration {checkpoint.iteration}")
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    header, arrays = read_container(path, CHECKPOINT_MAGIC, (CHECKPOINT_VERSION,))
    arch = ArchConfig.from_dict(header["arch"])
    try:
        parameters = {name: Tensor(arrays[f"param/{name}"], requires_grad=True, name=name)
                      for name in arch.parameter_shapes()}
        bn_state = {layer: BatchNormState(arrays[f"bn/{layer}/running_mean"], arrays[f"bn/{layer}/running_var"])
                    for layer in (arch.layer_names() if arch.batch_norm else [])}
    except KeyError as e:
        raise IngestionError(f"checkpoint is missing tensor {e.args[0]}", str(path)) from None
    try:
        model = EmbeddingModel(arch, parameters, bn_state)
    except ShapeError as e:
        raise IngestionError(f"checkpoint tensors do not fit its architecture ({e})", str(path)) from None

    adam = None
    if "adam" in header:
        meta = header["adam"]
        names = meta.get("names", list(parameters))
        adam = AdamState(
            m={name: arrays[f"adam/m/{name}"] for name in names},
            v={name: arrays[f"adam/v/{name}"] for name in names},
            t=int(meta["t"]), beta1=meta["beta1"], beta2=meta["beta2"], eps=meta["eps"],
        )
    head = None
    if header.get("siamese_head"):
        head = SiameseHead(Tensor(arrays["siamese/weight"], requires_grad=True, name="siamese.weight"),
                           Tensor(arrays["siamese/bias"], requires_grad=True, name="siamese.bias"))
    if adam is not None:
        adam.check_shapes({**parameters, **(head.parameters() if head else {})})
    return Checkpoint(model=model, iteration=int(header["iteration"]), adam=adam, head=head)
