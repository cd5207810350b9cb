"""
Training loops: triplet pre-training on base classes, one-shot fine-tuning
and the pairwise (Siamese) baseline.

Step ``i`` (0-based) samples its batch with ``batch_seed(seed, i)`` and uses
learning rate ``lr_schedule(offset + i)``. A checkpoint stores the number of
completed steps, so resuming from it replays exactly the steps an
uninterrupted run would have taken.
"""
import csv
import io
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .augment import AugmentParams, present
from .autodiff import Tape, Tensor, backward
from .checkpoint import Checkpoint, save_checkpoint
from .containers import atomic_write_text
from .datasets import ClassIndexedDataset, OneShotSet
from .evaluation import build_episodes, evaluate
from .exceptions import ConfigError, NumericError
from .losses import EmbeddedTriplets, LossConfig, SiameseHead, loss_terms, siamese_pair_loss
from .network import ArchConfig, EmbeddingModel, build_network, copy_model, embed, he_init
from .optim import AdamState, adam_step, lr_schedule
from .sampling import (
    BatchPrefetcher,
    batch_seed,
    sample_finetune_batch,
    sample_pair_batch,
    sample_triplet_batch,
)

logger = logging.getLogger(__name__)

METRICS_COLUMNS = ("iteration", "lr", "batch_loss", "reg_loss", "total_loss", "wall_ms", "val_accuracy")
METRICS_FILE = "metrics.csv"
CHECKPOINT_FILE = "checkpoint.ckpt"
FINETUNED_FILE = "finetuned.ckpt"
SIAMESE_FILE = "siamese.ckpt"


@dataclass(frozen=True)
class TrainConfig:
    initial_lr: float = 1e-4
    lr_halving_period: int = 10000
    batch_size: int = 64
    max_iterations: int = 2000
    seed: Optional[int] = None
    checkpoint_every: int = 500
    eval_every: int = 0
    val_way: int = 5
    val_runs: int = 10
    val_queries: int = 1
    prefetch_workers: int = 0

    def __post_init__(self):
        if not self.initial_lr > 0:
            raise ConfigError(f"train.initial_lr must be > 0, got {self.initial_lr}")
        for name in ("lr_halving_period", "batch_size", "val_way", "val_runs", "val_queries"):
            if getattr(self, name) < 1:
                raise ConfigError(f"train.{name} must be positive, got {getattr(self, name)}")
        for name in ("max_iterations", "checkpoint_every", "eval_every", "prefetch_workers"):
            if getattr(self, name) < 0:
                raise ConfigError(f"train.{name} must be >= 0, got {getattr(self, name)}")

    @property
    def run_seed(self) -> int:
        return 0 if self.seed is None else self.seed


@dataclass(frozen=True)
class FinetuneConfig:
    """``start_iteration`` of None continues the schedule from the checkpoint's iteration."""
    checkpoint: Optional[str] = None
    iterations: int = 500
    start_iteration: Optional[int] = None
    runs: Tuple[int, ...] = ()
    evaluate: bool = True

    def __post_init__(self):
        object.__setattr__(self, "runs", tuple(int(r) for r in self.runs))
        if self.iterations < 0:
            raise ConfigError(f"finetune.iterations must be >= 0, got {self.iterations}")
        if self.start_iteration is not None and self.start_iteration < 0:
            raise ConfigError(f"finetune.start_iteration must be >= 0, got {self.start_iteration}")


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    checkpoint_path: Path
    metrics_path: Path
    rows: List[Dict] = field(default_factory=list)

    @property
    def model(self) -> EmbeddingModel:
        return self.checkpoint.model

    @property
    def last_loss(self) -> Optional[float]:
        return self.rows[-1]["total_loss"] if self.rows else None


ProgressFn = Callable[[Dict], None]
LossFn = Callable[[EmbeddingModel, Optional[SiameseHead], object], Tuple[Tensor, Tensor, Tensor]]


# ---------------------------------------------------------------------------
# Metrics log
# ---------------------------------------------------------------------------

def _format_row(row: Dict) -> List[str]:
    val = row["val_accuracy"]
    return [
        str(row["iteration"]),
        f"{row['lr']:.17g}",
        f"{row['batch_loss']:.17g}",
        f"{row['reg_loss']:.17g}",
        f"{row['total_loss']:.17g}",
        str(row["wall_ms"]),
        "" if val is None else f"{val:.6f}",
    ]


def _csv_line(values) -> str:
    out = io.StringIO()
    csv.writer(out, lineterminator="\n").writerow(values)
    return out.getvalue()


def _start_metrics(path: Path, keep_before: int) -> None:
    """Rewrite the log keeping only rows of steps before ``keep_before``."""
    kept = []
    if keep_before > 0 and path.exists():
        with path.open(newline="") as handle:
            reader = csv.reader(handle)
            next(reader, None)
            kept = [row for row in reader if row and int(row[0]) < keep_before]
    atomic_write_text(path, _csv_line(METRICS_COLUMNS) + "".join(_csv_line(row) for row in kept))


def read_metrics(path: Path) -> List[Dict[str, str]]:
    with Path(path).open(newline="") as handle:
        return list(csv.DictReader(handle))


# ---------------------------------------------------------------------------
# Shared loop
# ---------------------------------------------------------------------------

def _trainable(model: EmbeddingModel, head: Optional[SiameseHead]) -> Dict[str, Tensor]:
    params = dict(model.parameters)
    if head is not None:
        params.update(head.parameters())
    return params


def _optimize(
    *,
    model: EmbeddingModel,
    head: Optional[SiameseHead],
    adam: AdamState,
    make_batch: Callable[[int], object],
    compute_loss: LossFn,
    start: int,
    stop: int,
    schedule_offset: int,
    iteration_offset: int,
    train_cfg: TrainConfig,
    output_dir: Path,
    checkpoint_name: str,
    validate: Optional[Callable[[], float]],
    progress: Optional[ProgressFn],
    deterministic: bool,
) -> TrainResult:
    output_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = output_dir / METRICS_FILE
    checkpoint_path = output_dir / checkpoint_name
    _start_metrics(metrics_path, start)
    params = _trainable(model, head)
    workers = 0 if deterministic else train_cfg.prefetch_workers
    rows = []

    def snapshot(step: int) -> Checkpoint:
        return Checkpoint(model=model, iteration=iteration_offset + step, adam=adam, head=head)

    with metrics_path.open("a", newline="") as log:
        for i, batch in BatchPrefetcher(make_batch, start, stop, workers):
            began = time.perf_counter()
            lr = lr_schedule(schedule_offset + i, train_cfg.initial_lr, train_cfg.lr_halving_period)
            for p in params.values():
                p.zero_grad()
            try:
                with Tape() as tape:
                    batch_loss, reg_loss, total = compute_loss(model, head, batch)
                if not np.isfinite(total.data).all():
                    raise NumericError("non-finite training loss", iteration=i)
                backward(total, tape)
                adam_step(params, adam, lr, iteration=i)
            except NumericError as e:
                logger.error(f"step {i}: {e}; last checkpoint kept at {checkpoint_path}")
                if e.iteration is None:
                    raise NumericError(f"training aborted: {e}", parameter=e.parameter, iteration=i) from e
                raise

            completed = i + 1
            val_accuracy = None
            if validate is not None and train_cfg.eval_every and completed % train_cfg.eval_every == 0:
                val_accuracy = validate()
            row = {
                "iteration": i,
                "lr": lr,
                "batch_loss": batch_loss.item(),
                "reg_loss": reg_loss.item(),
                "total_loss": total.item(),
                "wall_ms": 0 if deterministic else int(round((time.perf_counter() - began) * 1000)),
                "val_accuracy": val_accuracy,
            }
            log.write(_csv_line(_format_row(row)))
            log.flush()
            rows.append(row)
            if progress is not None:
                progress(row)
            if train_cfg.checkpoint_every and completed % train_cfg.checkpoint_every == 0 and completed < stop:
                save_checkpoint(checkpoint_path, snapshot(completed))

    final = snapshot(stop)
    save_checkpoint(checkpoint_path, final)
    logger.info(f"finished {stop - start} steps, checkpoint {checkpoint_path}")
    return TrainResult(final, checkpoint_path, metrics_path, rows)


def _validator(model: EmbeddingModel, validation: Optional[ClassIndexedDataset], train_cfg: TrainConfig,
               head: Optional[SiameseHead] = None) -> Optional[Callable[[], float]]:
    if validation is None or not train_cfg.eval_every:
        return None
    episodes = build_episodes(validation, train_cfg.val_way, train_cfg.val_queries, train_cfg.val_runs,
                              seed=train_cfg.run_seed)

    def validate() -> float:
        return evaluate(model, episodes, head=head).mean

    return validate


def triplet_objective(loss_cfg: LossConfig) -> LossFn:
    def compute(model, head, batch):
        embeddings = embed(model, batch.images(), mode="train")
        return loss_terms(EmbeddedTriplets.from_stacked(embeddings, len(batch)), loss_cfg)

    return compute


def _fresh_model(arch: ArchConfig, seed: int) -> EmbeddingModel:
    return he_init(build_network(arch), seed)


def _check_resume(resume: Checkpoint, arch: ArchConfig) -> None:
    if resume.arch != arch:
        raise ConfigError("resume checkpoint was trained with a different architecture")
    if resume.adam is None:
        raise ConfigError("resume checkpoint carries no optimizer state")


def _copy_adam(adam: AdamState) -> AdamState:
    return AdamState(m={k: v.copy() for k, v in adam.m.items()}, v={k: v.copy() for k, v in adam.v.items()},
                     t=adam.t, beta1=adam.beta1, beta2=adam.beta2, eps=adam.eps)


def _check_input(arch: ArchConfig, shape: Tuple[int, ...], what: str) -> None:
    if tuple(shape) != arch.input_shape:
        raise ConfigError(f"{what} presents images of shape {tuple(shape)}, the network expects {arch.input_shape}")


# ---------------------------------------------------------------------------
# Entry points
# ---------------------------------------------------------------------------

def train(base: ClassIndexedDataset, arch: ArchConfig, train_cfg: TrainConfig, loss_cfg: LossConfig,
          output_dir, augment: Optional[AugmentParams] = None, validation: Optional[ClassIndexedDataset] = None,
          resume: Optional[Checkpoint] = None, progress: Optional[ProgressFn] = None,
          deterministic: bool = False) -> TrainResult:
    """Triplet pre-training on the base classes for ``train_cfg.max_iterations`` steps."""
    augment = augment or AugmentParams()
    seed = train_cfg.run_seed
    sample = sample_triplet_batch(base, 1, seed=0, params=augment)
    _check_input(arch, sample.pos1.shape[1:], f"dataset {base.name!r}")
    if resume is not None:
        _check_resume(resume, arch)
        model, adam, start = copy_model(resume.model), _copy_adam(resume.adam), resume.iteration
        logger.info(f"resuming from step {start}")
    else:
        model = _fresh_model(arch, seed)
        adam, start = AdamState.for_parameters(model.parameters), 0

    def make_batch(i):
        return sample_triplet_batch(base, train_cfg.batch_size, batch_seed(seed, i), augment)

    return _optimize(
        model=model, head=None, adam=adam, make_batch=make_batch, compute_loss=triplet_objective(loss_cfg),
        start=start, stop=max(start, train_cfg.max_iterations), schedule_offset=0, iteration_offset=0,
        train_cfg=train_cfg, output_dir=Path(output_dir), checkpoint_name=CHECKPOINT_FILE,
        validate=_validator(model, validation, train_cfg), progress=progress, deterministic=deterministic,
    )


def finetune(checkpoint: Checkpoint, base: ClassIndexedDataset, oneshot: OneShotSet, train_cfg: TrainConfig,
             loss_cfg: LossConfig, output_dir, iterations: int, start_iteration: Optional[int] = None,
             augment: Optional[AugmentParams] = None, progress: Optional[ProgressFn] = None,
             deterministic: bool = False, checkpoint_name: str = FINETUNED_FILE) -> TrainResult:
    """
    Continue training ``checkpoint`` on batches that mix base triplets and
    one-shot triplets (x_k, A(x_k), x_j) with equal probability. The input
    checkpoint is not modified; zero iterations reproduce it exactly.
    """
    augment = augment or AugmentParams()
    arch = checkpoint.arch
    if len(oneshot) < 2:
        raise ConfigError(f"fine-tuning needs at least 2 one-shot classes, got {len(oneshot)}")
    _check_input(arch, present(oneshot.images[0], oneshot.augmentation, augment).shape, "the one-shot set")
    model = copy_model(checkpoint.model)
    adam = _copy_adam(checkpoint.adam) if checkpoint.adam is not None else AdamState.for_parameters(model.parameters)
    offset = checkpoint.iteration if start_iteration is None else start_iteration
    seed = train_cfg.run_seed

    def make_batch(i):
        return sample_finetune_batch(base, oneshot, train_cfg.batch_size, batch_seed(seed, i), augment)

    result = _optimize(
        model=model, head=None, adam=adam, make_batch=make_batch, compute_loss=triplet_objective(loss_cfg),
        start=0, stop=iterations, schedule_offset=offset, iteration_offset=offset,
        train_cfg=train_cfg, output_dir=Path(output_dir), checkpoint_name=checkpoint_name,
        validate=None, progress=progress, deterministic=deterministic,
    )
    if iterations == 0:
        result.checkpoint = Checkpoint(model=result.checkpoint.model, iteration=checkpoint.iteration,
                                       adam=checkpoint.adam, head=checkpoint.head)
        save_checkpoint(result.checkpoint_path, result.checkpoint)
    return result


def siamese_objective(loss_cfg: LossConfig) -> LossFn:
    def compute(model, head, batch):
        embeddings = embed(model, batch.images(), mode="train")
        b = len(batch)
        loss = siamese_pair_loss(embeddings[0:b], embeddings[b:2 * b], batch.same_class, head, loss_cfg.distance_fn)
        zero = Tensor(np.zeros((), dtype=loss.dtype))
        return loss, zero, loss

    return compute


def train_siamese(base: ClassIndexedDataset, arch: ArchConfig, train_cfg: TrainConfig, loss_cfg: LossConfig,
                  output_dir, augment: Optional[AugmentParams] = None,
                  validation: Optional[ClassIndexedDataset] = None, resume: Optional[Checkpoint] = None,
                  progress: Optional[ProgressFn] = None, deterministic: bool = False) -> TrainResult:
    """Pairwise baseline: same network, optimizer, schedule and seeds; BCE on same/different pairs."""
    augment = augment or AugmentParams()
    seed = train_cfg.run_seed
    sample = sample_pair_batch(base, 1, seed=0, params=augment)
    _check_input(arch, sample.first.shape[1:], f"dataset {base.name!r}")
    if resume is not None:
        _check_resume(resume, arch)
        if resume.head is None:
            raise ConfigError("resume checkpoint has no Siamese head")
        model, adam, start = copy_model(resume.model), _copy_adam(resume.adam), resume.iteration
        head = SiameseHead.with_values(resume.head.weight.item(), resume.head.bias.item(), dtype=arch.np_dtype)
    else:
        model = _fresh_model(arch, seed)
        head = SiameseHead.with_values(-1.0, 0.0, dtype=arch.np_dtype)
        adam, start = AdamState.for_parameters(_trainable(model, head)), 0

    def make_batch(i):
        return sample_pair_batch(base, train_cfg.batch_size, batch_seed(seed, i), augment)

    return _optimize(
        model=model, head=head, adam=adam, make_batch=make_batch, compute_loss=siamese_objective(loss_cfg),
        start=start, stop=max(start, train_cfg.max_iterations), schedule_offset=0, iteration_offset=0,
        train_cfg=train_cfg, output_dir=Path(output_dir), checkpoint_name=SIAMESE_FILE,
        validate=_validator(model, validation, train_cfg, head), progress=progress, deterministic=deterministic,
    )
