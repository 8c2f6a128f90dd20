"""Training loop with a one-batch cache for last-mini-batch self-distillation.

At iteration t the model is run on the current batch and, when the cache is
non-empty and the mode is ``sd`` or ``dcsd``, once more on the previous
batch's images. The second output is pulled toward the logits stored at
iteration t-1 (both softened with the same temperature). The cache is then
refilled with this batch and its pre-update logits.
"""

from __future__ import annotations

import csv
import logging
import math
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
from torch import Tensor

from .data import SegDataset, make_batches
from .losses import (
    CONFIDENCE_MODES,
    ConfigError,
    ContractError,
    LossBreakdown,
    dcsd_loss,
    mse_consistency,
    sigmoid_with_temperature,
    total_loss,
)
from .segmodel import DCSDNet, ModelConfig, save_checkpoint

log = logging.getLogger(__name__)

MODES = ("base", "sd", "dcsd")
LOG_COLUMNS = ("epoch", "iteration", "dice", "bce", "dcsd", "total", "confidence_mean", "wall_ms", "batch_hash")
DTYPES = {"float32": torch.float32, "float64": torch.float64}


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class TrainingConfig:
    learning_rate: float = 1e-4
    epochs: int = 30
    batch_size: int = 4
    temperature: float = 4.0
    confidence_mode: str = "per-sample"
    eps: float = 1.0
    weight_decay: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0
    input_size: tuple[int, int] = (256, 256)
    dtype: str = "float32"
    # diagnostic: replace every confidence coefficient with this constant
    confidence_override: float | None = None

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.input_size = tuple(int(v) for v in self.input_size)
        self.validate()

    def validate(self) -> None:
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if self.confidence_mode not in CONFIDENCE_MODES:
            raise ConfigError(f"confidence_mode must be one of {CONFIDENCE_MODES}")
        if not self.eps > 0:
            raise ConfigError("eps must be > 0")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {tuple(DTYPES)}")

    @property
    def torch_dtype(self) -> torch.dtype:
        return DTYPES[self.dtype]


def check_mode(mode: str) -> str:
    if mode not in MODES:
        raise ConfigError(f"invalid mode {mode!r}; valid modes: {', '.join(MODES)}")
    return mode


@dataclass
class BatchCache:
    images: Tensor
    labels: Tensor
    stored_logits: Tensor  # detached, from the pre-update parameters

    def __post_init__(self):
        n = self.images.shape[0]
        if self.labels.shape[0] != n or self.stored_logits.shape[0] != n:
            raise ContractError("cache tensors must share the batch dimension")


@dataclass
class IterationRecord:
    epoch: int
    iteration: int
    breakdown: dict[str, float]
    confidence_mean: float | None = None
    wall_ms: float = 0.0
    batch_hash: str = ""

    def row(self) -> dict:
        b = self.breakdown
        return {
            "epoch": self.epoch,
            "iteration": self.iteration,
            "dice": repr(b["dice"]),
            "bce": repr(b["bce"]),
            "dcsd": repr(b["dcsd"]),
            "total": repr(b["total"]),
            "confidence_mean": "" if self.confidence_mean is None else repr(self.confidence_mean),
            "wall_ms": f"{self.wall_ms:.3f}",
            "batch_hash": self.batch_hash,
        }


def make_optimizer(model: torch.nn.Module, config: TrainingConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(
        model.parameters(), lr=config.learning_rate, betas=config.betas, weight_decay=config.weight_decay
    )


def soften_cache_pair(out_pre: Tensor, cache: BatchCache, T: float) -> tuple[Tensor, Tensor]:
    """Soften the fresh logits on the cached images and the stored logits with the same T."""
    if out_pre.shape != cache.stored_logits.shape:
        raise ContractError(f"shape mismatch: {tuple(out_pre.shape)} vs {tuple(cache.stored_logits.shape)}")
    return sigmoid_with_temperature(out_pre, T), sigmoid_with_temperature(cache.stored_logits.detach(), T)


def compute_losses(
    model: torch.nn.Module,
    images: Tensor,
    labels: Tensor,
    cache: BatchCache | None,
    mode: str,
    config: TrainingConfig,
) -> tuple[LossBreakdown, Tensor, Tensor | None]:
    """Forward pass(es) and loss composition; returns (breakdown, out, confidence)."""
    if images.shape[0] != labels.shape[0] or images.shape[-2:] != labels.shape[-2:]:
        raise ContractError(f"images {tuple(images.shape)} and labels {tuple(labels.shape)} disagree")
    out = model(images)
    T = config.temperature
    conf = None
    if cache is None or mode == "base":
        breakdown = total_loss(out, labels, 0.0, T, config.eps)
    else:
        out_pre = model(cache.images)
        soft_curr, soft_prev = soften_cache_pair(out_pre, cache, T)
        if mode == "sd":
            distill = mse_consistency(soft_curr, soft_prev)
        else:
            distill, conf = dcsd_loss(
                soft_curr, soft_prev, cache.labels, config.confidence_mode, config.eps,
                confidence=config.confidence_override,
            )
        breakdown = total_loss(out, labels, distill, T, config.eps)
    return breakdown, out, conf


def train_step(
    model: torch.nn.Module,
    optimizer: torch.optim.Optimizer,
    images: Tensor,
    labels: Tensor,
    cache: BatchCache | None,
    mode: str,
    config: TrainingConfig,
    epoch: int = 0,
    iteration: int = 0,
    batch_hash: str = "",
) -> tuple[BatchCache, IterationRecord]:
    """One optimizer step. The model is updated in place; returns (new cache, record)."""
    check_mode(mode)
    t0 = time.perf_counter()
    breakdown, out, conf = compute_losses(model, images, labels, cache, mode, config)
    values = breakdown.as_floats()
    if not all(math.isfinite(v) for v in values.values()):
        raise NonFiniteLossError(f"non-finite loss at epoch {epoch} iteration {iteration}: {values}")
    new_cache = make_cache(images, labels, out)
    optimizer.zero_grad(set_to_none=True)
    breakdown.total.backward()
    optimizer.step()
    model.step_count = getattr(model, "step_count", 0) + 1
    record = IterationRecord(
        epoch=epoch,
        iteration=iteration,
        breakdown=values,
        confidence_mean=None if conf is None else float(conf.mean()),
        wall_ms=(time.perf_counter() - t0) * 1e3,
        batch_hash=batch_hash,
    )
    return new_cache, record


def make_cache(images: Tensor, labels: Tensor, out: Tensor) -> BatchCache:
    return BatchCache(images, labels, out.detach().clone())


def epoch_order_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(epoch)]).generate_state(1)[0])


def batch_hash(ids) -> str:
    return f"{zlib.crc32('|'.join(ids).encode()):08x}"


def run_epoch(
    model,
    optimizer,
    dataset: SegDataset,
    order_seed: int,
    cache: BatchCache | None,
    mode: str,
    config: TrainingConfig,
    epoch: int = 0,
    step=train_step,
) -> tuple[list[IterationRecord], BatchCache | None]:
    """Train over one seeded permutation of ``dataset``; the cache carries in and out."""
    if len(dataset) == 0:
        raise ConfigError("training dataset is empty")
    dtype = config.torch_dtype
    records = []
    for it, idx in enumerate(make_batches(len(dataset), config.batch_size, order_seed)):
        images = torch.as_tensor(dataset.images[idx], dtype=dtype)
        labels = torch.as_tensor(dataset.masks[idx], dtype=dtype)
        h = batch_hash([dataset.ids[i] for i in idx])
        cache, rec = step(model, optimizer, images, labels, cache, mode, config, epoch, it, h)
        records.append(rec)
    return records, cache


def set_deterministic(threads: int = 1) -> None:
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


@dataclass
class FitResult:
    model: DCSDNet
    records: list[IterationRecord]
    checkpoint: Path | None = None
    log_path: Path | None = None


def fit(
    train_dataset: SegDataset,
    model_config: ModelConfig,
    config: TrainingConfig,
    mode: str = "dcsd",
    out_dir=None,
    step=train_step,
    progress: bool = False,
) -> FitResult:
    """Train ``config.epochs`` epochs from a freshly seeded model.

    With ``out_dir`` set, writes ``train_log.csv`` and ``checkpoint.npz`` there.
    """
    check_mode(mode)
    config.validate()
    if len(train_dataset) == 0:
        raise ConfigError("training dataset is empty")
    torch.manual_seed(config.seed)
    model = DCSDNet(model_config).to(config.torch_dtype)
    model.train()
    optimizer = make_optimizer(model, config)
    cache = None
    records: list[IterationRecord] = []
    for epoch in range(config.epochs):
        recs, cache = run_epoch(
            model, optimizer, train_dataset, epoch_order_seed(config.seed, epoch), cache, mode, config, epoch, step
        )
        records.extend(recs)
        if progress:
            last = recs[-1].breakdown
            log.info("epoch %d/%d mode=%s total=%.4f", epoch + 1, config.epochs, mode, last["total"])
    for name, p in model.named_parameters():
        if not torch.isfinite(p).all():
            raise NonFiniteLossError(f"parameter {name} is non-finite after training")
    result = FitResult(model, records)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        result.log_path = write_log(out_dir / "train_log.csv", records)
        result.checkpoint = save_checkpoint(out_dir / "checkpoint.npz", model, mode)
    return result


def write_log(path, records: list[IterationRecord]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in records:
            w.writerow(r.row())
    return path


def read_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
