"""Training engine: BCE loss, bias-corrected Adam, staged constant
learning rates, quarter-turn augmentation, deterministic splits and
shuffles, per-stage checkpoints, and checkpoint-resume fine-tuning.

Determinism contract: the validation split comes from a seeded shuffle
of the dataset order, and each epoch's batch order is drawn from a
stream keyed by (seed, stage index, epoch). Adam state is fresh at every
stage boundary, so resuming from a stage checkpoint with
``stage_offset`` set reproduces the single-process run step for step.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import tensor as T
from .detector import DetectorModel
from .errors import ConfigError, ContractError, TrainingDiverged
from .lenssim import Dataset, ImageStamp
from .tensor import Tensor

LR_WARN_THRESHOLD = 1e-3
DEFAULT_LR = 1e-4

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    """Schedule and data-handling knobs for one training run.

    ``stages`` is an ordered list of (learning rate, epochs) pairs run
    back to back. ``stage_offset`` shifts the stage indices used for the
    shuffle streams so a resumed run keeps the original epoch ordering.
    """

    stages: tuple[tuple[float, int], ...] = ((DEFAULT_LR, 30),)
    batch_size: int = 32
    seed: int = 0
    val_fraction: float = 0.1
    augment_rotations: bool = True
    augment_rescale: bool = True
    stage_offset: int = 0

    def __post_init__(self):
        self.stages = tuple((float(lr), int(ep)) for lr, ep in self.stages)

    def validate(self, allow_empty_stages: bool = False) -> None:
        if not self.stages and not allow_empty_stages:
            raise ConfigError("training needs at least one (learning rate, epochs) stage")
        for lr, epochs in self.stages:
            if lr <= 0:
                raise ConfigError(f"learning rate must be positive, got {lr}")
            if epochs < 1:
                raise ConfigError(f"every stage needs >= 1 epochs, got {epochs}")
            if lr > LR_WARN_THRESHOLD:
                warnings.warn(
                    f"learning rate {lr} above {LR_WARN_THRESHOLD} tends to hurt detector "
                    "performance noticeably", stacklevel=2)
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must be in (0, 1), got {self.val_fraction}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.stage_offset < 0:
            raise ConfigError(f"stage_offset must be >= 0, got {self.stage_offset}")


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """First/second moment accumulators per parameter plus the step count."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    @classmethod
    def init(cls, params: dict[str, Tensor]) -> "AdamState":
        return cls(m={k: np.zeros_like(p.data) for k, p in params.items()},
                   v={k: np.zeros_like(p.data) for k, p in params.items()})


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> AdamState:
    """One bias-corrected Adam update, in place, in parameter-dict order."""
    if lr <= 0:
        raise ContractError(f"learning rate must be positive, got {lr}")
    if set(grads) != set(params):
        raise ContractError("gradient names do not match parameter names")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, expected {p.data.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype)
    return state


# ---------------------------------------------------------------------------
# preprocessing / augmentation
# ---------------------------------------------------------------------------

def rescale_pixels(pixels: np.ndarray) -> np.ndarray:
    """Map each band of each stamp onto [0, 1]; constant bands become zero."""
    if not np.all(np.isfinite(pixels)):
        return pixels.astype(np.float32)  # leave divergence detection to the loss
    axes = (-2, -1)
    lo = pixels.min(axis=axes, keepdims=True)
    hi = pixels.max(axis=axes, keepdims=True)
    span = hi - lo
    out = np.divide(pixels - lo, span, out=np.zeros_like(pixels, dtype=np.float32),
                    where=span > 0)
    return out.astype(np.float32)


def rescale(stamp: ImageStamp) -> ImageStamp:
    return ImageStamp(pixels=rescale_pixels(stamp.pixels), label=stamp.label,
                      metadata=dict(stamp.metadata))


def rotate_stamp(pixels: np.ndarray, n: int) -> np.ndarray:
    """n quarter turns counter-clockwise about the stamp center, all bands."""
    return np.ascontiguousarray(np.rot90(pixels, k=n % 4, axes=(-2, -1)))


def augment(stamp: ImageStamp) -> list[ImageStamp]:
    """The four planar rotations of a square stamp, labels preserved."""
    if stamp.pixels.shape[-1] != stamp.pixels.shape[-2]:
        raise ContractError(f"augment needs square stamps, got {stamp.pixels.shape}")
    out = []
    for n in range(4):
        meta = dict(stamp.metadata, rotation=n)
        out.append(ImageStamp(pixels=rotate_stamp(stamp.pixels, n), label=stamp.label,
                              metadata=meta))
    return out


def _augment_batch(pixels: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    rotated = [pixels] + [np.rot90(pixels, k=n, axes=(-2, -1)) for n in (1, 2, 3)]
    return np.ascontiguousarray(np.concatenate(rotated)), np.tile(labels, 4)


# ---------------------------------------------------------------------------
# scoring / history
# ---------------------------------------------------------------------------

def score_dataset(model: DetectorModel, pixels: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Forward the whole array in chunks with the tape disabled."""
    scores = np.empty(len(pixels), dtype=np.float64)
    with T.no_grad():
        for i in range(0, len(pixels), batch_size):
            chunk = pixels[i:i + batch_size]
            scores[i:i + len(chunk)] = model(chunk).data
    return scores


HISTORY_COLUMNS = ("epoch", "stage", "lr", "train_loss", "val_loss", "val_accuracy")


def save_history(history: Sequence[dict], path: Union[str, Path]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS)
        writer.writeheader()
        for row in history:
            writer.writerow({k: row[k] for k in HISTORY_COLUMNS})


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------

def _validation_split(n: int, cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    order = np.random.default_rng([cfg.seed, 0]).permutation(n)
    n_val = min(max(1, round(n * cfg.val_fraction)), n - 1)
    return order[n_val:], order[:n_val]


def train(model: DetectorModel, dataset: Dataset, cfg: TrainConfig,
          out_dir: Optional[Union[str, Path]] = None) -> tuple[DetectorModel, list[dict]]:
    """Run the staged schedule; returns the model and per-epoch history.

    Writes ``stage{K}_epoch{N}.ckpt`` at the end of each stage when
    ``out_dir`` is given (K is the global 1-based stage number, N the
    epochs completed in this run). Aborts with ``TrainingDiverged`` on a
    non-finite loss.
    """
    cfg.validate()
    if len(dataset) < 2:
        raise ConfigError("training needs at least two samples")
    if dataset.bands != model.config.input_bands or dataset.size != model.config.input_size:
        raise ConfigError(
            f"dataset stamps ({dataset.bands} bands, {dataset.size}px) do not match model config "
            f"({model.config.input_bands} bands, {model.config.input_size}px)")

    train_idx, val_idx = _validation_split(len(dataset), cfg)
    pixels = dataset.pixels.astype(np.float32)
    if cfg.augment_rescale:
        pixels = rescale_pixels(pixels)
    labels = dataset.labels.astype(np.float32)

    train_px, train_y = pixels[train_idx], labels[train_idx]
    val_px, val_y = pixels[val_idx], labels[val_idx]
    if len(np.unique(train_y)) < 2:
        raise ConfigError("training split contains a single class; provide both labels")
    if cfg.augment_rotations:
        train_px, train_y = _augment_batch(train_px, train_y)

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    history: list[dict] = []
    epochs_done = 0
    last_checkpoint: Optional[Path] = None
    for si, (lr, epochs) in enumerate(cfg.stages):
        stage_idx = cfg.stage_offset + si
        adam = AdamState.init(model.params)
        for epoch in range(epochs):
            order = np.random.default_rng([cfg.seed, 1, stage_idx, epoch]).permutation(len(train_y))
            running = 0.0
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                model.zero_grad()
                probs = model(train_px[idx])
                loss = T.binary_cross_entropy(probs, Tensor(train_y[idx], dtype=np.float64))
                value = loss.item()
                if not np.isfinite(value):
                    T.reset_tape()
                    raise TrainingDiverged(
                        f"non-finite loss at stage {stage_idx + 1}, epoch {epochs_done + 1}, "
                        f"batch {start // cfg.batch_size}", last_checkpoint=last_checkpoint)
                T.backward(loss)
                adam_step(model.params, {k: p.grad for k, p in model.params.items()}, adam, lr)
                running += value * len(idx)
            epochs_done += 1
            val_scores = score_dataset(model, val_px)
            val_loss = float(np.mean(
                -(val_y * np.log(np.clip(val_scores, T.BCE_EPS, 1 - T.BCE_EPS))
                  + (1 - val_y) * np.log1p(-np.clip(val_scores, T.BCE_EPS, 1 - T.BCE_EPS)))))
            val_acc = float(np.mean((val_scores >= 0.5) == (val_y == 1)))
            history.append({
                "epoch": epochs_done,
                "stage": stage_idx + 1,
                "lr": lr,
                "train_loss": running / len(order),
                "val_loss": val_loss,
                "val_accuracy": val_acc,
            })
        if out_path is not None:
            last_checkpoint = out_path / f"stage{stage_idx + 1}_epoch{epochs_done}.ckpt"
            model.save(last_checkpoint)
    return model, history


def fine_tune(checkpoint: Union[str, Path, DetectorModel], dataset: Dataset, cfg: TrainConfig,
              out_dir: Optional[Union[str, Path]] = None) -> tuple[DetectorModel, list[dict]]:
    """Resume training from a checkpoint on new data with fresh Adam state.

    An empty stage list is the degenerate zero-epoch fine-tune and
    returns the checkpoint model untouched.
    """
    model = checkpoint if isinstance(checkpoint, DetectorModel) else DetectorModel.load(checkpoint)
    if dataset.bands != model.config.input_bands or dataset.size != model.config.input_size:
        raise ConfigError(
            f"checkpoint expects ({model.config.input_bands} bands, {model.config.input_size}px) "
            f"but the dataset has ({dataset.bands} bands, {dataset.size}px)")
    cfg.validate(allow_empty_stages=True)
    if not cfg.stages:
        return model, []
    return train(model, dataset, cfg, out_dir=out_dir)
