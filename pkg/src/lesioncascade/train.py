"""Two-phase training (segmentation warm-up, then joint) and evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .autodiff import SGD, backward, no_grad, poly_lr
from .data import Sample, augment
from .metrics import (
    RocCurve,
    cls_metrics,
    confusion,
    mean_ignoring_nan,
    roc_auc,
    seg_metrics,
)
from .model import CascadeNet, total_loss

__all__ = [
    "TrainConfig",
    "TrainingDiverged",
    "TrainResult",
    "Predictions",
    "EvalReport",
    "train",
    "predict",
    "evaluate",
    "HISTORY_FIELDS",
]

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("iteration", "lr", "loss", "seg_JA", "cls_AUC")


@dataclass
class TrainConfig:
    batch_size: int = 8
    base_lr: float = 1e-3
    max_iterations: int = 1500
    warmup_iterations: int = 300
    seed: int = 0
    momentum: float = 0.9
    weight_decay: float = 0.0
    lr_power: float = 0.9
    eval_interval: int = 100
    augment: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not 0 <= self.warmup_iterations <= self.max_iterations:
            raise ValueError("warmup_iterations must lie in [0, max_iterations]")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, detail: str):
        super().__init__(f"training diverged at iteration {iteration}: {detail}")
        self.iteration = iteration


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    final_loss: float = math.nan


@dataclass
class Predictions:
    masks: list  # per-sample bool masks cropped to the valid extent
    melanoma_probs: np.ndarray  # final-stage P(melanoma)
    stage_diagnosis: np.ndarray  # (N, stages, C)
    descriptors: Optional[np.ndarray] = None  # final stage (N, K, 4), when LPSE pooling


@dataclass
class EvalReport:
    metrics: dict
    roc: Optional[RocCurve]
    per_image: list = field(default_factory=list)


def _stack_batch(samples: Sequence[Sample], dtype) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    shapes = {s.image.shape for s in samples}
    if len(shapes) != 1:
        raise ValueError(f"samples in a batch must share one size, got {sorted(shapes)}")
    images = np.stack([s.image for s in samples]).astype(dtype)
    masks = np.stack([s.mask for s in samples]).astype(np.intp)
    labels = np.array([s.label for s in samples], dtype=np.intp)
    return images, masks, labels


def _batches(n: int, batch_size: int, seed: int):
    """Endless stream of index batches with a fresh shuffle every epoch."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    pending: list[int] = []
    while True:
        while len(pending) < batch_size:
            pending.extend(rng.permutation(n).tolist())
        yield pending[:batch_size]
        pending = pending[batch_size:]


def train(
    model: CascadeNet,
    samples: Sequence[Sample],
    config: Optional[TrainConfig] = None,
    eval_samples: Optional[Sequence[Sample]] = None,
    callback: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """SGD with the poly schedule; ``beta = 0`` until ``warmup_iterations``.

    Every ``eval_interval`` iterations (and at the end) a history row with the
    mean training loss since the previous row and the evaluation JA/AUC is
    recorded.  ``eval_samples`` defaults to the training samples.
    """
    config = config or TrainConfig()
    if not samples:
        raise ValueError("training set is empty")
    monitor = eval_samples if eval_samples else samples
    mcfg = model.config
    opt = SGD(model.parameters(), momentum=config.momentum, weight_decay=config.weight_decay)
    params = model.parameters()
    batches = _batches(len(samples), config.batch_size, config.seed)
    result = TrainResult()
    window: list[float] = []

    for it in range(config.max_iterations):
        idx = next(batches)
        batch = []
        for slot, i in enumerate(idx):
            s = samples[i]
            if config.augment:
                rng = np.random.default_rng(np.random.SeedSequence([config.seed, it, slot, i]))
                s = augment(s, rng)
            batch.append(s)
        images, seg_gt, cls_gt = _stack_batch(batch, mcfg.dtype)
        beta = 0.0 if it < config.warmup_iterations else mcfg.beta
        lr = poly_lr(it, config.max_iterations, config.base_lr, config.lr_power)
        try:
            outputs = model(images)
            loss = total_loss(outputs, seg_gt, cls_gt, beta, mcfg.supervise)
            value = loss.item()
            if not math.isfinite(value):
                raise FloatingPointError("loss is not finite")
            backward(loss, params)
            for p in params:
                if not np.isfinite(p.grad).all():
                    raise FloatingPointError(f"non-finite gradient for {p.name}")
        except FloatingPointError as exc:
            raise TrainingDiverged(it, str(exc)) from exc
        opt.step(lr)
        window.append(value)
        result.final_loss = value

        done = it + 1
        if done % config.eval_interval == 0 or done == config.max_iterations:
            report = evaluate(model, monitor)
            row = {
                "iteration": done,
                "lr": lr,
                "loss": float(np.mean(window)),
                "seg_JA": report.metrics["JA"],
                "cls_AUC": report.metrics["AUC"],
            }
            window = []
            result.history.append(row)
            log.info(
                "iter %d lr %.3g loss %.4f JA %.4f AUC %.4f",
                done, lr, row["loss"], row["seg_JA"], row["cls_AUC"],
            )
            if callback is not None:
                callback(row)
    return result


def predict(model: CascadeNet, samples: Sequence[Sample], batch_size: int = 16) -> Predictions:
    masks, probs, stage_diag, descriptors = [], [], [], []
    with no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            images, _, _ = _stack_batch(chunk, model.config.dtype)
            outputs = model(images)
            final = outputs[-1]
            lesion = final.seg_probs_full.data[:, 1] > 0.5
            for s, m in zip(chunk, lesion):
                h, w = s.valid_hw
                masks.append(m[:h, :w])
            probs.append(final.diagnosis.data[:, 1])
            stage_diag.append(np.stack([o.diagnosis.data for o in outputs], axis=1))
            if final.descriptor is not None:
                descriptors.append(final.descriptor.data)
    return Predictions(
        masks=masks,
        melanoma_probs=np.concatenate(probs).astype(np.float64) if probs else np.zeros(0),
        stage_diagnosis=np.concatenate(stage_diag) if stage_diag else np.zeros((0, 0, 0)),
        descriptors=np.concatenate(descriptors) if descriptors else None,
    )


def evaluate(model: CascadeNet, samples: Sequence[Sample], batch_size: int = 16) -> EvalReport:
    """Per-image mean of the segmentation metrics plus the recognition metrics.

    AUC is ``nan`` (and ``roc`` is None) when only one class is present.
    """
    preds = predict(model, samples, batch_size)
    per_image = []
    for s, m in zip(samples, preds.masks):
        h, w = s.valid_hw
        per_image.append(seg_metrics(confusion(m, s.mask[:h, :w])))
    metrics = {k: mean_ignoring_nan([r[k] for r in per_image]) for k in ("JA", "DI", "AC_s", "GM")}
    labels = np.array([s.label for s in samples])
    metrics.update(cls_metrics((preds.melanoma_probs > 0.5).astype(int), labels))
    try:
        roc = roc_auc(preds.melanoma_probs, labels)
        metrics["AUC"] = roc.auc
    except ValueError:
        roc = None
        metrics["AUC"] = math.nan
    return EvalReport(metrics=metrics, roc=roc, per_image=per_image)
