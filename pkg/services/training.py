"""
Training Service

Desk-scale training on benchmark-format sequences:
- lr_at: log-space warmup 5e-4 -> 1e-2, then log-space decay to 1e-4
- SampleSource: template/search pairs cropped from ground truth, with labels
- compute_loss: BCE on all cells + IoU loss on regression positives
- SGD with momentum, training_step and the Trainer loop with checkpoints
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence as SequenceType, Union

import numpy as np

from config import ModelConfig, TrainConfig, model_preset
from services import tensor_core as tc
from services.domain_models import BBox, Sequence
from services.errors import ConfigError, DatasetError
from services.head import HeadOutputs, encode_targets
from services.model import PRLTrackModel, save_checkpoint
from services.tensor_core import GradGraph, Parameter, Tensor
from services.tracker import crop_patch, read_frame, template_context

logger = logging.getLogger(__name__)

SAFE_TARGET = 8.0  # stands in for targets outside the regression mask


def validate_train_config(config: TrainConfig):
    if not 0 < config.warmup_lr_start <= config.peak_lr:
        raise ConfigError(f'Need 0 < warmup_lr_start <= peak_lr, got {config.warmup_lr_start} / {config.peak_lr}')
    if not 0 < config.final_lr <= config.peak_lr:
        raise ConfigError(f'Need 0 < final_lr <= peak_lr, got {config.final_lr} / {config.peak_lr}')
    if config.epochs < 1 or config.steps_per_epoch < 1 or config.batch_size < 1:
        raise ConfigError('epochs, steps_per_epoch and batch_size must all be >= 1')
    if not 0 < config.warmup_epochs <= config.epochs:
        raise ConfigError(f'warmup_epochs must lie in (0, epochs], got {config.warmup_epochs}')


def _geometric(start: float, end: float, fraction: float) -> float:
    if fraction <= 0.0:
        return start
    if fraction >= 1.0:
        return end
    return math.exp(math.log(start) + fraction * (math.log(end) - math.log(start)))


def warmup_steps(total_steps: int, config: TrainConfig) -> int:
    return min(total_steps, max(2, round(total_steps * config.warmup_epochs / config.epochs)))


def lr_at(step: int, total_steps: int, config: TrainConfig) -> float:
    """
    Learning rate at ``step`` of ``total_steps``.

    Geometric interpolation warmup_lr_start -> peak_lr over steps [0, W-1], then
    peak_lr -> final_lr over [W-1, total_steps-1]; the boundary values are exact.
    """
    if not 0 <= step < total_steps:
        raise ValueError(f'step must lie in [0, {total_steps}), got {step}')
    last_warmup = warmup_steps(total_steps, config) - 1
    if step <= last_warmup:
        return _geometric(config.warmup_lr_start, config.peak_lr, step / max(last_warmup, 1))
    decay_length = total_steps - 1 - last_warmup
    return _geometric(config.peak_lr, config.final_lr, (step - last_warmup) / decay_length)


@dataclass
class TrainSample:
    template: np.ndarray   # [3, template_size, template_size]
    search: np.ndarray     # [3, search_size, search_size]
    box: BBox              # ground truth in search-patch coordinates
    labels: np.ndarray     # [g, g]
    targets: np.ndarray    # [4, g, g]
    reg_mask: np.ndarray   # [g, g]


def make_sample(template_frame: np.ndarray, template_box: BBox, search_frame: np.ndarray, search_box: BBox,
                model: PRLTrackModel, positive_radius: float, shift=(0.0, 0.0)) -> TrainSample:
    """Crop one training pair; the search crop is centered ``shift`` pixels away from the object."""
    config = model.config
    template = crop_patch(template_frame, template_box.center, template_context(template_box.w, template_box.h),
                          config.template_size)
    search_ctx = template_context(search_box.w, search_box.h) * config.search_size / config.template_size
    cx, cy = search_box.center
    crop_center = (cx + shift[0], cy + shift[1])
    search = crop_patch(search_frame, crop_center, search_ctx, config.search_size)

    scale = config.search_size / search_ctx
    offset = model.grid.offset
    box = BBox.from_center((cx - crop_center[0]) * scale + offset, (cy - crop_center[1]) * scale + offset,
                           search_box.w * scale, search_box.h * scale)
    labels, targets, mask = encode_targets(box, model.grid, positive_radius)
    return TrainSample(template=template.data[0], search=search.data[0], box=box,
                       labels=labels, targets=targets, reg_mask=mask)


class SampleSource:
    """Draws random (template frame, search frame) pairs from a set of sequences."""

    def __init__(self, sequences: SequenceType[Sequence], model: PRLTrackModel, config: TrainConfig):
        if not sequences:
            raise DatasetError('Training needs at least one sequence')
        self.model, self.config = model, config
        self.sequences = list(sequences)
        self._frames: Dict[str, List[np.ndarray]] = {}

    def frames(self, sequence: Sequence) -> List[np.ndarray]:
        if sequence.name not in self._frames:
            self._frames[sequence.name] = [read_frame(path, index) for index, path in enumerate(sequence.frame_paths)]
        return self._frames[sequence.name]

    def draw(self, rng: np.random.Generator) -> TrainSample:
        sequence = self.sequences[int(rng.integers(len(self.sequences)))]
        frames = self.frames(sequence)
        template_index = int(rng.integers(len(frames)))
        search_index = int(rng.integers(len(frames)))
        jitter = self.config.search_jitter
        shift = tuple(float(v) for v in rng.uniform(-jitter, jitter, size=2))
        return make_sample(frames[template_index], sequence.ground_truth[template_index],
                           frames[search_index], sequence.ground_truth[search_index],
                           self.model, self.config.positive_radius, shift)

    def batch(self, rng: np.random.Generator, size: int) -> List[TrainSample]:
        return [self.draw(rng) for _ in range(size)]


def compute_loss(outputs: HeadOutputs, labels: np.ndarray, targets: np.ndarray, reg_mask: np.ndarray,
                 config: TrainConfig) -> Tensor:
    """
    cls_weight * BCE(logits, labels) + reg_weight * sum(mask * (1 - IoU)) / max(#mask, 1).

    Args:
        labels, reg_mask: [N, g, g]
        targets: [N, 4, g, g]
    """
    cls_loss = tc.bce_with_logits(outputs.cls, labels[:, None])
    safe_targets = np.where(reg_mask[:, None] > 0, targets, SAFE_TARGET).astype(np.float32)
    reg = outputs.reg
    pred = [reg[:, k:k + 1] for k in range(4)]
    true = [Tensor(safe_targets[:, k:k + 1]) for k in range(4)]
    pred_area = (pred[0] + pred[2]) * (pred[1] + pred[3])
    true_area = (true[0] + true[2]) * (true[1] + true[3])
    inter_w = tc.minimum(pred[0], true[0]) + tc.minimum(pred[2], true[2])
    inter_h = tc.minimum(pred[1], true[1]) + tc.minimum(pred[3], true[3])
    inter = inter_w * inter_h
    iou = inter / (pred_area + true_area - inter)
    positives = float(reg_mask.sum())
    reg_loss = ((1.0 - iou) * Tensor(reg_mask[:, None])).sum() * (1.0 / max(positives, 1.0))
    return cls_loss * config.cls_weight + reg_loss * config.reg_weight


class SGD:
    """Stochastic gradient descent with heavy-ball momentum."""

    def __init__(self, params: SequenceType[Parameter], momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.momentum, self.weight_decay = momentum, weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float):
        for param, velocity in zip(self.params, self.velocity):
            grad = param.grad
            if self.weight_decay:
                grad = grad + self.weight_decay * param.data
            velocity *= self.momentum
            velocity += grad
            param.data = (param.data - lr * velocity).astype(np.float32)


def stack_batch(batch: SequenceType[TrainSample]):
    return (Tensor(np.stack([s.template for s in batch])), Tensor(np.stack([s.search for s in batch])),
            np.stack([s.labels for s in batch]), np.stack([s.targets for s in batch]),
            np.stack([s.reg_mask for s in batch]))


def training_step(batch: SequenceType[TrainSample], model: PRLTrackModel, optimizer: SGD, lr: float,
                  config: TrainConfig) -> float:
    """One forward/backward/update; returns the loss before the update."""
    if not batch:
        raise ValueError('training_step needs a nonempty batch')
    template, search, labels, targets, mask = stack_batch(batch)
    model.train()
    graph = GradGraph()
    with graph.record():
        outputs = model(template, search)
        loss = compute_loss(outputs, labels, targets, mask, config)
    value, _ = tc.value_and_grad(graph, loss, optimizer.params)
    optimizer.step(lr)
    return value


class Trainer:
    def __init__(self, config: TrainConfig, model_config: Optional[ModelConfig] = None):
        validate_train_config(config)
        self.config = config
        self.model_config = model_config or model_preset(config.model_preset, config.variant)
        self.model = PRLTrackModel(self.model_config, seed=config.seed)
        self.optimizer = SGD(self.model.parameters(), momentum=config.momentum, weight_decay=config.weight_decay)
        self.losses: List[float] = []

    @property
    def total_steps(self) -> int:
        return self.config.epochs * self.config.steps_per_epoch

    def fit(self, sequences: SequenceType[Sequence], out_dir: Optional[Union[str, Path]] = None) -> List[float]:
        """Run every step of the schedule; saves a checkpoint to ``out_dir`` at the end of each epoch."""
        config = self.config
        rng = np.random.default_rng(config.seed)
        source = SampleSource(sequences, self.model, config)
        total = self.total_steps
        lr = config.warmup_lr_start
        for step in range(total):
            lr = lr_at(step, total, config)
            loss = training_step(source.batch(rng, config.batch_size), self.model, self.optimizer, lr, config)
            if not math.isfinite(loss):
                raise FloatingPointError(f'Loss diverged at step {step}: {loss}')
            self.losses.append(loss)
            if step % config.log_every == 0 or step == total - 1:
                logger.info(f'step {step + 1}/{total} lr={lr:.3e} loss={loss:.4f}')
            if out_dir is not None and (step + 1) % config.steps_per_epoch == 0:
                save_checkpoint(self.model, out_dir, {'step': step + 1, 'lr': lr, 'loss': repr(loss)})
        self.model.eval()
        return self.losses
