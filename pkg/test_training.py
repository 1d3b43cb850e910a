"""
Tests for the training loop: learning-rate schedule, sample crops, loss,
optimizer, gradient flow and checkpoint determinism.
"""

import math

import numpy as np
import pytest

from config import TrainConfig, model_preset
from services import tensor_core as tc
from services.domain_models import BBox
from services.errors import ConfigError
from services.head import HeadOutputs, ScoreGrid, encode_targets
from services.model import PRLTrackModel, load_checkpoint
from services.synth import generate_sequence
from services.tensor_core import GradGraph, Parameter, Tensor
from services.tracker import read_frame
from services.training import (SGD, Trainer, compute_loss, lr_at, make_sample, stack_batch, training_step,
                               validate_train_config, warmup_steps)

from conftest import make_tiny_config

TINY_GRID = ScoreGrid(size=6, stride=8, search_size=127)


@pytest.fixture
def sequence(tmp_path, small_spec):
    return generate_sequence(small_spec, tmp_path / 'data')


def perfect_outputs(labels, targets, mask):
    logits = np.where(labels > 0, 30.0, -30.0)
    reg = np.where(mask[:, None] > 0, targets, 8.0)
    return HeadOutputs(cls=Tensor(logits[:, None]), reg=Tensor(reg))


# =============================================================================
# Schedule
# =============================================================================

class TestSchedule:
    CONFIG = TrainConfig(epochs=3, steps_per_epoch=7, warmup_epochs=1.0)

    def test_anchor_values(self):
        total = 21
        assert warmup_steps(total, self.CONFIG) == 7
        assert lr_at(0, total, self.CONFIG) == 5e-4
        assert lr_at(6, total, self.CONFIG) == 1e-2
        assert lr_at(20, total, self.CONFIG) == 1e-4

    def test_log_space_midpoints(self):
        assert lr_at(13, 21, self.CONFIG) == pytest.approx(1e-3, rel=1e-9)
        assert lr_at(3, 21, self.CONFIG) == pytest.approx(math.sqrt(5e-4 * 1e-2), rel=1e-9)

    def test_rises_then_falls(self):
        rates = [lr_at(step, 21, self.CONFIG) for step in range(21)]
        assert all(a < b for a, b in zip(rates[:6], rates[1:7]))
        assert all(a > b for a, b in zip(rates[6:-1], rates[7:]))

    def test_step_outside_schedule_rejected(self):
        with pytest.raises(ValueError):
            lr_at(21, 21, self.CONFIG)
        with pytest.raises(ValueError):
            lr_at(-1, 21, self.CONFIG)

    def test_invalid_rates_rejected(self):
        with pytest.raises(ConfigError):
            validate_train_config(TrainConfig(warmup_lr_start=0.1, peak_lr=0.01))
        with pytest.raises(ConfigError):
            validate_train_config(TrainConfig(epochs=2, warmup_epochs=3.0))


# =============================================================================
# Loss
# =============================================================================

class TestLoss:
    def _targets(self):
        labels, targets, mask = encode_targets(BBox(43.0, 43.0, 40.0, 40.0), TINY_GRID, positive_radius=2.0)
        return labels[None], targets[None], mask[None]

    def test_encoded_targets_on_small_grid(self):
        labels, targets, mask = self._targets()
        assert labels.sum() == 13 and mask.sum() == 13
        np.testing.assert_allclose(targets[0, :, 3, 3], [20.0, 20.0, 20.0, 20.0])

    def test_perfect_prediction_has_near_zero_loss(self):
        labels, targets, mask = self._targets()
        loss = compute_loss(perfect_outputs(labels, targets, mask), labels, targets, mask, TrainConfig())
        assert loss.item() <= 1e-4

    def test_iou_term_on_a_single_cell(self):
        config = TrainConfig(cls_weight=0.0, reg_weight=1.2)
        outputs = HeadOutputs(cls=Tensor(np.zeros((1, 1, 1, 1))), reg=Tensor(np.ones((1, 4, 1, 1))))
        targets = np.full((1, 4, 1, 1), 2.0)
        loss = compute_loss(outputs, np.ones((1, 1, 1)), targets, np.ones((1, 1, 1)), config)
        assert loss.item() == pytest.approx(1.2 * 0.75, rel=1e-6)

    def test_no_positives_leaves_classification_only(self, rng):
        labels = np.zeros((2, 6, 6))
        outputs = HeadOutputs(cls=Tensor(rng.standard_normal((2, 1, 6, 6))),
                              reg=Tensor(rng.uniform(1, 20, (2, 4, 6, 6))))
        targets = rng.uniform(-5, 5, (2, 4, 6, 6))
        with_reg = compute_loss(outputs, labels, targets, labels, TrainConfig(reg_weight=1.2)).item()
        without_reg = compute_loss(outputs, labels, targets, labels, TrainConfig(reg_weight=0.0)).item()
        assert math.isfinite(with_reg)
        assert with_reg == pytest.approx(without_reg)

    def test_loss_gradient_matches_finite_differences(self, rng):
        labels, targets, mask = self._targets()
        reg = Tensor(rng.uniform(5, 30, (1, 4, 6, 6)))

        def loss_of_logits(logits):
            return compute_loss(HeadOutputs(cls=logits, reg=reg), labels, targets, mask, TrainConfig())

        assert tc.grad_check(loss_of_logits, Tensor(rng.standard_normal((1, 1, 6, 6)))) <= 1e-3


# =============================================================================
# Optimizer and samples
# =============================================================================

class TestSGD:
    def test_momentum_accumulates(self):
        param = Parameter('p', [1.0])
        optimizer = SGD([param], momentum=0.9)
        param.grad = np.array([2.0], dtype=np.float32)
        optimizer.step(0.1)
        assert param.data[0] == pytest.approx(0.8)
        optimizer.step(0.1)
        assert param.data[0] == pytest.approx(0.8 - 0.1 * 3.8)

    def test_weight_decay_pulls_toward_zero(self):
        param = Parameter('p', [1.0])
        param.grad = np.zeros(1, dtype=np.float32)
        SGD([param], momentum=0.0, weight_decay=0.5).step(0.1)
        assert param.data[0] == pytest.approx(0.95)


class TestSamples:
    def test_unshifted_sample_is_centered(self, sequence):
        model = PRLTrackModel(make_tiny_config())
        frame = read_frame(sequence.frame_paths[0], 0)
        box = sequence.ground_truth[0]
        sample = make_sample(frame, box, frame, box, model, positive_radius=2.0)
        assert sample.template.shape == (3, 87, 87)
        assert sample.search.shape == (3, 127, 127)
        assert sample.box.center == pytest.approx((63.0, 63.0))
        assert sample.labels[3, 3] == 1.0

    def test_shift_moves_the_box(self, sequence):
        model = PRLTrackModel(make_tiny_config())
        frame = read_frame(sequence.frame_paths[0], 0)
        box = sequence.ground_truth[0]
        sample = make_sample(frame, box, frame, box, model, positive_radius=2.0, shift=(4.0, 0.0))
        assert sample.box.center[0] < 63.0
        assert sample.box.center[1] == pytest.approx(63.0)


# =============================================================================
# Gradient flow and determinism
# =============================================================================

class TestTrainingStep:
    def test_every_stage_receives_gradient(self, sequence):
        model = PRLTrackModel(make_tiny_config(), seed=1).train()
        frames = [read_frame(path, index) for index, path in enumerate(sequence.frame_paths)]
        batch = [make_sample(frames[0], sequence.ground_truth[0], frames[k], sequence.ground_truth[k], model, 2.0)
                 for k in (1, 3)]
        template, search, labels, targets, mask = stack_batch(batch)
        params = model.parameters()
        graph = GradGraph()
        with graph.record():
            loss = compute_loss(model(template, search), labels, targets, mask, TrainConfig())
        value, grads = tc.value_and_grad(graph, loss, params)
        assert math.isfinite(value)
        touched = {p.name.split('.')[0] + '.' + p.name.split('.')[1]
                   for p, g in zip(params, grads) if np.abs(g).max() > 0}
        for stage in ('backbone.conv1', 'coarse.gc', 'coarse.ar', 'coarse.sr4', 'coarse.sr5', 'hmg.tokenize',
                      'hmg.block0', 'head.cls2', 'head.reg2'):
            assert stage in touched

    def test_training_is_deterministic(self, sequence, tiny_train_config, tmp_path):
        first = Trainer(tiny_train_config, model_config=make_tiny_config())
        second = Trainer(tiny_train_config, model_config=make_tiny_config())
        first_losses = first.fit([sequence], tmp_path / 'first')
        second_losses = second.fit([sequence], tmp_path / 'second')
        assert len(first_losses) == 4
        assert first_losses == second_losses
        first_state, second_state = first.model.state_dict(), second.model.state_dict()
        assert all(np.array_equal(first_state[name], second_state[name]) for name in first_state)

    def test_checkpoint_restores_the_model(self, sequence, tiny_train_config, tmp_path):
        trainer = Trainer(tiny_train_config, model_config=make_tiny_config())
        losses = trainer.fit([sequence], tmp_path / 'run')
        model, metadata = load_checkpoint(tmp_path / 'run')
        assert metadata['step'] == '4'
        assert float(metadata['loss']) == losses[-1]
        restored, trained = model.state_dict(), trainer.model.state_dict()
        assert all(np.array_equal(restored[name], trained[name]) for name in trained)

    @pytest.mark.slow
    def test_repeated_steps_fit_one_fixed_batch(self, sequence):
        config = TrainConfig(epochs=10, steps_per_epoch=20, warmup_epochs=1.0, warmup_lr_start=5e-4, peak_lr=1.5e-3,
                             final_lr=5e-5, seed=0)
        model = PRLTrackModel(model_preset('desk'), seed=config.seed)
        optimizer = SGD(model.parameters(), momentum=config.momentum)
        frames = [read_frame(path, index) for index, path in enumerate(sequence.frame_paths)]
        batch = [make_sample(frames[0], sequence.ground_truth[0], frames[k], sequence.ground_truth[k], model,
                             config.positive_radius) for k in (2, 5)]
        total = config.epochs * config.steps_per_epoch
        losses = [training_step(batch, model, optimizer, lr_at(step, total, config), config) for step in range(total)]
        assert total == 200
        assert all(np.isfinite(losses))
        assert losses[-1] < losses[0]
        assert losses[-1] < 0.1
