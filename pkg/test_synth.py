"""
Tests for the synthetic sequence generator.
"""

import copy

import numpy as np
import pytest

from config import OccluderSpec, SynthDatasetConfig, SynthSpec
from services.errors import ConfigError
from services.synth import generate_dataset, generate_sequence, plan_frames, sequence_tags, validate_spec
from services.tracker import read_frame


def test_identical_specs_give_identical_files(tmp_path, small_spec):
    first = generate_sequence(small_spec, tmp_path / 'first')
    second = generate_sequence(copy.deepcopy(small_spec), tmp_path / 'second')
    assert [p.name for p in first.frame_paths][0] == '000001.png'
    for a, b in zip(first.frame_paths, second.frame_paths):
        assert a.read_bytes() == b.read_bytes()
    assert ((tmp_path / 'first' / 'small' / 'groundtruth_rect.txt').read_bytes()
            == (tmp_path / 'second' / 'small' / 'groundtruth_rect.txt').read_bytes())


def test_frames_and_boxes_line_up(tmp_path, small_spec):
    sequence = generate_sequence(small_spec, tmp_path)
    assert len(sequence) == small_spec.frame_count
    frame = read_frame(sequence.frame_paths[0], 0)
    assert frame.shape == (small_spec.frame_height, small_spec.frame_width, 3)


def test_zero_drift_keeps_the_box_size(small_spec):
    plans = plan_frames(small_spec, np.random.default_rng(0))
    assert {plan.box[2:] for plan in plans} == {(24, 18)}


def test_boxes_stay_inside_the_frame():
    spec = SynthSpec(frame_width=100, frame_height=80, frame_count=30, object_width=20, object_height=16,
                     velocity_x=6.0, velocity_y=-5.0)
    for plan in plan_frames(spec, np.random.default_rng(0)):
        x, y, w, h = plan.box
        assert x >= 0 and y >= 0 and x + w <= 100 and y + h <= 80


def test_partial_occlusion_is_tagged_per_frame(tmp_path):
    spec = SynthSpec(name='curtain', frame_width=120, frame_height=90, frame_count=20, object_width=20,
                     object_height=20, velocity_x=0.5, velocity_y=0.0,
                     occluders=[OccluderSpec(start=10, end=20, coverage=0.4)])
    sequence = generate_sequence(spec, tmp_path)
    occluded = [k for k, tags in enumerate(sequence.frame_attributes) if 'POC' in tags]
    assert occluded == list(range(10, 20))
    assert 'POC' in sequence.attributes


def test_occluder_covers_the_lower_part_of_the_box():
    spec = SynthSpec(frame_count=4, object_width=20, object_height=20, occluders=[OccluderSpec(1, 3, 0.4)])
    plans = plan_frames(spec, np.random.default_rng(0))
    assert plans[0].occluder is None and plans[3].occluder is None
    x, y, w, h = plans[1].box
    assert plans[1].occluder == (x, y + h - 8, w, 8)


def test_tags_follow_the_spec():
    spec = SynthSpec(aspect_drift=0.01, scale_drift=0.01, gain_start=1.0, gain_end=0.7, clutter_density=1.0,
                     occluders=[OccluderSpec(0, 2, 1.0)])
    assert sequence_tags(spec) == {'ARC', 'SV', 'IV', 'BC', 'FOC'}
    assert sequence_tags(SynthSpec()) == set()


@pytest.mark.parametrize('change', [
    {'frame_count': 0},
    {'object_width': 1.0},
    {'jitter_period': 0.0},
    {'gain_end': 0.0},
    {'occluders': [OccluderSpec(5, 30, 0.5)]},
    {'occluders': [OccluderSpec(0, 2, 1.5)]},
])
def test_invalid_specs_rejected(change):
    spec = SynthSpec()
    for key, value in change.items():
        setattr(spec, key, value)
    with pytest.raises(ConfigError):
        validate_spec(spec)


def test_growing_past_the_frame_rejected():
    spec = SynthSpec(frame_width=64, frame_height=64, object_width=40, object_height=40, scale_drift=0.2)
    with pytest.raises(ConfigError, match='beyond the frame'):
        plan_frames(spec, np.random.default_rng(0))


def test_dataset_names_must_be_unique(tmp_path):
    config = SynthDatasetConfig(sequences=[SynthSpec(name='a'), SynthSpec(name='a')])
    with pytest.raises(ConfigError, match='unique'):
        generate_dataset(config, tmp_path)
