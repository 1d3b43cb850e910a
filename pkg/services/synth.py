"""
Synthetic Sequence Generator

Renders deterministic UAV-style sequences in benchmark format:
- textured background with optional static clutter
- a textured object moving linearly with sinusoidal jitter
- aspect-ratio and scale drift, occluder intervals and an illumination ramp

All randomness is drawn up front from the spec's seeds, so frames can be rendered
in parallel and identical specs produce byte-identical PNG files.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Set, Tuple, Union

import cv2
import numpy as np

from config import SynthDatasetConfig, SynthSpec
from services.dataset_io import FRAME_DIR, GROUND_TRUTH_FILE, load_sequence, write_boxes, write_tags
from services.domain_models import BBox, Sequence
from services.errors import ConfigError

logger = logging.getLogger(__name__)

TEXTURE_CELLS = 4


@dataclass
class FramePlan:
    index: int
    box: Tuple[int, int, int, int]            # x, y, w, h on the pixel grid
    occluder: Optional[Tuple[int, int, int, int]]
    occluder_texture: Optional[np.ndarray]
    gain: float
    tags: Set[str]


def validate_spec(spec: SynthSpec):
    if spec.frame_count < 1:
        raise ConfigError(f'{spec.name}: frame_count must be >= 1, got {spec.frame_count}')
    if spec.frame_width < 16 or spec.frame_height < 16:
        raise ConfigError(f'{spec.name}: frame size {spec.frame_width}x{spec.frame_height} is too small')
    if spec.object_width < 2 or spec.object_height < 2:
        raise ConfigError(f'{spec.name}: object size must be at least 2x2 pixels')
    if spec.jitter_period <= 0:
        raise ConfigError(f'{spec.name}: jitter_period must be positive')
    if spec.clutter_density < 0 or spec.gain_start <= 0 or spec.gain_end <= 0:
        raise ConfigError(f'{spec.name}: clutter density must be >= 0 and gains > 0')
    for occluder in spec.occluders:
        if not 0 <= occluder.start < occluder.end <= spec.frame_count:
            raise ConfigError(
                f'{spec.name}: occluder interval [{occluder.start}, {occluder.end}) outside [0, {spec.frame_count})')
        if not 0 < occluder.coverage <= 1:
            raise ConfigError(f'{spec.name}: occluder coverage must lie in (0, 1], got {occluder.coverage}')


def sequence_tags(spec: SynthSpec) -> Set[str]:
    tags = set()
    if spec.aspect_drift:
        tags.add('ARC')
    if spec.scale_drift:
        tags.add('SV')
    if spec.gain_start != spec.gain_end:
        tags.add('IV')
    if spec.clutter_density > 0:
        tags.add('BC')
    for occluder in spec.occluders:
        tags.add('FOC' if occluder.coverage >= 1 else 'POC')
    return tags


def object_size(spec: SynthSpec, t: int) -> Tuple[float, float]:
    scale = math.exp(spec.scale_drift * t)
    stretch = math.exp(spec.aspect_drift * t / 2.0)
    return spec.object_width * scale * stretch, spec.object_height * scale / stretch


def plan_frames(spec: SynthSpec, rng: np.random.Generator) -> List[FramePlan]:
    """Ground-truth boxes, occluders and tags for every frame."""
    width, height = spec.frame_width, spec.frame_height
    always = sequence_tags(spec) - {'POC', 'FOC'}
    occluder_textures = [random_texture(rng) for _ in spec.occluders]
    start_x, start_y = width / 2.0, height / 2.0
    plans = []
    for t in range(spec.frame_count):
        w, h = object_size(spec, t)
        if w > width - 2 or h > height - 2:
            raise ConfigError(f'{spec.name}: object grows to {w:.0f}x{h:.0f} at frame {t}, beyond the frame')
        phase = 2.0 * math.pi * t / spec.jitter_period
        cx = start_x + spec.velocity_x * t + spec.jitter_amplitude * math.sin(phase)
        cy = start_y + spec.velocity_y * t + spec.jitter_amplitude * math.cos(phase)
        box_w, box_h = max(int(round(w)), 2), max(int(round(h)), 2)
        x0 = min(max(int(round(cx - box_w / 2.0)), 0), width - box_w)
        y0 = min(max(int(round(cy - box_h / 2.0)), 0), height - box_h)
        box = (x0, y0, box_w, box_h)

        tags = set(always)
        occluder, occluder_texture = None, None
        for spec_occluder, texture in zip(spec.occluders, occluder_textures):
            if spec_occluder.start <= t < spec_occluder.end:
                covered = max(1, int(round(spec_occluder.coverage * box[3])))
                occluder = (box[0], box[1] + box[3] - covered, box[2], covered)
                occluder_texture = texture
                tags.add('FOC' if spec_occluder.coverage >= 1 else 'POC')
        gain = spec.gain_start + (spec.gain_end - spec.gain_start) * t / max(spec.frame_count - 1, 1)
        plans.append(FramePlan(t, box, occluder, occluder_texture, gain, tags))
    return plans


def random_texture(rng: np.random.Generator) -> np.ndarray:
    return rng.integers(0, 256, size=(TEXTURE_CELLS, TEXTURE_CELLS, 3), dtype=np.uint8)


def render_background(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    coarse = rng.uniform(60, 190, size=(spec.frame_height // 16 + 2, spec.frame_width // 16 + 2, 3))
    background = cv2.resize(coarse.astype(np.float32), (spec.frame_width, spec.frame_height),
                            interpolation=cv2.INTER_LINEAR)
    clutter = int(round(spec.clutter_density * spec.frame_width * spec.frame_height / 10000.0))
    for _ in range(clutter):
        cx, cy = rng.integers(0, spec.frame_width), rng.integers(0, spec.frame_height)
        half_w, half_h = rng.integers(3, 12, size=2)
        color = tuple(float(c) for c in rng.uniform(0, 255, size=3))
        cv2.rectangle(background, (int(cx - half_w), int(cy - half_h)), (int(cx + half_w), int(cy + half_h)),
                      color, thickness=-1)
    return background


def paste(canvas: np.ndarray, texture: np.ndarray, rect: Tuple[int, int, int, int]):
    x, y, w, h = rect
    canvas[y:y + h, x:x + w] = cv2.resize(texture, (w, h), interpolation=cv2.INTER_NEAREST)


def render_frame(background: np.ndarray, texture: np.ndarray, plan: FramePlan) -> np.ndarray:
    frame = background.copy()
    paste(frame, texture.astype(np.float32), plan.box)
    if plan.occluder is not None:
        paste(frame, plan.occluder_texture.astype(np.float32), plan.occluder)
    return np.clip(np.rint(frame * plan.gain), 0, 255).astype(np.uint8)


def generate_sequence(spec: SynthSpec, out_dir: Union[str, Path], workers: int = 4) -> Sequence:
    """
    Render ``spec`` into ``out_dir/<spec.name>`` and load it back.

    Raises:
        ConfigError: invalid spec
        OSError: the output directory or a frame cannot be written
    """
    validate_spec(spec)
    rng = np.random.default_rng(spec.seed)
    background = render_background(spec, rng)
    plans = plan_frames(spec, rng)
    texture = random_texture(np.random.default_rng(spec.texture_seed))

    directory = Path(out_dir) / spec.name
    (directory / FRAME_DIR).mkdir(parents=True, exist_ok=True)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        frames = list(pool.map(lambda plan: render_frame(background, texture, plan), plans))
    for plan, frame in zip(plans, frames):
        path = directory / FRAME_DIR / f'{plan.index + 1:06d}.png'
        if not cv2.imwrite(str(path), frame):
            raise OSError(f'Could not write frame {plan.index} to {path}')

    write_boxes(directory / GROUND_TRUTH_FILE, [BBox(*plan.box) for plan in plans])
    write_tags(directory, sequence_tags(spec), [plan.tags for plan in plans])
    logger.info(f'Generated {spec.name}: {spec.frame_count} frames, tags={sorted(sequence_tags(spec))}')
    return load_sequence(directory)


def generate_dataset(config: SynthDatasetConfig, out_dir: Union[str, Path]) -> List[Sequence]:
    names = [spec.name for spec in config.sequences]
    if len(set(names)) != len(names):
        raise ConfigError(f'Sequence names must be unique, got {names}')
    if not names:
        raise ConfigError('Synthetic dataset config lists no sequences')
    return [generate_sequence(spec, out_dir) for spec in config.sequences]
