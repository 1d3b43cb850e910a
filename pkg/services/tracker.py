"""
Tracking Pipeline Service

Frame-by-frame one-pass tracking:
- crop_patch: mean-padded square crops resampled with an affine warp
- PRLTracker: template embedded once at init, search crop per frame, head decode
- track_sequence: runs a whole sequence and returns one box per frame
"""

import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Tuple, Union

import cv2
import numpy as np

from config import TrackerConfig
from services.coarse_reps import CoarseReps
from services.dataset_io import results_path, write_boxes
from services.domain_models import BBox
from services.errors import DatasetError, ShapeError
from services.head import ScoreGrid, decode_box, hanning_window
from services.model import PRLTrackModel
from services.tensor_core import Tensor

logger = logging.getLogger(__name__)

FrameSource = Union[str, Path, np.ndarray]


def template_context(w: float, h: float) -> float:
    """Side of the template crop: sqrt((w + p)(h + p)) with p = (w + h) / 2."""
    pad = (w + h) / 2.0
    return math.sqrt((w + pad) * (h + pad))


def crop_patch(frame: np.ndarray, center: Tuple[float, float], size_ctx: float, out_size: int) -> Tensor:
    """
    Square crop of side ``size_ctx`` around ``center``, resampled to ``out_size``.

    Frame pixel x maps to patch pixel (x - cx) * out / size_ctx + (out - 1) / 2.
    Regions outside the frame take the per-channel frame mean.

    Args:
        frame: H x W x 3 image
        center: (cx, cy) in frame pixels
        size_ctx: crop side in frame pixels (> 0)
        out_size: output side in pixels (>= 1)

    Returns:
        Tensor [1, 3, out_size, out_size] of raw pixel values
    """
    if not size_ctx > 0 or not math.isfinite(size_ctx):
        raise ShapeError(f'crop_patch needs a positive crop size, got {size_ctx}')
    if out_size < 1:
        raise ShapeError(f'crop_patch needs a positive output size, got {out_size}')
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise ShapeError(f'crop_patch expects an H x W x 3 frame, got {frame.shape}')

    image = frame.astype(np.float32, copy=False)
    scale = out_size / size_ctx
    offset = (out_size - 1) / 2.0
    warp = np.array([[scale, 0.0, offset - center[0] * scale],
                     [0.0, scale, offset - center[1] * scale]], dtype=np.float64)
    mean = image.reshape(-1, 3).mean(axis=0)
    patch = cv2.warpAffine(image, warp, (out_size, out_size), flags=cv2.INTER_LINEAR,
                           borderMode=cv2.BORDER_CONSTANT, borderValue=tuple(float(v) for v in mean))
    return Tensor(patch.transpose(2, 0, 1)[None])


@dataclass
class TrackerState:
    center: Tuple[float, float]
    size: Tuple[float, float]
    template: CoarseReps
    window: np.ndarray
    grid: ScoreGrid
    search_size_ctx: float = 0.0
    score: float = 1.0


class PRLTracker:
    def __init__(self, model: PRLTrackModel, config: TrackerConfig = None):
        self.model = model.eval()
        self.config = config or TrackerConfig()
        model_config = model.config
        self.context_ratio = model_config.search_size / model_config.template_size

    def initialize(self, frame: np.ndarray, box: BBox) -> TrackerState:
        if not box.is_valid():
            raise ValueError(f'Initial box must have positive extents, got {box}')
        height, width = frame.shape[:2]
        cx, cy = box.center
        if not (0 <= cx <= width and 0 <= cy <= height):
            raise ValueError(f'Initial box {box} lies outside the {width}x{height} frame')
        config = self.model.config
        size_ctx = template_context(box.w, box.h)
        template = self.model.embed(crop_patch(frame, (cx, cy), size_ctx, config.template_size))
        return TrackerState(center=(cx, cy), size=(box.w, box.h), template=template,
                            window=hanning_window(self.model.grid.size), grid=self.model.grid)

    def update(self, frame: np.ndarray, state: TrackerState) -> BBox:
        """Advance ``state`` by one frame and return the frame-clipped box."""
        height, width = frame.shape[:2]
        state.search_size_ctx = template_context(*state.size) * self.context_ratio
        patch = crop_patch(frame, state.center, state.search_size_ctx, self.model.config.search_size)
        outputs = self.model.predict(state.template, patch)
        predicted, score = decode_box(outputs, state, self.config.window_influence, self.config.smooth_lr_k)

        cx, cy = predicted.center
        state.center = (min(max(cx, 0.0), float(width)), min(max(cy, 0.0), float(height)))
        state.size = (min(max(predicted.w, self.config.min_size), float(width)),
                      min(max(predicted.h, self.config.min_size), float(height)))
        state.score = score
        return BBox.from_center(*state.center, *state.size).clipped(width, height)


def read_frame(source: FrameSource, index: int) -> np.ndarray:
    if isinstance(source, np.ndarray):
        return source
    frame = cv2.imread(str(source), cv2.IMREAD_COLOR)
    if frame is None:
        raise DatasetError(f'Frame {index} could not be read: {source}')
    return frame


def track_sequence(frames: Iterable[FrameSource], init_box: BBox, model: PRLTrackModel,
                   config: TrackerConfig = None) -> List[BBox]:
    """
    One-pass tracking: output[0] is init_box, then one box per following frame.

    Raises:
        DatasetError: a frame cannot be read (the message names its index)
    """
    tracker = PRLTracker(model, config)
    boxes: List[BBox] = []
    state = None
    started = time.perf_counter()
    for index, source in enumerate(frames):
        frame = read_frame(source, index)
        if state is None:
            state = tracker.initialize(frame, init_box)
            boxes.append(init_box)
            continue
        boxes.append(tracker.update(frame, state))
    if state is None:
        raise DatasetError('Cannot track an empty sequence')
    elapsed = time.perf_counter() - started
    logger.info(f'Tracked {len(boxes)} frames in {elapsed:.2f}s ({len(boxes) / max(elapsed, 1e-9):.1f} FPS)')
    return boxes


def track_dataset(sequences, model: PRLTrackModel, results_dir: Union[str, Path],
                  config: TrackerConfig = None) -> List[Path]:
    """Track every sequence from its first ground-truth box and write one results file each."""
    written = []
    for sequence in sequences:
        boxes = track_sequence(sequence.frame_paths, sequence.ground_truth[0], model, config)
        path = results_path(results_dir, sequence.name)
        write_boxes(path, boxes)
        written.append(path)
    return written
