"""
Prediction head and box coding.

The anchor-free head reads the fused tokens X_o as a [D, g, g] map (g = 21 by
default) and predicts a classification logit plus four positive (l, t, r, b)
distances per cell. Cell (i, j) sits at search-patch pixel
(c + s * (j - g//2), c + s * (i - g//2)) with c = (search_size - 1) / 2 and s the
total stride.
"""

import logging
import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from config import HeadConfig, ModelConfig
from services import tensor_core as tc
from services.domain_models import BBox
from services.errors import ShapeError
from services.hmg import tokens_to_map
from services.layers import Conv2d, Module
from services.tensor_core import Tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScoreGrid:
    """Geometry of the score map inside the search patch."""
    size: int = 21
    stride: int = 8
    search_size: int = 287

    @property
    def offset(self) -> float:
        return (self.search_size - 1) / 2.0

    @classmethod
    def from_config(cls, config: ModelConfig, size: int) -> 'ScoreGrid':
        return cls(size=size, stride=config.stride, search_size=config.search_size)

    def cell_centers(self) -> Tuple[np.ndarray, np.ndarray]:
        """(x, y) search-patch coordinates of every cell, each [size, size]."""
        steps = self.offset + self.stride * (np.arange(self.size) - self.size // 2)
        return np.meshgrid(steps, steps)


@dataclass
class HeadOutputs:
    cls: Tensor  # [N, 1, g, g] raw logits
    reg: Tensor  # [N, 4, g, g] positive (l, t, r, b) in search-patch pixels


class PredictionHead(Module):
    def __init__(self, config: HeadConfig, in_channels: int, stride: int, rng: np.random.Generator,
                 name: str = 'head'):
        super().__init__(name)
        self.config, self.stride = config, stride
        self.cls1 = Conv2d(f'{name}.cls1', in_channels, config.hidden, 3, rng, padding=1)
        self.cls2 = Conv2d(f'{name}.cls2', config.hidden, 1, 3, rng, padding=1)
        self.reg1 = Conv2d(f'{name}.reg1', in_channels, config.hidden, 3, rng, padding=1)
        self.reg2 = Conv2d(f'{name}.reg2', config.hidden, 4, 3, rng, padding=1)

    def __call__(self, x_o: Tensor) -> HeadOutputs:
        return predict_maps(x_o, self)


def predict_maps(x_o: Tensor, head: PredictionHead) -> HeadOutputs:
    """
    Run both branches over the token grid.

    Args:
        x_o: [N, T, D] fused tokens, T a perfect square

    Returns:
        HeadOutputs with reg = exp(clip(raw, +-reg_clamp)) * stride.
    """
    if x_o.ndim != 3:
        raise ShapeError(f'predict_maps expects [N, T, D] tokens, got {x_o.shape}')
    tokens = x_o.shape[1]
    side = math.isqrt(tokens)
    if side * side != tokens:
        raise ShapeError(f'predict_maps needs a square token count, got T={tokens}')
    grid = tokens_to_map(x_o, side, side)
    cls = head.cls2(tc.relu(head.cls1(grid)))
    raw = head.reg2(tc.relu(head.reg1(grid)))
    clamp = head.config.reg_clamp
    reg = tc.exp(tc.clip(raw, -clamp, clamp)) * float(head.stride)
    return HeadOutputs(cls=cls, reg=reg)


def hanning_window(size: int) -> np.ndarray:
    window = np.outer(np.hanning(size), np.hanning(size))
    return window.astype(np.float32)


def select_cell(cls_logits: np.ndarray, window: np.ndarray, window_influence: float) -> Tuple[int, int, float]:
    """Argmax of the window-penalized score; returns (i, j, raw sigmoid score there)."""
    if not 0.0 <= window_influence <= 1.0:
        raise ValueError(f'window_influence must lie in [0, 1], got {window_influence}')
    scores = tc.sigmoid(cls_logits.astype(np.float64))
    penalized = scores * (1.0 - window_influence) + window * window_influence
    i, j = np.unravel_index(int(np.argmax(penalized)), penalized.shape)
    return int(i), int(j), float(scores[i, j])


def cell_box(distances: np.ndarray, i: int, j: int, grid: ScoreGrid) -> BBox:
    """Search-coordinate box encoded by (l, t, r, b) at cell (i, j)."""
    xs, ys = grid.cell_centers()
    px, py = float(xs[i, j]), float(ys[i, j])
    left, top, right, bottom = (float(d) for d in distances[:, i, j])
    return BBox(px - left, py - top, left + right, top + bottom)


def decode_box(outputs: HeadOutputs, state, window_influence: float, smooth_lr_k: float) -> Tuple[BBox, float]:
    """
    Pick the best cell and map its box back to frame coordinates.

    Args:
        outputs: head outputs for one search patch (batch index 0 is used)
        state: TrackerState with center, size, search_size_ctx, window and grid
        window_influence: Hanning penalty weight in [0, 1]
        smooth_lr_k: size smoothing gain; lr = clamp(k * score, 0, 1)

    Returns:
        (frame box with smoothed size, peak score)
    """
    grid = state.grid
    i, j, score = select_cell(outputs.cls.data[0, 0], state.window, window_influence)
    search_box = cell_box(outputs.reg.data[0], i, j, grid)
    scale = state.search_size_ctx / grid.search_size
    cx_search, cy_search = search_box.center
    cx = state.center[0] + (cx_search - grid.offset) * scale
    cy = state.center[1] + (cy_search - grid.offset) * scale
    lr = min(max(smooth_lr_k * score, 0.0), 1.0)
    w = state.size[0] * (1.0 - lr) + search_box.w * scale * lr
    h = state.size[1] * (1.0 - lr) + search_box.h * scale * lr
    return BBox.from_center(cx, cy, w, h), score


def encode_targets(box: BBox, grid: ScoreGrid, positive_radius: float = 2.0):
    """
    Label assignment for a box given in search-patch coordinates.

    Returns:
        labels [g, g] in {0, 1}, targets [4, g, g] (l, t, r, b) and a regression
        mask [g, g] of positives whose four targets are all positive.
    """
    xs, ys = grid.cell_centers()
    cx, cy = box.center
    half = grid.size // 2
    ci = int(np.clip(round((cy - grid.offset) / grid.stride) + half, 0, grid.size - 1))
    cj = int(np.clip(round((cx - grid.offset) / grid.stride) + half, 0, grid.size - 1))
    rows, cols = np.meshgrid(np.arange(grid.size), np.arange(grid.size), indexing='ij')
    labels = (np.hypot(rows - ci, cols - cj) <= positive_radius).astype(np.float32)
    targets = np.stack([xs - box.x, ys - box.y, box.x + box.w - xs, box.y + box.h - ys]).astype(np.float32)
    mask = labels * np.all(targets > 0, axis=0)
    return labels, targets, mask.astype(np.float32)
