"""
Backbone - five-stage convolutional feature extractor.

Each stage is conv (valid padding, no bias) -> batch norm -> ReLU, followed by a
3x3/2 max pool after stages 1 and 2. With the default geometry the template
patch (127) yields spatial extents 29/12/10/8/6 and the search patch (287)
yields 69/32/30/28/26.
"""

import logging
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from config import BackboneConfig
from services import tensor_core as tc
from services.errors import ShapeError
from services.layers import BatchNorm2d, Conv2d, Module
from services.tensor_core import Tensor

logger = logging.getLogger(__name__)


@dataclass
class FeaturePyramid:
    f1: Tensor
    f2: Tensor
    f3: Tensor
    f4: Tensor
    f5: Tensor

    @property
    def levels(self) -> Tuple[Tensor, ...]:
        return self.f1, self.f2, self.f3, self.f4, self.f5

    def extents(self) -> Tuple[int, ...]:
        return tuple(level.shape[2] for level in self.levels)


def trace_extents(size: int, config: BackboneConfig) -> List[int]:
    """
    Spatial extent after each stage for a square input of side ``size``.

    Raises:
        ShapeError: naming the first layer whose output would be empty.
    """
    extents = []
    current = size
    for index, (kernel, stride) in enumerate(zip(config.kernels, config.strides), start=1):
        if kernel > current:
            raise ShapeError(f'Input size {size} is too small: conv{index} needs {kernel}, gets {current}')
        current = (current - kernel) // stride + 1
        if config.pool_after[index - 1]:
            if config.pool_kernel > current:
                raise ShapeError(
                    f'Input size {size} is too small: pool{index} needs {config.pool_kernel}, gets {current}')
            current = (current - config.pool_kernel) // config.pool_stride + 1
        extents.append(current)
    return extents


class Backbone(Module):
    """Shared (Siamese) feature extractor for template and search patches."""

    def __init__(self, config: BackboneConfig, rng: np.random.Generator, name: str = 'backbone',
                 eps: float = 1e-5, momentum: float = 0.1):
        super().__init__(name)
        self.config = config
        self.convs = []
        self.norms = []
        in_channels = 3
        for index, (out_channels, kernel, stride) in enumerate(
                zip(config.channels, config.kernels, config.strides), start=1):
            self.convs.append(Conv2d(f'{name}.conv{index}', in_channels, out_channels, kernel, rng,
                                     stride=stride, bias=False))
            self.norms.append(BatchNorm2d(f'{name}.bn{index}', out_channels, eps=eps, momentum=momentum))
            in_channels = out_channels

    def __call__(self, patch: Tensor) -> FeaturePyramid:
        return extract_pyramid(patch, self)


def extract_pyramid(patch: Tensor, backbone: Backbone) -> FeaturePyramid:
    """
    Run the five stages on a [N, 3, S, S] patch.

    Returns:
        FeaturePyramid with F1..F5 (F1/F2 tapped after their pools).
    """
    if patch.ndim != 4 or patch.shape[1] != 3 or patch.shape[2] != patch.shape[3]:
        raise ShapeError(f'extract_pyramid expects a square [N, 3, S, S] patch, got {patch.shape}')
    config = backbone.config
    trace_extents(patch.shape[2], config)

    levels = []
    x = patch
    for index, (conv, norm) in enumerate(zip(backbone.convs, backbone.norms)):
        x = tc.relu(norm(conv(x)))
        if config.pool_after[index]:
            x = tc.max_pool2d(x, config.pool_kernel, config.pool_stride)
        levels.append(x)
    return FeaturePyramid(*levels)
