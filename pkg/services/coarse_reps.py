"""
Coarse Representation Service

Regulators that turn the backbone pyramid into coarse representations:
- Gating controller: F1, F2 -> non-negative weight map alpha_c
- Appearance-aware regulator: W3 = CNR(F3 + alpha_c * F3)
- Semantic-aware regulators: W4 from (W3, F4), W5 from (W4, F5)

With a regulator switched off the level degrades to a plain CNR projection of
its feature map, which is how the ablation variants are assembled.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from config import ModelConfig
from services import tensor_core as tc
from services.backbone import FeaturePyramid
from services.errors import ShapeError
from services.layers import CNR, BatchNorm2d, Conv2d, Module
from services.tensor_core import Tensor

logger = logging.getLogger(__name__)


@dataclass
class GateIntermediates:
    i1: Tensor
    i2: Tensor
    alpha_c: Tensor


@dataclass
class CoarseReps:
    w3: Tensor
    w4: Tensor
    w5: Tensor


class GatingController(Module):
    def __init__(self, name: str, f1_channels: int, f2_channels: int, f3_channels: int, width: int,
                 rng: np.random.Generator, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__(name)
        self.reduce_f1 = Conv2d(f'{name}.conv_f1', f1_channels, width, 1, rng, bias=False)
        self.norm_f1 = BatchNorm2d(f'{name}.bn_f1', width, eps=eps, momentum=momentum)
        self.reduce_f2 = Conv2d(f'{name}.conv_f2', f2_channels, width, 1, rng)
        # 3x3 valid bridges F2's extent to F3's (12 -> 10, 32 -> 30)
        self.fuse = Conv2d(f'{name}.conv_fuse', 2 * width, f3_channels, 3, rng)

    def __call__(self, f1: Tensor, f2: Tensor) -> GateIntermediates:
        return gating_controller(f1, f2, self)


class AppearanceRegulator(Module):
    def __init__(self, name: str, f3_channels: int, rep_width: int, rng: np.random.Generator,
                 eps: float = 1e-5, momentum: float = 0.1):
        super().__init__(name)
        self.cnr = CNR(f'{name}.cnr', f3_channels, rep_width, rng, eps=eps, momentum=momentum)

    def __call__(self, f3: Tensor, alpha_c: Optional[Tensor]) -> Tensor:
        return appearance_regulator(f3, alpha_c, self)


class SemanticRegulator(Module):
    """
    Refines the current level with the previous coarse representation.

    ``modulate`` is None when the regulator is disabled (identity modulation).
    """

    def __init__(self, name: str, prev_width: int, cur_channels: int, rep_width: int, rng: np.random.Generator,
                 enabled: bool = True, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__(name)
        self.modulate = Conv2d(f'{name}.conv_mod', prev_width, cur_channels, 1, rng) if enabled else None
        self.cnr = CNR(f'{name}.cnr', cur_channels, rep_width, rng, eps=eps, momentum=momentum)

    def __call__(self, w_prev: Optional[Tensor], f_cur: Tensor) -> Tensor:
        return semantic_regulator(w_prev, f_cur, self)


def gating_controller(f1: Tensor, f2: Tensor, gc: GatingController) -> GateIntermediates:
    """
    I1 = adaptive_max(BN(conv1x1(F1))) to F2's extent, I2 = conv1x1(F2),
    alpha_c = ReLU(conv3x3(concat(I1, I2))).
    """
    if f1.shape[0] != f2.shape[0]:
        raise ShapeError(f'Gating controller got misaligned pyramids: F1 batch {f1.shape[0]}, F2 batch {f2.shape[0]}')
    if f1.shape[2] < f2.shape[2] or f1.shape[3] < f2.shape[3]:
        raise ShapeError(f'Gating controller needs F1 at least as large as F2, got {f1.shape} and {f2.shape}')
    height, width = f2.shape[2:]
    i1 = tc.adaptive_max_pool2d(gc.norm_f1(gc.reduce_f1(f1)), height, width)
    i2 = gc.reduce_f2(f2)
    alpha_c = tc.relu(gc.fuse(tc.concat([i1, i2], axis=1)))
    return GateIntermediates(i1=i1, i2=i2, alpha_c=alpha_c)


def appearance_regulator(f3: Tensor, alpha_c: Optional[Tensor], regulator: AppearanceRegulator) -> Tensor:
    """W3 = CNR(F3 + alpha_c * F3); a missing gate means CNR(F3)."""
    if alpha_c is None:
        return regulator.cnr(f3)
    if alpha_c.shape != f3.shape:
        raise ShapeError(f'Appearance regulator: alpha_c {alpha_c.shape} does not match F3 {f3.shape}')
    return regulator.cnr(f3 + alpha_c * f3)


def semantic_regulator(w_prev: Optional[Tensor], f_cur: Tensor, regulator: SemanticRegulator) -> Tensor:
    """W_cur = CNR(F_cur + F_cur * conv1x1(BLI(W_prev))); without modulation, CNR(F_cur)."""
    if regulator.modulate is None or w_prev is None:
        return regulator.cnr(f_cur)
    height, width = f_cur.shape[2:]
    if w_prev.shape[2] < height or w_prev.shape[3] < width:
        raise ShapeError(f'Semantic regulator: W_prev {w_prev.shape} is smaller than F_cur {f_cur.shape}')
    if regulator.modulate.out_channels != f_cur.shape[1]:
        raise ShapeError(
            f'Semantic regulator: modulation has {regulator.modulate.out_channels} channels, '
            f'F_cur has {f_cur.shape[1]}')
    modulation = regulator.modulate(tc.bilinear_resize(w_prev, height, width))
    return regulator.cnr(f_cur + f_cur * modulation)


class CoarseRepresentation(Module):
    """GC + AR + two SRs wired according to the ablation switches."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator, name: str = 'coarse'):
        super().__init__(name)
        c1, c2, c3, c4, c5 = config.backbone.channels
        coarse = config.coarse
        eps, momentum = config.bn_eps, config.bn_momentum
        self.use_ar, self.use_sr = coarse.use_ar, coarse.use_sr
        self.gc = None
        if coarse.use_ar:
            self.gc = GatingController(f'{name}.gc', c1, c2, c3, coarse.gate_width, rng, eps=eps, momentum=momentum)
        self.ar = AppearanceRegulator(f'{name}.ar', c3, coarse.rep_width, rng, eps=eps, momentum=momentum)
        self.sr4 = SemanticRegulator(f'{name}.sr4', coarse.rep_width, c4, coarse.rep_width, rng,
                                     enabled=coarse.use_sr, eps=eps, momentum=momentum)
        self.sr5 = SemanticRegulator(f'{name}.sr5', coarse.rep_width, c5, coarse.rep_width, rng,
                                     enabled=coarse.use_sr, eps=eps, momentum=momentum)

    def __call__(self, pyramid: FeaturePyramid) -> CoarseReps:
        alpha_c = None
        if self.gc is not None:
            alpha_c = self.gc(pyramid.f1, pyramid.f2).alpha_c
        w3 = self.ar(pyramid.f3, alpha_c)
        w4 = self.sr4(w3, pyramid.f4)
        w5 = self.sr5(w4, pyramid.f5)
        return CoarseReps(w3=w3, w4=w4, w5=w5)
