"""
Gradient suite: finite-difference checks of every differentiable primitive and
of the composite blocks (GC, AR, SR, coarse chain, backbone, HMG block, head)
at reduced sizes.
"""

import logging
from dataclasses import dataclass
from typing import Callable, List

import numpy as np

from config import BackboneConfig, CoarseConfig, HeadConfig, HmgConfig, ModelConfig
from services import tensor_core as tc
from services.backbone import Backbone
from services.coarse_reps import AppearanceRegulator, CoarseRepresentation, GatingController, SemanticRegulator
from services.head import PredictionHead
from services.hmg import HmgBlock
from services.layers import Module
from services.tensor_core import Tensor

logger = logging.getLogger(__name__)

DEFAULT_TOLERANCE = 1e-3
SMALLEST_PATCH = 87


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error <= self.tolerance


@dataclass
class GradientCase:
    name: str
    fn: Callable[[Tensor], Tensor]
    input: np.ndarray
    step: float = 1e-6
    tolerance: float = DEFAULT_TOLERANCE
    max_checks: int = 40


def separated(rng: np.random.Generator, shape, spacing: float = 0.01) -> np.ndarray:
    """Values on a shuffled grid with no ties and no zeros; safe for max and relu checks."""
    count = int(np.prod(shape))
    return ((rng.permutation(count) - count / 2.0 + 0.5) * spacing).reshape(shape)


def tiny_model_config() -> ModelConfig:
    return ModelConfig(backbone=BackboneConfig(channels=[4, 6, 6, 6, 4]),
                       coarse=CoarseConfig(gate_width=3, rep_width=4),
                       hmg=HmgConfig(d_model=12, tier_dim=4, num_blocks=1, ffn_hidden=8, attn_scale_dim=4.0),
                       head=HeadConfig(hidden=4))


def _inference(module: Module) -> Module:
    return module.eval()


def primitive_cases(rng: np.random.Generator) -> List[GradientCase]:
    weight = Tensor(rng.standard_normal((4, 3, 3, 3)))
    bias = Tensor(rng.standard_normal(4))
    gamma, beta = Tensor(rng.uniform(0.5, 1.5, 3)), Tensor(rng.standard_normal(3))
    mean, var = Tensor(rng.standard_normal(3)), Tensor(rng.uniform(0.5, 2.0, 3))
    lin_w, lin_b = Tensor(rng.standard_normal((5, 3))), Tensor(rng.standard_normal(3))
    ln_gamma, ln_beta = Tensor(rng.uniform(0.5, 1.5, 6)), Tensor(rng.standard_normal(6))
    kernel = Tensor(rng.standard_normal((1, 3, 3, 3)))
    other = Tensor(rng.standard_normal((2, 5, 4)))
    labels = (rng.uniform(size=(2, 6)) > 0.5).astype(np.float64)
    shifted = Tensor(rng.standard_normal((2, 6)))
    return [
        GradientCase('conv2d', lambda x: tc.conv2d(x, weight, bias, stride=2, padding=1),
                     rng.standard_normal((2, 3, 7, 7))),
        GradientCase('conv2d.weight', lambda w: tc.conv2d(Tensor(np.linspace(-1, 1, 2 * 3 * 6 * 6).reshape(2, 3, 6, 6)), w),
                     rng.standard_normal((4, 3, 3, 3))),
        GradientCase('batch_norm.inference', lambda x: tc.batch_norm(x, gamma, beta, mean, var),
                     rng.standard_normal((2, 3, 4, 4))),
        GradientCase('batch_norm.training',
                     lambda x: tc.batch_norm(x, gamma, beta, Tensor(np.zeros(3)), Tensor(np.ones(3)), training=True),
                     rng.standard_normal((2, 3, 4, 4))),
        GradientCase('max_pool2d', lambda x: tc.max_pool2d(x, 3, 2), separated(rng, (1, 2, 7, 7)), step=1e-4),
        GradientCase('adaptive_max_pool2d', lambda x: tc.adaptive_max_pool2d(x, 4, 3), separated(rng, (1, 2, 9, 7)),
                     step=1e-4),
        GradientCase('relu', tc.relu, separated(rng, (3, 8)), step=1e-4, tolerance=1e-4),
        GradientCase('bilinear_resize', lambda x: tc.bilinear_resize(x, 8, 5), rng.standard_normal((1, 2, 6, 4))),
        GradientCase('linear', lambda x: tc.linear(x, lin_w, lin_b), rng.standard_normal((4, 5)), step=1e-4,
                     tolerance=1e-6),
        GradientCase('softmax_rows', tc.softmax_rows, rng.standard_normal((4, 5))),
        GradientCase('layer_norm', lambda x: tc.layer_norm(x, ln_gamma, ln_beta), rng.standard_normal((4, 6))),
        GradientCase('matmul', lambda x: tc.matmul(x, other), rng.standard_normal((2, 3, 5))),
        GradientCase('depthwise_xcorr', lambda x: tc.depthwise_correlation(x, kernel), rng.standard_normal((1, 3, 6, 6))),
        GradientCase('exp_clip', lambda x: tc.exp(tc.clip(x, -8.0, 8.0)), rng.uniform(-2, 2, (3, 4))),
        GradientCase('minimum', lambda x: tc.minimum(x, shifted), separated(rng, (2, 6), spacing=0.37) + 0.005,
                     step=1e-4),
        GradientCase('bce_with_logits', lambda x: tc.bce_with_logits(x, labels), rng.standard_normal((2, 6))),
    ]


def composite_cases(rng: np.random.Generator) -> List[GradientCase]:
    gc = _inference(GatingController('gc', 4, 5, 6, 3, rng))
    f2 = Tensor(rng.standard_normal((1, 5, 5, 5)))
    ar = _inference(AppearanceRegulator('ar', 6, 4, rng))
    alpha = Tensor(rng.uniform(0.0, 1.0, (1, 6, 3, 3)))
    sr = _inference(SemanticRegulator('sr', 4, 6, 4, rng))
    f_cur = Tensor(rng.standard_normal((1, 6, 4, 4)))

    config = tiny_model_config()
    backbone = _inference(Backbone(config.backbone, rng))
    coarse = _inference(CoarseRepresentation(config, rng))
    block = _inference(HmgBlock('block', config.hmg, rng))
    head = _inference(PredictionHead(config.head, config.hmg.d_model, config.stride, rng))
    patch = rng.uniform(0.0, 1.0, (1, 3, SMALLEST_PATCH, SMALLEST_PATCH))
    return [
        GradientCase('gating_controller', lambda x: gc(x, f2).alpha_c, rng.standard_normal((1, 4, 9, 9))),
        GradientCase('appearance_regulator', lambda x: ar(x, alpha), rng.standard_normal((1, 6, 3, 3))),
        GradientCase('semantic_regulator', lambda x: sr(x, f_cur), rng.standard_normal((1, 4, 6, 6))),
        GradientCase('backbone', lambda x: backbone(x).f5, patch, max_checks=20),
        GradientCase('coarse_chain', lambda x: coarse(backbone(x)).w5, patch, max_checks=20),
        GradientCase('hmg_block', block, rng.standard_normal((1, 9, 12))),
        GradientCase('head.cls', lambda x: head(x).cls, rng.standard_normal((1, 9, 12))),
        GradientCase('head.reg', lambda x: head(x).reg, rng.standard_normal((1, 9, 12)) * 0.1),
    ]


def run_suite(seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for case in primitive_cases(rng) + composite_cases(rng):
        error = tc.grad_check(case.fn, Tensor(case.input), step=case.step, max_checks=case.max_checks, seed=seed)
        result = CheckResult(case.name, error, case.tolerance)
        logger.debug(f'{case.name}: {error:.2e} (tolerance {case.tolerance:.0e})')
        if not result.passed:
            logger.warning(f'{case.name}: relative error {error:.2e} exceeds {case.tolerance:.0e}')
        results.append(result)
    return results
