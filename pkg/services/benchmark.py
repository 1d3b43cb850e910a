"""
Shape trace and latency profile.

shape_table lists the template/search extents of every pyramid level and the
correlation grid of levels 3-5. run_bench times one tracking update stage by
stage and compares the tiered cross-attention against all-pairs tier attention.
"""

import logging
import statistics
import time
from typing import Dict, List

import numpy as np

from config import ModelConfig
from services.backbone import trace_extents
from services.head import decode_box, hanning_window
from services.hmg import TIER_LEVELS, TierPairing, all_pairs_tier_attention, attention_cost, hierarchy_cross_attention
from services.model import PRLTrackModel, correlation_extent
from services.tensor_core import Tensor
from services.tracker import TrackerState, crop_patch, template_context

logger = logging.getLogger(__name__)

STAGES = ('template_embedding', 'search_embedding', 'hmg', 'heads', 'decode')


def shape_table(config: ModelConfig) -> List[str]:
    template = trace_extents(config.template_size, config.backbone)
    search = trace_extents(config.search_size, config.backbone)
    grid = correlation_extent(config)
    rows = [f'template {config.template_size}×{config.template_size} / search {config.search_size}×{config.search_size}']
    for level, (t, s, channels) in enumerate(zip(template, search, config.backbone.channels), start=1):
        row = f'F{level} {t}×{t} / {s}×{s}'
        if level >= 3:
            row += f' → xcorr {grid}×{grid}'
        rows.append(row)
        rows.append(f'    channels {channels}')
    rows.append(f'tokens {grid * grid} × {config.hmg.d_model}, score map {grid}×{grid}')
    return rows


def _time(fn, repeats: int) -> float:
    samples = []
    for _ in range(repeats):
        started = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - started)
    return statistics.median(samples)


def attention_latency(token_count: int, tier_dim: int, attn_scale_dim: float, repeats: int = 3,
                      seed: int = 0) -> Dict[str, float]:
    rng = np.random.default_rng(seed)
    tiers = {level: TierPairing(*(Tensor(rng.standard_normal((1, token_count, tier_dim))) for _ in range(3)))
             for level in TIER_LEVELS}
    tiered = _time(lambda: hierarchy_cross_attention(tiers[3], tiers[4], tiers[5], attn_scale_dim), repeats)
    all_pairs = _time(lambda: all_pairs_tier_attention(tiers, attn_scale_dim), repeats)
    return {'tiered_s': tiered, 'all_pairs_s': all_pairs, 'ratio': tiered / all_pairs if all_pairs else 0.0}


def run_bench(model: PRLTrackModel, iterations: int = 3, seed: int = 0) -> Dict[str, object]:
    """
    Time each tracking stage on a synthetic frame.

    Returns:
        dict with per-stage median seconds, per-frame latency, FPS, the score-matrix
        entry counts and the measured tiered/all-pairs attention latency ratio
    """
    config = model.config
    model.eval()
    rng = np.random.default_rng(seed)
    frame = rng.integers(0, 256, size=(360, 480, 3), dtype=np.uint8)
    center, size = (240.0, 180.0), (60.0, 40.0)
    template_ctx = template_context(*size)
    search_ctx = template_ctx * config.search_size / config.template_size

    timings: Dict[str, List[float]] = {stage: [] for stage in STAGES}
    for _ in range(iterations):
        marks = [time.perf_counter()]
        template = model.embed(crop_patch(frame, center, template_ctx, config.template_size))
        marks.append(time.perf_counter())
        search = model.embed(crop_patch(frame, center, search_ctx, config.search_size))
        marks.append(time.perf_counter())
        fused = model.fuse(template, search)
        marks.append(time.perf_counter())
        outputs = model.head(fused)
        marks.append(time.perf_counter())
        state = TrackerState(center=center, size=size, template=template, window=hanning_window(model.grid.size),
                             grid=model.grid, search_size_ctx=search_ctx)
        decode_box(outputs, state, 0.4, 0.3)
        marks.append(time.perf_counter())
        for stage, start, stop in zip(STAGES, marks, marks[1:]):
            timings[stage].append(stop - start)

    stages = {stage: statistics.median(values) for stage, values in timings.items()}
    per_frame = sum(value for stage, value in stages.items() if stage != 'template_embedding')
    token_count = model.grid.size * model.grid.size
    result = {
        'stages_s': stages,
        'frame_latency_s': per_frame,
        'fps': 1.0 / per_frame if per_frame > 0 else float('inf'),
        'token_count': token_count,
        'attention_entries': attention_cost(token_count),
        'attention_latency': attention_latency(token_count, config.hmg.tier_dim, config.hmg.attn_scale_dim,
                                               seed=seed),
    }
    logger.info(f"Per-frame latency {per_frame * 1000:.1f} ms ({result['fps']:.2f} FPS)")
    return result
