"""
Hierarchical Modeling Generator (HMG)

Fine representation learning over the coarse representations:
- depthwise cross-correlation of search W_k against template W_k per level
- tokenization: one token per correlation cell, channel concat, linear + learned positions
- tier split: Q/K/V projections cut into three contiguous tiers, M_i = (Q_i, K_i, V_i)
- hierarchy cross-attention: H34, H35, H45 with keys/values stacked along the token axis
- block fusion: W_c = LN(concat(H) + X), X_o = LN(FFN(W_c) + W_c)

All token tensors are batched as [N, T, D].
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np

from config import HmgConfig
from services import tensor_core as tc
from services.errors import ShapeError
from services.layers import LayerNorm, Linear, Module
from services.tensor_core import Parameter, Tensor

logger = logging.getLogger(__name__)

TIER_LEVELS = (3, 4, 5)


@dataclass
class CorrelationMaps:
    r3: Tensor
    r4: Tensor
    r5: Tensor

    @property
    def levels(self):
        return self.r3, self.r4, self.r5


@dataclass
class TierPairing:
    """M_i = Concat(Q_i, K_i, V_i), kept as its three parts."""
    q: Tensor
    k: Tensor
    v: Tensor

    def packed(self) -> Tensor:
        return tc.concat([self.q, self.k, self.v], axis=-1)


@dataclass
class CrossAttention:
    h34: Tensor
    h35: Tensor
    h45: Tensor
    maps: Dict[str, Tensor] = field(default_factory=dict)


@dataclass
class TokenBundle:
    x: Tensor
    qhat: Tensor
    khat: Tensor
    vhat: Tensor
    tiers: Dict[int, TierPairing]
    attention: CrossAttention
    w_c: Tensor
    x_o: Tensor


def depthwise_xcorr(search_rep: Tensor, template_rep: Tensor) -> Tensor:
    """
    Per-channel valid sliding dot product of the template over the search map.

    Args:
        search_rep: [N, C, Hs, Ws]
        template_rep: [N, C, Ht, Wt]

    Returns:
        Tensor [N, C, Hs - Ht + 1, Ws - Wt + 1]
    """
    if search_rep.ndim != 4 or template_rep.ndim != 4:
        raise ShapeError(f'depthwise_xcorr expects rank-4 maps, got {search_rep.shape} and {template_rep.shape}')
    if search_rep.shape[:2] != template_rep.shape[:2]:
        raise ShapeError(
            f'depthwise_xcorr batch/channel mismatch: search {search_rep.shape}, template {template_rep.shape}')
    if template_rep.shape[2] > search_rep.shape[2] or template_rep.shape[3] > search_rep.shape[3]:
        raise ShapeError(f'depthwise_xcorr template {template_rep.shape[2:]} exceeds search {search_rep.shape[2:]}')
    return tc.depthwise_correlation(search_rep, template_rep)


def correlate_levels(search_reps, template_reps) -> CorrelationMaps:
    return CorrelationMaps(r3=depthwise_xcorr(search_reps.w3, template_reps.w3),
                           r4=depthwise_xcorr(search_reps.w4, template_reps.w4),
                           r5=depthwise_xcorr(search_reps.w5, template_reps.w5))


def map_to_tokens(feature_map: Tensor) -> Tensor:
    """[N, C, H, W] -> [N, H*W, C]; token t is cell (t // W, t % W)."""
    n, c, h, w = feature_map.shape
    return feature_map.reshape(n, c, h * w).transpose(0, 2, 1)


def tokens_to_map(tokens: Tensor, height: int, width: int) -> Tensor:
    n, t, d = tokens.shape
    if t != height * width:
        raise ShapeError(f'{t} tokens cannot be laid out on a {height}x{width} grid')
    return tokens.transpose(0, 2, 1).reshape(n, d, height, width)


class HmgBlock(Module):
    def __init__(self, name: str, config: HmgConfig, rng: np.random.Generator):
        super().__init__(name)
        d = config.d_model
        self.config = config
        self.qproj = Linear(f'{name}.qproj', d, d, rng)
        self.kproj = Linear(f'{name}.kproj', d, d, rng)
        self.vproj = Linear(f'{name}.vproj', d, d, rng)
        self.out = Linear(f'{name}.out', d, d, rng) if config.use_out_proj else None
        self.ln1 = LayerNorm(f'{name}.ln1', d, eps=config.ln_eps)
        self.ffn1 = Linear(f'{name}.ffn1', d, config.ffn_hidden, rng)
        self.ffn2 = Linear(f'{name}.ffn2', config.ffn_hidden, d, rng)
        self.ln2 = LayerNorm(f'{name}.ln2', d, eps=config.ln_eps)

    def __call__(self, x: Tensor) -> Tensor:
        return hmg_block(x, self)


class HierarchicalModelingGenerator(Module):
    """
    Tokenizer plus a stack of HMG blocks.

    Args:
        config: HMG widths
        in_channels: channels of each correlation map (C_w)
        token_count: T, fixed by the correlation grid (441 by default)
        rng: initialization source
    """

    def __init__(self, config: HmgConfig, in_channels: int, token_count: int, rng: np.random.Generator,
                 name: str = 'hmg'):
        super().__init__(name)
        if config.d_model != 3 * config.tier_dim:
            raise ShapeError(f'd_model ({config.d_model}) must equal 3 * tier_dim ({config.tier_dim})')
        if config.attn_scale_dim <= 0:
            raise ShapeError(f'attn_scale_dim must be positive, got {config.attn_scale_dim}')
        self.config = config
        self.in_channels, self.token_count = in_channels, token_count
        self.tokenize = Linear(f'{name}.tokenize', 3 * in_channels, config.d_model, rng)
        self.posembed = Parameter(f'{name}.posembed',
                                  rng.normal(0.0, 0.02, size=(token_count, config.d_model)).astype(np.float32))
        self.blocks = [HmgBlock(f'{name}.block{k}', config, rng) for k in range(config.num_blocks)]

    def __call__(self, maps: CorrelationMaps) -> Tensor:
        return hmg_forward(maps, self)


def tokenize(maps: CorrelationMaps, generator: HierarchicalModelingGenerator) -> Tensor:
    """
    Concatenate R3, R4, R5 along channels and embed every cell as one token.

    Returns:
        X: [N, T, d_model]
    """
    extents = {level.shape[2:] for level in maps.levels}
    if len(extents) != 1:
        raise ShapeError(f'tokenize needs equal spatial extents, got {[r.shape for r in maps.levels]}')
    height, width = extents.pop()
    if height * width != generator.token_count:
        raise ShapeError(f'tokenize got {height}x{width} cells, positional table holds {generator.token_count}')
    tokens = map_to_tokens(tc.concat(list(maps.levels), axis=1))
    return generator.tokenize(tokens) + generator.posembed


def tier_split(x: Tensor, block: HmgBlock) -> Dict[int, TierPairing]:
    """Project X to Q/K/V and cut each into tiers 3, 4, 5 of tier_dim channels."""
    return _split_projections(*_project(x, block), block.config.tier_dim)


def _project(x: Tensor, block: HmgBlock):
    if x.shape[-1] != block.config.d_model:
        raise ShapeError(f'HMG input width {x.shape[-1]} differs from d_model {block.config.d_model}')
    return block.qproj(x), block.kproj(x), block.vproj(x)


def _split_projections(qhat: Tensor, khat: Tensor, vhat: Tensor, tier_dim: int) -> Dict[int, TierPairing]:
    tiers = {}
    for offset, level in enumerate(TIER_LEVELS):
        lo, hi = offset * tier_dim, (offset + 1) * tier_dim
        tiers[level] = TierPairing(q=qhat[..., lo:hi], k=khat[..., lo:hi], v=vhat[..., lo:hi])
    return tiers


def _attend(query: Tensor, keys: List[Tensor], values: List[Tensor], scale: float):
    stacked_keys = tc.concat(keys, axis=-2)
    stacked_values = tc.concat(values, axis=-2)
    axes = tuple(range(stacked_keys.ndim - 2)) + (stacked_keys.ndim - 1, stacked_keys.ndim - 2)
    weights = tc.softmax_rows(tc.matmul(query, stacked_keys.transpose(*axes)) * scale)
    return tc.matmul(weights, stacked_values), weights


def hierarchy_cross_attention(m3: TierPairing, m4: TierPairing, m5: TierPairing,
                              attn_scale_dim: float) -> CrossAttention:
    """
    Cross-tier attention with token-axis key/value stacking:
        H34 = softmax(Q4 [K3; K4]^T / sqrt(d)) [V3; V4]
        H35 = softmax(Q5 [K3; K5]^T / sqrt(d)) [V3; V5]
        H45 = softmax(Q5 [K4; K5]^T / sqrt(d)) [V4; V5]
    Q3 is never used as a query.
    """
    widths = {t.shape[-1] for m in (m3, m4, m5) for t in (m.q, m.k, m.v)}
    if len(widths) != 1:
        raise ShapeError(f'hierarchy_cross_attention needs equal tier widths, got {sorted(widths)}')
    scale = 1.0 / math.sqrt(attn_scale_dim)
    h34, a34 = _attend(m4.q, [m3.k, m4.k], [m3.v, m4.v], scale)
    h35, a35 = _attend(m5.q, [m3.k, m5.k], [m3.v, m5.v], scale)
    h45, a45 = _attend(m5.q, [m4.k, m5.k], [m4.v, m5.v], scale)
    return CrossAttention(h34=h34, h35=h35, h45=h45, maps={'34': a34, '35': a35, '45': a45})


def run_block(x: Tensor, block: HmgBlock) -> TokenBundle:
    """One HMG block, keeping every intermediate."""
    qhat, khat, vhat = _project(x, block)
    tiers = _split_projections(qhat, khat, vhat, block.config.tier_dim)
    attention = hierarchy_cross_attention(tiers[3], tiers[4], tiers[5], block.config.attn_scale_dim)
    fused = tc.concat([attention.h34, attention.h35, attention.h45], axis=-1)
    if block.out is not None:
        fused = block.out(fused)
    w_c = block.ln1(fused + x)
    x_o = block.ln2(block.ffn2(tc.relu(block.ffn1(w_c))) + w_c)
    return TokenBundle(x=x, qhat=qhat, khat=khat, vhat=vhat, tiers=tiers, attention=attention, w_c=w_c, x_o=x_o)


def hmg_block(x: Tensor, block: HmgBlock) -> Tensor:
    return run_block(x, block).x_o


def hmg_forward(maps: CorrelationMaps, generator: HierarchicalModelingGenerator) -> Tensor:
    x = tokenize(maps, generator)
    for block in generator.blocks:
        x = hmg_block(x, block)
    return x


def attention_cost(token_count: int) -> Dict[str, int]:
    """Score-matrix entries per block: tiered (3 x T x 2T) against all-pairs over three tiers (9 x T x T)."""
    return {
        'tiered': 3 * token_count * 2 * token_count,
        'all_pairs': 9 * token_count * token_count,
    }


def all_pairs_tier_attention(tiers: Dict[int, TierPairing], attn_scale_dim: float) -> List[Tensor]:
    """Every tier queries every tier; the alternative the tiered scheme is measured against."""
    scale = 1.0 / math.sqrt(attn_scale_dim)
    outputs = []
    for query_level in TIER_LEVELS:
        for key_level in TIER_LEVELS:
            h, _ = _attend(tiers[query_level].q, [tiers[key_level].k], [tiers[key_level].v], scale)
            outputs.append(h)
    return outputs
