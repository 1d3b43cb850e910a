"""
PRL-Track model assembly.

Wires backbone -> coarse regulators -> depthwise correlation -> HMG -> head for
one ablation variant:
- use_ar / use_sr switch the regulators (disabled levels are plain CNR projections)
- use_flp switches the HMG; without it the head reads the level-5 correlation
  tokens directly

Checkpoints are directories holding weights.prlw, model.yaml and checkpoint.txt.
"""

import logging
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np

from config import ModelConfig, load_config, save_config
from services import weights_io
from services.backbone import Backbone, trace_extents
from services.coarse_reps import CoarseRepresentation, CoarseReps
from services.errors import ShapeError
from services.head import HeadOutputs, PredictionHead, ScoreGrid
from services.hmg import CorrelationMaps, HierarchicalModelingGenerator, correlate_levels, depthwise_xcorr, map_to_tokens
from services.layers import Module
from services.tensor_core import Tensor

logger = logging.getLogger(__name__)

WEIGHTS_FILE = 'weights.prlw'
MODEL_CONFIG_FILE = 'model.yaml'
METADATA_FILE = 'checkpoint.txt'
PIXEL_SCALE = 1.0 / 255.0


def correlation_extent(config: ModelConfig) -> int:
    """Side of the square correlation grid (21 under the default geometry)."""
    template = trace_extents(config.template_size, config.backbone)
    search = trace_extents(config.search_size, config.backbone)
    sides = {s - t + 1 for s, t in zip(search[2:], template[2:])}
    if len(sides) != 1:
        raise ShapeError(f'Correlation grids differ across levels 3-5: {sorted(sides)}')
    side = sides.pop()
    if side < 1:
        raise ShapeError(f'Template size {config.template_size} exceeds search size {config.search_size}')
    return side


class PRLTrackModel(Module):
    def __init__(self, config: ModelConfig, seed: Optional[int] = None):
        super().__init__('model')
        self.config = config
        self.seed = config.seed if seed is None else seed
        rng = np.random.default_rng(self.seed)
        self.grid = ScoreGrid.from_config(config, correlation_extent(config))
        self.backbone = Backbone(config.backbone, rng, eps=config.bn_eps, momentum=config.bn_momentum)
        self.coarse = CoarseRepresentation(config, rng)
        self.hmg = None
        head_channels = config.coarse.rep_width
        if config.use_flp:
            self.hmg = HierarchicalModelingGenerator(config.hmg, config.coarse.rep_width,
                                                     self.grid.size * self.grid.size, rng)
            head_channels = config.hmg.d_model
        self.head = PredictionHead(config.head, head_channels, config.stride, rng)
        logger.debug(f'Built model: flp={config.use_flp} ar={config.coarse.use_ar} sr={config.coarse.use_sr}, '
                     f'{sum(p.size for p in self.parameters())} trainable values')

    def embed(self, patch: Tensor) -> CoarseReps:
        """Coarse representations of a raw-pixel patch [N, 3, S, S]."""
        return self.coarse(self.backbone(patch * PIXEL_SCALE))

    def correlate(self, template: CoarseReps, search: CoarseReps) -> CorrelationMaps:
        return correlate_levels(search, template)

    def fuse(self, template: CoarseReps, search: CoarseReps) -> Tensor:
        """Fused tokens X_o [N, T, D]."""
        if self.hmg is None:
            return map_to_tokens(depthwise_xcorr(search.w5, template.w5))
        return self.hmg(self.correlate(template, search))

    def predict(self, template: CoarseReps, search_patch: Tensor) -> HeadOutputs:
        return self.head(self.fuse(template, self.embed(search_patch)))

    def __call__(self, template_patch: Tensor, search_patch: Tensor) -> HeadOutputs:
        return self.predict(self.embed(template_patch), search_patch)


def save_checkpoint(model: PRLTrackModel, directory: Union[str, Path], metadata: Optional[Dict[str, object]] = None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    weights_io.save_weights(directory / WEIGHTS_FILE, model.state_dict())
    save_config(directory / MODEL_CONFIG_FILE, model.config)
    weights_io.write_metadata(directory / METADATA_FILE, metadata or {})


def load_checkpoint(directory: Union[str, Path]) -> Tuple[PRLTrackModel, Dict[str, str]]:
    """
    Rebuild a model from a checkpoint directory.

    Raises:
        FileNotFoundError: a checkpoint file is missing
        WeightsFormatError: stored weights do not fit the stored config
    """
    directory = Path(directory)
    config = load_config(directory / MODEL_CONFIG_FILE, ModelConfig)
    model = PRLTrackModel(config)
    model.load_state_dict(weights_io.load_weights(directory / WEIGHTS_FILE))
    metadata = {}
    if (directory / METADATA_FILE).exists():
        metadata = weights_io.read_metadata(directory / METADATA_FILE)
    return model.eval(), metadata
