import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Type, TypeVar, Union

from omegaconf import OmegaConf
from omegaconf.errors import OmegaConfBaseException

from services.errors import ConfigError

SCHEMA_VERSION = 1


@dataclass
class BackboneConfig:
    """Five conv stages; pooling after the flagged ones (stride-reduced AlexNet)."""
    channels: List[int] = field(default_factory=lambda: [96, 256, 384, 384, 256])
    kernels: List[int] = field(default_factory=lambda: [11, 5, 3, 3, 3])
    strides: List[int] = field(default_factory=lambda: [2, 1, 1, 1, 1])
    pool_after: List[bool] = field(default_factory=lambda: [True, True, False, False, False])
    pool_kernel: int = 3
    pool_stride: int = 2


@dataclass
class CoarseConfig:
    gate_width: int = 256   # I1 / I2 channels
    rep_width: int = 256    # C_w, channels of W3, W4, W5
    use_ar: bool = True
    use_sr: bool = True


@dataclass
class HmgConfig:
    d_model: int = 384
    tier_dim: int = 128
    num_blocks: int = 2
    ffn_hidden: int = 768
    attn_scale_dim: float = 128.0
    use_out_proj: bool = False
    ln_eps: float = 1e-5


@dataclass
class HeadConfig:
    hidden: int = 192
    reg_clamp: float = 8.0


@dataclass
class ModelConfig:
    version: int = SCHEMA_VERSION
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    coarse: CoarseConfig = field(default_factory=CoarseConfig)
    hmg: HmgConfig = field(default_factory=HmgConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    use_flp: bool = True
    template_size: int = 127
    search_size: int = 287
    stride: int = 8
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    seed: int = 0


@dataclass
class TrackerConfig:
    version: int = SCHEMA_VERSION
    window_influence: float = 0.40
    smooth_lr_k: float = 0.30
    min_size: float = 10.0


@dataclass
class TrainConfig:
    version: int = SCHEMA_VERSION
    model_preset: str = 'desk'
    variant: str = 'full'
    epochs: int = 12
    steps_per_epoch: int = 100
    batch_size: int = 4
    warmup_lr_start: float = 5e-4
    peak_lr: float = 1e-2
    final_lr: float = 1e-4
    warmup_epochs: float = 2.0
    momentum: float = 0.9
    weight_decay: float = 0.0
    cls_weight: float = 1.0
    reg_weight: float = 1.2
    positive_radius: float = 2.0
    search_jitter: float = 8.0
    seed: int = 0
    log_every: int = 20


@dataclass
class OccluderSpec:
    start: int = 0
    end: int = 0
    coverage: float = 0.5


@dataclass
class SynthSpec:
    name: str = 'synth'
    seed: int = 0
    frame_width: int = 320
    frame_height: int = 240
    frame_count: int = 20
    texture_seed: int = 1
    object_width: float = 40.0
    object_height: float = 30.0
    velocity_x: float = 2.0
    velocity_y: float = 1.0
    jitter_amplitude: float = 1.5
    jitter_period: float = 12.0
    aspect_drift: float = 0.0    # log aspect-ratio change per frame
    scale_drift: float = 0.0     # log scale change per frame
    occluders: List[OccluderSpec] = field(default_factory=list)
    gain_start: float = 1.0
    gain_end: float = 1.0
    clutter_density: float = 0.0  # clutter shapes per 10k pixels


@dataclass
class SynthDatasetConfig:
    version: int = SCHEMA_VERSION
    sequences: List[SynthSpec] = field(default_factory=list)


# Widths small enough for CPU training on synthetic data; geometry is unchanged.
DESK_MODEL = ModelConfig(
    backbone=BackboneConfig(channels=[8, 16, 24, 24, 16]),
    coarse=CoarseConfig(gate_width=16, rep_width=16),
    hmg=HmgConfig(d_model=24, tier_dim=8, ffn_hidden=48, attn_scale_dim=8.0),
    head=HeadConfig(hidden=16),
)

MODEL_PRESETS = {
    'standard': ModelConfig(),
    'desk': DESK_MODEL,
    'default': ModelConfig(),
}

# (use_ar, use_sr, use_flp) per row of the ablation ladder
ABLATION_VARIANTS = {
    'baseline': (False, False, False),
    'baseline_flp': (False, False, True),
    'baseline_sr_flp': (False, True, True),
    'baseline_ar_flp': (True, False, True),
    'full': (True, True, True),
}


def model_preset(name: str, variant: str = 'full') -> ModelConfig:
    if name not in MODEL_PRESETS:
        raise ConfigError(f'Unknown model preset {name!r}; choose from {sorted(MODEL_PRESETS)}')
    return apply_variant(MODEL_PRESETS[name], variant)


def apply_variant(config: ModelConfig, variant: str) -> ModelConfig:
    if variant not in ABLATION_VARIANTS:
        raise ConfigError(f'Unknown variant {variant!r}; choose from {sorted(ABLATION_VARIANTS)}')
    result = copy.deepcopy(config)
    result.coarse.use_ar, result.coarse.use_sr, result.use_flp = ABLATION_VARIANTS[variant]
    return result


T = TypeVar('T')


def load_config(path: Union[str, Path], schema: Type[T]) -> T:
    """
    Read a YAML config file and validate it against a dataclass schema.

    Raises:
        ConfigError: unknown keys, wrong types or an unsupported version.
    """
    try:
        merged = OmegaConf.merge(OmegaConf.structured(schema), OmegaConf.load(str(path)))
        loaded = OmegaConf.to_object(merged)
    except OmegaConfBaseException as error:
        raise ConfigError(f'{path}: {error}') from error
    if getattr(loaded, 'version', SCHEMA_VERSION) != SCHEMA_VERSION:
        raise ConfigError(f'{path}: unsupported config version {loaded.version} (expected {SCHEMA_VERSION})')
    return loaded


def save_config(path: Union[str, Path], config) -> None:
    Path(path).write_text(OmegaConf.to_yaml(OmegaConf.structured(config)), encoding='utf-8')
