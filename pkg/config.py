"""
Configuration settings for the latent video super-resolution engine
===================================================================

This file contains all configuration parameters for the engine: environment
detection, diffusion schedule defaults, network sizes, training
hyperparameters, degradation ranges and the run-config file format.

Run config files are JSON with a ``schema_version`` field and one nested
section per concern. Unknown keys raise ConfigError with their dotted path.
"""

import os
import json
import logging
from dataclasses import dataclass, field, fields, asdict, is_dataclass
from typing import Any, Dict, List, Optional, Tuple

from dotenv import load_dotenv

from errors import ConfigError

# Load environment variables from .env file
load_dotenv()

logger = logging.getLogger(__name__)

# =============================================================================
# ENVIRONMENT DETECTION
# =============================================================================

ENVIRONMENT = os.getenv('VSR_ENVIRONMENT', 'development')
IS_PRODUCTION = ENVIRONMENT == 'production'

DEFAULT_SEED = int(os.getenv('VSR_SEED', '0'))
LOG_LEVEL = os.getenv('VSR_LOG_LEVEL', 'WARNING' if IS_PRODUCTION else 'INFO')
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

# =============================================================================
# NOISE SCHEDULE
# =============================================================================

NUM_TRAIN_TIMESTEPS = 1000     # T
BETA_START = 1e-4              # linear schedule start
BETA_END = 0.02                # linear schedule end
NUM_INFERENCE_STEPS = 50       # DDPM sampling steps at inference

# =============================================================================
# LATENT CODEC
# =============================================================================

CODEC_FACTOR = 4               # spatial down/up factor of the toy codec
LATENT_CHANNELS = 4            # C_z
CODEC_HIDDEN_CHANNELS = 32
CODEC_LEARNING_RATE = 1e-3      # peak; cosine-decayed to zero over pretraining
CODEC_BATCH_SIZE = 8
CODEC_EPOCHS = 150

# =============================================================================
# ATTENTION / DENOISER
# =============================================================================

ATTENTION_HEADS = 1            # single-head attention throughout
FFN_MULT = 4                   # hidden expansion of position-wise FFNs
LAYER_NORM_EPS = 1e-5          # per-token LayerNorm epsilon
BASE_CHANNELS = 32
LEVEL_MULTIPLIERS = [1, 2]
TIMESTEP_EMBED_DIM = 64
NORM_GROUPS = 8                # GroupNorm groups inside ResBlocks
MAX_FRAMES = 16                # length of the temporal positional tables
FUSE_MLP_DEPTH = 1             # TSAM fusion MLP depth (single linear layer)

# =============================================================================
# SEMANTIC ENCODER
# =============================================================================

SEMANTIC_ENCODER = 'stub'      # registry key
SEMANTIC_PATCH = 2             # pooling cell size on LQ frames
SEMANTIC_DIM = 32              # d_s
SEMANTIC_PROJECTION_SEED = 20240917

# =============================================================================
# TRAINING
# =============================================================================

BATCH_SIZE = 3
STAGE1_LEARNING_RATE = 1e-4
STAGE2_LEARNING_RATE = 5e-5
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
GRAD_CLIP_NORM = 1.0
CHECKPOINT_EVERY = 500
LOG_EVERY = 1 if not IS_PRODUCTION else 50
CROP_SIZE = 32                 # HQ crop edge in pixels
SEGMENT_LENGTH = 4             # L

# =============================================================================
# DEGRADATION
# =============================================================================

SR_SCALE = 4
BLUR_SIGMA_RANGE = (0.2, 2.0)
NOISE_STD_RANGE = (0.0, 0.05)
JPEG_QUALITY_RANGE = (60, 95)
DCT_BLOCK = 8

# =============================================================================
# METRICS / CLI
# =============================================================================

PSNR_CAP_DB = 99.0
EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3

SCHEMA_VERSION = 1


# =============================================================================
# RUN CONFIG SECTIONS
# =============================================================================

@dataclass
class DenoiserConfig:
    """
    Toy U-Net layout plus the SeAM / temporal / TSAM toggles

    Toggles describe the full stage-2 model; stage 1 always builds without
    the temporal transformer and TSAM.
    """
    base_channels: int = BASE_CHANNELS
    level_multipliers: List[int] = field(default_factory=lambda: list(LEVEL_MULTIPLIERS))
    attention_levels: List[int] = field(default_factory=lambda: [len(LEVEL_MULTIPLIERS) - 1])
    timestep_embed_dim: int = TIMESTEP_EMBED_DIM
    latent_channels: int = LATENT_CHANNELS
    semantic_dim: int = SEMANTIC_DIM
    heads: int = ATTENTION_HEADS
    ffn_mult: int = FFN_MULT
    norm_groups: int = NORM_GROUPS
    max_frames: int = MAX_FRAMES
    fuse_mlp_depth: int = FUSE_MLP_DEPTH
    semantic_self_attention: bool = True
    semantic_enabled: bool = True
    temporal_enabled: bool = True
    tsam_enabled: bool = True

    def level_channels(self) -> List[int]:
        return [self.base_channels * m for m in self.level_multipliers]


@dataclass
class CodecConfig:
    hidden_channels: int = CODEC_HIDDEN_CHANNELS
    latent_channels: int = LATENT_CHANNELS
    epochs: int = CODEC_EPOCHS
    batch_size: int = CODEC_BATCH_SIZE
    learning_rate: float = CODEC_LEARNING_RATE


@dataclass
class SemanticConfig:
    encoder: str = SEMANTIC_ENCODER
    patch: int = SEMANTIC_PATCH
    dim: int = SEMANTIC_DIM
    seed: int = SEMANTIC_PROJECTION_SEED


@dataclass
class DegradeConfig:
    """Ranges the per-segment degradation parameters are drawn from"""
    blur_sigma: Tuple[float, float] = BLUR_SIGMA_RANGE
    noise_std: Tuple[float, float] = NOISE_STD_RANGE
    jpeg_quality: Tuple[int, int] = JPEG_QUALITY_RANGE
    quantize: bool = True
    dct_block: int = DCT_BLOCK


@dataclass
class TrainConfig:
    """Two-stage training hyperparameters; None means 'use the stage default'"""
    stage: int = 1
    batch_size: int = BATCH_SIZE
    learning_rate: Optional[float] = None
    steps: int = 2000
    seed: int = DEFAULT_SEED
    optimizer: str = 'adam'
    adam_betas: Tuple[float, float] = ADAM_BETAS
    adam_eps: float = ADAM_EPS
    grad_clip: float = GRAD_CLIP_NORM
    checkpoint_every: int = CHECKPOINT_EVERY
    log_every: int = LOG_EVERY
    crop_size: int = CROP_SIZE
    segment_length: Optional[int] = None
    num_timesteps: int = NUM_TRAIN_TIMESTEPS
    beta_start: float = BETA_START
    beta_end: float = BETA_END

    def effective_learning_rate(self) -> float:
        if self.learning_rate is not None:
            return self.learning_rate
        return STAGE1_LEARNING_RATE if self.stage == 1 else STAGE2_LEARNING_RATE

    def effective_segment_length(self, data_segment_length: int) -> int:
        if self.segment_length is not None:
            return self.segment_length
        return 1 if self.stage == 1 else data_segment_length


@dataclass
class SamplerConfig:
    steps: int = NUM_INFERENCE_STEPS
    seed: int = DEFAULT_SEED
    segment_length: int = SEGMENT_LENGTH
    semantic_enabled: bool = True
    tsam_enabled: bool = True


@dataclass
class DataConfig:
    """Toy dataset shape used by `synth` and the ablation harness"""
    num_clips: int = 4
    num_frames: int = 8
    height: int = 32
    width: int = 32
    seed: int = DEFAULT_SEED
    segment_length: int = SEGMENT_LENGTH


@dataclass
class AblationConfig:
    stage1_steps: int = 200
    stage2_steps: int = 100
    test_clips: int = 2
    configurations: List[str] = field(default_factory=lambda: ['a', 'b', 'c', 'd'])


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    semantic: SemanticConfig = field(default_factory=SemanticConfig)
    degrade: DegradeConfig = field(default_factory=DegradeConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)


# =============================================================================
# LOADING / SAVING
# =============================================================================

def _build_section(cls, raw: Dict[str, Any], path: str):
    """Build one dataclass section, rejecting unknown keys with their dotted path"""
    if not isinstance(raw, dict):
        raise ConfigError(f"{path or 'config'} must be a mapping, got {type(raw).__name__}")

    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        dotted = ', '.join(f"{path}.{k}" if path else k for k in unknown)
        raise ConfigError(f"Unknown config key(s): {dotted}")

    kwargs = {}
    for name, value in raw.items():
        default = known[name].default_factory() if callable(known[name].default_factory) else known[name].default
        if is_dataclass(default):
            kwargs[name] = _build_section(type(default), value, f"{path}.{name}" if path else name)
        elif isinstance(default, tuple):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def run_config_from_dict(raw: Dict[str, Any]) -> RunConfig:
    """
    Build a RunConfig from a parsed config mapping

    Parameters:
    raw: Mapping parsed from a config file

    Returns:
    RunConfig with defaults filled in for missing keys
    """
    if 'schema_version' not in raw:
        raise ConfigError("Config is missing 'schema_version'")
    if raw['schema_version'] != SCHEMA_VERSION:
        raise ConfigError(
            f"Unsupported schema_version {raw['schema_version']} (expected {SCHEMA_VERSION})"
        )
    cfg = _build_section(RunConfig, raw, '')
    is_valid, errors = validate_config(cfg)
    if not is_valid:
        raise ConfigError('; '.join(errors))
    return cfg


def load_run_config(path: Optional[str]) -> RunConfig:
    """Load a run config file; no path means all defaults"""
    if path is None:
        return RunConfig()
    try:
        with open(path, 'r') as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {path} is not valid JSON: {e}") from e
    except OSError as e:
        raise ConfigError(f"Cannot read config file {path}: {e}") from e
    logger.info(f"⚙️ Loaded run config from {path}")
    return run_config_from_dict(raw)


def run_config_to_dict(cfg: RunConfig) -> Dict[str, Any]:
    """JSON-ready echo of the effective config (tuples become lists)"""
    return json.loads(json.dumps(asdict(cfg)))


def save_run_config(cfg: RunConfig, path: str) -> None:
    with open(path, 'w') as fh:
        json.dump(run_config_to_dict(cfg), fh, indent=2, sort_keys=True)


def write_run_metadata(out_dir: str, command: str, argv: List[str], cfg: RunConfig,
                       seed: int, elapsed_s: float, extra: Optional[Dict[str, Any]] = None) -> str:
    """
    Write run_metadata.json into an output directory

    elapsed_s is the only timing field; everything else is enough to re-run
    the command.
    """
    os.makedirs(out_dir, exist_ok=True)
    record = {
        'command': command,
        'argv': list(argv),
        'seed': seed,
        'config': run_config_to_dict(cfg),
        'elapsed_s': round(elapsed_s, 3),
    }
    if extra:
        record.update(extra)
    path = os.path.join(out_dir, 'run_metadata.json')
    with open(path, 'w') as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
    return path


# =============================================================================
# VALIDATION
# =============================================================================

def validate_denoiser_config(cfg: DenoiserConfig) -> List[str]:
    errors = []
    if not cfg.level_multipliers:
        errors.append("denoiser.level_multipliers must be non-empty")
    if any(m <= 0 for m in cfg.level_multipliers):
        errors.append("denoiser.level_multipliers must be positive")
    if cfg.base_channels <= 0 or cfg.base_channels % 2:
        errors.append("denoiser.base_channels must be a positive even integer")
    channels = cfg.level_channels()
    for level in cfg.attention_levels:
        if level < 0 or level >= len(channels):
            errors.append(f"denoiser.attention_levels contains invalid level {level}")
            continue
        width = channels[level]
        if width % 2:
            errors.append(f"denoiser level {level} has odd width {width}; TSAM needs even channels")
        if width % cfg.heads or (width // 2) % cfg.heads:
            errors.append(f"denoiser level {level} width {width} not divisible by heads={cfg.heads}")
    for width in channels:
        if width % cfg.norm_groups:
            errors.append(f"denoiser width {width} not divisible by norm_groups={cfg.norm_groups}")
    if cfg.timestep_embed_dim <= 0 or cfg.timestep_embed_dim % 2:
        errors.append("denoiser.timestep_embed_dim must be a positive even integer")
    if cfg.semantic_dim <= 0:
        errors.append("denoiser.semantic_dim must be positive")
    if cfg.heads <= 0 or cfg.ffn_mult <= 0 or cfg.max_frames <= 0 or cfg.fuse_mlp_depth <= 0:
        errors.append("denoiser.heads, ffn_mult, max_frames and fuse_mlp_depth must be positive")
    return errors


def _check_range(name: str, rng, low_bound, high_bound) -> List[str]:
    low, high = rng
    if low > high:
        return [f"degrade.{name} range is empty ({low} > {high})"]
    if low < low_bound or high > high_bound:
        return [f"degrade.{name} must lie within [{low_bound}, {high_bound}]"]
    return []


def validate_config(cfg: RunConfig):
    """
    Validate a run configuration

    Returns:
    Tuple of (is_valid, error_messages)
    """
    errors = validate_denoiser_config(cfg.denoiser)

    errors += _check_range('blur_sigma', cfg.degrade.blur_sigma, 0.0, 10.0)
    errors += _check_range('noise_std', cfg.degrade.noise_std, 0.0, 1.0)
    errors += _check_range('jpeg_quality', cfg.degrade.jpeg_quality, 1, 100)

    if cfg.train.stage not in (1, 2):
        errors.append("train.stage must be 1 or 2")
    if cfg.train.batch_size <= 0:
        errors.append("train.batch_size must be positive")
    if cfg.train.steps <= 0:
        errors.append("train.steps must be positive")
    if cfg.train.learning_rate is not None and cfg.train.learning_rate <= 0:
        errors.append("train.learning_rate must be positive")
    if cfg.train.crop_size % (SR_SCALE * cfg.degrade.dct_block) and cfg.degrade.quantize:
        errors.append(f"train.crop_size must be divisible by {SR_SCALE * cfg.degrade.dct_block}")
    if cfg.train.optimizer != 'adam':
        errors.append("train.optimizer must be 'adam'")
    if cfg.train.num_timesteps <= 0:
        errors.append("train.num_timesteps must be positive")
    if not 0 < cfg.train.beta_start <= cfg.train.beta_end < 1:
        errors.append("train betas must satisfy 0 < beta_start <= beta_end < 1")

    if not 1 <= cfg.sampler.steps <= cfg.train.num_timesteps:
        errors.append("sampler.steps must lie within [1, train.num_timesteps]")
    if cfg.sampler.segment_length <= 0 or cfg.data.segment_length <= 0:
        errors.append("segment lengths must be positive")
    if max(cfg.sampler.segment_length, cfg.data.segment_length) > cfg.denoiser.max_frames:
        errors.append("segment length exceeds denoiser.max_frames")

    if cfg.codec.epochs <= 0 or cfg.codec.batch_size <= 0:
        errors.append("codec.epochs and codec.batch_size must be positive")
    if cfg.codec.latent_channels < 3 or cfg.codec.hidden_channels <= 0:
        errors.append("codec.latent_channels must be at least 3 and codec.hidden_channels positive")
    if cfg.semantic.patch <= 0 or cfg.semantic.dim <= 0:
        errors.append("semantic.patch and semantic.dim must be positive")
    if cfg.semantic.dim != cfg.denoiser.semantic_dim:
        errors.append("semantic.dim must equal denoiser.semantic_dim")

    for name in cfg.ablation.configurations:
        if name not in ('a', 'b', 'c', 'd'):
            errors.append(f"ablation.configurations has unknown entry '{name}'")

    return len(errors) == 0, errors


def get_schedule_parameters(cfg: Optional[TrainConfig] = None) -> Dict[str, Any]:
    """Get the noise schedule parameters for a training config"""
    cfg = cfg or TrainConfig()
    return {
        'T': cfg.num_timesteps,
        'beta_start': cfg.beta_start,
        'beta_end': cfg.beta_end,
    }


# Print configuration status when run directly
if __name__ == "__main__":
    print("Latent VSR Configuration")
    print("=" * 40)
    print(f"Environment: {ENVIRONMENT}")
    print(f"Default seed: {DEFAULT_SEED}")
    print(f"Schedule: T={NUM_TRAIN_TIMESTEPS}, beta in [{BETA_START}, {BETA_END}]")
    print(f"Inference steps: {NUM_INFERENCE_STEPS}")

    is_valid, errors = validate_config(RunConfig())
    if is_valid:
        print("✅ Configuration validation passed")
    else:
        print("❌ Configuration validation failed:")
        for error in errors:
            print(f"  - {error}")
