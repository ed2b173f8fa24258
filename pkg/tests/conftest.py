import pytest
import torch

from config import (
    RunConfig, DenoiserConfig, CodecConfig, SemanticConfig, TrainConfig, SamplerConfig,
    DataConfig, AblationConfig, DegradeConfig,
)
from video_io import write_synthetic_dataset


def micro_denoiser_config(**overrides) -> DenoiserConfig:
    base = dict(base_channels=8, level_multipliers=[1, 2], attention_levels=[1], timestep_embed_dim=8,
                latent_channels=4, semantic_dim=8, norm_groups=4, max_frames=8)
    base.update(overrides)
    return DenoiserConfig(**base)


@pytest.fixture
def micro_cfg():
    return micro_denoiser_config()


@pytest.fixture
def tiny_run_config():
    return RunConfig(
        denoiser=micro_denoiser_config(),
        codec=CodecConfig(hidden_channels=8, epochs=2, batch_size=4),
        semantic=SemanticConfig(dim=8),
        degrade=DegradeConfig(),
        train=TrainConfig(steps=3, batch_size=2, crop_size=32, checkpoint_every=2, log_every=1, seed=7),
        sampler=SamplerConfig(steps=3, seed=7, segment_length=2),
        data=DataConfig(num_clips=2, num_frames=4, height=32, width=32, seed=7, segment_length=2),
        ablation=AblationConfig(stage1_steps=2, stage2_steps=2, test_clips=1),
    )


@pytest.fixture
def hq_data_dir(tmp_path):
    root = tmp_path / "hq"
    write_synthetic_dataset(str(root), clips=2, frames=4, height=32, width=32, seed=3)
    return str(root)


@pytest.fixture
def float64():
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield torch.float64
    torch.set_default_dtype(previous)


@pytest.fixture
def rng():
    return torch.Generator().manual_seed(1234)
