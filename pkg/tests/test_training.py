import json
from dataclasses import replace

import pytest
import torch
import torch.nn as nn

from checkpoint_store import load_checkpoint, state_checksum
from codec import LatentCodec, VideoSegment
import config
from config import DegradeConfig, DenoiserConfig, RunConfig, SemanticConfig
from conftest import micro_denoiser_config
from denoiser import build_denoiser, count_parameters
from errors import CheckpointError, FreezeViolation
from noise_schedule import make_schedule
from seam import ModuleSemanticEncoder, encoder_from_config
from training import (
    LatentBatch, build_stage2_network, codec_path, diffusion_loss, freeze_for_stage2, frozen_checksum,
    loss_log_path, lr_latents, optimizer_state, prepare_batch, restore_optimizer, run_training,
    sample_training_batch, save_codec_checkpoint, stage1_denoiser_config, stage1_step, stage2_denoiser_config,
    TwoStageTrainer, stage2_step, strip_prefix,
)
from video_io import read_clips, write_synthetic_dataset

SCHEDULE = make_schedule()


def _latent_batch(batch=2, frames=2, size=4, semantic_dim=8, seed=0):
    g = torch.Generator().manual_seed(seed)
    return LatentBatch(z0=torch.randn(batch, frames, 4, size, size, generator=g),
                       lr=torch.randn(batch, frames, 4, size, size, generator=g),
                       semantic=torch.randn(batch, frames, 3, semantic_dim, generator=g))


def _fixed_noise(batch, seed=1):
    g = torch.Generator().manual_seed(seed)
    return torch.randint(0, SCHEDULE.T, (batch.size,), generator=g), torch.randn(batch.z0.shape, generator=g)


def _trained_stage1(seed=0):
    """Stage-1 network whose output layer has moved off its zero init"""
    net = build_denoiser(stage1_denoiser_config(micro_denoiser_config()), seed)
    g = torch.Generator().manual_seed(seed + 100)
    with torch.no_grad():
        net.out_conv.weight.copy_(torch.randn(net.out_conv.weight.shape, generator=g) * 0.1)
    return net


def _generator(seed=0):
    return torch.Generator().manual_seed(seed)


def test_stage_configs():
    cfg = micro_denoiser_config(tsam_enabled=False)
    s1 = stage1_denoiser_config(cfg)
    assert not s1.temporal_enabled and not s1.tsam_enabled and s1.semantic_enabled
    s2 = stage2_denoiser_config(cfg)
    assert s2.temporal_enabled and not s2.tsam_enabled


def test_training_batch_is_deterministic(hq_data_dir):
    clips = [c.frames for c in read_clips(hq_data_dir)]
    cfg = DegradeConfig()
    a = sample_training_batch(clips, 2, 2, 32, seed=7, stage=2, step=3, degrade_cfg=cfg)
    b = sample_training_batch(clips, 2, 2, 32, seed=7, stage=2, step=3, degrade_cfg=cfg)
    c = sample_training_batch(clips, 2, 2, 32, seed=7, stage=2, step=4, degrade_cfg=cfg)
    assert a.hq.shape == (2, 2, 3, 32, 32)
    assert a.lq.shape == (2, 2, 3, 8, 8)
    assert torch.equal(a.hq, b.hq) and torch.equal(a.lq, b.lq)
    assert not torch.equal(a.lq, c.lq)


def test_training_batch_rejects_small_clips(hq_data_dir):
    clips = [c.frames for c in read_clips(hq_data_dir)]
    with pytest.raises(ValueError):
        sample_training_batch(clips, 1, 5, 32, 0, 1, 0, DegradeConfig())
    with pytest.raises(ValueError):
        sample_training_batch([], 1, 1, 32, 0, 1, 0, DegradeConfig())


def test_prepare_batch_shapes(hq_data_dir):
    torch.manual_seed(0)
    codec = LatentCodec(hidden=8).freeze()
    clips = [c.frames for c in read_clips(hq_data_dir)]
    batch = sample_training_batch(clips, 2, 2, 32, 0, 2, 0, DegradeConfig())
    latents = prepare_batch(batch, codec, encoder_from_config(SemanticConfig(dim=8)))
    assert latents.z0.shape == latents.lr.shape == (2, 2, 4, 8, 8)
    assert latents.semantic.shape == (2, 2, 16, 8)
    assert prepare_batch(batch, codec, None).semantic is None


def test_lr_latents_match_hq_latent_grid():
    torch.manual_seed(0)
    codec = LatentCodec(hidden=8).freeze()
    z = lr_latents(VideoSegment(torch.rand(3, 3, 8, 8)), codec)
    assert z.shape == (3, 4, 8, 8)


def test_initial_loss_is_noise_energy():
    net = build_denoiser(micro_denoiser_config(), seed=0)
    batch = _latent_batch()
    t, eps = _fixed_noise(batch)
    loss = diffusion_loss(net, batch, SCHEDULE, _generator(), t, eps)
    assert loss.item() == pytest.approx((eps ** 2).mean().item(), rel=1e-6)
    assert loss.item() == pytest.approx(1.0, abs=0.3)


def test_diffusion_loss_rejects_mismatched_noise():
    net = build_denoiser(micro_denoiser_config(), seed=0)
    batch = _latent_batch()
    with pytest.raises(ValueError):
        diffusion_loss(net, batch, SCHEDULE, _generator(), torch.zeros(3, dtype=torch.long), None)


def test_stage1_refuses_temporal_parameters():
    net = build_denoiser(micro_denoiser_config(), seed=0)
    optimizer = torch.optim.Adam(net.parameters(), lr=1e-3)
    with pytest.raises(FreezeViolation):
        stage1_step(net, optimizer, _latent_batch(), SCHEDULE, _generator())


def test_stage1_step_updates_backbone():
    net = _trained_stage1()
    before = {n: p.detach().clone() for n, p in net.named_parameters()}
    optimizer = torch.optim.Adam(net.parameters(), lr=1e-3)
    loss = stage1_step(net, optimizer, _latent_batch(frames=1), SCHEDULE, _generator())
    assert loss > 0
    assert any(not torch.equal(before[n], p) for n, p in net.named_parameters())


def test_freeze_for_stage2_trains_only_temporal_modules():
    net = build_stage2_network(micro_denoiser_config(), _trained_stage1().state_dict(), seed=0)
    trainable, checksum = freeze_for_stage2(net)
    assert sum(p.numel() for p in trainable) == count_parameters(net, 'temporal') + count_parameters(net, 'tsam')
    assert checksum == frozen_checksum(net)


def test_frozen_set_unchanged_after_stage2_steps():
    stage1 = _trained_stage1()
    net = build_stage2_network(micro_denoiser_config(), stage1.state_dict(), seed=0)
    trainable, checksum = freeze_for_stage2(net)
    before = {n: p.detach().clone() for n, p in net.named_group_parameters('temporal', 'tsam')}
    optimizer = torch.optim.Adam(trainable, lr=1e-3)
    generator = _generator(3)
    for step in range(10):
        stage2_step(net, optimizer, _latent_batch(seed=step), SCHEDULE, generator, checksum)
    assert frozen_checksum(net) == checksum
    assert any(not torch.equal(before[n], p) for n, p in net.named_group_parameters('temporal', 'tsam'))
    for name, tensor in stage1.state_dict().items():
        assert torch.equal(net.state_dict()[name], tensor), name


def test_stage2_detects_drift_of_frozen_parameters():
    net = build_stage2_network(micro_denoiser_config(), _trained_stage1().state_dict(), seed=0)
    trainable, checksum = freeze_for_stage2(net)
    net.in_conv.weight.requires_grad_(True)
    optimizer = torch.optim.Adam(trainable + [net.in_conv.weight], lr=1e-2)
    with pytest.raises(FreezeViolation):
        stage2_step(net, optimizer, _latent_batch(), SCHEDULE, _generator(), checksum)


def test_stage2_needs_temporal_transformer():
    net = _trained_stage1()
    optimizer = torch.optim.Adam(net.parameters(), lr=1e-3)
    with pytest.raises(ValueError):
        stage2_step(net, optimizer, _latent_batch(), SCHEDULE, _generator(), frozen_checksum(net))


def test_first_stage2_loss_equals_stage1_loss():
    stage1 = _trained_stage1()
    stage2 = build_stage2_network(micro_denoiser_config(), stage1.state_dict(), seed=0)
    batch = _latent_batch(frames=3)
    t, eps = _fixed_noise(batch)
    with torch.no_grad():
        a = diffusion_loss(stage1, batch, SCHEDULE, _generator(), t, eps)
        b = diffusion_loss(stage2, batch, SCHEDULE, _generator(), t, eps)
    assert b.item() == pytest.approx(a.item(), rel=1e-6)


def test_build_stage2_network_checks_state():
    state = _trained_stage1().state_dict()
    extra = dict(state, **{'ghost.weight': torch.zeros(1)})
    with pytest.raises(CheckpointError):
        build_stage2_network(micro_denoiser_config(), extra)
    partial = {k: v for k, v in state.items() if k != 'in_conv.weight'}
    with pytest.raises(CheckpointError):
        build_stage2_network(micro_denoiser_config(), partial)
    wrong = dict(state, **{'in_conv.bias': torch.zeros(3)})
    with pytest.raises(CheckpointError):
        build_stage2_network(micro_denoiser_config(), wrong)


def test_optimizer_state_restores_next_step():
    def run(net, optimizer, seed):
        batch = _latent_batch(frames=1, seed=seed)
        t, eps = _fixed_noise(batch, seed)
        return stage1_step(net, optimizer, batch, SCHEDULE, _generator(), t=t, eps=eps)

    net = _trained_stage1()
    optimizer = torch.optim.Adam(net.parameters(), lr=1e-3)
    run(net, optimizer, 0)
    saved_params = {n: p.detach().clone() for n, p in net.state_dict().items()}
    saved_optim = optimizer_state(optimizer)
    expected = run(net, optimizer, 1)
    expected_params = {n: p.detach().clone() for n, p in net.state_dict().items()}

    clone = _trained_stage1()
    clone.load_state_dict(saved_params)
    clone_optimizer = torch.optim.Adam(clone.parameters(), lr=1e-3)
    restore_optimizer(clone_optimizer, saved_optim)
    assert run(clone, clone_optimizer, 1) == expected
    for name, tensor in clone.state_dict().items():
        assert torch.equal(tensor, expected_params[name]), name


@pytest.fixture
def codec_ckpt(tmp_path, tiny_run_config):
    torch.manual_seed(0)
    path = str(tmp_path / "codec.ckpt")
    save_codec_checkpoint(path, LatentCodec(tiny_run_config.codec.hidden_channels).freeze(), tiny_run_config.codec)
    return path


def _stage(cfg, stage, steps=None):
    return replace(cfg, train=replace(cfg.train, stage=stage, steps=steps or cfg.train.steps))


def test_stage1_run_writes_checkpoint_and_log(tmp_path, tiny_run_config, hq_data_dir, codec_ckpt):
    out = str(tmp_path / "s1" / "stage1.ckpt")
    records = run_training(_stage(tiny_run_config, 1), hq_data_dir, out, codec_checkpoint=codec_ckpt)
    assert [r['step'] for r in records] == [0, 1, 2]
    assert all(r['stage'] == 1 and r['lr'] == 1e-4 for r in records)
    with open(loss_log_path(out)) as fh:
        assert [json.loads(line)['step'] for line in fh] == [0, 1, 2]

    tensors, meta = load_checkpoint(out, expected_stage=('stage1',))
    assert meta['step'] == 3
    assert meta['denoiser']['temporal_enabled'] is False
    assert meta['parameters']['temporal_params'] == 0
    assert any(name.startswith("codec.") for name in tensors)
    assert any(name.startswith("optim.") for name in tensors)


def test_codec_is_pretrained_when_missing(tmp_path, tiny_run_config, hq_data_dir):
    out = str(tmp_path / "stage1.ckpt")
    run_training(_stage(tiny_run_config, 1, steps=1), hq_data_dir, out)
    _, meta = load_checkpoint(codec_path(out), expected_stage=('codec',))
    assert 'final_mse' in meta


def test_stage2_requires_a_stage1_checkpoint(tmp_path, tiny_run_config, hq_data_dir, codec_ckpt):
    with pytest.raises(CheckpointError):
        run_training(_stage(tiny_run_config, 2), hq_data_dir, str(tmp_path / "s2.ckpt"), codec_checkpoint=codec_ckpt)
    with pytest.raises(CheckpointError):
        run_training(_stage(tiny_run_config, 2), hq_data_dir, str(tmp_path / "s2.ckpt"), resume_from=codec_ckpt)


def test_stage2_run_keeps_stage1_weights(tmp_path, tiny_run_config, hq_data_dir, codec_ckpt):
    s1 = str(tmp_path / "stage1.ckpt")
    s2 = str(tmp_path / "stage2.ckpt")
    run_training(_stage(tiny_run_config, 1), hq_data_dir, s1, codec_checkpoint=codec_ckpt)
    records = run_training(_stage(tiny_run_config, 2, steps=2), hq_data_dir, s2, resume_from=s1)
    assert [r['stage'] for r in records] == [2, 2]

    stage1_tensors, _ = load_checkpoint(s1)
    stage2_tensors, meta = load_checkpoint(s2, expected_stage=('stage2',))
    assert meta['frozen_checksum']
    assert meta['denoiser']['temporal_enabled'] and meta['denoiser']['tsam_enabled']
    for name, tensor in strip_prefix(stage1_tensors, "model.").items():
        assert torch.equal(stage2_tensors[f"model.{name}"], tensor), name

    no_tsam = replace(tiny_run_config, denoiser=replace(tiny_run_config.denoiser, tsam_enabled=False))
    with pytest.raises(CheckpointError):
        run_training(_stage(no_tsam, 2, steps=3), hq_data_dir, str(tmp_path / "again.ckpt"), resume_from=s2)


def test_resumed_run_matches_uninterrupted_run(tmp_path, tiny_run_config, hq_data_dir, codec_ckpt):
    full = str(tmp_path / "full" / "stage1.ckpt")
    part = str(tmp_path / "part" / "stage1.ckpt")
    cfg = _stage(tiny_run_config, 1, steps=3)
    full_log = run_training(cfg, hq_data_dir, full, codec_checkpoint=codec_ckpt)
    run_training(_stage(tiny_run_config, 1, steps=2), hq_data_dir, part, codec_checkpoint=codec_ckpt)
    resumed_log = run_training(cfg, hq_data_dir, part, resume_from=part)

    assert [r['loss'] for r in resumed_log] == [r['loss'] for r in full_log]
    full_tensors, _ = load_checkpoint(full)
    part_tensors, _ = load_checkpoint(part)
    for name, tensor in strip_prefix(full_tensors, "model.").items():
        assert torch.equal(part_tensors[f"model.{name}"], tensor), name


def test_stage1_resume_rejects_other_architecture(tmp_path, tiny_run_config, hq_data_dir, codec_ckpt):
    out = str(tmp_path / "stage1.ckpt")
    run_training(_stage(tiny_run_config, 1, steps=1), hq_data_dir, out, codec_checkpoint=codec_ckpt)
    wider = replace(tiny_run_config, denoiser=replace(tiny_run_config.denoiser, base_channels=16))
    with pytest.raises(CheckpointError):
        run_training(_stage(wider, 1, steps=2), hq_data_dir, out, resume_from=out)


@pytest.mark.slow
def test_stage1_overfits_a_fixed_tuple():
    cfg = DenoiserConfig()
    net = build_denoiser(stage1_denoiser_config(cfg), seed=0)
    optimizer = torch.optim.Adam(net.parameters(), lr=config.STAGE1_LEARNING_RATE)
    batch = _latent_batch(batch=1, frames=1, size=8, semantic_dim=cfg.semantic_dim)
    t, eps = _fixed_noise(batch)
    losses = [stage1_step(net, optimizer, batch, SCHEDULE, _generator(), t=t, eps=eps) for _ in range(500)]
    assert losses[-1] < 0.05


def _mean_loss(records):
    return sum(r['loss'] for r in records) / len(records)


@pytest.mark.slow
def test_two_stage_convergence_on_toy_data(tmp_path):
    cfg = RunConfig()
    data_dir = str(tmp_path / "hq")
    write_synthetic_dataset(data_dir, cfg.data.num_clips, cfg.data.num_frames, cfg.data.height,
                            cfg.data.width, cfg.data.seed)

    stage1_ckpt = str(tmp_path / "stage1.ckpt")
    stage1 = run_training(_stage(cfg, 1, steps=2000), data_dir, stage1_ckpt)
    assert len(stage1) == 2000
    first, last = _mean_loss(stage1[:100]), _mean_loss(stage1[-100:])
    assert last <= 0.1 * first

    stage2 = run_training(_stage(cfg, 2, steps=300), data_dir, str(tmp_path / "stage2.ckpt"),
                          resume_from=stage1_ckpt)
    assert all(r['lr'] == config.STAGE2_LEARNING_RATE for r in stage2)
    assert _mean_loss(stage2[-100:]) <= 1.1 * _mean_loss(stage2[:100])


def test_trainer_schedule_follows_train_config(hq_data_dir, tiny_run_config):
    train = replace(tiny_run_config.train, num_timesteps=50, beta_start=1e-3, beta_end=0.05)
    cfg = replace(tiny_run_config, train=train)
    clips = [c.frames for c in read_clips(hq_data_dir)]
    net = build_denoiser(stage1_denoiser_config(cfg.denoiser), seed=0)
    trainer = TwoStageTrainer(cfg, clips, LatentCodec(hidden=8).freeze(), net)
    assert trainer.schedule.T == 50
    assert trainer.schedule.betas[0].item() == pytest.approx(1e-3)
    assert trainer.schedule.betas[-1].item() == pytest.approx(0.05)


class _PooledTokens(nn.Module):
    """(L, 3, 8, 8) frames -> (L, 4, 8) tokens"""

    def __init__(self):
        super().__init__()
        self.proj = nn.Linear(3, 8)

    def forward(self, frames):
        return self.proj(nn.functional.avg_pool2d(frames, 4).flatten(2).transpose(1, 2))


def test_training_step_leaves_semantic_encoder_untouched(hq_data_dir, tiny_run_config):
    clips = [c.frames for c in read_clips(hq_data_dir)]
    net = build_denoiser(stage1_denoiser_config(tiny_run_config.denoiser), seed=0)
    trainer = TwoStageTrainer(tiny_run_config, clips, LatentCodec(hidden=8).freeze(), net)
    torch.manual_seed(0)
    trainer.encoder = ModuleSemanticEncoder(_PooledTokens(), identifier="pooled")
    descriptor = json.dumps(trainer.encoder.descriptor, sort_keys=True)
    weights = state_checksum(trainer.encoder.module.state_dict().items())

    trainer.train_step()
    trainer.train_step()
    assert trainer.step == 2
    assert json.dumps(trainer.encoder.descriptor, sort_keys=True) == descriptor
    assert state_checksum(trainer.encoder.module.state_dict().items()) == weights


def test_codec_is_unchanged_by_diffusion_training(tmp_path, tiny_run_config, hq_data_dir, codec_ckpt):
    out = str(tmp_path / "stage1.ckpt")
    run_training(_stage(tiny_run_config, 1, steps=3), hq_data_dir, out, codec_checkpoint=codec_ckpt)
    before, _ = load_checkpoint(codec_ckpt)
    after, _ = load_checkpoint(out)

    def codec_tensors(tensors):
        return {n: t for n, t in tensors.items() if n.startswith("codec.")}.items()

    assert state_checksum(codec_tensors(after)) == state_checksum(codec_tensors(before))
