import pytest
import torch
import torch.nn as nn

from conftest import micro_denoiser_config
from denoiser import (
    ConditioningBundle, build_denoiser, condition_on_lr, count_parameters, load_backbone_state,
    parameter_group, parameter_report, predict_noise, timestep_embedding,
)
from errors import NumericalError
from gradient_check import randomize_parameters
from noise_schedule import LatentSequence
from seam import SemanticEmbedding


def _inputs(cfg, batch=2, frames=3, size=4, seed=0):
    g = torch.Generator().manual_seed(seed)
    z_t = torch.randn(batch, frames, cfg.latent_channels, size, size, generator=g)
    lr = torch.randn(batch, frames, cfg.latent_channels, size, size, generator=g)
    t = torch.randint(0, 1000, (batch,), generator=g)
    sem = torch.randn(batch, frames, 5, cfg.semantic_dim, generator=g) if cfg.semantic_enabled else None
    return z_t, lr, t, sem


def _wake_output(net):
    """Give the zero-initialized output conv non-zero weights"""
    g = torch.Generator().manual_seed(99)
    with torch.no_grad():
        net.out_conv.weight.copy_(torch.randn(net.out_conv.weight.shape, generator=g) * 0.1)


def _attention_params(c, d_ctx=None):
    return c * c + 2 * c * (d_ctx or c) + c * c


def _ffn_params(c, mult=4):
    return c * mult * c + mult * c + mult * c * c + c


def _norm_params(c):
    return 2 * c


def test_build_is_deterministic(micro_cfg):
    a = build_denoiser(micro_cfg, seed=5).state_dict()
    b = build_denoiser(micro_cfg, seed=5).state_dict()
    c = build_denoiser(micro_cfg, seed=6).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert any(not torch.equal(a[k], c[k]) for k in a)


def test_build_does_not_touch_global_rng(micro_cfg):
    torch.manual_seed(11)
    expected = torch.rand(3)
    torch.manual_seed(11)
    build_denoiser(micro_cfg, seed=1)
    assert torch.equal(torch.rand(3), expected)


def test_fresh_network_predicts_zero(micro_cfg):
    net = build_denoiser(micro_cfg)
    with torch.no_grad():
        out = net(*_inputs(micro_cfg))
    assert out.shape == (2, 3, 4, 4, 4)
    assert out.abs().max().item() == 0.0


def test_toggles_off_leave_no_attention_parameters():
    cfg = micro_denoiser_config(semantic_enabled=False, temporal_enabled=False, tsam_enabled=False)
    report = parameter_report(build_denoiser(cfg))
    assert report['semantic_params'] == report['temporal_params'] == report['tsam_params'] == 0
    assert report['backbone_params'] == report['total_params'] > 0


def test_attention_parameter_counts(micro_cfg):
    report = parameter_report(build_denoiser(micro_cfg))
    c, d_s, frames = 16, micro_cfg.semantic_dim, micro_cfg.max_frames
    half = c // 2

    semantic = (_attention_params(c) + _norm_params(c)
                + _attention_params(c, d_s) + _norm_params(c)
                + _ffn_params(c) + _norm_params(c))
    temporal = frames * c + _attention_params(c) + _norm_params(c) + _ffn_params(c) + _norm_params(c)
    spatial_half = _attention_params(half) + _norm_params(half) + _ffn_params(half) + _norm_params(half)
    temporal_half = frames * half + spatial_half
    tsam = spatial_half + temporal_half + c * c + c

    # one block on the way down and one on the way up
    assert report['semantic_params'] == 2 * semantic
    assert report['temporal_params'] == 2 * temporal
    assert report['tsam_params'] == 2 * tsam
    assert sum(report[f"{g}_params"] for g in ('backbone', 'semantic', 'temporal', 'tsam')) == report['total_params']


def test_parameter_group_names():
    assert parameter_group('down_attn.1.semantic.cross_attn.attn.w_q.weight') == 'semantic'
    assert parameter_group('up_attn.0.temporal.frame_embedding') == 'temporal'
    assert parameter_group('up_attn.1.tsam.mlp.net.0.bias') == 'tsam'
    assert parameter_group('down_blocks.0.conv1.weight') == 'backbone'
    assert parameter_group('time_mlp.fc1.weight') == 'backbone'


def test_fresh_semantic_blocks_ignore_tokens(micro_cfg):
    net = build_denoiser(micro_cfg)
    _wake_output(net)
    z_t, lr, t, sem = _inputs(micro_cfg)
    with torch.no_grad():
        a = net(z_t, lr, t, sem)
        b = net(z_t, lr, t, torch.randn_like(sem))
    assert a.abs().max().item() > 0
    torch.testing.assert_close(a, b)


def test_frames_are_independent_without_temporal_modules():
    cfg = micro_denoiser_config(temporal_enabled=False, tsam_enabled=False)
    net = build_denoiser(cfg, seed=2)
    _wake_output(net)
    z_t, lr, t, sem = _inputs(cfg, frames=4)
    perm = torch.tensor([2, 0, 3, 1])
    with torch.no_grad():
        out = net(z_t, lr, t, sem)
        permuted = net(z_t[:, perm], lr[:, perm], t, sem[:, perm])
    torch.testing.assert_close(permuted, out[:, perm])


def test_trained_temporal_modules_mix_frames(micro_cfg):
    net = build_denoiser(micro_cfg, seed=2)
    _wake_output(net)
    with torch.no_grad():
        for block in net.down_attn.values():
            nn.init.normal_(block.tsam.mlp.net[-1].weight, std=0.5)
    z_t, lr, t, sem = _inputs(micro_cfg, frames=3)
    moved = z_t.clone()
    moved[:, 2] += 1.0
    with torch.no_grad():
        a = net(z_t, lr, t, sem)
        b = net(moved, lr, t, sem)
    assert not torch.allclose(a[:, 0], b[:, 0])


def test_stage2_network_starts_where_stage1_ended(micro_cfg):
    stage1 = build_denoiser(micro_denoiser_config(temporal_enabled=False, tsam_enabled=False), seed=4)
    _wake_output(stage1)
    stage2 = build_denoiser(micro_cfg, seed=4)
    missing = load_backbone_state(stage2, stage1.state_dict())
    assert missing
    assert {parameter_group(name) for name in missing} == {'temporal', 'tsam'}

    z_t, lr, t, sem = _inputs(micro_cfg, frames=3)
    with torch.no_grad():
        torch.testing.assert_close(stage2(z_t, lr, t, sem), stage1(z_t, lr, t, sem))


def test_load_backbone_state_rejects_shape_mismatch(micro_cfg):
    net = build_denoiser(micro_cfg)
    state = net.state_dict()
    state['in_conv.bias'] = torch.zeros(3)
    with pytest.raises(ValueError):
        load_backbone_state(net, state)


def test_semantic_tokens_required_when_enabled(micro_cfg):
    net = build_denoiser(micro_cfg)
    z_t, lr, t, _ = _inputs(micro_cfg)
    with pytest.raises(ValueError):
        net(z_t, lr, t, None)


def test_semantic_tokens_rejected_when_disabled():
    cfg = micro_denoiser_config(semantic_enabled=False)
    net = build_denoiser(cfg)
    z_t, lr, t, _ = _inputs(cfg)
    with pytest.raises(ValueError):
        net(z_t, lr, t, torch.zeros(2, 3, 5, cfg.semantic_dim))


def test_runtime_bypass_of_semantic_stage(micro_cfg):
    net = build_denoiser(micro_cfg)
    z_t, lr, t, _ = _inputs(micro_cfg)
    net.set_active(semantic=False)
    assert not net.uses_semantic
    with torch.no_grad():
        assert net(z_t, lr, t, None).shape == z_t.shape
    net.set_active()
    assert net.uses_semantic


def test_input_validation(micro_cfg):
    net = build_denoiser(micro_cfg)
    z_t, lr, t, sem = _inputs(micro_cfg)
    with pytest.raises(ValueError):
        net(z_t, lr[:, :2], t, sem)
    with pytest.raises(ValueError):
        net(z_t, lr, t[:1], sem)
    with pytest.raises(ValueError):
        net(z_t[..., :3, :3], lr[..., :3, :3], t, sem)
    long = torch.zeros(1, 9, 4, 4, 4)
    with pytest.raises(ValueError):
        net(long, long, torch.zeros(1, dtype=torch.long), torch.zeros(1, 9, 5, 8))


def test_invalid_config_rejected():
    with pytest.raises(ValueError):
        build_denoiser(micro_denoiser_config(base_channels=7))
    with pytest.raises(ValueError):
        build_denoiser(micro_denoiser_config(attention_levels=[3]))


def test_non_finite_activation_names_layer(micro_cfg):
    net = build_denoiser(micro_cfg)
    with torch.no_grad():
        net.in_conv.bias.fill_(float('inf'))
    with pytest.raises(NumericalError) as info:
        net(*_inputs(micro_cfg))
    assert info.value.layer == 'in_conv'


def test_condition_on_lr_channel_layout():
    z = torch.zeros(2, 4, 3, 3)
    lr = torch.ones(2, 4, 3, 3)
    out = condition_on_lr(z, lr)
    assert out.shape == (2, 8, 3, 3)
    assert out[:, :4].sum() == 0 and out[:, 4:].min() == 1
    with pytest.raises(ValueError):
        condition_on_lr(z, lr[:1])


def test_timestep_embedding_distinguishes_steps():
    emb = timestep_embedding(torch.tensor([0, 1, 500]), 8)
    assert emb.shape == (3, 8)
    assert emb[0, :4].tolist() == [1.0, 1.0, 1.0, 1.0]
    assert not torch.allclose(emb[1], emb[2])


def test_predict_noise_single_segment(micro_cfg):
    net = build_denoiser(micro_cfg)
    z = LatentSequence(torch.randn(2, 4, 4, 4), timestep=7)
    cond = ConditioningBundle(LatentSequence(torch.randn(2, 4, 4, 4)),
                              SemanticEmbedding(torch.randn(2, 5, micro_cfg.semantic_dim)), timestep=7)
    with torch.no_grad():
        eps = predict_noise(net, z, cond)
    assert eps.shape == (2, 4, 4, 4)
    assert eps.timestep == 7
    with pytest.raises(ValueError):
        predict_noise(net, LatentSequence(z.data, timestep=8), cond)


def test_count_parameters_by_group(micro_cfg):
    net = build_denoiser(micro_cfg)
    assert count_parameters(net) == sum(p.numel() for p in net.parameters())
    assert count_parameters(net, 'temporal') == sum(p.numel() for p in net.parameter_groups()['temporal'])


def test_first_and_last_timestep_give_different_outputs(micro_cfg):
    net = randomize_parameters(build_denoiser(micro_cfg, seed=0), seed=12)
    z_t, lr, _, sem = _inputs(micro_cfg)
    with torch.no_grad():
        first = net(z_t, lr, torch.tensor([0, 0]), sem)
        last = net(z_t, lr, torch.tensor([999, 999]), sem)
    assert torch.isfinite(first).all() and torch.isfinite(last).all()
    assert not torch.allclose(first, last)
