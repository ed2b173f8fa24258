import pytest
import torch
import torch.nn as nn

from attention_core import Attention, FeedForward
from conftest import micro_denoiser_config
from denoiser import build_denoiser
from gradient_check import finite_difference_check, randomize_parameters
from seam import SemanticSpatialTransformer
from tsam import TSAMBlock

TOLERANCE = 1e-4
UNET_TOLERANCE = 1e-3
FD = dict(n_coords=100, step=1e-5, floor=1e-5)


def _weights(shape, seed=0):
    return torch.randn(shape, generator=torch.Generator().manual_seed(seed))


def test_randomize_parameters_overwrites_zero_init(float64):
    block = TSAMBlock(8, max_frames=4)
    randomize_parameters(block, seed=3)
    assert block.mlp.net[-1].weight.abs().sum() > 0
    assert block.temporal.frame_embedding.abs().sum() > 0
    other = randomize_parameters(TSAMBlock(8, max_frames=4), seed=3)
    for a, b in zip(block.parameters(), other.parameters()):
        assert torch.equal(a, b)


def test_attention_gradients(float64):
    module = randomize_parameters(Attention(6, d_ctx=4), seed=1, scale=0.5)
    q, kv = _weights((2, 3, 6), 1), _weights((2, 5, 4), 2)
    target = _weights((2, 3, 6), 3)
    report = finite_difference_check(module, lambda: (module(q, kv) * target).sum(), **FD)
    assert report.passed(TOLERANCE), report.worst
    assert report.coordinates == 100


def test_feed_forward_gradients(float64):
    module = randomize_parameters(FeedForward(5), seed=2, scale=0.5)
    x, target = _weights((2, 4, 5), 4), _weights((2, 4, 5), 5)
    report = finite_difference_check(module, lambda: (module(x) * target).sum(), **FD)
    assert report.passed(TOLERANCE), report.worst


def test_semantic_block_gradients(float64):
    module = randomize_parameters(SemanticSpatialTransformer(8, 4), seed=3)
    F_map, tokens = _weights((2, 8, 2, 2), 6), _weights((2, 3, 4), 7)
    target = _weights((2, 8, 2, 2), 8)
    report = finite_difference_check(module, lambda: (module(F_map, tokens) * target).sum(), **FD)
    assert report.passed(TOLERANCE), report.worst


def test_tsam_block_gradients(float64):
    module = randomize_parameters(TSAMBlock(8, max_frames=4), seed=4)
    F_map, target = _weights((4, 8, 2, 2), 9), _weights((4, 8, 2, 2), 10)
    report = finite_difference_check(module, lambda: (module(F_map, 2) * target).sum(), **FD)
    assert report.passed(TOLERANCE), report.worst


def test_micro_denoiser_gradients(float64):
    cfg = micro_denoiser_config(max_frames=2)
    net = randomize_parameters(build_denoiser(cfg, seed=0), seed=5)
    z_t, lr = _weights((1, 2, 4, 4, 4), 11), _weights((1, 2, 4, 4, 4), 12)
    semantic, target = _weights((1, 2, 3, cfg.semantic_dim), 13), _weights((1, 2, 4, 4, 4), 14)
    t = torch.tensor([321])
    report = finite_difference_check(net, lambda: (net(z_t, lr, t, semantic) * target).sum(),
                                     n_coords=120, step=1e-5, floor=1e-5)
    assert report.passed(UNET_TOLERANCE), report.worst


def test_wrong_backward_is_detected(float64):
    class HalfGradSquare(torch.autograd.Function):
        @staticmethod
        def forward(ctx, w):
            ctx.save_for_backward(w)
            return (w ** 2).sum()

        @staticmethod
        def backward(ctx, grad):
            (w,) = ctx.saved_tensors
            return grad * w

    module = nn.Linear(3, 1)
    randomize_parameters(module, seed=6, scale=1.0)
    report = finite_difference_check(module, lambda: HalfGradSquare.apply(module.weight), n_coords=3)
    assert not report.passed(0.1)


def test_float32_parameters_are_rejected():
    module = nn.Linear(2, 2)
    with pytest.raises(ValueError):
        finite_difference_check(module, lambda: module(torch.ones(1, 2)).sum())
