"""
Video Super-Resolution Sampler
==============================

End-to-end inference:
1. Split the LQ video into consecutive L-frame segments (last one padded)
2. Encode bicubically upsampled LQ frames into LR conditioning latents
3. Compute per-frame semantic tokens from the LQ frames
4. Run strided DDPM reverse diffusion from a seeded z_T per segment
5. Decode, trim padding and concatenate

Segments are independent: each draws its noise from a stream derived from
(seed, segment_index), so the processing order never changes a result.
"""

import logging
from typing import Callable, List, Optional

import torch

from config import SamplerConfig
from noise_schedule import (
    NoiseSchedule, LatentSequence, make_schedule, subsample_timesteps, timestep_pairs,
    ddpm_reverse_step, derive_seed,
)
from codec import VideoSegment, LatentCodec, decode
from seam import SemanticEncoder
from denoiser import DenoiserNetwork, ConditioningBundle, predict_noise
from training import lr_latents

logger = logging.getLogger(__name__)

NoisePredictor = Callable[[LatentSequence, int], LatentSequence]


def segment_video(frames: torch.Tensor, L: int, source_id: str = "") -> List[VideoSegment]:
    """
    Split (N, 3, H, W) frames into consecutive non-overlapping segments

    The final short segment is padded by repeating the last frame; its pad
    count is recorded so decode output can be trimmed.
    """
    if L < 1:
        raise ValueError(f"segment length must be >= 1, got {L}")
    if frames.dim() != 4 or frames.shape[0] == 0:
        raise ValueError("cannot segment an empty video")

    segments = []
    for start in range(0, frames.shape[0], L):
        chunk = frames[start:start + L]
        pad = L - chunk.shape[0]
        if pad:
            chunk = torch.cat([chunk, chunk[-1:].expand(pad, *chunk.shape[1:])])
        segments.append(VideoSegment(chunk, source_id=source_id, frame_offset=start, pad=pad))
    return segments


def reverse_diffusion(predict_eps: NoisePredictor, z_T: LatentSequence, schedule: NoiseSchedule,
                      steps: int, generator: torch.Generator) -> LatentSequence:
    """Ancestral sampling from z_T over `steps` strided timesteps; returns ẑ_0"""
    z = LatentSequence(z_T.data, timestep=None)
    for t, t_prev in timestep_pairs(subsample_timesteps(schedule.T, steps)):
        z.timestep = t
        eps_hat = predict_eps(z, t)
        noise = None
        if t_prev >= 0:
            noise = LatentSequence(torch.randn(z.data.shape, generator=generator, dtype=z.data.dtype))
        z = ddpm_reverse_step(z, eps_hat, t, t_prev, schedule, noise)
    return z


def super_resolve_segment(net: DenoiserNetwork, codec: LatentCodec, encoder: Optional[SemanticEncoder],
                          segment: VideoSegment, cfg: SamplerConfig, schedule: NoiseSchedule,
                          segment_index: int) -> VideoSegment:
    """Super-resolve one segment; output keeps the segment's pad"""
    lr = lr_latents(segment, codec)
    semantic = encoder.encode(segment) if net.uses_semantic else None
    generator = torch.Generator().manual_seed(derive_seed(cfg.seed, segment_index))
    z_T = LatentSequence(torch.randn(lr.data.shape, generator=generator, dtype=lr.data.dtype))

    def predict_eps(z: LatentSequence, t: int) -> LatentSequence:
        with torch.no_grad():
            return predict_noise(net, z, ConditioningBundle(lr_latents=lr, semantic=semantic, timestep=t))

    z0 = reverse_diffusion(predict_eps, z_T, schedule, cfg.steps, generator)
    hq = decode(z0, codec, source_id=segment.source_id, frame_offset=segment.frame_offset)
    hq.pad = segment.pad
    return hq


def super_resolve(net: DenoiserNetwork, codec: LatentCodec, encoder: Optional[SemanticEncoder],
                  lq_video: VideoSegment, cfg: SamplerConfig = None,
                  schedule: Optional[NoiseSchedule] = None) -> VideoSegment:
    """
    Super-resolve a whole LQ video ×4

    Parameters:
    net: Trained denoiser
    codec: Frozen codec the denoiser was trained with
    encoder: Semantic encoder (may be None when semantic conditioning is off)
    lq_video: LQ frames (N, 3, H, W)
    cfg: Steps, seed, segment length and SeAM / TSAM toggles
    schedule: Training noise schedule (defaults to the standard linear one)

    Returns:
    HQ video (N, 3, 4H, 4W)
    """
    cfg = cfg or SamplerConfig()
    schedule = schedule or make_schedule()
    _, _, height, width = lq_video.frames.shape
    factor = 2 ** (len(net.cfg.level_multipliers) - 1)
    if height % factor or width % factor:
        raise ValueError(f"LQ size {height}x{width} must be divisible by {factor} for this denoiser")

    net.eval()
    net.set_active(semantic=cfg.semantic_enabled, temporal=True, tsam=cfg.tsam_enabled)
    if net.uses_semantic and encoder is None:
        raise ValueError("semantic conditioning is on but no semantic encoder was given")

    segments = segment_video(lq_video.frames, cfg.segment_length, lq_video.source_id)
    logger.info(f"🚀 Super-resolving {lq_video.num_frames} frames in {len(segments)} segments, "
                f"{cfg.steps} steps, seed {cfg.seed}")
    try:
        outputs = [super_resolve_segment(net, codec, encoder, seg, cfg, schedule, index).trimmed()
                   for index, seg in enumerate(segments)]
    finally:
        net.set_active()
    return VideoSegment(torch.cat(outputs), source_id=lq_video.source_id)
