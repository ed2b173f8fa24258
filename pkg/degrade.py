"""
Degradation Pipeline
====================

Synthesizes low-quality training inputs from HQ segments in four ordered
stages:

1. Gaussian blur (isotropic, reflect padding)
2. ×4 bicubic downsample with antialiasing
3. Additive Gaussian noise, clamped to [0, 1]
4. 8×8 block-DCT quantization with a quality-scaled table (compression proxy)

Stage parameters are drawn once per segment from the configured ranges, so
every frame of a segment sees the same degradation.
"""

import math
import logging
from dataclasses import dataclass, asdict
from typing import Any, Dict

import numpy as np
import torch
import torch.nn.functional as F
from einops import rearrange
from scipy import ndimage
from scipy.fft import dctn, idctn

import config
from codec import VideoSegment

logger = logging.getLogger(__name__)

# IJG base luminance quantization table
JPEG_LUMA_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)


@dataclass
class DegradationParams:
    """Stage parameters drawn for one segment"""
    segment_index: int
    blur_sigma: float
    noise_std: float
    jpeg_quality: int
    noise_seed: int
    quantize: bool = True

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def scale_factor() -> int:
    return config.SR_SCALE


def _check_range(name: str, rng) -> None:
    low, high = rng
    if low > high:
        raise ValueError(f"degradation range {name} is empty: [{low}, {high}]")


def draw_degradation_params(seed: int, cfg: config.DegradeConfig, segment_index: int = 0) -> DegradationParams:
    """Draw one segment's stage parameters from a stream derived from (seed, segment_index)"""
    for name in ('blur_sigma', 'noise_std', 'jpeg_quality'):
        _check_range(name, getattr(cfg, name))

    rng = np.random.default_rng([seed, segment_index])
    blur = float(rng.uniform(*cfg.blur_sigma)) if cfg.blur_sigma[1] > cfg.blur_sigma[0] else float(cfg.blur_sigma[0])
    noise = float(rng.uniform(*cfg.noise_std)) if cfg.noise_std[1] > cfg.noise_std[0] else float(cfg.noise_std[0])
    quality = int(rng.integers(cfg.jpeg_quality[0], cfg.jpeg_quality[1] + 1))
    noise_seed = int(rng.integers(0, 2 ** 31 - 1))
    return DegradationParams(segment_index=segment_index, blur_sigma=blur, noise_std=noise,
                             jpeg_quality=quality, noise_seed=noise_seed, quantize=cfg.quantize)


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 2-D Gaussian kernel with radius ceil(3σ)"""
    if sigma <= 0:
        raise ValueError(f"blur sigma must be positive, got {sigma}")
    radius = max(1, math.ceil(3.0 * sigma))
    coords = np.arange(-radius, radius + 1, dtype=np.float64)
    xx, yy = np.meshgrid(coords, coords)
    kernel = np.exp(-(xx ** 2 + yy ** 2) / (2.0 * sigma ** 2))
    return kernel / kernel.sum()


def gaussian_blur(frames: np.ndarray, sigma: float) -> np.ndarray:
    """Blur (L, 3, H, W) frames channel by channel; σ = 0 is a no-op"""
    if sigma == 0:
        return frames.copy()
    kernel = gaussian_kernel(sigma)
    out = np.empty_like(frames)
    for i in range(frames.shape[0]):
        for c in range(frames.shape[1]):
            out[i, c] = ndimage.convolve(frames[i, c], kernel, mode='reflect')
    return out


def bicubic_downsample(frames: torch.Tensor, factor: int = config.SR_SCALE) -> torch.Tensor:
    height, width = frames.shape[-2:]
    if height % factor or width % factor:
        raise ValueError(f"frame size {height}x{width} is not divisible by {factor}")
    return F.interpolate(frames, size=(height // factor, width // factor), mode='bicubic',
                         align_corners=False, antialias=True)


def bicubic_upsample(frames: torch.Tensor, factor: int = config.SR_SCALE) -> torch.Tensor:
    height, width = frames.shape[-2:]
    return F.interpolate(frames, size=(height * factor, width * factor), mode='bicubic', align_corners=False)


def add_noise(frames: np.ndarray, std: float, seed: int) -> np.ndarray:
    if std == 0:
        return frames
    rng = np.random.default_rng(seed)
    return np.clip(frames + std * rng.standard_normal(frames.shape), 0.0, 1.0)


def quality_table(quality: int, block: int = config.DCT_BLOCK) -> np.ndarray:
    """IJG quality scaling of the base luminance table"""
    if not 1 <= quality <= 100:
        raise ValueError(f"quality must lie within [1, 100], got {quality}")
    if block != 8:
        raise ValueError("only 8x8 DCT blocks have a quantization table")
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    table = np.floor((JPEG_LUMA_TABLE * scale + 50.0) / 100.0)
    return np.clip(table, 1.0, 255.0)


def dct_quantize(frames: np.ndarray, quality: int, block: int = config.DCT_BLOCK) -> np.ndarray:
    """Quantize each block×block tile of every channel in the orthonormal DCT domain"""
    height, width = frames.shape[-2:]
    if height % block or width % block:
        raise ValueError(f"LQ size {height}x{width} is not divisible by the DCT block {block}")
    table = quality_table(quality, block)
    tiles = rearrange(frames * 255.0 - 128.0, 'l c (by i) (bx j) -> l c by bx i j', i=block, j=block)
    coeffs = dctn(tiles, axes=(-2, -1), norm='ortho')
    coeffs = np.round(coeffs / table) * table
    tiles = idctn(coeffs, axes=(-2, -1), norm='ortho')
    out = rearrange(tiles, 'l c by bx i j -> l c (by i) (bx j)')
    return np.clip((out + 128.0) / 255.0, 0.0, 1.0)


def apply_degradation(hq: VideoSegment, params: DegradationParams,
                      cfg: config.DegradeConfig = None) -> VideoSegment:
    """Run the four stages with fixed parameters"""
    cfg = cfg or config.DegradeConfig()
    _, _, height, width = hq.frames.shape
    factor = scale_factor()
    if height % factor or width % factor:
        raise ValueError(f"HQ size {height}x{width} is not divisible by {factor}")
    if params.quantize and ((height // factor) % cfg.dct_block or (width // factor) % cfg.dct_block):
        raise ValueError(
            f"HQ size {height}x{width} gives LQ {height // factor}x{width // factor}, "
            f"not divisible by the DCT block {cfg.dct_block}; use multiples of {factor * cfg.dct_block}"
        )

    x = gaussian_blur(hq.frames.detach().cpu().numpy().astype(np.float64), params.blur_sigma)
    x = bicubic_downsample(torch.from_numpy(x)).clamp(0.0, 1.0).numpy()
    x = add_noise(x, params.noise_std, params.noise_seed)
    if params.quantize:
        x = dct_quantize(x, params.jpeg_quality, cfg.dct_block)

    lq = torch.from_numpy(np.clip(x, 0.0, 1.0)).to(hq.frames.dtype)
    return VideoSegment(lq, source_id=hq.source_id, frame_offset=hq.frame_offset, pad=hq.pad)


def degrade_segment(hq: VideoSegment, seed: int, cfg: config.DegradeConfig = None,
                    segment_index: int = 0) -> VideoSegment:
    """
    Produce the LQ counterpart of an HQ segment

    Parameters:
    hq: HQ segment (L, 3, H, W), H and W divisible by 4 (and by 32 when quantizing)
    seed: Seed for this segment's parameter draw
    cfg: Stage parameter ranges
    segment_index: Index mixed into the parameter stream

    Returns:
    LQ segment (L, 3, H/4, W/4) in [0, 1]
    """
    cfg = cfg or config.DegradeConfig()
    params = draw_degradation_params(seed, cfg, segment_index)
    return apply_degradation(hq, params, cfg)
