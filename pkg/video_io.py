"""
Frame directory I/O and toy clips.

A clip is a directory of lexicographically ordered 8-bit images. A data
root is either one clip or a directory of clip sub-directories.
"""

import os
import logging
from typing import List, Tuple

import numpy as np
import torch
from PIL import Image

from codec import VideoSegment

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = ('.png', '.jpg', '.jpeg', '.bmp')


def _is_image(name: str) -> bool:
    return name.lower().endswith(IMAGE_EXTENSIONS)


def list_frame_files(directory: str) -> List[str]:
    if not os.path.isdir(directory):
        raise ValueError(f"frame directory not found: {directory}")
    return [os.path.join(directory, name) for name in sorted(os.listdir(directory)) if _is_image(name)]


def read_frames(directory: str) -> torch.Tensor:
    """Frames (N, 3, H, W) float32 in [0, 1]"""
    files = list_frame_files(directory)
    if not files:
        raise ValueError(f"no image files in {directory}")
    arrays = []
    for path in files:
        with Image.open(path) as img:
            arrays.append(np.asarray(img.convert('RGB'), dtype=np.uint8))
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"frames in {directory} have differing sizes: {sorted(shapes)}")
    stacked = np.stack(arrays).astype(np.float32) / 255.0
    return torch.from_numpy(stacked).permute(0, 3, 1, 2).contiguous()


def to_uint8(frames: torch.Tensor) -> np.ndarray:
    """(N, 3, H, W) in [0, 1] -> (N, H, W, 3) uint8"""
    data = frames.detach().cpu().clamp(0.0, 1.0).permute(0, 2, 3, 1).numpy().astype(np.float64)
    return np.round(data * 255.0).astype(np.uint8)


def write_frames(frames: torch.Tensor, directory: str, start_index: int = 0) -> List[str]:
    """Write frames as %05d.png; returns the written paths"""
    os.makedirs(directory, exist_ok=True)
    paths = []
    for i, image in enumerate(to_uint8(frames)):
        path = os.path.join(directory, f"{start_index + i:05d}.png")
        Image.fromarray(image, mode='RGB').save(path)
        paths.append(path)
    return paths


def list_clips(root: str) -> List[Tuple[str, str]]:
    """(clip_id, directory) pairs in sorted order; a root holding images is a single clip"""
    if not os.path.isdir(root):
        raise ValueError(f"data directory not found: {root}")
    if list_frame_files(root):
        return [(os.path.basename(os.path.normpath(root)), root)]
    clips = [(name, os.path.join(root, name)) for name in sorted(os.listdir(root))
             if os.path.isdir(os.path.join(root, name)) and list_frame_files(os.path.join(root, name))]
    if not clips:
        raise ValueError(f"no clips found under {root}")
    return clips


def read_clips(root: str) -> List[VideoSegment]:
    return [VideoSegment(read_frames(path), source_id=clip_id) for clip_id, path in list_clips(root)]


def synthesize_clip(seed: int, num_frames: int, height: int, width: int) -> torch.Tensor:
    """
    Deterministic smooth toy video (N, 3, H, W) in [0, 1]

    Drifting low-frequency sinusoid fields per channel plus a soft disc
    moving on a straight line.
    """
    if num_frames < 1 or height < 1 or width < 1:
        raise ValueError("synthesize_clip needs positive frame count and size")
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(0.0, 1.0, height), np.linspace(0.0, 1.0, width), indexing='ij')

    freq = rng.uniform(0.5, 2.0, size=(3, 2))
    phase = rng.uniform(0.0, 2 * np.pi, size=3)
    drift = rng.uniform(-0.3, 0.3, size=(3, 2))
    start = rng.uniform(0.25, 0.75, size=2)
    velocity = rng.uniform(-0.04, 0.04, size=2)
    color = rng.uniform(0.2, 1.0, size=3)
    radius = 0.18

    frames = np.empty((num_frames, 3, height, width), dtype=np.float64)
    for t in range(num_frames):
        for c in range(3):
            u = xx + drift[c, 0] * t / max(num_frames, 1)
            v = yy + drift[c, 1] * t / max(num_frames, 1)
            frames[t, c] = 0.5 + 0.3 * np.sin(2 * np.pi * (freq[c, 0] * u + freq[c, 1] * v) + phase[c])
        cy, cx = start + velocity * t
        dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        mask = 1.0 / (1.0 + np.exp((dist - radius) / 0.03))
        frames[t] = frames[t] * (1.0 - mask) + color[:, None, None] * mask

    return torch.from_numpy(np.clip(frames, 0.0, 1.0).astype(np.float32))


def write_synthetic_dataset(out_dir: str, clips: int, frames: int, height: int, width: int,
                            seed: int) -> List[str]:
    """One sub-directory per clip (clip_000, clip_001, ...)"""
    written = []
    for index in range(clips):
        directory = os.path.join(out_dir, f"clip_{index:03d}")
        write_frames(synthesize_clip(seed + index, frames, height, width), directory)
        written.append(directory)
    logger.info(f"💾 Wrote {clips} synthetic clips of {frames} frames at {height}x{width} to {out_dir}")
    return written
