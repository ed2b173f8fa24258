"""
Evaluation Metrics
==================

Reference and temporal-consistency metrics for toy evaluation:
- PSNR per frame averaged over a video, capped at 99 dB for identical inputs
- Flicker index (mean absolute inter-frame difference)
- Temporal profile: one pixel row stacked over time, plus side-by-side figures
- Metric records written as JSON lines
"""

import os
import logging
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
from PIL import Image

import config
from codec import VideoSegment

logger = logging.getLogger(__name__)


def _as_array(video: VideoSegment) -> np.ndarray:
    return video.frames.detach().cpu().numpy().astype(np.float64)


def psnr(a: VideoSegment, b: VideoSegment) -> float:
    """Mean over frames of 10·log10(1 / MSE); zero-MSE frames count as PSNR_CAP_DB"""
    x, y = _as_array(a), _as_array(b)
    if x.shape != y.shape:
        raise ValueError(f"psnr shape mismatch: {x.shape} vs {y.shape}")
    mse = ((x - y) ** 2).reshape(x.shape[0], -1).mean(axis=1)
    with np.errstate(divide='ignore'):
        per_frame = np.where(mse > 0, 10.0 * np.log10(1.0 / np.where(mse > 0, mse, 1.0)), config.PSNR_CAP_DB)
    return float(np.minimum(per_frame, config.PSNR_CAP_DB).mean())


def flicker_index(video: VideoSegment) -> float:
    x = _as_array(video)
    if x.shape[0] < 2:
        raise ValueError(f"flicker_index needs at least 2 frames, got {x.shape[0]}")
    return float(np.abs(np.diff(x, axis=0)).mean())


def temporal_profile(video: VideoSegment, row: int) -> np.ndarray:
    """Row `row` of every frame stacked over time, as an (L, W, 3) image"""
    x = video.frames.detach().cpu().numpy()
    height = x.shape[2]
    if not 0 <= row < height:
        raise ValueError(f"profile row {row} outside [0, {height})")
    return np.ascontiguousarray(np.transpose(x[:, :, row, :], (0, 2, 1)))


def save_profile_image(profile: np.ndarray, path: str) -> None:
    """8-bit PNG of a profile (one image row per frame)"""
    data = np.round(np.clip(profile, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(data, mode='RGB').save(path)


def save_profile_comparison(profiles: Dict[str, np.ndarray], path: str, row: int) -> None:
    """Side-by-side profile figure, one panel per labelled video"""
    fig, axes = plt.subplots(1, len(profiles), figsize=(3 * len(profiles), 3), squeeze=False)
    for ax, (label, profile) in zip(axes[0], profiles.items()):
        ax.imshow(np.clip(profile, 0.0, 1.0), aspect='auto', interpolation='nearest')
        ax.set_title(label)
        ax.set_xlabel('x')
        ax.set_ylabel('frame')
    fig.suptitle(f'temporal profile, row {row}')
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def evaluate_video(video_id: str, pred: VideoSegment, ref: Optional[VideoSegment] = None,
                   tag: str = "") -> Dict[str, object]:
    """One metric record; psnr_db is absent without a reference"""
    record = {'id': video_id, 'config': tag}
    if ref is not None:
        record['psnr_db'] = psnr(pred, ref)
    record['flicker'] = flicker_index(pred) if pred.num_frames >= 2 else None
    if ref is not None and ref.num_frames >= 2:
        record['flicker_ref'] = flicker_index(ref)
    return record


def write_records(records: List[Dict[str, object]], path: str) -> pd.DataFrame:
    """Write metric records as JSON lines and return them as a frame"""
    frame = pd.DataFrame.from_records(records)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    frame.to_json(path, orient='records', lines=True, double_precision=15)
    logger.info(f"📊 Wrote {len(frame)} metric records to {path}")
    return frame


def read_records(path: str) -> pd.DataFrame:
    return pd.read_json(path, orient='records', lines=True)
