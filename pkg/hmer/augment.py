# SPDX-FileCopyrightText: 2025 hmer contributors

# SPDX-License-Identifier: Apache-2.0

"""
Image preprocessing: fixed-height normalisation, zero padding onto the model
canvas, and random rescaling of training images with the aspect ratio kept.
"""

import logging
import math
from dataclasses import dataclass, replace
from typing import List, Sequence, Tuple

import numpy as np
from PIL import Image as PILImage

from .dataio import Sample

log = logging.getLogger(__name__)

FIXED_HEIGHT = 'fixed_height'
PAD_ONLY = 'pad_only'
SCALE_AUGMENT = 'scale_augment'
MODES = (FIXED_HEIGHT, PAD_ONLY, SCALE_AUGMENT)

ANCHORS = ('top_left', 'center')


@dataclass
class AugmentConfig:
    k_min: float = 0.5
    k_max: float = 2.0
    canvas_h: int = 256
    canvas_w: int = 1024
    mode: str = SCALE_AUGMENT
    target_height: int = 256
    anchor: str = 'top_left'

    def __post_init__(self):
        if not 0 < self.k_min <= self.k_max:
            raise ValueError(f'scale range must satisfy 0 < k_min <= k_max, got [{self.k_min}, {self.k_max}]')
        if self.canvas_h < 1 or self.canvas_w < 1:
            raise ValueError(f'canvas must be positive, got {self.canvas_h}x{self.canvas_w}')
        if self.mode not in MODES:
            raise ValueError(f'augment mode must be one of {MODES}, got {self.mode!r}')
        if self.anchor not in ANCHORS:
            raise ValueError(f'anchor must be one of {ANCHORS}, got {self.anchor!r}')
        if self.target_height < 1:
            raise ValueError(f'target_height must be >= 1, got {self.target_height}')

    @property
    def canvas(self) -> Tuple[int, int]:
        return self.canvas_h, self.canvas_w


def _round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def scaled_size(height: int, width: int, k: float) -> Tuple[int, int]:
    return max(1, _round_half_up(k * height)), max(1, _round_half_up(k * width))


def scale_image(img: np.ndarray, k: float) -> np.ndarray:
    """Bilinear resize by ``k`` with the aspect ratio kept; output dims are rounded and at least 1x1."""
    if k <= 0:
        raise ValueError(f'scale factor must be positive, got {k}')
    img = np.asarray(img, dtype=np.float32)
    new_h, new_w = scaled_size(img.shape[0], img.shape[1], k)
    if (new_h, new_w) == img.shape:
        return img.copy()
    resized = PILImage.fromarray(img).resize((new_w, new_h), resample=PILImage.Resampling.BILINEAR)
    return np.clip(np.asarray(resized, dtype=np.float32), 0.0, 1.0)


def zero_pad(img: np.ndarray, canvas_h: int, canvas_w: int, anchor: str = 'top_left') -> np.ndarray:
    height, width = img.shape
    if height > canvas_h or width > canvas_w:
        raise ValueError(f'image {height}x{width} does not fit the {canvas_h}x{canvas_w} canvas')
    top, left = 0, 0
    if anchor == 'center':
        top, left = (canvas_h - height) // 2, (canvas_w - width) // 2
    elif anchor != 'top_left':
        raise ValueError(f'anchor must be one of {ANCHORS}, got {anchor!r}')
    canvas = np.zeros((canvas_h, canvas_w), dtype=np.float32)
    canvas[top:top + height, left:left + width] = img
    return canvas


def fit_to_canvas(img: np.ndarray, canvas_h: int, canvas_w: int, anchor: str = 'top_left') -> np.ndarray:
    height, width = img.shape
    if height > canvas_h or width > canvas_w:
        k = min(canvas_h / height, canvas_w / width)
        log.debug('downscaling %dx%d by %.4f to fit %dx%d', height, width, k, canvas_h, canvas_w)
        img = scale_image(img, k)
        # guard against k * size landing a hair above the canvas
        img = img[:canvas_h, :canvas_w]
    return zero_pad(img, canvas_h, canvas_w, anchor)


def normalize_fixed_height(img: np.ndarray, target_h: int, canvas_h: int, canvas_w: int,
                           anchor: str = 'top_left') -> np.ndarray:
    if target_h < 1:
        raise ValueError(f'target height must be >= 1, got {target_h}')
    return fit_to_canvas(scale_image(img, target_h / img.shape[0]), canvas_h, canvas_w, anchor)


def sample_scale(cfg: AugmentConfig, rng: np.random.Generator) -> float:
    return float(rng.uniform(cfg.k_min, cfg.k_max))


def apply_training_augment(img: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    if cfg.mode == SCALE_AUGMENT:
        img = scale_image(img, sample_scale(cfg, rng))
    elif cfg.mode == FIXED_HEIGHT:
        return normalize_fixed_height(img, cfg.target_height, cfg.canvas_h, cfg.canvas_w, cfg.anchor)
    return fit_to_canvas(img, cfg.canvas_h, cfg.canvas_w, cfg.anchor)


def prepare_test_image(img: np.ndarray, cfg: AugmentConfig) -> np.ndarray:
    """Test-time path; never draws random numbers."""
    if cfg.mode == FIXED_HEIGHT:
        return normalize_fixed_height(img, cfg.target_height, cfg.canvas_h, cfg.canvas_w, cfg.anchor)
    return fit_to_canvas(img, cfg.canvas_h, cfg.canvas_w, cfg.anchor)


def rescale_samples(samples: Sequence[Sample], cfg: AugmentConfig, rng: np.random.Generator) -> List[Sample]:
    """Copy of ``samples`` with every image scaled by its own k drawn from [k_min, k_max]."""
    return [replace(sample, image=scale_image(sample.image, sample_scale(cfg, rng))) for sample in samples]
