"""Image pyramids and frozen feature extraction.

The stand-in backbone is three stride-2 3x3 conv+ReLU stages.  Each stage
output holds two blocks of ``block_channels`` channels; all six blocks are
resized to the last stage's grid and concatenated, so a 192x192 image gives a
``6*block_channels x 24 x 24`` volume.  Externally computed backbone features
enter through :mod:`msfpt.data` (``.fvol`` files) instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ScaleSet, parse_scale
from .errors import DimensionError, InputTooSmallError
from .nn import BACKBONE_STAGES, ParamStore
from .tensor import Tensor

MIN_IMAGE_SIDE = 32
MIN_PYRAMID_SIDE = 9
MIN_BACKBONE_SIDE = 8


@dataclass
class FeatureVolume:
    """C x h x w features of one image (or B x C x h x w for a batch) at one scale."""

    data: Tensor
    scale_id: float
    source: str = "computed"

    def __post_init__(self):
        self.scale_id = parse_scale(self.scale_id)
        if self.data.ndim not in (3, 4):
            raise DimensionError(f"feature volume must be C×h×w, got {self.data.shape}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def channels(self) -> int:
        return self.data.shape[-3]

    @property
    def spatial(self) -> tuple[int, int]:
        return self.data.shape[-2:]


def check_image(img: Tensor) -> Tensor:
    """Validate an RGB image tensor (3×H×W, or B×3×H×W) with values in [0, 1]."""
    if img.ndim not in (3, 4) or img.shape[-3] != 3:
        raise DimensionError(f"image must be 3×H×W, got {img.shape}")
    if min(img.shape[-2:]) < MIN_IMAGE_SIDE:
        raise InputTooSmallError(f"image sides must be >= {MIN_IMAGE_SIDE}, got {img.shape[-2:]}")
    if img.data.min() < 0 or img.data.max() > 1:
        raise DimensionError("image values must lie in [0, 1]")
    return img


def scaled_size(n: int, s: float) -> int:
    """Side length at scale ``s``: round(n/s) (halves round up) for s in {1,2,3}; 2n for s=0.5."""
    s = parse_scale(s)
    if s == 0.5:
        return 2 * n
    return int(math.floor(n / s + 0.5))


def resize_to_scale(img: Tensor, s: float) -> Tensor:
    s = parse_scale(s)
    if s == 1.0:
        return img
    H, W = img.shape[-2:]
    h, w = scaled_size(H, s), scaled_size(W, s)
    if min(h, w) < MIN_PYRAMID_SIDE:
        raise InputTooSmallError(f"{H}x{W} at scale {s} gives {h}x{w} (< {MIN_PYRAMID_SIDE})")
    return T.bilinear_resize(img, h, w)


def build_pyramid(img: Tensor, scales: ScaleSet | None = None) -> list[Tensor]:
    """One resampled copy of ``img`` per scale, in the scale set's order."""
    scales = scales or ScaleSet()
    H, W = img.shape[-2:]
    for s in scales.scales:
        if min(scaled_size(H, s), scaled_size(W, s)) < MIN_PYRAMID_SIDE:
            raise InputTooSmallError(f"{H}x{W} too small for scale {s}")
    return [resize_to_scale(img, s) for s in scales.scales]


def backbone_forward(img: Tensor, store: ParamStore) -> Tensor:
    if min(img.shape[-2:]) < MIN_BACKBONE_SIDE:
        raise InputTooSmallError(f"backbone input sides must be >= {MIN_BACKBONE_SIDE}")
    x = img if img.dtype == np.dtype(store.config.dtype) else Tensor(img.data.astype(store.config.dtype))
    taps = []
    for i in range(BACKBONE_STAGES):
        x = T.relu(T.conv2d(x, store[f"backbone.stage{i}.weight"], stride=2, padding=1))
        taps.append(x)
    h, w = x.shape[-2:]
    return T.concat([T.bilinear_resize(t, h, w) for t in taps], axis=-3)


def extract_features(img: Tensor, store: ParamStore, scale_id: float = 1.0) -> FeatureVolume:
    """Backbone features of an already-resampled image."""
    return FeatureVolume(backbone_forward(img, store), scale_id)


def diff_features(f_ref: FeatureVolume, f_dist: FeatureVolume) -> FeatureVolume:
    if f_ref.shape != f_dist.shape:
        raise DimensionError(f"feature shapes differ: {f_ref.shape} vs {f_dist.shape}")
    if f_ref.scale_id != f_dist.scale_id:
        raise DimensionError(f"feature scales differ: {f_ref.scale_id} vs {f_dist.scale_id}")
    return FeatureVolume(T.sub(f_ref.data, f_dist.data), f_ref.scale_id, f_ref.source)


def to_canonical(f: FeatureVolume, target: tuple[int, int] = (21, 21)) -> FeatureVolume:
    th, tw = target
    return FeatureVolume(T.bilinear_resize(f.data, th, tw), f.scale_id, f.source)


def scale_features(ref: Tensor, dist: Tensor, s: float, store: ParamStore) -> tuple[FeatureVolume, FeatureVolume]:
    """Canonical (reference, difference) features of one image pair at scale ``s``."""
    f_ref = extract_features(resize_to_scale(ref, s), store, s)
    f_dist = extract_features(resize_to_scale(dist, s), store, s)
    target = store.config.grid
    return to_canonical(f_ref, target), to_canonical(diff_features(f_ref, f_dist), target)
