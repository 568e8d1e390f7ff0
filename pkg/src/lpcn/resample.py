"""Bicubic resampling and BT.601 colour conversion.

Resizing follows the convention of the benchmark resizer used for SR test
sets: Keys cubic kernel with a = -0.5, pixel-centre alignment, clamped edges,
and, when shrinking, a kernel stretched by 1/scale with renormalised weights.
Each axis is applied as a dense (out, in) weight matrix.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np

from .tensor import ShapeError

KEYS_A = -0.5


def cubic_kernel(t, a: float = KEYS_A):
    t = np.abs(np.asarray(t, dtype=np.float64))
    t2, t3 = t * t, t * t * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


@dataclass(frozen=True)
class ResampleSpec:
    factor: Fraction
    antialias: bool | None = None

    def __post_init__(self):
        object.__setattr__(self, "factor", Fraction(self.factor).limit_denominator(10**6))
        if self.factor <= 0:
            raise ValueError(f"scale factor must be positive, got {self.factor}")
        if self.antialias is None:
            object.__setattr__(self, "antialias", self.factor < 1)

    def output_size(self, n: int) -> int:
        return math.ceil(n * self.factor)


@lru_cache(maxsize=256)
def resize_matrix(in_size: int, out_size: int, scale: Fraction, antialias: bool) -> np.ndarray:
    """Dense (out_size, in_size) interpolation matrix for one axis."""
    scale = float(scale)
    stretch = scale if (antialias and scale < 1) else 1.0
    support = 2.0 / stretch
    u = np.arange(out_size, dtype=np.float64)
    centre = (u + 0.5) / scale - 0.5
    left = np.floor(centre - support).astype(np.int64)
    taps = int(math.ceil(2 * support)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    weights = cubic_kernel((centre[:, None] - idx) * stretch)
    weights /= weights.sum(axis=1, keepdims=True)
    mat = np.zeros((out_size, in_size))
    rows = np.broadcast_to(np.arange(out_size)[:, None], idx.shape)
    np.add.at(mat, (rows, np.clip(idx, 0, in_size - 1)), weights)
    mat.setflags(write=False)
    return mat


def resize_bicubic(img: np.ndarray, spec: ResampleSpec | float | Fraction, size=None) -> np.ndarray:
    """Resize an (H, W) or (H, W, C) image; rows first, then columns.

    ``size`` overrides the output (H, W) that would follow from the factor.
    """
    if not isinstance(spec, ResampleSpec):
        spec = ResampleSpec(Fraction(spec))
    h, w = img.shape[:2]
    oh, ow = size if size is not None else (spec.output_size(h), spec.output_size(w))
    if oh < 1 or ow < 1:
        raise ShapeError(f"target size {oh}x{ow} must be positive")
    rows = resize_matrix(h, oh, spec.factor, spec.antialias)
    cols = resize_matrix(w, ow, spec.factor, spec.antialias)
    x = np.asarray(img, dtype=np.float64)
    out = np.tensordot(rows, x, axes=(1, 0))
    out = np.tensordot(cols, out, axes=(1, 1)).swapaxes(0, 1)
    return np.ascontiguousarray(out)


def downscale(img, s: int) -> np.ndarray:
    return resize_bicubic(img, ResampleSpec(Fraction(1, s)))


def upscale(img, s: int) -> np.ndarray:
    return resize_bicubic(img, ResampleSpec(Fraction(s)))


# BT.601 studio swing for 8-bit RGB in [0, 255]
_YCBCR = np.array([[65.481, 128.553, 24.966],
                   [-37.797, -74.203, 112.0],
                   [112.0, -93.786, -18.214]]) / 255.0
_YCBCR_OFFSET = np.array([16.0, 128.0, 128.0])
_YCBCR_INV = np.linalg.inv(_YCBCR)


def rgb_to_ycbcr(img: np.ndarray) -> np.ndarray:
    rgb = np.clip(np.asarray(img, dtype=np.float64), 0, 255)
    return rgb @ _YCBCR.T + _YCBCR_OFFSET


def ycbcr_to_rgb(img: np.ndarray) -> np.ndarray:
    rgb = (np.asarray(img, dtype=np.float64) - _YCBCR_OFFSET) @ _YCBCR_INV.T
    return np.clip(rgb, 0, 255)


def luma(img: np.ndarray) -> np.ndarray:
    """Y channel of an RGB image; a 2-D array is taken to already be luma."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[2] == 1:
        return img[..., 0]
    return rgb_to_ycbcr(img[..., :3])[..., 0]
