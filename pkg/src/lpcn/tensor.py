"""Dense (H, W, C) tensors and the shape plumbing shared by every module.

A tensor is a C-contiguous numpy array whose last three axes are rows,
columns and channels, so the flat offset of element (x, y, c) is
``(x * W + y) * C + c``. Most functions also accept a leading batch axis.
"""
from __future__ import annotations

import enum

import numpy as np


class ShapeError(ValueError):
    """Raised when tensor shapes violate an operation's contract."""


class Precision(enum.Enum):
    TEST = "float64"
    TRAIN = "float32"

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self.value)


def _check_dims(shape) -> tuple[int, int, int]:
    if len(shape) != 3:
        raise ShapeError(f"expected an (H, W, C) triple, got {tuple(shape)}")
    if any(int(d) < 1 for d in shape):
        raise ShapeError(f"all dimensions must be >= 1, got {tuple(shape)}")
    return tuple(int(d) for d in shape)


def tensor_new(shape, fill=0.0, dtype=np.float64) -> np.ndarray:
    return np.full(_check_dims(shape), fill, dtype=dtype)


def as_tensor(a, dtype=None) -> np.ndarray:
    """Validate and return ``a`` as a contiguous (..., H, W, C) array."""
    a = np.ascontiguousarray(a, dtype=dtype)
    if a.ndim < 3:
        raise ShapeError(f"tensor needs at least 3 axes, got shape {a.shape}")
    if 0 in a.shape:
        raise ShapeError(f"empty dimension in shape {a.shape}")
    return a


def flat_index(shape, x: int, y: int, c: int) -> int:
    h, w, ch = _check_dims(shape)
    if not (0 <= x < h and 0 <= y < w and 0 <= c < ch):
        raise IndexError(f"({x}, {y}, {c}) outside {shape}")
    return (x * w + y) * ch + c


def concat_channels(parts) -> np.ndarray:
    parts = list(parts)
    if not parts:
        raise ValueError("concat_channels needs at least one part")
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise ShapeError(f"spatial shape mismatch: {p.shape[:-1]} vs {lead}")
    return np.concatenate(parts, axis=-1)


def split_channels(t: np.ndarray, sizes) -> list[np.ndarray]:
    sizes = list(sizes)
    if sum(sizes) != t.shape[-1]:
        raise ShapeError(f"block sizes {sizes} do not cover {t.shape[-1]} channels")
    offsets = np.cumsum(sizes)[:-1]
    return [np.ascontiguousarray(p) for p in np.split(t, offsets, axis=-1)]


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same_shape(a, b)
    return a + b


def sub(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same_shape(a, b)
    return a - b


def scale(a: np.ndarray, k: float) -> np.ndarray:
    return a * k


def pad_to_multiple(t: np.ndarray, m: int):
    """Edge-replicate H and W up to the next multiple of ``m``.

    Returns the padded tensor and the original shape for ``crop_spatial``.
    """
    if m < 1:
        raise ValueError(f"multiple must be >= 1, got {m}")
    h, w = t.shape[-3], t.shape[-2]
    ph, pw = -h % m, -w % m
    if ph == 0 and pw == 0:
        return t, t.shape
    widths = [(0, 0)] * (t.ndim - 3) + [(0, ph), (0, pw), (0, 0)]
    return np.pad(t, widths, mode="edge"), t.shape


def crop_spatial(t: np.ndarray, target) -> np.ndarray:
    th, tw = int(target[-3]), int(target[-2])
    if len(target) >= 3 and target[-1] != t.shape[-1]:
        raise ShapeError(f"channel mismatch: {target[-1]} vs {t.shape[-1]}")
    if th > t.shape[-3] or tw > t.shape[-2]:
        raise ShapeError(f"crop target {tuple(target)} larger than {t.shape}")
    return np.ascontiguousarray(t[..., :th, :tw, :])
