"""Image-level super-resolution: luma through the network, chroma bicubic."""
from __future__ import annotations

import numpy as np

from . import resample
from .model import ModelParams, infer
from .tensor import crop_spatial, pad_to_multiple


def refine_luma(params: ModelParams, y_up: np.ndarray) -> np.ndarray:
    """Run the network on an already upscaled luma plane in [0, 255]."""
    x = (np.asarray(y_up, dtype=np.float64) / 255.0)[..., None]
    x = x.astype(params.w("head").dtype)
    padded, orig = pad_to_multiple(x, params.spec.input_multiple)
    out = crop_spatial(infer(params, padded), orig)
    return np.clip(out[..., 0].astype(np.float64), 0.0, 1.0) * 255.0


def upscale_luma(params: ModelParams, lr: np.ndarray, scale: int) -> np.ndarray:
    return refine_luma(params, resample.upscale(lr, scale))


def model_upscaler(params: ModelParams):
    def upscaler(lr, scale):
        return upscale_luma(params, lr, scale)
    return upscaler


def upscale_image(params: ModelParams, img: np.ndarray, scale: int) -> np.ndarray:
    """Super-resolve an (H, W) grey or (H, W, 3) RGB image with values in [0, 255]."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return upscale_luma(params, img, scale)
    ycc = resample.upscale(resample.rgb_to_ycbcr(img), scale)
    ycc[..., 0] = refine_luma(params, ycc[..., 0])
    return resample.ycbcr_to_rgb(ycc)
