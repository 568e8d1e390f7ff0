"""PSNR / SSIM under SR-benchmark conventions and dataset evaluation.

Every image is reduced to luma in [0, 255], mod-cropped to a multiple of the
scale, degraded with antialiased bicubic, upscaled by the method under test,
and scored after shaving ``scale`` pixels from each border.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import resample
from .imageio import ImageError, atomic_write_bytes, list_images, read_png
from .tensor import ShapeError

log = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(a, b, peak: float = 255.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    n = g.size
    rows = np.lib.stride_tricks.sliding_window_view(img, n, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, n, axis=1) @ g


def _local_stats(a, b):
    g = gaussian_window()
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    return mu_a, mu_b, var_a, var_b, cov


def _prepare_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 3 and a.shape[2] == 1:
        a, b = a[..., 0], b[..., 0]
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise ValueError(f"ssim expects single-channel images, got shape {a.shape}")
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"image {a.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    return a, b


def ssim_map(a, b, peak: float = 255.0) -> np.ndarray:
    a, b = _prepare_pair(a, b)
    c1, c2 = (SSIM_K1 * peak) ** 2, (SSIM_K2 * peak) ** 2
    mu_a, mu_b, var_a, var_b, cov = _local_stats(a, b)
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def contrast_structure_map(a, b, peak: float = 255.0) -> np.ndarray:
    """The SSIM factor without the luminance term."""
    a, b = _prepare_pair(a, b)
    c2 = (SSIM_K2 * peak) ** 2
    _, _, var_a, var_b, cov = _local_stats(a, b)
    return (2 * cov + c2) / (var_a + var_b + c2)


def ssim(a, b, peak: float = 255.0) -> float:
    return float(np.mean(ssim_map(a, b, peak)))


def shave_border(img: np.ndarray, s: int) -> np.ndarray:
    h, w = img.shape[:2]
    if s < 0 or h <= 2 * s or w <= 2 * s:
        raise ValueError(f"cannot shave {s} pixels from a {h}x{w} image")
    if s == 0:
        return img
    return img[s:h - s, s:w - s]


def mod_crop(img: np.ndarray, s: int) -> np.ndarray:
    h, w = img.shape[:2]
    return img[: h - h % s, : w - w % s]


def format_psnr(value: float) -> str:
    return "inf" if math.isinf(value) else f"{value:.4f}"


@dataclass
class ImageScore:
    name: str
    psnr: float
    ssim: float
    seconds: float


@dataclass
class EvalReport:
    scale: int
    shave: int
    model_id: str
    images: list[ImageScore] = field(default_factory=list)
    failures: list[str] = field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        finite = [s.psnr for s in self.images if math.isfinite(s.psnr)]
        return float(np.mean(finite)) if finite else math.inf

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([s.ssim for s in self.images]))

    def summary(self) -> str:
        return f"PSNR={format_psnr(self.mean_psnr)} SSIM={self.mean_ssim:.4f} N={len(self.images)}"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["name", "psnr_db", "ssim", "seconds"])
        for s in self.images:
            writer.writerow([s.name, format_psnr(s.psnr), f"{s.ssim:.6f}", f"{s.seconds:.6f}"])
        buf.write(f"# mean {self.summary()} scale={self.scale} shave={self.shave} model={self.model_id}\n")
        return buf.getvalue()

    def write(self, path) -> None:
        atomic_write_bytes(path, self.to_csv().encode())


Upscaler = Callable[[np.ndarray, int], np.ndarray]


def bicubic_upscaler(lr: np.ndarray, scale: int) -> np.ndarray:
    return resample.upscale(lr, scale)


def degrade(hr_luma: np.ndarray, scale: int) -> np.ndarray:
    return resample.downscale(hr_luma, scale)


def score_image(hr_luma: np.ndarray, upscaler: Upscaler, scale: int, name: str = "") -> ImageScore:
    hr = mod_crop(np.asarray(hr_luma, dtype=np.float64), scale)
    lr = degrade(hr, scale)
    t0 = time.perf_counter()
    sr = upscaler(lr, scale)
    seconds = time.perf_counter() - t0
    if sr.shape != hr.shape:
        raise ShapeError(f"upscaler returned {sr.shape}, expected {hr.shape}")
    sr = np.clip(sr, 0, 255)
    hr_s, sr_s = shave_border(hr, scale), shave_border(sr, scale)
    return ImageScore(name, psnr(hr_s, sr_s), ssim(hr_s, sr_s), seconds)


def evaluate_set(hr_dir, upscaler: Upscaler, scale: int = 4, report_path=None,
                 model_id: str = "bicubic") -> EvalReport:
    paths = list_images(hr_dir)
    if not paths:
        raise FileNotFoundError(f"no images found in {hr_dir}")
    report = EvalReport(scale=scale, shave=scale, model_id=model_id)
    for path in paths:
        try:
            hr = resample.luma(read_png(path))
            report.images.append(score_image(hr, upscaler, scale, Path(path).name))
        except (ImageError, ShapeError, ValueError) as exc:
            log.warning("skipping %s: %s", path, exc)
            report.failures.append(f"{Path(path).name}: {exc}")
    if not report.images:
        raise ValueError(f"every image in {hr_dir} failed to evaluate")
    if report_path is not None:
        report.write(report_path)
    return report
