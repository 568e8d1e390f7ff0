"""PNG reading and atomic writing (8-bit grey and RGB)."""
from __future__ import annotations

import logging
import os
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".bmp")


class ImageError(ValueError):
    pass


def read_png(path) -> np.ndarray:
    """Return uint8 (H, W) for grey images or (H, W, 3) for colour ones."""
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("I;16", "I;16B", "I;16L", "I"):
                log.warning("%s: 16-bit image rescaled to 8 bits", path)
                arr = np.asarray(im, dtype=np.float64)
                return np.clip(np.round(arr / 257.0), 0, 255).astype(np.uint8)
            if mode in ("L", "1"):
                return np.asarray(im.convert("L"), dtype=np.uint8)
            if mode == "LA":
                return np.asarray(im.convert("L"), dtype=np.uint8)
            if mode == "P" and "transparency" not in im.info and im.getpalette() is not None:
                palette = np.asarray(im.getpalette(), dtype=np.uint8).reshape(-1, 3)
                if np.all(palette[:, 0] == palette[:, 1]) and np.all(palette[:, 1] == palette[:, 2]):
                    return np.asarray(im.convert("L"), dtype=np.uint8)
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, SyntaxError, ValueError) as exc:
        raise ImageError(f"{path}: cannot decode image ({exc})") from exc


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_png(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.dtype != np.uint8:
        img = to_uint8(img)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        Image.fromarray(img).save(tmp, format="PNG")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def list_images(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        return []
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
