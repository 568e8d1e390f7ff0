"""Locate benchmark and training image sets on disk.

Sets live under ``$LPCN_DATA`` (default ``~/lpcn-data``), one directory of
HR images per set: ``Set5``, ``Set14``, ``BSD100``, ``DIV2K``.
"""
from __future__ import annotations

import os
from pathlib import Path

from .imageio import list_images

DATA_ENV = "LPCN_DATA"
BENCHMARKS = ("Set5", "Set14", "BSD100")


def data_root() -> Path:
    return Path(os.environ.get(DATA_ENV, Path.home() / "lpcn-data")).expanduser()


def dataset_dir(name: str) -> Path:
    """Directory holding the HR images of ``name``; raises if absent or empty."""
    root = data_root()
    for cand in (root / name / "HR", root / name):
        if list_images(cand):
            return cand
    raise FileNotFoundError(
        f"dataset {name!r} not found under {root}; place its HR images in {root / name} "
        f"or point ${DATA_ENV} at a directory that has them")
