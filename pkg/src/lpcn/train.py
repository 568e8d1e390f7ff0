"""Patch extraction, MSE objective, Adam and the checkpointed training loop."""
from __future__ import annotations

import dataclasses
import logging
import math
import os
import struct
import tempfile
import time
import zlib
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable

import numpy as np

from . import binfmt, resample
from .imageio import ImageError, list_images, read_png
from .model import ArchSpec, Mode, ModelParams, StateError, backward, build_model, forward, load_model, save_model
from .tensor import ShapeError

log = logging.getLogger(__name__)

ARCHIVE_MAGIC = b"LPCD"
ARCHIVE_VERSION = 1
OPTIM_MAGIC = b"LPCO"
OPTIM_VERSION = 1


class DivergenceError(RuntimeError):
    def __init__(self, step: int, checkpoint: Path | None):
        where = f"; last good checkpoint {checkpoint}" if checkpoint else "; no checkpoint written"
        super().__init__(f"loss became non-finite at step {step}{where}")
        self.step = step
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    scale: int = 4
    patch: int = 96
    stride: int = 80
    batch: int = 128
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    steps: int = 1000
    seed: int = 0
    checkpoint_every: int = 0
    mode: Mode = Mode.LPCN_SR_PLUS
    extra_scales: tuple = ()

    def validate(self) -> "TrainConfig":
        if self.patch % 4 or self.patch % self.scale:
            raise ValueError(f"patch {self.patch} must be divisible by 4 and by scale {self.scale}")
        if self.stride < 1 or self.batch < 1 or self.steps < 0:
            raise ValueError("stride and batch must be >= 1, steps >= 0")
        return self

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["mode"] = self.mode.name
        d["extra_scales"] = list(self.extra_scales)
        return d


# --- data ------------------------------------------------------------------

@dataclass
class PatchSet:
    """Aligned (label, input) luma patches in [0, 1], shape (N, P, P)."""

    labels: np.ndarray
    inputs: np.ndarray
    scale: int

    def __post_init__(self):
        if self.labels.shape != self.inputs.shape or self.labels.ndim != 3:
            raise ShapeError(f"label/input stacks disagree: {self.labels.shape} vs {self.inputs.shape}")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def patch(self) -> int:
        return self.labels.shape[1]


def tile_origins(size: int, patch: int, stride: int) -> range:
    if size < patch:
        return range(0)
    return range(0, size - patch + 1, stride)


def patch_count(h: int, w: int, patch: int, stride: int, scale: int) -> int:
    """Pairs cut from one h x w image (after mod-crop), without decoding it."""
    h, w = h - h % scale, w - w % scale
    return len(tile_origins(h, patch, stride)) * len(tile_origins(w, patch, stride))


def degrade_pairs(labels: np.ndarray, scale: int) -> np.ndarray:
    """Bicubic down then up for a (P, P, K) stack of [0, 1] planes."""
    return np.clip(resample.upscale(resample.downscale(labels, scale), scale), 0.0, 1.0)


def patches_from_luma(y: np.ndarray, patch: int, stride: int, scale: int):
    y = y[: y.shape[0] - y.shape[0] % scale, : y.shape[1] - y.shape[1] % scale] / 255.0
    tiles = [y[i:i + patch, j:j + patch]
             for i in tile_origins(y.shape[0], patch, stride)
             for j in tile_origins(y.shape[1], patch, stride)]
    if not tiles:
        return None
    labels = np.stack(tiles, axis=-1)
    inputs = degrade_pairs(labels, scale)
    return np.moveaxis(labels, -1, 0), np.moveaxis(inputs, -1, 0)


def extract_patches(image_dir, patch: int = 96, stride: int = 80, scale: int = 4,
                    extra_scales=()) -> PatchSet:
    labels, inputs = [], []
    for path in list_images(image_dir):
        try:
            y = resample.luma(read_png(path))
        except ImageError as exc:
            log.warning("skipping %s", exc)
            continue
        for s in (scale, *extra_scales):
            got = patches_from_luma(y, patch, stride, s)
            if got is None:
                log.warning("skipping %s: smaller than one %dx%d patch", path, patch, patch)
                break
            labels.append(got[0].astype(np.float32))
            inputs.append(got[1].astype(np.float32))
    if not labels:
        raise ValueError(f"no training patches extracted from {image_dir}")
    return PatchSet(np.concatenate(labels), np.concatenate(inputs), scale)


_ARCHIVE_HEAD = struct.Struct("<4sIIII")


def write_archive(path, ps: PatchSet) -> None:
    """Stream a patch archive to disk, CRC included, then rename into place."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            head = _ARCHIVE_HEAD.pack(ARCHIVE_MAGIC, ARCHIVE_VERSION, ps.scale, ps.patch, len(ps))
            crc = zlib.crc32(head)
            fh.write(head)
            for i in range(len(ps)):
                chunk = binfmt.f32(ps.labels[i]) + binfmt.f32(ps.inputs[i])
                crc = zlib.crc32(chunk, crc)
                fh.write(chunk)
            fh.write(struct.pack("<I", crc))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_archive(path) -> PatchSet:
    """Validate a patch archive and map it read-only without loading it."""
    path = Path(path)
    size = path.stat().st_size
    with open(path, "rb") as fh:
        head = fh.read(_ARCHIVE_HEAD.size)
        if len(head) < _ARCHIVE_HEAD.size:
            raise binfmt.FormatError("length", f"file is {size} bytes, too short for a header")
        magic, version, scale, patch, count = _ARCHIVE_HEAD.unpack(head)
        if magic != ARCHIVE_MAGIC:
            raise binfmt.FormatError("magic", f"expected {ARCHIVE_MAGIC!r}, found {magic!r}")
        if version != ARCHIVE_VERSION:
            raise binfmt.FormatError("version", f"unsupported format version {version}")
        if patch < 1 or scale < 1:
            raise binfmt.FormatError("header", f"invalid patch size {patch} or scale {scale}")
        expected = _ARCHIVE_HEAD.size + count * 2 * patch * patch * 4 + 4
        if size != expected:
            raise binfmt.FormatError("length", f"file is {size} bytes, header implies {expected}")
        crc = zlib.crc32(head)
        remaining = size - _ARCHIVE_HEAD.size - 4
        while remaining:
            chunk = fh.read(min(remaining, 1 << 24))
            crc = zlib.crc32(chunk, crc)
            remaining -= len(chunk)
        (stored,) = struct.unpack("<I", fh.read(4))
        if crc != stored:
            raise binfmt.FormatError("crc", "checksum mismatch")
    if count == 0:
        raise binfmt.FormatError("count", "archive holds no patches")
    data = np.memmap(path, dtype="<f4", mode="r", offset=_ARCHIVE_HEAD.size,
                     shape=(count, 2, patch, patch))
    return PatchSet(data[:, 0], data[:, 1], scale)


# --- objective and optimizer -------------------------------------------------

def mse_loss(x_star: np.ndarray, x: np.ndarray):
    """Mean squared error and its gradient with respect to the prediction."""
    if x_star.shape != x.shape:
        raise ShapeError(f"shape mismatch: {x_star.shape} vs {x.shape}")
    diff = x_star - x
    loss = float(np.mean(np.square(diff, dtype=np.float64)))
    return loss, (2.0 / diff.size) * diff


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, tensors: dict) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in tensors.items()},
                   {k: np.zeros_like(p) for k, p in tensors.items()}, 0)


def adam_step(params, grads: dict, state: AdamState, cfg: TrainConfig):
    """Bias-corrected Adam update, in place; returns ``(params, state)``.

    ``params`` is a ModelParams or a plain dict of arrays.
    """
    tensors = params.tensors if isinstance(params, ModelParams) else params
    if grads.keys() != tensors.keys():
        raise StateError(f"gradient keys {sorted(grads)} do not match parameters {sorted(tensors)}")
    if not state.m:
        fresh = AdamState.zeros_like(tensors)
        state.m, state.v = fresh.m, fresh.v
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1.0 - b1 ** state.t, 1.0 - b2 ** state.t
    for k, p in tensors.items():
        g = grads[k]
        m = state.m[k] = b1 * state.m[k] + (1 - b1) * g
        v = state.v[k] = b2 * state.v[k] + (1 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        tensors[k] = (p - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.epsilon)).astype(p.dtype, copy=False)
    if isinstance(params, ModelParams):
        params.version += 1
    return params, state


# --- optimizer state files -----------------------------------------------------

def save_optimizer(path, state: AdamState, params: ModelParams, cfg: TrainConfig) -> None:
    parts = [binfmt.u64(state.t), binfmt.u64(cfg.seed), binfmt.u32(cfg.batch),
             binfmt.u32(params.fingerprint), binfmt.u32(len(params.tensors))]
    for k in params.tensors:
        parts.append(binfmt.f32(state.m[k]))
        parts.append(binfmt.f32(state.v[k]))
    binfmt.write_sealed(path, OPTIM_MAGIC, OPTIM_VERSION, b"".join(parts))


@dataclass
class OptimizerRecord:
    state: AdamState
    seed: int
    batch: int
    fingerprint: int


def load_optimizer(path, params: ModelParams) -> OptimizerRecord:
    _, payload = binfmt.open_envelope(Path(path).read_bytes(), OPTIM_MAGIC, {OPTIM_VERSION})
    r = binfmt.Reader(payload)
    t, seed, batch = r.u64("step"), r.u64("seed"), r.u32("batch")
    fp, n = r.u32("fingerprint"), r.u32("tensor_count")
    if fp != params.fingerprint:
        raise binfmt.FormatError("fingerprint", "optimizer state belongs to a different architecture")
    if n != len(params.tensors):
        raise binfmt.FormatError("tensor_count", f"{n} tensors, model has {len(params.tensors)}")
    m, v = {}, {}
    for k, p in params.tensors.items():
        m[k] = r.f32_array(p.shape, f"{k}.m")
        v[k] = r.f32_array(p.shape, f"{k}.v")
    r.expect_end()
    return OptimizerRecord(AdamState(m, v, t), seed, batch, fp)


# --- training loop -----------------------------------------------------------------

@lru_cache(maxsize=8)
def _epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def batch_indices(n: int, batch: int, step: int, seed: int) -> np.ndarray:
    """Sample indices for a step: a seeded shuffle per epoch, read as one stream.

    Depends only on its arguments, so a resumed run draws the same batches.
    """
    k = np.arange(step * batch, (step + 1) * batch)
    epochs, pos = np.divmod(k, n)
    return np.array([_epoch_order(n, seed, int(e))[p] for e, p in zip(epochs, pos)])


def checkpoint_paths(directory, step: int) -> tuple[Path, Path]:
    base = Path(directory) / f"checkpoint-{step:08d}"
    return base.with_suffix(".lpcn"), base.with_suffix(".lpco")


@dataclass
class TrainResult:
    params: ModelParams
    state: AdamState
    history: list  # (step, loss, wall_seconds)
    last_checkpoint: Path | None = None


def load_checkpoint(path) -> tuple[ModelParams, OptimizerRecord]:
    """``path`` may name either file of a checkpoint pair."""
    path = Path(path)
    params = load_model(path.with_suffix(".lpcn"))
    return params, load_optimizer(path.with_suffix(".lpco"), params)


def write_checkpoint(directory, params, state, cfg) -> Path:
    model_path, optim_path = checkpoint_paths(directory, state.t)
    save_model(params, model_path)
    save_optimizer(optim_path, state, params, cfg)
    return optim_path


def train(patchset: PatchSet, cfg: TrainConfig, resume=None, checkpoint_dir=None,
          params: ModelParams | None = None, arch: ArchSpec | None = None,
          on_step: Callable | None = None) -> TrainResult:
    """Minimise batch-mean MSE with Adam for ``cfg.steps`` total steps."""
    cfg.validate()
    if len(patchset) == 0:
        raise ValueError("empty patch set")
    if resume is not None:
        params, record = load_checkpoint(resume)
        if record.seed != cfg.seed or record.batch != cfg.batch:
            raise StateError(f"checkpoint was made with seed {record.seed}, batch {record.batch}; "
                             f"config has seed {cfg.seed}, batch {cfg.batch}")
        state = record.state
    else:
        if params is None:
            params = build_model(arch or ArchSpec(mode=cfg.mode), cfg.seed, dtype=np.float32)
        state = AdamState.zeros_like(params.tensors)
    dtype = params.w("head").dtype
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
    last_ckpt = Path(resume).with_suffix(".lpco") if resume is not None else None

    history = []
    t0 = time.perf_counter()
    n = len(patchset)
    for step in range(state.t, cfg.steps):
        idx = batch_indices(n, cfg.batch, step, cfg.seed)
        x = np.asarray(patchset.labels[idx], dtype=dtype)[..., None]
        y = np.asarray(patchset.inputs[idx], dtype=dtype)[..., None]
        out, ctx = forward(params, y, keep_context=True)
        loss, d_out = mse_loss(out, x)
        if not math.isfinite(loss):
            raise DivergenceError(step, last_ckpt)
        grads = backward(params, ctx, d_out)
        del ctx
        adam_step(params, grads, state, cfg)
        history.append((state.t, loss, time.perf_counter() - t0))
        if on_step is not None:
            on_step(state.t, loss)
        if checkpoint_dir is not None and cfg.checkpoint_every and state.t % cfg.checkpoint_every == 0:
            last_ckpt = write_checkpoint(checkpoint_dir, params, state, cfg)
    return TrainResult(params, state, history, last_ckpt)


def batch_loss(params: ModelParams, labels: np.ndarray, inputs: np.ndarray) -> float:
    out, _ = forward(params, inputs[..., None])
    return mse_loss(out, labels[..., None].astype(out.dtype))[0]
