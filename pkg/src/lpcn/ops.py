"""Rearrangement and convolution operators with hand-paired backward passes.

All functions take arrays shaped (..., H, W, C); any leading axes are treated
as a batch. Weight tensors use the (kh, kw, in, out) layout for ordinary
convolutions. A transposed convolution is defined as the exact adjoint of the
ordinary convolution that shares its weight array, so its weights are stored
as (kh, kw, out, in).

Lossless pooling, 0-based form. The 1-based pooling index map

    T[x, y, c] = M[r*x - mod(r^2 - c, r), r*y - floor((r^2 - c) / r)]

becomes, after substituting x -> x+1, y -> y+1, c -> c+1 and using
mod(r^2 - 1 - c, r) = r - 1 - (c mod r),

    T[x, y, c] = M[r*x + (c mod r), r*y + floor(c / r)].

x indexes rows. With several input channels, source channel k feeds output
channels k*r^2 ... k*r^2 + r^2 - 1.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError


@dataclass(frozen=True)
class ConvSpec:
    kernel_h: int
    kernel_w: int
    in_channels: int
    out_channels: int
    stride: int = 1
    transposed: bool = False

    def __post_init__(self):
        for k in (self.kernel_h, self.kernel_w):
            if k < 1 or k % 2 == 0:
                raise ValueError(f"kernel sizes must be odd and >= 1, got {k}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be >= 1")

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        if self.transposed:
            return (self.kernel_h, self.kernel_w, self.out_channels, self.in_channels)
        return (self.kernel_h, self.kernel_w, self.in_channels, self.out_channels)

    @property
    def n_params(self) -> int:
        return int(np.prod(self.weight_shape)) + self.out_channels


@dataclass
class OpGrad:
    d_input: np.ndarray
    d_weights: np.ndarray | None = None
    d_bias: np.ndarray | None = None


# --- rearrangements -------------------------------------------------------

def lossless_pool(m: np.ndarray, r: int) -> np.ndarray:
    *lead, h, w, c = m.shape
    if r < 1:
        raise ValueError(f"r must be >= 1, got {r}")
    if h % r or w % r:
        raise ShapeError(f"spatial size {h}x{w} not divisible by r={r}")
    t = m.reshape(*lead, h // r, r, w // r, r, c)
    nl = len(lead)
    # axes after reshape: (lead, X, row-offset, Y, col-offset, C)
    # output channel = C*r^2 + col_offset*r + row_offset
    t = t.transpose(*range(nl), nl, nl + 2, nl + 4, nl + 3, nl + 1)
    return np.ascontiguousarray(t).reshape(*lead, h // r, w // r, c * r * r)


def subpixel_upscale(t: np.ndarray, r: int) -> np.ndarray:
    *lead, h, w, cr = t.shape
    if r < 1:
        raise ValueError(f"r must be >= 1, got {r}")
    if cr % (r * r):
        raise ShapeError(f"{cr} channels not divisible by r^2={r * r}")
    c = cr // (r * r)
    nl = len(lead)
    m = t.reshape(*lead, h, w, c, r, r)  # (lead, X, Y, C, col-offset, row-offset)
    m = m.transpose(*range(nl), nl, nl + 4, nl + 1, nl + 3, nl + 2)
    return np.ascontiguousarray(m).reshape(*lead, h * r, w * r, c)


def backward_lossless_pool(upstream: np.ndarray, r: int) -> OpGrad:
    return OpGrad(subpixel_upscale(upstream, r))


def backward_subpixel_upscale(upstream: np.ndarray, r: int) -> OpGrad:
    return OpGrad(lossless_pool(upstream, r))


def reshuffle_permutation(n: int, r: int) -> np.ndarray:
    """Source channel for each output channel: floor(c/r^2) + n*(c mod r^2)."""
    c = np.arange(n * r * r)
    return c // (r * r) + n * (c % (r * r))


def reshuffle(f: np.ndarray, n: int, r: int) -> np.ndarray:
    if f.shape[-1] != n * r * r:
        raise ShapeError(f"reshuffle expects n*r^2={n * r * r} channels, got {f.shape[-1]}")
    return np.ascontiguousarray(f[..., reshuffle_permutation(n, r)])


def backward_reshuffle(upstream: np.ndarray, n: int, r: int) -> OpGrad:
    if upstream.shape[-1] != n * r * r:
        raise ShapeError(f"gradient has {upstream.shape[-1]} channels, expected {n * r * r}")
    inverse = np.argsort(reshuffle_permutation(n, r))
    return OpGrad(np.ascontiguousarray(upstream[..., inverse]))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def backward_relu(x: np.ndarray, upstream: np.ndarray) -> OpGrad:
    if x.shape != upstream.shape:
        raise ShapeError(f"gradient shape {upstream.shape} != input shape {x.shape}")
    return OpGrad(np.where(x > 0, upstream, 0).astype(upstream.dtype, copy=False))


# --- convolution ----------------------------------------------------------

def _same_pad(size: int, out: int, k: int, stride: int) -> tuple[int, int]:
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def _im2col(x, kh, kw, stride, out_h, out_w):
    """Gather (..., out_h, out_w, kh*kw*C) patches from zero-padded ``x``."""
    *lead, h, w, c = x.shape
    if kh == kw == 1 and stride == 1:
        return x
    top, bottom = _same_pad(h, out_h, kh, stride)
    left, right = _same_pad(w, out_w, kw, stride)
    xp = np.pad(x, [(0, 0)] * len(lead) + [(top, bottom), (left, right), (0, 0)])
    if c > 1:
        # one strided copy; faster than per-tap assignment once rows hold several channels
        win = sliding_window_view(xp, (kh, kw), axis=(-3, -2))
        win = win[..., ::stride, ::stride, :, :, :][..., :out_h, :out_w, :, :, :]
        return np.ascontiguousarray(np.moveaxis(win, -3, -1)).reshape(*lead, out_h, out_w, kh * kw * c)
    cols = np.empty((*lead, out_h, out_w, kh, kw, c), dtype=x.dtype)
    for dx in range(kh):
        for dy in range(kw):
            cols[..., dx, dy, :] = xp[..., dx:dx + stride * (out_h - 1) + 1:stride,
                                      dy:dy + stride * (out_w - 1) + 1:stride, :]
    return cols.reshape(*lead, out_h, out_w, kh * kw * c)


def _col2im(cols, kh, kw, stride, h, w, c):
    """Scatter-add patches back onto an (..., h, w, c) plane; adjoint of _im2col."""
    *lead, out_h, out_w, _ = cols.shape
    if kh == kw == 1 and stride == 1:
        return np.ascontiguousarray(cols)
    top, bottom = _same_pad(h, out_h, kh, stride)
    left, right = _same_pad(w, out_w, kw, stride)
    xp = np.zeros((*lead, h + top + bottom, w + left + right, c), dtype=cols.dtype)
    cols = cols.reshape(*lead, out_h, out_w, kh, kw, c)
    for dx in range(kh):
        for dy in range(kw):
            xp[..., dx:dx + stride * (out_h - 1) + 1:stride,
               dy:dy + stride * (out_w - 1) + 1:stride, :] += cols[..., dx, dy, :]
    return np.ascontiguousarray(xp[..., top:top + h, left:left + w, :])


def _check_conv(x, w, spec: ConvSpec, transposed: bool):
    if spec.transposed != transposed:
        kind = "transposed_conv2d" if transposed else "conv2d"
        raise ValueError(f"{kind} called with spec.transposed={spec.transposed}")
    if x.shape[-1] != spec.in_channels:
        raise ShapeError(f"input has {x.shape[-1]} channels, spec expects {spec.in_channels}")
    if w.shape != spec.weight_shape:
        raise ShapeError(f"weight shape {w.shape} != {spec.weight_shape}")


def conv_output_hw(h: int, w: int, spec: ConvSpec) -> tuple[int, int]:
    if spec.transposed:
        return h * spec.stride, w * spec.stride
    return -(-h // spec.stride), -(-w // spec.stride)


def conv2d(x: np.ndarray, w: np.ndarray, b, spec: ConvSpec) -> np.ndarray:
    """Same-zero-padded convolution (cross-correlation form)."""
    _check_conv(x, w, spec, transposed=False)
    *lead, h, wd, _ = x.shape
    oh, ow = conv_output_hw(h, wd, spec)
    cols = _im2col(x, spec.kernel_h, spec.kernel_w, spec.stride, oh, ow)
    out = cols @ w.reshape(-1, spec.out_channels)
    if b is not None:
        out += b
    return out


def transposed_conv2d(x: np.ndarray, w: np.ndarray, b, spec: ConvSpec) -> np.ndarray:
    """Adjoint of ``conv2d`` with the same weights; output is stride times larger."""
    _check_conv(x, w, spec, transposed=True)
    *lead, h, wd, _ = x.shape
    oh, ow = conv_output_hw(h, wd, spec)
    cols = x @ w.reshape(-1, spec.in_channels).T
    out = _col2im(cols, spec.kernel_h, spec.kernel_w, spec.stride, oh, ow, spec.out_channels)
    if b is not None:
        out += b
    return out


def _sum_lead(g):
    return g.reshape(-1, g.shape[-1]).sum(axis=0)


def backward_conv2d(x, w, spec: ConvSpec, upstream, need_input: bool = True) -> OpGrad:
    """Gradients of ``conv2d``; ``need_input=False`` skips d_input (returned as None)."""
    *lead, h, wd, _ = x.shape
    oh, ow = conv_output_hw(h, wd, spec)
    if upstream.shape != (*lead, oh, ow, spec.out_channels):
        raise ShapeError(f"gradient shape {upstream.shape} != output shape {(*lead, oh, ow, spec.out_channels)}")
    kh, kw = spec.kernel_h, spec.kernel_w
    cols = _im2col(x, kh, kw, spec.stride, oh, ow)
    g2 = upstream.reshape(-1, spec.out_channels)
    d_w = (cols.reshape(g2.shape[0], -1).T @ g2).reshape(w.shape)
    if not need_input:
        return OpGrad(None, d_w, _sum_lead(upstream))
    d_cols = upstream @ w.reshape(-1, spec.out_channels).T
    d_x = _col2im(d_cols, kh, kw, spec.stride, h, wd, spec.in_channels)
    return OpGrad(d_x, d_w, _sum_lead(upstream))


def backward_transposed_conv2d(x, w, spec: ConvSpec, upstream) -> OpGrad:
    *lead, h, wd, _ = x.shape
    oh, ow = conv_output_hw(h, wd, spec)
    if upstream.shape != (*lead, oh, ow, spec.out_channels):
        raise ShapeError(f"gradient shape {upstream.shape} != output shape {(*lead, oh, ow, spec.out_channels)}")
    kh, kw = spec.kernel_h, spec.kernel_w
    cols = _im2col(upstream, kh, kw, spec.stride, h, wd)
    d_x = cols @ w.reshape(-1, spec.in_channels)
    d_w = (cols.reshape(-1, cols.shape[-1]).T @ x.reshape(-1, spec.in_channels)).reshape(w.shape)
    return OpGrad(d_x, d_w, _sum_lead(upstream))


def conv_macs(spec: ConvSpec, h: int, w: int) -> int:
    """Multiply-accumulates for one application on an h x w input."""
    if spec.transposed:
        positions = h * w
    else:
        oh, ow = conv_output_hw(h, w, spec)
        positions = oh * ow
    return positions * spec.kernel_h * spec.kernel_w * spec.in_channels * spec.out_channels
