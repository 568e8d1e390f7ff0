"""LPCN-SR and LPCN-SR+ graphs: parameters, forward, backward, model files.

Branch A (both modes)::

    y --pool(r)--> r^2 replicas --conv each (n filters)--> concat --> reshuffle
      --> encoder-decoder --> head conv (r^2 filters) --> sub-pixel --> A

Branch B (PLUS mode only) runs a full-resolution conv into the *same*
encoder-decoder weights, then a one-filter head to produce B. A 1x1 conv
over [A, B] gives the final image.
"""
from __future__ import annotations

import enum
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import binfmt, ops
from .ops import ConvSpec
from .tensor import ShapeError

MODEL_MAGIC = b"LPCN"
MODEL_VERSION = 1


class Mode(enum.IntEnum):
    LPCN_SR = 0
    LPCN_SR_PLUS = 1


class SpecError(ValueError):
    pass


class StateError(RuntimeError):
    pass


@dataclass(frozen=True)
class EncDecLayer:
    conv: ConvSpec
    relu: bool = True


def mirrored_encdec(width: int, strides=(1, 2, 1, 2, 1), kernel: int = 3) -> tuple[EncDecLayer, ...]:
    """Convs with the given strides followed by transposed convs in mirror order."""
    enc = [EncDecLayer(ConvSpec(kernel, kernel, width, width, s)) for s in strides]
    dec = [EncDecLayer(ConvSpec(kernel, kernel, width, width, s, transposed=True))
           for s in reversed(strides)]
    return tuple(enc + dec)


def stride_one_skips(encdec) -> tuple[tuple[int, int], ...]:
    """Mirror pairs (k, L+1-k) whose outputs share a resolution."""
    n = len(encdec)
    return tuple((k, n + 1 - k) for k in range(1, n // 2 + 1) if encdec[k - 1].conv.stride == 1)


@dataclass(frozen=True)
class ArchSpec:
    mode: Mode = Mode.LPCN_SR_PLUS
    r: int = 2
    replica_conv: ConvSpec = ConvSpec(3, 3, 1, 16)
    branch_b_conv: ConvSpec = ConvSpec(3, 3, 1, 64)
    encdec: tuple = mirrored_encdec(64)
    skip_pairs: tuple = ((1, 10), (3, 8), (5, 6))
    head_conv: ConvSpec = ConvSpec(3, 3, 64, 4)
    branch_b_head: ConvSpec = ConvSpec(3, 3, 64, 1)
    fusion_conv: ConvSpec = ConvSpec(1, 1, 2, 1)

    @classmethod
    def reduced(cls, mode: Mode, filters: int = 1, strides=(2,), kernel: int = 3, r: int = 2) -> "ArchSpec":
        """Small variant for gradient checks and quick experiments."""
        width = filters * r * r
        encdec = mirrored_encdec(width, strides, kernel)
        return cls(
            mode=mode, r=r,
            replica_conv=ConvSpec(kernel, kernel, 1, filters),
            branch_b_conv=ConvSpec(kernel, kernel, 1, width),
            encdec=encdec,
            skip_pairs=stride_one_skips(encdec),
            head_conv=ConvSpec(kernel, kernel, width, r * r),
            branch_b_head=ConvSpec(kernel, kernel, width, 1),
            fusion_conv=ConvSpec(1, 1, 2, 1),
        )

    @property
    def width(self) -> int:
        return self.replica_conv.out_channels * self.r * self.r

    @property
    def downsamplings(self) -> int:
        half = len(self.encdec) // 2
        return sum(layer.conv.stride == 2 for layer in self.encdec[:half])

    @property
    def input_multiple(self) -> int:
        """H and W of the network input must be multiples of this."""
        return self.r * 2 ** self.downsamplings

    def layer_specs(self) -> dict[str, ConvSpec]:
        specs = {f"replica{i}": self.replica_conv for i in range(self.r * self.r)}
        specs.update({f"encdec{j}": layer.conv for j, layer in enumerate(self.encdec, 1)})
        specs["head"] = self.head_conv
        if self.mode == Mode.LPCN_SR_PLUS:
            specs["branch_b_conv"] = self.branch_b_conv
            specs["branch_b_head"] = self.branch_b_head
            specs["fusion"] = self.fusion_conv
        return specs

    def n_params(self) -> int:
        return sum(s.n_params for s in self.layer_specs().values())

    def validate(self) -> "ArchSpec":
        def need(cond, msg):
            if not cond:
                raise SpecError(msg)

        need(self.r >= 1, f"r must be >= 1, got {self.r}")
        need(isinstance(self.mode, Mode), f"unknown mode {self.mode!r}")
        rc = self.replica_conv
        need(rc.in_channels == 1 and rc.stride == 1 and not rc.transposed,
             "replica conv must map 1 channel at stride 1")
        n = len(self.encdec)
        need(n >= 2 and n % 2 == 0, f"encoder-decoder needs an even number of layers, got {n}")
        half = n // 2
        channels = self.width
        level = 0
        levels = []
        for j, layer in enumerate(self.encdec, 1):
            c = layer.conv
            need(c.transposed == (j > half),
                 f"encdec{j}: layers 1..{half} must be convs and {half + 1}..{n} transposed convs")
            need(c.in_channels == channels, f"encdec{j}: expects {c.in_channels} channels, gets {channels}")
            if j > half:
                need(c.stride == self.encdec[n - j].conv.stride,
                     f"encdec{j}: stride must mirror encdec{n + 1 - j}")
            level += (1 if c.stride == 2 else 0) * (-1 if c.transposed else 1)
            channels = c.out_channels
            levels.append((level, channels))
        need(channels == self.width, f"encoder-decoder must end with {self.width} channels, ends with {channels}")
        for k, m in self.skip_pairs:
            need(1 <= k <= half < m <= n, f"skip ({k}, {m}) must go from encoder to decoder")
            need(levels[k - 1] == levels[m - 1],
                 f"skip ({k}, {m}) joins outputs of different shape")
        need(len({m for _, m in self.skip_pairs}) == len(self.skip_pairs), "two skips into one layer")
        need(self.head_conv.in_channels == self.width and self.head_conv.out_channels == self.r * self.r,
             f"head must map {self.width} -> {self.r * self.r} channels")
        for name, c in (("head", self.head_conv), ("branch_b_conv", self.branch_b_conv),
                        ("branch_b_head", self.branch_b_head), ("fusion", self.fusion_conv)):
            need(c.stride == 1 and not c.transposed, f"{name} must be a stride-1 conv")
        if self.mode == Mode.LPCN_SR_PLUS:
            need(self.branch_b_conv.in_channels == 1 and self.branch_b_conv.out_channels == self.width,
                 f"branch B conv must map 1 -> {self.width} channels")
            need(self.branch_b_head.in_channels == self.width and self.branch_b_head.out_channels == 1,
                 f"branch B head must map {self.width} -> 1 channel")
            need(self.fusion_conv.weight_shape == (1, 1, 2, 1), "fusion must be a 1x1 conv from 2 channels to 1")
        return self

    # --- serialisation of the layer table ---

    def to_bytes(self) -> bytes:
        def row(c: ConvSpec) -> bytes:
            return b"".join(binfmt.u32(v) for v in (c.kernel_h, c.kernel_w, c.in_channels,
                                                     c.out_channels, c.stride, int(c.transposed)))
        out = [binfmt.u32(self.r)]
        out += [row(c) for c in (self.replica_conv, self.branch_b_conv, self.head_conv,
                                 self.branch_b_head, self.fusion_conv)]
        out.append(binfmt.u32(len(self.encdec)))
        out += [row(layer.conv) + binfmt.u32(int(layer.relu)) for layer in self.encdec]
        out.append(binfmt.u32(len(self.skip_pairs)))
        out += [binfmt.u32(k) + binfmt.u32(m) for k, m in self.skip_pairs]
        return b"".join(out)

    @classmethod
    def read(cls, reader: binfmt.Reader, mode: Mode) -> "ArchSpec":
        def row(name):
            vals = [reader.u32(f"arch.{name}") for _ in range(6)]
            try:
                return ConvSpec(*vals[:5], transposed=bool(vals[5]))
            except ValueError as exc:
                raise binfmt.FormatError(f"arch.{name}", str(exc)) from None

        r = reader.u32("arch.r")
        fixed = [row(name) for name in ("replica_conv", "branch_b_conv", "head_conv",
                                        "branch_b_head", "fusion_conv")]
        n = reader.u32("arch.encdec_count")
        if n > 1024:
            raise binfmt.FormatError("arch.encdec_count", f"implausible layer count {n}")
        encdec = tuple(EncDecLayer(row(f"encdec{j}"), bool(reader.u32(f"arch.encdec{j}.relu")))
                       for j in range(1, n + 1))
        n_skip = reader.u32("arch.skip_count")
        if n_skip > n:
            raise binfmt.FormatError("arch.skip_count", f"implausible skip count {n_skip}")
        skips = tuple((reader.u32("arch.skip"), reader.u32("arch.skip")) for _ in range(n_skip))
        spec = cls(mode, r, fixed[0], fixed[1], encdec, skips, fixed[2], fixed[3], fixed[4])
        try:
            return spec.validate()
        except SpecError as exc:
            raise binfmt.FormatError("arch", str(exc)) from None

    def fingerprint(self) -> int:
        return zlib.crc32(binfmt.u8(int(self.mode)) + self.to_bytes())


@dataclass
class ModelParams:
    """Weights keyed ``<layer>.weight`` / ``<layer>.bias`` in layer order.

    The encoder-decoder entries exist once; both branches read them.
    ``version`` is bumped by every in-place update so stale forward
    contexts can be detected.
    """

    spec: ArchSpec
    tensors: dict[str, np.ndarray]
    version: int = 0

    @property
    def mode(self) -> Mode:
        return self.spec.mode

    @property
    def fingerprint(self) -> int:
        return self.spec.fingerprint()

    def w(self, layer: str) -> np.ndarray:
        return self.tensors[f"{layer}.weight"]

    def b(self, layer: str) -> np.ndarray:
        return self.tensors[f"{layer}.bias"]

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.spec, {k: v.astype(dtype) for k, v in self.tensors.items()}, self.version)

    def copy(self) -> "ModelParams":
        return ModelParams(self.spec, {k: v.copy() for k, v in self.tensors.items()}, self.version)

    def n_params(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def equal(self, other: "ModelParams") -> bool:
        return (self.spec == other.spec and self.tensors.keys() == other.tensors.keys()
                and all(np.array_equal(v, other.tensors[k]) for k, v in self.tensors.items()))


def build_model(spec: ArchSpec, seed: int = 0, dtype=np.float32) -> ModelParams:
    """He-normal weights, zero biases; the fusion layer starts as a plain average."""
    spec.validate()
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, cs in spec.layer_specs().items():
        if name == "fusion":
            w = np.full(cs.weight_shape, 1.0 / cs.in_channels)
        else:
            std = math.sqrt(2.0 / (cs.kernel_h * cs.kernel_w * cs.in_channels))
            w = rng.normal(0.0, std, size=cs.weight_shape)
        tensors[f"{name}.weight"] = w.astype(dtype)
        tensors[f"{name}.bias"] = np.zeros(cs.out_channels, dtype=dtype)
    return ModelParams(spec, tensors)


# --- forward / backward ----------------------------------------------------

def _conv(params, name, spec: ConvSpec, x):
    fn = ops.transposed_conv2d if spec.transposed else ops.conv2d
    return fn(x, params.w(name), params.b(name), spec)


def _conv_backward(params, name, spec: ConvSpec, x, g, grads, need_input=True):
    if spec.transposed:
        res = ops.backward_transposed_conv2d(x, params.w(name), spec, g)
    else:
        res = ops.backward_conv2d(x, params.w(name), spec, g, need_input=need_input)
    _accumulate(grads, f"{name}.weight", res.d_weights)
    _accumulate(grads, f"{name}.bias", res.d_bias)
    return res.d_input


def _accumulate(grads, key, value):
    if key in grads:
        grads[key] = grads[key] + value
    else:
        grads[key] = value


def _encdec_forward(params, spec: ArchSpec, x):
    skip_from = {m: k for k, m in spec.skip_pairs}
    inputs, pre, outs = [], [], []
    h = x
    for j, layer in enumerate(spec.encdec, 1):
        z = _conv(params, f"encdec{j}", layer.conv, h)
        if j in skip_from:
            z = z + outs[skip_from[j] - 1]
        inputs.append(h)
        pre.append(z)
        h = ops.relu(z) if layer.relu else z
        outs.append(h)
    return h, (inputs, pre)


def _encdec_backward(params, spec: ArchSpec, saved, upstream, grads):
    inputs, pre = saved
    skip_from = {m: k for k, m in spec.skip_pairs}
    n = len(spec.encdec)
    g = [None] * (n + 1)  # g[j]: gradient w.r.t. the output of layer j (1-based)
    g[n] = upstream
    d_x = None
    for j in range(n, 0, -1):
        layer = spec.encdec[j - 1]
        gz = ops.backward_relu(pre[j - 1], g[j]).d_input if layer.relu else g[j]
        if j in skip_from:
            k = skip_from[j]
            g[k] = gz if g[k] is None else g[k] + gz
        d_in = _conv_backward(params, f"encdec{j}", layer.conv, inputs[j - 1], gz, grads)
        if j > 1:
            g[j - 1] = d_in if g[j - 1] is None else g[j - 1] + d_in
        else:
            d_x = d_in
    return d_x


@dataclass
class Context:
    params_version: int
    params_id: int
    saved: dict = field(default_factory=dict)


def check_input(spec: ArchSpec, y: np.ndarray):
    if y.ndim < 3 or y.shape[-1] != 1:
        raise ShapeError(f"expected (..., H, W, 1) luma input, got {y.shape}")
    m = spec.input_multiple
    if y.shape[-3] % m or y.shape[-2] % m:
        raise ShapeError(f"input {y.shape[-3]}x{y.shape[-2]} must be a multiple of {m} (pad first)")


def forward(params: ModelParams, y: np.ndarray, keep_context: bool = False):
    """Run the network on bicubic-upscaled luma in [0, 1].

    Returns ``(sr_image, context)``; ``context`` is None unless requested.
    """
    spec = params.spec
    check_input(spec, y)
    r, n = spec.r, spec.replica_conv.out_channels
    y = np.asarray(y, dtype=params.w("head").dtype)
    s = {"y": y}

    pooled = ops.lossless_pool(y, r)
    replicas = [np.ascontiguousarray(pooled[..., i:i + 1]) for i in range(r * r)]
    pre_rep = [_conv(params, f"replica{i}", spec.replica_conv, rep) for i, rep in enumerate(replicas)]
    fused = ops.reshuffle(np.concatenate([ops.relu(z) for z in pre_rep], axis=-1), n, r)
    e_a, s["encdec_a"] = _encdec_forward(params, spec, fused)
    head = _conv(params, "head", spec.head_conv, e_a)
    sr_a = ops.subpixel_upscale(head, r)
    s.update(replicas=replicas, pre_rep=pre_rep, e_a=e_a)

    if spec.mode == Mode.LPCN_SR:
        out = sr_a
    else:
        pre_b = _conv(params, "branch_b_conv", spec.branch_b_conv, y)
        e_b, s["encdec_b"] = _encdec_forward(params, spec, ops.relu(pre_b))
        sr_b = _conv(params, "branch_b_head", spec.branch_b_head, e_b)
        both = np.concatenate([sr_a, sr_b], axis=-1)
        out = _conv(params, "fusion", spec.fusion_conv, both)
        s.update(pre_b=pre_b, e_b=e_b, both=both, sr_a=sr_a, sr_b=sr_b)

    ctx = Context(params.version, id(params), s) if keep_context else None
    return out, ctx


def backward(params: ModelParams, ctx: Context | None, d_output: np.ndarray,
             branches=("a", "b")) -> dict[str, np.ndarray]:
    """Parameter gradients for upstream ``d_output``.

    ``branches`` restricts which branch receives gradient in PLUS mode; shared
    encoder-decoder gradients are the sum over the selected branches.
    """
    if ctx is None:
        raise StateError("backward needs the context from forward(..., keep_context=True)")
    if ctx.params_id != id(params) or ctx.params_version != params.version:
        raise StateError("stale context: parameters changed since the forward pass")
    spec = params.spec
    s = ctx.saved
    r, n = spec.r, spec.replica_conv.out_channels
    grads: dict[str, np.ndarray] = {}

    if spec.mode == Mode.LPCN_SR:
        d_a, d_b = d_output, None
    else:
        d_both = _conv_backward(params, "fusion", spec.fusion_conv, s["both"], d_output, grads)
        d_a = d_both[..., 0:1] if "a" in branches else np.zeros_like(s["sr_a"])
        d_b = d_both[..., 1:2] if "b" in branches else None

    d_head = ops.backward_subpixel_upscale(d_a, r).d_input
    d_e = _conv_backward(params, "head", spec.head_conv, s["e_a"], d_head, grads)
    d_fused = _encdec_backward(params, spec, s["encdec_a"], d_e, grads)
    d_cat = ops.backward_reshuffle(d_fused, n, r).d_input
    for i in range(r * r):
        d_z = ops.backward_relu(s["pre_rep"][i], d_cat[..., i * n:(i + 1) * n]).d_input
        _conv_backward(params, f"replica{i}", spec.replica_conv, s["replicas"][i], d_z, grads,
                       need_input=False)

    if spec.mode == Mode.LPCN_SR_PLUS:
        if d_b is None:
            d_b = np.zeros_like(s["sr_b"])
        d_eb = _conv_backward(params, "branch_b_head", spec.branch_b_head, s["e_b"], d_b, grads)
        d_rb = _encdec_backward(params, spec, s["encdec_b"], d_eb, grads)
        d_pre_b = ops.backward_relu(s["pre_b"], d_rb).d_input
        _conv_backward(params, "branch_b_conv", spec.branch_b_conv, s["y"], d_pre_b, grads,
                       need_input=False)

    return {k: grads[k] for k in params.tensors}


def infer(params: ModelParams, y: np.ndarray) -> np.ndarray:
    return forward(params, y)[0]


# --- model files -----------------------------------------------------------

def model_payload(params: ModelParams) -> bytes:
    spec = params.spec
    parts = [binfmt.u8(int(spec.mode)), spec.to_bytes()]
    for name in spec.layer_specs():
        parts.append(binfmt.f32(params.w(name)))
        parts.append(binfmt.f32(params.b(name)))
    return b"".join(parts)


def save_model(params: ModelParams, path) -> None:
    binfmt.write_sealed(path, MODEL_MAGIC, MODEL_VERSION, model_payload(params))


def parse_model(data: bytes) -> ModelParams:
    _, payload = binfmt.open_envelope(data, MODEL_MAGIC, {MODEL_VERSION})
    reader = binfmt.Reader(payload)
    mode_byte = reader.u8("mode")
    try:
        mode = Mode(mode_byte)
    except ValueError:
        raise binfmt.FormatError("mode", f"unknown mode {mode_byte}") from None
    spec = ArchSpec.read(reader, mode)
    tensors = {}
    for name, cs in spec.layer_specs().items():
        tensors[f"{name}.weight"] = reader.f32_array(cs.weight_shape, f"{name}.weight")
        tensors[f"{name}.bias"] = reader.f32_array((cs.out_channels,), f"{name}.bias")
    reader.expect_end("weights")
    return ModelParams(spec, tensors)


def load_model(path) -> ModelParams:
    return parse_model(Path(path).read_bytes())


def describe(params: ModelParams) -> str:
    spec = params.spec
    lines = [f"mode: {spec.mode.name}", f"r: {spec.r}", f"fingerprint: {params.fingerprint:08x}",
             f"input multiple: {spec.input_multiple}", "",
             f"{'layer':<16}{'kind':<11}{'kernel':<8}{'in':>5}{'out':>5}{'stride':>7}{'relu':>6}"
             f"{'weight shape':>20}{'params':>10}"]
    relu_of = {f"encdec{j}": layer.relu for j, layer in enumerate(spec.encdec, 1)}
    relu_of.update({f"replica{i}": True for i in range(spec.r * spec.r)}, branch_b_conv=True)
    for name, cs in spec.layer_specs().items():
        kind = "tconv" if cs.transposed else "conv"
        lines.append(f"{name:<16}{kind:<11}{f'{cs.kernel_h}x{cs.kernel_w}':<8}{cs.in_channels:>5}"
                     f"{cs.out_channels:>5}{cs.stride:>7}{'yes' if relu_of.get(name) else 'no':>6}"
                     f"{str(params.w(name).shape):>20}{cs.n_params:>10}")
    lines.append("")
    lines.append("skips: " + ", ".join(f"encdec{k} -> encdec{m}" for k, m in spec.skip_pairs))
    lines.append(f"total parameters: {params.n_params()}")
    return "\n".join(lines)
