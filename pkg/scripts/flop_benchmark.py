"""Front-end convolution cost: full resolution vs the losslessly pooled layout.

Full resolution runs one 3x3 conv with n*r^2 filters on the H x W plane.
The pooled layout runs r^2 separate n-filter convs, one per replica, on
(H/r) x (W/r) planes.  Both produce n*r^2 feature maps.
"""
import argparse
import time

import numpy as np

from lpcn import ops
from lpcn.ops import ConvSpec


def layouts(n: int, r: int, kernel: int = 3):
    full = ConvSpec(kernel, kernel, 1, n * r * r)
    branch = ConvSpec(kernel, kernel, 1, n)
    return full, branch


def mac_ratio(n: int, r: int, size: int) -> float:
    full, branch = layouts(n, r)
    pooled = r * r * ops.conv_macs(branch, size // r, size // r)
    return ops.conv_macs(full, size, size) / pooled


def timed_ratio(n: int, r: int, size: int, reps: int = 15, seed: int = 0):
    """Median wall-clock of both layouts (interleaved runs), float32."""
    rng = np.random.default_rng(seed)
    full, branch = layouts(n, r)
    m = rng.uniform(0, 1, (size, size, 1)).astype(np.float32)
    wf = rng.normal(size=full.weight_shape).astype(np.float32)
    bf = np.zeros(full.out_channels, np.float32)
    wb = [rng.normal(size=branch.weight_shape).astype(np.float32) for _ in range(r * r)]
    bb = np.zeros(n, np.float32)

    def run_full():
        return ops.conv2d(m, wf, bf, full)

    def run_pooled():
        t = ops.lossless_pool(m, r)
        return [ops.conv2d(t[..., i:i + 1], wb[i], bb, branch) for i in range(r * r)]

    run_full(), run_pooled()  # warm up allocator and BLAS
    tf, tp = [], []
    for _ in range(reps):
        t0 = time.perf_counter()
        run_full()
        tf.append(time.perf_counter() - t0)
        t0 = time.perf_counter()
        run_pooled()
        tp.append(time.perf_counter() - t0)
    return float(np.median(tf)), float(np.median(tp))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--filters", type=int, default=16, help="filters per replica branch")
    ap.add_argument("--sizes", type=int, nargs="+", default=[128, 256, 512])
    ap.add_argument("--reps", type=int, default=15)
    args = ap.parse_args()
    print(f"{'size':>5s} {'r':>2s} {'mac ratio':>9s} {'full ms':>8s} {'pooled ms':>9s} {'speedup':>7s}")
    for r in (2, 3, 4):
        for size in args.sizes:
            if size % r:
                continue
            tf, tp = timed_ratio(args.filters, r, size, args.reps)
            print(f"{size:5d} {r:2d} {mac_ratio(args.filters, r, size):9.2f} "
                  f"{tf * 1e3:8.2f} {tp * 1e3:9.2f} {tf / tp:7.2f}")


if __name__ == "__main__":
    main()
