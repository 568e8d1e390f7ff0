"""Bicubic x4 baseline on Set5, Set14 and BSD100, with reference values side by side."""
import argparse
import time

from lpcn import metrics
from lpcn.data import BENCHMARKS, dataset_dir

REFERENCE = {"Set5": (28.44, 0.8110), "Set14": (26.00, 0.7009), "BSD100": (25.89, 0.6651)}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--scale", type=int, default=4)
    ap.add_argument("--reports", help="directory for per-set CSV reports")
    args = ap.parse_args()

    t0 = time.perf_counter()
    print(f"{'set':8s} {'psnr':>7s} {'ref':>7s} {'ssim':>7s} {'ref':>7s}  n")
    for name in BENCHMARKS:
        report_path = f"{args.reports}/{name}_bicubic_x{args.scale}.csv" if args.reports else None
        rep = metrics.evaluate_set(dataset_dir(name), metrics.bicubic_upscaler, args.scale, report_path)
        ref_p, ref_s = REFERENCE[name]
        print(f"{name:8s} {rep.mean_psnr:7.2f} {ref_p:7.2f} {rep.mean_ssim:7.4f} {ref_s:7.4f}  {len(rep.images)}")
    print(f"total {time.perf_counter() - t0:.1f} s")


if __name__ == "__main__":
    main()
