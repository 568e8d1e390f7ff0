"""Desk-scale training run: LPCN-SR+ on a DIV2K subset, scored on Set5 against bicubic.

Resumable: rerunning with the same --out picks up from the newest checkpoint,
so the run can be split across sessions.
"""
from __future__ import annotations

import argparse
import json
import time
from pathlib import Path

from lpcn import metrics, pipeline
from lpcn.data import data_root, dataset_dir
from lpcn.imageio import atomic_write_bytes, list_images
from lpcn.model import Mode, load_model, save_model
from lpcn.train import TrainConfig, extract_patches, read_archive, train, write_archive


def latest_checkpoint(directory: Path):
    found = sorted(directory.glob("checkpoint-*.lpco"))
    return found[-1] if found else None


def run(out: Path, n_images: int = 20, steps: int = 10_000, batch: int = 16, seed: int = 0,
        checkpoint_every: int = 250, log_every: int = 50) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    model_path = out / "desk_scale.lpcn"
    cfg = TrainConfig(batch=batch, steps=steps, seed=seed, checkpoint_every=checkpoint_every,
                      mode=Mode.LPCN_SR_PLUS)

    if not model_path.exists():
        archive = out / "patches.lpcd"
        if not archive.exists():
            subset = out / "div2k_subset"
            subset.mkdir(exist_ok=True)
            for src in list_images(dataset_dir("DIV2K"))[:n_images]:
                link = subset / src.name
                if not link.exists():
                    link.symlink_to(src.resolve())
            write_archive(archive, extract_patches(subset, cfg.patch, cfg.stride, cfg.scale))
        patches = read_archive(archive)
        print(f"{len(patches)} patch pairs from {n_images} images", flush=True)
        ckpt_dir = out / "checkpoints"
        resume = latest_checkpoint(ckpt_dir)
        t0 = time.perf_counter()

        def on_step(step, loss):
            if step % log_every == 0:
                print(f"step {step} loss {loss:.6g} ({time.perf_counter() - t0:.0f} s)", flush=True)

        res = train(patches, cfg, resume=resume, checkpoint_dir=ckpt_dir, on_step=on_step)
        save_model(res.params, model_path)

    params = load_model(model_path)
    set5 = dataset_dir("Set5")
    bicubic = metrics.evaluate_set(set5, metrics.bicubic_upscaler, cfg.scale)
    model = metrics.evaluate_set(set5, pipeline.model_upscaler(params), cfg.scale, model_id=model_path.name)
    result = {
        "config": cfg.as_dict() | {"images": n_images},
        "bicubic_psnr": bicubic.mean_psnr, "bicubic_ssim": bicubic.mean_ssim,
        "model_psnr": model.mean_psnr, "model_ssim": model.mean_ssim,
        "gain_db": model.mean_psnr - bicubic.mean_psnr,
    }
    atomic_write_bytes(out / "result.json", (json.dumps(result, indent=2) + "\n").encode())
    return result


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=data_root() / "runs" / "desk_scale")
    ap.add_argument("--images", type=int, default=20)
    ap.add_argument("--steps", type=int, default=10_000)
    ap.add_argument("--batch", type=int, default=16)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    res = run(args.out, args.images, args.steps, args.batch, args.seed)
    print(f"Set5 x4: bicubic {res['bicubic_psnr']:.2f} dB, model {res['model_psnr']:.2f} dB, "
          f"gain {res['gain_db']:+.2f} dB")


if __name__ == "__main__":
    main()
