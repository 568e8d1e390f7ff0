"""Command line: prepare, train, upscale, evaluate, inspect.

Exit codes: 0 success, 2 input/format error, 3 I/O or resource error,
4 numerical divergence.
"""
from __future__ import annotations

import argparse
import csv
import datetime as dt
import io
import json
import logging
import sys
import zlib
from pathlib import Path

import numpy as np

from . import __version__, metrics, model as model_mod, pipeline
from .binfmt import FormatError
from .imageio import ImageError, atomic_write_bytes, list_images, read_png, write_png
from .model import Mode, load_model, save_model
from .train import (
    DivergenceError, TrainConfig, extract_patches, load_checkpoint, read_archive, train,
    write_archive,
)

log = logging.getLogger("lpcn")

EXIT_OK, EXIT_INPUT, EXIT_IO, EXIT_DIVERGED = 0, 2, 3, 4
MAX_OUTPUT_SIDE = 16384
MODES = {"lpcn": Mode.LPCN_SR, "lpcn-plus": Mode.LPCN_SR_PLUS}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def write_manifest(artifact, command: str, config: dict, seed, started: str, artifacts: dict) -> Path:
    path = Path(str(artifact) + ".manifest.json")
    doc = {
        "command": command,
        "config": config,
        "seed": seed,
        "started": started,
        "finished": _now(),
        "artifacts": {k: str(v) for k, v in artifacts.items()},
        "tool_version": __version__,
    }
    atomic_write_bytes(path, (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode())
    return path


def _load_model_or_fail(path):
    try:
        return load_model(path)
    except FileNotFoundError:
        raise CliError(EXIT_INPUT, f"model file not found: {path}") from None
    except FormatError as exc:
        raise CliError(EXIT_INPUT, f"bad model file {path}: {exc}") from None


# --- commands --------------------------------------------------------------

def cmd_prepare(args) -> int:
    started = _now()
    if not list_images(args.hr_dir):
        raise CliError(EXIT_INPUT, f"no images found in {args.hr_dir}")
    try:
        ps = extract_patches(args.hr_dir, args.patch, args.stride, args.scale)
    except ValueError as exc:
        raise CliError(EXIT_INPUT, str(exc)) from None
    try:
        write_archive(args.out, ps)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {args.out}: {exc}") from None
    config = {"hr_dir": str(args.hr_dir), "scale": args.scale, "patch": args.patch, "stride": args.stride}
    write_manifest(args.out, "prepare", config, None, started, {"archive": args.out})
    print(f"wrote {len(ps)} patch pairs to {args.out}")
    return EXIT_OK


def _read_loss_rows(path: Path, upto: int) -> list[tuple[int, float, float]]:
    if not path.exists():
        return []
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            if int(rec["step"]) <= upto:
                rows.append((int(rec["step"]), float(rec["loss"]), float(rec["wall_seconds"])))
    return rows


def _write_loss_csv(path: Path, rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step", "loss", "wall_seconds"])
    for step, loss, wall in rows:
        writer.writerow([step, repr(float(loss)), f"{wall:.3f}"])
    atomic_write_bytes(path, buf.getvalue().encode())


def cmd_train(args) -> int:
    started = _now()
    try:
        ps = read_archive(args.data)
    except FileNotFoundError:
        raise CliError(EXIT_INPUT, f"patch archive not found: {args.data}") from None
    except FormatError as exc:
        raise CliError(EXIT_INPUT, f"bad patch archive {args.data}: {exc}") from None
    cfg = TrainConfig(scale=ps.scale, patch=ps.patch, stride=args.stride, batch=args.batch, lr=args.lr,
                      beta1=args.beta1, beta2=args.beta2, epsilon=args.epsilon, steps=args.steps,
                      seed=args.seed, checkpoint_every=args.checkpoint_every, mode=MODES[args.mode])
    try:
        cfg.validate()
    except ValueError as exc:
        raise CliError(EXIT_INPUT, str(exc)) from None
    out = Path(args.out_model)
    ckpt_dir = Path(args.checkpoint_dir) if args.checkpoint_dir else out.with_name(out.name + ".ckpt")
    loss_csv = out.with_name(out.name + ".loss.csv")
    start_step = 0
    if args.resume:
        try:
            start_step = load_checkpoint(args.resume)[1].state.t
        except (FileNotFoundError, FormatError) as exc:
            raise CliError(EXIT_INPUT, f"bad checkpoint {args.resume}: {exc}") from None
    rows = _read_loss_rows(loss_csv, start_step) if args.resume else []
    log_every = max(1, args.log_every)

    def on_step(step, loss):
        if step % log_every == 0 or step == cfg.steps:
            print(f"step {step} loss {loss:.6g}", flush=True)

    try:
        res = train(ps, cfg, resume=args.resume, checkpoint_dir=ckpt_dir, on_step=on_step)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except model_mod.StateError as exc:
        raise CliError(EXIT_INPUT, str(exc)) from None
    offset = rows[-1][2] if rows else 0.0
    rows += [(s, l, w + offset) for s, l, w in res.history]
    try:
        save_model(res.params, out)
        _write_loss_csv(loss_csv, rows)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write model: {exc}") from None
    config = cfg.as_dict() | {"data": str(args.data), "resume": str(args.resume) if args.resume else None}
    write_manifest(out, "train", config, cfg.seed, started,
                   {"model": out, "loss_csv": loss_csv, "checkpoints": ckpt_dir})
    print(f"wrote {out} after {res.state.t} steps")
    return EXIT_OK


def cmd_upscale(args) -> int:
    started = _now()
    params = _load_model_or_fail(args.model)
    try:
        img = read_png(args.inp)
    except (ImageError, FileNotFoundError) as exc:
        raise CliError(EXIT_INPUT, str(exc)) from None
    h, w = img.shape[:2]
    if max(h, w) * args.scale > MAX_OUTPUT_SIDE:
        raise CliError(EXIT_IO, f"output {h * args.scale}x{w * args.scale} exceeds {MAX_OUTPUT_SIDE} pixels per side")
    try:
        sr = pipeline.upscale_image(params, img.astype(np.float64), args.scale)
    except MemoryError:
        raise CliError(EXIT_IO, "out of memory while upscaling") from None
    try:
        write_png(args.out, sr)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {args.out}: {exc}") from None
    config = {"model": str(args.model), "in": str(args.inp), "scale": args.scale,
              "model_fingerprint": f"{params.fingerprint:08x}"}
    write_manifest(args.out, "upscale", config, None, started, {"image": args.out})
    return EXIT_OK


def cmd_evaluate(args) -> int:
    started = _now()
    if args.method == "model":
        if not args.model:
            raise CliError(EXIT_INPUT, "--method model requires --model")
        params = _load_model_or_fail(args.model)
        upscaler, model_id = pipeline.model_upscaler(params), f"{Path(args.model).name}:{params.fingerprint:08x}"
    else:
        upscaler, model_id = metrics.bicubic_upscaler, "bicubic"
    if not list_images(args.hr_dir):
        raise CliError(EXIT_INPUT, f"no images found in {args.hr_dir}")
    try:
        report = metrics.evaluate_set(args.hr_dir, upscaler, args.scale, None, model_id)
    except ValueError as exc:
        raise CliError(EXIT_INPUT, str(exc)) from None
    if args.report:
        try:
            report.write(args.report)
        except OSError as exc:
            raise CliError(EXIT_IO, f"cannot write {args.report}: {exc}") from None
        config = {"hr_dir": str(args.hr_dir), "method": args.method, "model": args.model, "scale": args.scale}
        write_manifest(args.report, "evaluate", config, None, started, {"report": args.report})
    print(report.summary())
    return EXIT_OK


def cmd_inspect(args) -> int:
    try:
        data = Path(args.model).read_bytes()
    except OSError as exc:
        raise CliError(EXIT_INPUT, f"cannot read {args.model}: {exc}") from None
    try:
        params = model_mod.parse_model(data)
    except FormatError as exc:
        raise CliError(EXIT_INPUT, str(exc)) from None
    print(model_mod.describe(params))
    print(f"crc: ok ({zlib.crc32(data[:-4]):08x})")
    return EXIT_OK


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lpcn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    d = TrainConfig()
    pr = sub.add_parser("prepare", help="cut HR images into training patch pairs")
    pr.add_argument("--hr-dir", required=True, type=Path)
    pr.add_argument("--out", required=True, type=Path)
    pr.add_argument("--scale", type=int, default=d.scale)
    pr.add_argument("--patch", type=int, default=d.patch)
    pr.add_argument("--stride", type=int, default=d.stride)
    pr.set_defaults(func=cmd_prepare)

    tr = sub.add_parser("train", help="train a model on a patch archive")
    tr.add_argument("--data", required=True, type=Path)
    tr.add_argument("--out-model", required=True, type=Path)
    tr.add_argument("--mode", choices=sorted(MODES), default="lpcn-plus")
    tr.add_argument("--steps", type=int, default=d.steps)
    tr.add_argument("--seed", type=int, default=d.seed)
    tr.add_argument("--resume", type=Path, help="checkpoint .lpco (or .lpcn) to continue from")
    tr.add_argument("--batch", type=int, default=d.batch)
    tr.add_argument("--lr", type=float, default=d.lr)
    tr.add_argument("--beta1", type=float, default=d.beta1)
    tr.add_argument("--beta2", type=float, default=d.beta2)
    tr.add_argument("--epsilon", type=float, default=d.epsilon)
    tr.add_argument("--stride", type=int, default=d.stride, help=argparse.SUPPRESS)
    tr.add_argument("--checkpoint-every", type=int, default=1000)
    tr.add_argument("--checkpoint-dir", type=Path)
    tr.add_argument("--log-every", type=int, default=100)
    tr.set_defaults(func=cmd_train)

    up = sub.add_parser("upscale", help="super-resolve one PNG")
    up.add_argument("--model", required=True, type=Path)
    up.add_argument("--in", dest="inp", required=True, type=Path)
    up.add_argument("--out", required=True, type=Path)
    up.add_argument("--scale", type=int, default=4)
    up.set_defaults(func=cmd_upscale)

    ev = sub.add_parser("evaluate", help="PSNR/SSIM over a directory of HR images")
    ev.add_argument("--hr-dir", required=True, type=Path)
    ev.add_argument("--method", choices=["bicubic", "model"], default="bicubic")
    ev.add_argument("--model", type=Path)
    ev.add_argument("--scale", type=int, default=4)
    ev.add_argument("--report", type=Path)
    ev.set_defaults(func=cmd_evaluate)

    ins = sub.add_parser("inspect", help="describe a model file")
    ins.add_argument("--model", required=True, type=Path)
    ins.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
