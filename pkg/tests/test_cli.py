import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from lpcn.cli import main
from lpcn.imageio import read_png, write_png
from lpcn.model import ArchSpec, Mode, build_model, save_model


def smooth_image(h, w, seed=0, rgb=False):
    rng = np.random.default_rng(seed)
    x, y = np.meshgrid(np.linspace(0, 4, h), np.linspace(0, 3, w), indexing="ij")
    img = 120 + 70 * np.sin(1.3 * x + 0.4) * np.cos(1.9 * y) + rng.normal(0, 4, (h, w))
    if rgb:
        img = np.stack([img, img[::-1] * 0.8 + 20, 255 - img], axis=-1)
    return np.clip(img, 0, 255).astype(np.uint8)


@pytest.fixture
def hr_dir(tmp_path):
    d = tmp_path / "hr"
    d.mkdir()
    write_png(d / "a.png", smooth_image(32, 80, 0))
    write_png(d / "b.png", smooth_image(40, 36, 1, rgb=True))
    return d


@pytest.fixture
def tiny_model(tmp_path):
    path = tmp_path / "tiny.lpcn"
    save_model(build_model(ArchSpec.reduced(Mode.LPCN_SR_PLUS, filters=2, strides=(1, 2)), 0), path)
    return path


def test_prepare_writes_archive_and_manifest(hr_dir, tmp_path, capsys):
    out = tmp_path / "p.lpcd"
    assert main(["prepare", "--hr-dir", str(hr_dir), "--out", str(out), "--patch", "16", "--stride", "16"]) == 0
    # 32x80 -> 2x5 tiles, 40x36 -> mod-crop 40x36 -> 2x2 tiles
    assert "14 patch pairs" in capsys.readouterr().out
    manifest = json.loads(out.with_name("p.lpcd.manifest.json").read_text())
    assert manifest["command"] == "prepare" and manifest["config"]["patch"] == 16


def test_prepare_skips_corrupt_png(hr_dir, tmp_path):
    (hr_dir / "broken.png").write_bytes(b"\x89PNG not really")
    proc = subprocess.run([sys.executable, "-m", "lpcn", "prepare", "--hr-dir", str(hr_dir),
                           "--out", str(tmp_path / "p.lpcd"), "--patch", "16", "--stride", "16"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0
    assert "broken.png" in proc.stderr and "14 patch pairs" in proc.stdout


def test_prepare_errors(tmp_path, hr_dir, capsys):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["prepare", "--hr-dir", str(empty), "--out", str(tmp_path / "x.lpcd")]) == 2
    assert "no images found" in capsys.readouterr().err
    code = main(["prepare", "--hr-dir", str(hr_dir), "--out", str(tmp_path / "missing" / "x.lpcd"),
                 "--patch", "16", "--stride", "16"])
    assert code == 3


def prepare(hr_dir, tmp_path):
    out = tmp_path / "p.lpcd"
    main(["prepare", "--hr-dir", str(hr_dir), "--out", str(out), "--patch", "16", "--stride", "16"])
    return out


def test_train_bookkeeping(hr_dir, tmp_path, capsys):
    data = prepare(hr_dir, tmp_path)
    model = tmp_path / "m.lpcn"
    code = main(["train", "--data", str(data), "--out-model", str(model), "--mode", "lpcn",
                 "--steps", "50", "--batch", "2", "--log-every", "25"])
    assert code == 0
    assert "step 50 loss" in capsys.readouterr().out
    with open(tmp_path / "m.lpcn.loss.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 50 and rows[-1]["step"] == "50"
    assert json.loads((tmp_path / "m.lpcn.manifest.json").read_text())["config"]["mode"] == "LPCN_SR"


def test_train_resume_matches_uninterrupted(hr_dir, tmp_path):
    data = prepare(hr_dir, tmp_path)
    common = ["--data", str(data), "--mode", "lpcn", "--batch", "2", "--seed", "3", "--checkpoint-every", "4"]
    assert main(["train", *common, "--steps", "8", "--out-model", str(tmp_path / "full.lpcn")]) == 0
    ckpt = tmp_path / "full.lpcn.ckpt" / "checkpoint-00000004.lpco"
    assert main(["train", *common, "--steps", "8", "--out-model", str(tmp_path / "resumed.lpcn"),
                 "--resume", str(ckpt)]) == 0
    assert (tmp_path / "full.lpcn").read_bytes() == (tmp_path / "resumed.lpcn").read_bytes()


@pytest.mark.slow
def test_train_single_pair_overfits(tmp_path):
    from skimage import data as skdata
    d = tmp_path / "one"
    d.mkdir()
    write_png(d / "cam.png", skdata.camera()[200:296, 200:296])
    data = tmp_path / "one.lpcd"
    assert main(["prepare", "--hr-dir", str(d), "--out", str(data)]) == 0
    model = tmp_path / "m.lpcn"
    assert main(["train", "--data", str(data), "--out-model", str(model), "--mode", "lpcn",
                 "--steps", "2000", "--batch", "1", "--log-every", "500"]) == 0
    with open(tmp_path / "m.lpcn.loss.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2000 and float(rows[-1]["loss"]) < 1e-4


def test_train_bad_archive(tmp_path, capsys):
    bad = tmp_path / "bad.lpcd"
    bad.write_bytes(b"LPCD" + b"\0" * 30)
    assert main(["train", "--data", str(bad), "--out-model", str(tmp_path / "m.lpcn")]) == 2
    assert main(["train", "--data", str(tmp_path / "nope.lpcd"), "--out-model", str(tmp_path / "m.lpcn")]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_exit_code(hr_dir, tmp_path, capsys):
    data = prepare(hr_dir, tmp_path)
    code = main(["train", "--data", str(data), "--out-model", str(tmp_path / "m.lpcn"), "--mode", "lpcn",
                 "--steps", "20", "--batch", "2", "--lr", "1e30", "--checkpoint-every", "1"])
    assert code == 4
    assert "non-finite" in capsys.readouterr().err
    assert any((tmp_path / "m.lpcn.ckpt").glob("*.lpco"))


def test_upscale_grey_and_rgb(tiny_model, tmp_path):
    write_png(tmp_path / "g.png", smooth_image(10, 12))
    write_png(tmp_path / "c.png", smooth_image(9, 11, rgb=True))
    assert main(["upscale", "--model", str(tiny_model), "--in", str(tmp_path / "g.png"),
                 "--out", str(tmp_path / "g4.png")]) == 0
    assert main(["upscale", "--model", str(tiny_model), "--in", str(tmp_path / "c.png"),
                 "--out", str(tmp_path / "c4.png"), "--scale", "2"]) == 0
    assert read_png(tmp_path / "g4.png").shape == (40, 48)
    assert read_png(tmp_path / "c4.png").shape == (18, 22, 3)
    assert (tmp_path / "c4.png.manifest.json").exists()


def test_upscale_single_pixel(tiny_model, tmp_path):
    write_png(tmp_path / "p.png", np.array([[77]], np.uint8))
    assert main(["upscale", "--model", str(tiny_model), "--in", str(tmp_path / "p.png"),
                 "--out", str(tmp_path / "p4.png")]) == 0
    assert read_png(tmp_path / "p4.png").shape == (4, 4)


def test_upscale_is_deterministic(tiny_model, tmp_path):
    write_png(tmp_path / "c.png", smooth_image(9, 11, rgb=True))
    for name in ("a.png", "b.png"):
        main(["upscale", "--model", str(tiny_model), "--in", str(tmp_path / "c.png"), "--out", str(tmp_path / name)])
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()


def test_upscale_errors(tiny_model, tmp_path, capsys):
    write_png(tmp_path / "g.png", smooth_image(10, 12))
    junk = tmp_path / "junk.lpcn"
    junk.write_bytes(b"XXXX" + bytes(20))
    assert main(["upscale", "--model", str(junk), "--in", str(tmp_path / "g.png"), "--out", str(tmp_path / "o.png")]) == 2
    assert "magic" in capsys.readouterr().err
    write_png(tmp_path / "wide.png", np.zeros((2, 5000), np.uint8))
    assert main(["upscale", "--model", str(tiny_model), "--in", str(tmp_path / "wide.png"),
                 "--out", str(tmp_path / "o.png")]) == 3


def test_evaluate_bicubic_and_report(hr_dir, tmp_path, capsys):
    report = tmp_path / "r.csv"
    assert main(["evaluate", "--hr-dir", str(hr_dir), "--report", str(report)]) == 0
    line = capsys.readouterr().out.strip().splitlines()[-1]
    assert line.startswith("PSNR=") and line.endswith("N=2")
    assert report.read_text().startswith("name,psnr_db,ssim,seconds")
    assert (tmp_path / "r.csv.manifest.json").exists()


def test_evaluate_model(hr_dir, tiny_model, capsys):
    assert main(["evaluate", "--hr-dir", str(hr_dir), "--method", "model", "--model", str(tiny_model)]) == 0
    assert "N=2" in capsys.readouterr().out


def test_evaluate_errors(tmp_path, hr_dir, capsys):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["evaluate", "--hr-dir", str(empty)]) == 2
    assert "no images found" in capsys.readouterr().err
    assert main(["evaluate", "--hr-dir", str(hr_dir), "--method", "model"]) == 2
    assert main(["evaluate", "--hr-dir", str(hr_dir), "--method", "model", "--model", str(tmp_path / "x")]) == 2


def test_inspect(tiny_model, tmp_path, capsys):
    assert main(["inspect", "--model", str(tiny_model)]) == 0
    out = capsys.readouterr().out
    assert "LPCN_SR_PLUS" in out and "crc: ok" in out and "total" in out
    data = bytearray(tiny_model.read_bytes())
    data[-1] ^= 0x55
    bad = tmp_path / "bad.lpcn"
    bad.write_bytes(bytes(data))
    assert main(["inspect", "--model", str(bad)]) == 2
    assert "checksum mismatch" in capsys.readouterr().err


def test_module_entry_point(tiny_model):
    proc = subprocess.run([sys.executable, "-m", "lpcn", "inspect", "--model", str(tiny_model)],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0 and "crc: ok" in proc.stdout
