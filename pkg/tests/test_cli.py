import json
import math

import numpy as np
import pytest

from dncnn_pam import cli
from dncnn_pam import model as dn
from dncnn_pam.checkpoint import load_checkpoint, save_checkpoint
from dncnn_pam.container import load_dataset
from dncnn_pam.imageio import load_image, save_image
from dncnn_pam.metrics import read_records
from dncnn_pam.train import MANIFEST_NAME, RunManifest


def write_images(directory, count, size=(40, 48), seed=0, suffix=".png"):
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    imgs = {}
    for i in range(count):
        img = rng.integers(30, 220, size, dtype=np.uint8)
        save_image(img, directory / f"im{i}{suffix}")
        imgs[f"im{i}{suffix}"] = img
    return imgs


def run(*argv):
    return cli.main([str(a) for a in argv])


def listing(d):
    return sorted(p.name for p in d.rglob("*"))


# -- prepare-data ----------------------------------------------------------------


def test_prepare_data_counts(tmp_path, capsys):
    write_images(tmp_path / "in", 3)
    assert run("prepare-data", tmp_path / "in", "--out", tmp_path / "d.pad", "--size", 64, "--stride", 64) == 0
    out = capsys.readouterr().out
    assert "3 images in" in out and "12 augmented images" in out
    ds = load_dataset(tmp_path / "d.pad")
    # 256x256 working size, 64-pixel tiles: 16 per rotation
    assert ds.count == 3 * 4 * 16 and ds.patch_shape == (64, 64)
    assert ds.manifest[0] == ("im0.png", "r0") and ds.manifest[16] == ("im0.png", "r90")


def test_prepare_one_image_full_size(tmp_path):
    write_images(tmp_path / "in", 1, size=(256, 256))
    assert run("prepare-data", tmp_path / "in", "--out", tmp_path / "d.pad", "--size", 256) == 0
    ds = load_dataset(tmp_path / "d.pad")
    assert ds.count == 4
    src = load_image(tmp_path / "in" / "im0.png")
    np.testing.assert_array_equal(ds.patches[0], src)
    np.testing.assert_array_equal(ds.patches[1], np.rot90(src))


def test_prepare_deterministic(tmp_path):
    write_images(tmp_path / "in", 2)
    for name in ("a.pad", "b.pad"):
        assert run("prepare-data", tmp_path / "in", "--out", tmp_path / name, "--size", 64, "--stride", 96) == 0
    assert (tmp_path / "a.pad").read_bytes() == (tmp_path / "b.pad").read_bytes()


def test_prepare_errors(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert run("prepare-data", tmp_path / "empty", "--out", tmp_path / "d.pad") == 2
    write_images(tmp_path / "in", 1)
    (tmp_path / "in" / "broken.png").write_bytes(b"\x89PNG\r\n\x1a\nnope")
    assert run("prepare-data", tmp_path / "in", "--out", tmp_path / "d.pad") == 2
    assert "broken.png" in capsys.readouterr().err
    assert not (tmp_path / "d.pad").exists()


# -- train -----------------------------------------------------------------------


@pytest.fixture
def small_container(tmp_path):
    write_images(tmp_path / "in", 2)
    run("prepare-data", tmp_path / "in", "--out", tmp_path / "d.pad", "--size", 32, "--stride", 224)
    return tmp_path / "d.pad"


def train_args(container, out, *extra):
    return ["train", container, "--out", out, "--depth", 3, "--width", 4, "--batch-size", 8, *extra]


@pytest.mark.parametrize("epochs,interval,expected", [(4, 2, [2, 4]), (5, 2, [2, 4, 5]), (3, 5, [3]), (1, 1, [1])])
def test_train_checkpoint_policy(small_container, tmp_path, epochs, interval, expected):
    out = tmp_path / f"run{epochs}{interval}"
    assert run(*train_args(small_container, out, "--epochs", epochs, "--checkpoint-interval", interval)) == 0
    names = sorted(p.name for p in out.glob("*.dnc"))
    assert names == [f"dncnn_epoch{e:03d}.dnc" for e in expected]
    expected_count = epochs // interval if epochs % interval == 0 else epochs // interval + 1
    assert len(names) == expected_count
    manifest = RunManifest.from_json((out / MANIFEST_NAME).read_text())
    assert len(manifest.epoch_losses) == len(manifest.epoch_seconds) == epochs
    assert manifest.checkpoints == names
    assert load_checkpoint(out / names[-1]).epoch == expected[-1]


def test_train_reproducible(small_container, tmp_path):
    for name in ("a", "b"):
        assert run(*train_args(small_container, tmp_path / name, "--epochs", 2, "--checkpoint-interval", 1)) == 0
    for e in (1, 2):
        f = f"dncnn_epoch{e:03d}.dnc"
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    la = RunManifest.from_json((tmp_path / "a" / MANIFEST_NAME).read_text()).epoch_losses
    lb = RunManifest.from_json((tmp_path / "b" / MANIFEST_NAME).read_text()).epoch_losses
    assert la == lb


def test_train_config_file_and_flag_precedence(small_container, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"# comment\ndataset = {small_container}\nepochs = 3\ncheckpoint_interval = 3\nseed = 4\ndepth = 3\nwidth = 4\n")
    out = tmp_path / "r"
    assert run("train", "--config", cfg, "--out", out, "--epochs", 1) == 0
    manifest = json.loads((out / MANIFEST_NAME).read_text())
    assert manifest["config"]["epochs"] == 1 and manifest["config"]["seed"] == 4
    assert manifest["checkpoints"] == ["dncnn_epoch001.dnc"]


def test_train_usage_errors(small_container, tmp_path):
    assert run("train", small_container, "--epochs", 0, "--out", tmp_path / "x") == 1
    assert run("train", "--out", tmp_path / "x") == 1
    bad = tmp_path / "bad.cfg"
    bad.write_text("colour = blue\n")
    assert run("train", small_container, "--config", bad) == 1
    with pytest.raises(SystemExit) as exc:
        run("train", small_container, "--epochs", "ten")
    assert exc.value.code == 1


def test_train_rejects_corrupt_container(small_container, tmp_path):
    data = bytearray(small_container.read_bytes())
    data[30] ^= 0xFF
    small_container.write_bytes(bytes(data))
    out = tmp_path / "never"
    assert run(*train_args(small_container, out)) == 2
    assert not out.exists()


# -- add-noise / denoise / evaluate ------------------------------------------------


def test_add_noise_sigma_zero_copies(tmp_path):
    write_images(tmp_path / "clean", 2)
    assert run("add-noise", tmp_path / "clean", "--sigma", 0, "--out", tmp_path / "n") == 0
    for name in ("im0.png", "im1.png"):
        np.testing.assert_array_equal(load_image(tmp_path / "n" / name), load_image(tmp_path / "clean" / name))


def test_add_noise_seeds(tmp_path):
    flat = tmp_path / "clean"
    flat.mkdir()
    save_image(np.full((128, 128), 120, np.uint8), flat / "g.pgm")
    for seed in (1, 2):
        assert run("add-noise", flat, "--sigma", 25, "--seed", seed, "--out", tmp_path / f"s{seed}") == 0
    a, b = load_image(tmp_path / "s1" / "g.pgm"), load_image(tmp_path / "s2" / "g.pgm")
    assert not np.array_equal(a, b)
    from dncnn_pam.metrics import psnr

    clean = load_image(flat / "g.pgm")
    assert abs(psnr(a, clean) - psnr(b, clean)) < 0.3
    assert psnr(a, clean) == pytest.approx(20 * math.log10(255 / 25), abs=0.3)


def zero_checkpoint(path, depth=3, width=4):
    m = dn.build_dncnn(depth, width)
    for lay in m.layers:
        lay.conv.weight[...] = 0
    save_checkpoint(path, m, 1)


def test_denoise_zero_checkpoint_is_identity(tmp_path, capsys):
    imgs = write_images(tmp_path / "in", 2)
    zero_checkpoint(tmp_path / "z.dnc")
    assert run("denoise", tmp_path / "z.dnc", tmp_path / "in", "--out", tmp_path / "out") == 0
    for name, img in imgs.items():
        np.testing.assert_array_equal(load_image(tmp_path / "out" / name), img)
    timings = read_records((tmp_path / "out" / cli.TIMINGS_NAME).read_text())
    assert [r["filename"] for r in timings] == sorted(imgs)
    assert all(float(r["elapsed_seconds"]) >= 0 for r in timings)
    assert "denoised in" in capsys.readouterr().out


def test_denoise_single_file_keeps_size(tmp_path):
    save_image(np.random.default_rng(0).integers(0, 256, (256, 256), dtype=np.uint8), tmp_path / "one.png")
    zero_checkpoint(tmp_path / "z.dnc")
    assert run("denoise", tmp_path / "z.dnc", tmp_path / "one.png", "--out", tmp_path / "o") == 0
    assert load_image(tmp_path / "o" / "one.png").shape == (256, 256)


def test_denoise_bad_checkpoints(tmp_path):
    write_images(tmp_path / "in", 1)
    zero_checkpoint(tmp_path / "z.dnc")
    assert run("denoise", tmp_path / "z.dnc", tmp_path / "in", "--out", tmp_path / "o1", "--depth", 20) == 2
    data = bytearray((tmp_path / "z.dnc").read_bytes())
    data[40] ^= 1
    (tmp_path / "crc.dnc").write_bytes(bytes(data))
    assert run("denoise", tmp_path / "crc.dnc", tmp_path / "in", "--out", tmp_path / "o2") == 2
    data[0:4] = b"XXXX"
    (tmp_path / "magic.dnc").write_bytes(bytes(data))
    assert run("denoise", tmp_path / "magic.dnc", tmp_path / "in", "--out", tmp_path / "o3") == 2
    for d in ("o1", "o2", "o3"):
        assert not (tmp_path / d).exists()


def test_evaluate_offset_and_identity(tmp_path, capsys):
    clean = np.full((32, 32), 100, np.uint8)
    for d, img in (("c", clean), ("n", clean + np.uint8(16)), ("d", clean)):
        (tmp_path / d).mkdir()
        save_image(img, tmp_path / d / "x.png")
    assert run("evaluate", tmp_path / "c", tmp_path / "n", tmp_path / "d", "--out", tmp_path / "rec.csv") == 0
    (rec,) = read_records((tmp_path / "rec.csv").read_text())
    assert rec["psnr_noisy"] == "24.0484" and rec["psnr_denoised"] == "inf" and rec["elapsed_seconds"] == ""
    last = capsys.readouterr().out.strip().splitlines()[-1]
    assert last.startswith("mean") and "inf" in last


def test_evaluate_with_timings(tmp_path):
    imgs = write_images(tmp_path / "c", 1)
    write_images(tmp_path / "n", 1, seed=5)
    zero_checkpoint(tmp_path / "z.dnc")
    run("denoise", tmp_path / "z.dnc", tmp_path / "n", "--out", tmp_path / "d")
    assert run("evaluate", tmp_path / "c", tmp_path / "n", tmp_path / "d", "--out", tmp_path / "r.csv",
               "--timings", tmp_path / "d" / cli.TIMINGS_NAME) == 0  # fmt: skip
    (rec,) = read_records((tmp_path / "r.csv").read_text())
    assert rec["filename"] in imgs and float(rec["elapsed_seconds"]) >= 0


def test_evaluate_unpaired(tmp_path, capsys):
    write_images(tmp_path / "c", 2)
    write_images(tmp_path / "n", 1)
    write_images(tmp_path / "d", 2)
    assert run("evaluate", tmp_path / "c", tmp_path / "n", tmp_path / "d") == 2
    assert "im1.png" in capsys.readouterr().err


# -- colormap / gradcheck / usage ------------------------------------------------


def test_colormap(tmp_path):
    save_image(np.array([[0, 255]], np.uint8), tmp_path / "g.pgm")
    assert run("colormap", tmp_path / "g.pgm", "--out", tmp_path / "h.ppm") == 0
    data = (tmp_path / "h.ppm").read_bytes()
    assert data.endswith(bytes([0, 0, 0, 255, 255, 255]))


def test_gradcheck_default_passes(capsys):
    assert run("gradcheck") == 0
    first = capsys.readouterr().out
    assert "PASS" in first
    assert run("gradcheck") == 0
    assert capsys.readouterr().out == first


def test_gradcheck_impossible_tolerance():
    assert run("gradcheck", "--tolerance", 1e-12) == 3


def test_usage_errors():
    with pytest.raises(SystemExit) as exc:
        run("no-such-command")
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        run("denoise")
    assert exc.value.code == 1


def test_module_entry_point():
    import subprocess
    import sys

    r = subprocess.run([sys.executable, "-m", "dncnn_pam", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and "0.1.0" in r.stdout
