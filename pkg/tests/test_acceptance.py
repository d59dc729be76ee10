"""End-to-end acceptance checks, one test per criterion.

Each test appends an ``ACCEPTANCE n: PASS|FAIL - detail`` line that the
terminal summary prints after the run. The training criteria share one
desk-scale corpus of synthetic vessel phantoms and one run per seed, all
driven through the command line.
"""

import math
import time

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES
from phantoms import phantom_set
from test_tensor_core import bn_params, fd_grad, rand_conv, rel_err

from dncnn_pam import cli, datapipe, metrics, optim
from dncnn_pam import model as dn
from dncnn_pam import tensor_core as tc
from dncnn_pam.checkpoint import encode_checkpoint, load_checkpoint, save_checkpoint
from dncnn_pam.container import encode_dataset, load_dataset
from dncnn_pam.imageio import load_image, save_image
from dncnn_pam.tensor_core import BatchNormParams, Mode
from dncnn_pam.train import MANIFEST_NAME, RunManifest

SIGMA = 25
TRAIN_IMAGES, HELD_OUT = 32, 4
PATCH, STRIDE = 40, 72
DEPTH, WIDTH, EPOCHS, INTERVAL = 8, 32, 10, 5
SEEDS = range(5)


def report(n, ok, detail):
    line = f"ACCEPTANCE {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def run(*argv):
    return cli.main([str(a) for a in argv])


# -- shared desk-scale corpus ----------------------------------------------------


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    for i, img in enumerate(phantom_set(TRAIN_IMAGES, first_seed=0)):
        save_image(img, root / "train" / f"p{i:02d}.png")
    for i, img in enumerate(phantom_set(HELD_OUT, first_seed=1000)):
        save_image(datapipe.resize_bilinear(img), root / "clean" / f"h{i}.png")
    assert run("prepare-data", root / "train", "--out", root / "train.pad", "--size", PATCH, "--stride", STRIDE) == 0
    assert run("add-noise", root / "clean", "--sigma", SIGMA, "--seed", 77, "--out", root / "noisy") == 0
    return root


class Runs:
    """Trains lazily, once per seed, and scores checkpoints on the held-out set."""

    def __init__(self, corpus):
        self.corpus = corpus
        self.done = {}

    def train(self, seed):
        if seed not in self.done:
            out = self.corpus / f"run{seed}"
            t0 = time.perf_counter()
            code = run(
                "train", self.corpus / "train.pad", "--out", out, "--epochs", EPOCHS,
                "--checkpoint-interval", INTERVAL, "--sigma", SIGMA, "--seed", seed,
                "--depth", DEPTH, "--width", WIDTH,
            )  # fmt: skip
            assert code == 0
            self.done[seed] = (out, time.perf_counter() - t0)
        return self.done[seed]

    def score(self, seed, epoch):
        out, _ = self.train(seed)
        ckpt = out / f"dncnn_epoch{epoch:03d}.dnc"
        den = out / f"den{epoch:03d}"
        assert run("denoise", ckpt, self.corpus / "noisy", "--out", den) == 0
        csv = out / f"records{epoch:03d}.csv"
        assert run("evaluate", self.corpus / "clean", self.corpus / "noisy", den, "--out", csv) == 0
        recs = metrics.read_records(csv.read_text())
        return {k: float(np.mean([float(r[k]) for r in recs])) for k in metrics.RECORD_FIELDS[1:5]}


@pytest.fixture(scope="module")
def runs(corpus):
    return Runs(corpus)


# -- 1 gradients -----------------------------------------------------------------


def kernel_errors(seeds=range(5)):
    worst = {"conv": 0.0, "relu": 0.0, "bn": 0.0}
    for seed in seeds:
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((2, 3, 5, 5))
        p = rand_conv(rng, 4, 3)
        g = rng.standard_normal((2, 4, 5, 5))
        conv = lambda: float(np.sum(g * tc.conv2d_forward(x, p)))  # noqa: E731
        gx, gw, gb = tc.conv2d_backward(x, p, g)
        worst["conv"] = max(worst["conv"], rel_err(gx, fd_grad(conv, x)), rel_err(gw, fd_grad(conv, p.weight)), rel_err(gb, fd_grad(conv, p.bias)))

        r = rng.standard_normal((2, 3, 4, 4))
        r[np.abs(r) < 1e-2] = 0.5
        gr = rng.standard_normal(r.shape)
        num = fd_grad(lambda: float(np.sum(gr * tc.relu_forward(r))), r)
        worst["relu"] = max(worst["relu"], rel_err(tc.relu_backward(r, gr), num))

        bp = bn_params(rng, 3)
        gbn = rng.standard_normal(x.shape)

        def bn():
            q = BatchNormParams(bp.gamma, bp.beta, bp.running_mean.copy(), bp.running_var.copy())
            return float(np.sum(gbn * tc.batchnorm_forward(x, q, Mode.TRAIN)[0]))

        q = BatchNormParams(bp.gamma, bp.beta, bp.running_mean.copy(), bp.running_var.copy())
        _, cache = tc.batchnorm_forward(x, q, Mode.TRAIN)
        bx, bg, bb = tc.batchnorm_backward(cache, bp, gbn)
        num_x = fd_grad(bn, x)
        worst["bn"] = max(
            worst["bn"],
            np.max(np.abs(bx - num_x)) / np.max(np.abs(num_x)),
            rel_err(bg, fd_grad(bn, bp.gamma)),
            rel_err(bb, fd_grad(bn, bp.beta)),
        )
    return worst


def test_criterion_1_gradient_check(capsys):
    t0 = time.perf_counter()
    code = run("gradcheck", "--depth", 4, "--width", 4)
    text = capsys.readouterr().out
    model = dn.build_dncnn(4, 4, 1, 0)
    rep = optim.grad_check(model, np.random.default_rng(0).random((2, 1, 8, 8)), 1e-3, seed=0)
    kernels = kernel_errors()
    elapsed = time.perf_counter() - t0
    ok = code == 0 and "PASS" in text and rep.max_error < 1e-3 and max(kernels.values()) < 1e-4 and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in kernels.items())
    report(1, ok, f"model max rel err {rep.max_error:.2e} (< 1e-3), kernels {detail} (< 1e-4), {elapsed:.1f}s (< 60s)")


# -- 2 noise ---------------------------------------------------------------------


def test_criterion_2_noise_psnr(corpus):
    expected = 20 * math.log10(255 / SIGMA)
    psnrs = []
    for f in sorted((corpus / "clean").iterdir()):
        psnrs.append(metrics.psnr(load_image(corpus / "noisy" / f.name), load_image(f)))
    for seed in range(3):
        mid = np.full((256, 256), 128, np.uint8)
        psnrs.append(metrics.psnr(datapipe.add_noise(mid, datapipe.NoiseSpec(SIGMA, seed)), mid))
    ok = all(abs(p - 20.17) <= 0.3 for p in psnrs)
    report(2, ok, f"closed form {expected:.3f} dB; measured {min(psnrs):.3f}..{max(psnrs):.3f} dB (20.17 +- 0.3)")


# -- 3, 4, 6 on the seed-0 run -----------------------------------------------------


def test_criterion_3_training_gain(runs):
    _, secs = runs.train(0)
    s = runs.score(0, EPOCHS)
    gain = s["psnr_denoised"] - s["psnr_noisy"]
    ok = gain >= 3 and s["ssim_denoised"] > s["ssim_noisy"] and secs < 30 * 60
    report(
        3,
        ok,
        f"PSNR {s['psnr_noisy']:.2f} -> {s['psnr_denoised']:.2f} dB (gain {gain:.2f} >= 3), "
        f"SSIM {s['ssim_noisy']:.4f} -> {s['ssim_denoised']:.4f}, train {secs / 60:.1f} min (< 30)",
    )


def test_criterion_4_beats_median_filter(runs, corpus):
    s = runs.score(0, EPOCHS)
    med = [
        metrics.psnr(metrics.median_filter(load_image(corpus / "noisy" / f.name), 3), load_image(f))
        for f in sorted((corpus / "clean").iterdir())
    ]
    ok = s["psnr_denoised"] > np.mean(med)
    report(4, ok, f"model {s['psnr_denoised']:.2f} dB > 3x3 median {np.mean(med):.2f} dB")


def test_criterion_6_loss_trajectory(runs):
    out, _ = runs.train(0)
    m = RunManifest.from_json((out / MANIFEST_NAME).read_text())
    first, e1, e10 = m.first_batch_loss, m.epoch_losses[0], m.epoch_losses[-1]
    ok = len(m.epoch_losses) == EPOCHS and e1 < first and e10 <= 0.5 * e1
    report(6, ok, f"first batch {first:.2f} > epoch 1 {e1:.3f}; epoch 10 {e10:.3f} <= {0.5 * e1:.3f}")


# -- 5 checkpoint policy across seeds ----------------------------------------------


def test_criterion_5_checkpoint_policy(runs):
    names_ok, wins, parts = True, 0, []
    for seed in SEEDS:
        out, _ = runs.train(seed)
        names = sorted(p.name for p in out.glob("*.dnc"))
        names_ok &= names == ["dncnn_epoch005.dnc", "dncnn_epoch010.dnc"]
        p5, p10 = runs.score(seed, 5)["psnr_denoised"], runs.score(seed, 10)["psnr_denoised"]
        wins += p10 >= p5
        parts.append(f"{p5:.2f}->{p10:.2f}")
    ok = names_ok and wins >= 4
    report(5, ok, f"checkpoints at 5 and 10 only: {names_ok}; epoch 10 >= epoch 5 in {wins}/5 seeds ({', '.join(parts)})")


# -- 7 determinism -----------------------------------------------------------------


def pipeline(root, src):
    assert run("prepare-data", src, "--out", root / "ds.pad", "--size", 32, "--stride", 48, "--resize", 96) == 0
    assert run(
        "train", root / "ds.pad", "--out", root / "run", "--epochs", 2, "--checkpoint-interval", 1,
        "--depth", 4, "--width", 8, "--batch-size", 8, "--seed", 5,
    ) == 0  # fmt: skip
    assert run("add-noise", src, "--seed", 3, "--out", root / "noisy") == 0
    assert run("denoise", root / "run" / "dncnn_epoch002.dnc", root / "noisy", "--out", root / "den") == 0
    assert run("evaluate", src, root / "noisy", root / "den", "--out", root / "records.csv") == 0
    files = [root / "ds.pad", root / "records.csv", *sorted((root / "run").glob("*.dnc"))]
    files += sorted((root / "den").glob("*.png"))
    return {f.relative_to(root): f.read_bytes() for f in files}


def test_criterion_7_determinism(tmp_path):
    for i, img in enumerate(phantom_set(4, first_seed=500, size=96)):
        save_image(img, tmp_path / "src" / f"d{i}.png")
    a, b = pipeline(tmp_path / "a", tmp_path / "src"), pipeline(tmp_path / "b", tmp_path / "src")
    same = [k for k in a if a[k] == b.get(k)]
    ok = a.keys() == b.keys() and len(same) == len(a) and len(a) >= 4
    report(7, ok, f"{len(same)}/{len(a)} artifacts byte-identical (container, checkpoints, records, outputs)")


# -- 8 latency ---------------------------------------------------------------------


def test_criterion_8_latency():
    model = dn.build_dncnn(20, 64, seed=0)
    img = phantom_set(1, first_seed=9, size=256)[0]
    times = []
    for _ in range(3):
        t0 = time.perf_counter()
        out = dn.denoise_image(model, img)
        times.append(time.perf_counter() - t0)
    ok = out.shape == (256, 256) and max(times) < 2.34
    report(8, ok, f"depth 20 width 64 on 256x256: {', '.join(f'{t:.2f}s' for t in times)} (each < 2.34s)")


# -- 9 formats ---------------------------------------------------------------------


def corrupt(data, kind):
    data = bytearray(data)
    if kind == "magic":
        data[0] ^= 0xFF
    else:
        data[-1] ^= 0x01  # stored CRC
    return bytes(data)


def test_criterion_9_format_robustness(tmp_path):
    rng = np.random.default_rng(0)
    for i in range(2):
        save_image(rng.integers(0, 256, (48, 48), dtype=np.uint8), tmp_path / "imgs" / f"i{i}.png")
    assert run("prepare-data", tmp_path / "imgs", "--out", tmp_path / "ds.pad", "--size", 32, "--stride", 16, "--resize", 48) == 0
    model = dn.build_dncnn(3, 4, seed=1)
    save_checkpoint(tmp_path / "m.dnc", model, 7)
    cont, ckpt = (tmp_path / "ds.pad").read_bytes(), (tmp_path / "m.dnc").read_bytes()

    results = []
    for kind in ("magic", "crc"):
        bad = tmp_path / f"bad_{kind}.pad"
        bad.write_bytes(corrupt(cont, kind))
        out = tmp_path / f"train_{kind}"
        results.append(run("train", bad, "--out", out, "--epochs", 1) == 2 and not out.exists())
        bad = tmp_path / f"bad_{kind}.dnc"
        bad.write_bytes(corrupt(ckpt, kind))
        out = tmp_path / f"den_{kind}"
        results.append(run("denoise", bad, tmp_path / "imgs", "--out", out) == 2 and not out.exists())

    ds = load_dataset(tmp_path / "ds.pad")
    loaded = load_checkpoint(tmp_path / "m.dnc")
    round_trip = encode_dataset(ds) == cont and encode_checkpoint(loaded.model, loaded.epoch) == ckpt
    ok = all(results) and round_trip
    report(9, ok, f"{sum(results)}/4 corruptions rejected with exit 2 and no output; round-trips identical: {round_trip}")


# -- 10 metrics --------------------------------------------------------------------


def test_criterion_10_metric_cases():
    a = np.full((16, 16), 100, np.uint8)
    psnr16 = metrics.psnr(a, a + np.uint8(16))
    img = np.random.default_rng(4).integers(0, 256, (24, 24), dtype=np.uint8)
    salt = np.full((5, 5), 60, np.uint8)
    salt[2, 2] = 255
    checks = {
        "offset 16": round(psnr16, 2) == 24.05,
        "ssim(x,x)": metrics.ssim(img, img) == 1.0,
        "salt removed": bool(np.all(metrics.median_filter(salt, 3) == 60)),
    }
    report(10, all(checks.values()), f"PSNR offset 16 = {psnr16:.4f} dB; " + ", ".join(f"{k} {v}" for k, v in checks.items()))
