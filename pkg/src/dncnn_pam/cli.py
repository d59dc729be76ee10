"""Command-line entry point: ``dncnn-pam <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 check failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from dncnn_pam import __version__, datapipe, metrics, optim
from dncnn_pam import model as dn
from dncnn_pam.checkpoint import load_checkpoint
from dncnn_pam.colormap import apply_hot, save_rgb
from dncnn_pam.container import from_patches, pack_dataset
from dncnn_pam.errors import DataError, DncnnError
from dncnn_pam.fileio import atomic_write_text
from dncnn_pam.imageio import list_images, load_image, save_image
from dncnn_pam.train import TrainConfig, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3
TIMINGS_NAME = "timings.csv"

log = logging.getLogger("dncnn_pam")


class UsageError(DncnnError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _inputs(path: Path) -> list[Path]:
    if path.is_file():
        return [path]
    if not path.is_dir():
        raise DataError(f"{path}: no such file or directory")
    files = list_images(path)
    if not files:
        raise DataError(f"{path}: no .png/.pgm/.ppm images found")
    return files


def _load_all(files: list[Path]) -> list[np.ndarray]:
    images, bad = [], []
    for f in files:
        try:
            images.append(load_image(f))
        except DataError as exc:
            bad.append(str(exc))
    if bad:
        raise DataError("unreadable images:\n  " + "\n  ".join(bad))
    return images


# -- subcommands -----------------------------------------------------------------


def cmd_prepare_data(args) -> int:
    files = _inputs(Path(args.input_dir))
    images = _load_all(files)
    resized = [
        img if img.shape == (args.resize, args.resize) else datapipe.resize_bilinear(img, args.resize, args.resize)
        for img in images
    ]
    augmented = datapipe.augment_dataset(resized)
    patches, manifest = [], []
    for (img, tag), src in zip(augmented, [f.name for f in files for _ in datapipe.ROTATION_TAGS]):
        for p in datapipe.extract_patches(img, args.size, args.stride):
            patches.append(p)
            manifest.append((src, tag))
    pack_dataset(args.out, from_patches(patches, manifest, (args.size, args.size)))
    print(f"{len(images)} images in")
    print(f"{len(augmented)} augmented images")
    print(f"{len(patches)} patches of {args.size}x{args.size} (stride {args.stride}) -> {args.out}")
    return EXIT_OK


def _read_config_file(path: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def _train_config(args) -> TrainConfig:
    known = {f.name: f for f in fields(TrainConfig)}
    values: dict[str, object] = {}
    if args.config:
        for k, v in _read_config_file(args.config).items():
            if k not in known:
                raise UsageError(f"{args.config}: unknown key {k!r}")
            values[k] = v
    flag_map = {
        "dataset": args.dataset,
        "out_dir": args.out,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "sigma": args.sigma,
        "optimizer": args.optimizer,
        "lr": args.lr,
        "lr_decay_epoch": args.lr_decay_epoch,
        "max_grad_norm": args.max_grad_norm,
        "checkpoint_interval": args.checkpoint_interval,
        "seed": args.seed,
        "depth": args.depth,
        "width": args.width,
    }
    values.update({k: v for k, v in flag_map.items() if v is not None})
    if "dataset" not in values:
        raise UsageError("a dataset container is required (positional argument or dataset= in --config)")
    casts = {
        "epochs": int, "batch_size": int, "checkpoint_interval": int, "seed": int, "depth": int, "width": int,
        "lr_decay_epoch": int, "patch_size": int, "patch_stride": int,
        "sigma": float, "lr": float, "max_grad_norm": float,
    }  # fmt: skip
    try:
        for k, cast in casts.items():
            if isinstance(values.get(k), str):
                values[k] = cast(values[k])
        return TrainConfig(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad training configuration: {exc}") from exc


def cmd_train(args) -> int:
    cfg = _train_config(args)
    _, manifest = train(cfg)
    print(f"first batch loss {manifest.first_batch_loss:.6f}")
    for e, (loss, secs) in enumerate(zip(manifest.epoch_losses, manifest.epoch_seconds), start=1):
        print(f"epoch {e:3d}  mean loss {loss:.6f}  {secs:7.1f}s")
    print("checkpoints: " + ", ".join(manifest.checkpoints))
    return EXIT_OK


def cmd_add_noise(args) -> int:
    files = _inputs(Path(args.input))
    out = Path(args.out)
    for f in files:
        img = load_image(f)
        # per-file stream so results do not depend on which other files are present
        noisy = datapipe.add_noise(img, datapipe.NoiseSpec(args.sigma, _item_seed(args.seed, f.name)))
        save_image(noisy, out / f.name)
        print(f"{f.name}: sigma {args.sigma:g}, PSNR vs input {metrics.fmt_db(metrics.psnr(noisy, img))} dB")
    return EXIT_OK


def _item_seed(seed: int, name: str) -> int:
    return int(datapipe.derive_seed(seed, datapipe.name_key(name)).generate_state(1)[0])


def cmd_denoise(args) -> int:
    ckpt = load_checkpoint(args.checkpoint, args.depth, args.width)
    files = _inputs(Path(args.input))
    out = Path(args.out)
    rows = ["filename,elapsed_seconds"]
    for f in files:
        img = load_image(f)
        t0 = time.perf_counter()
        result = dn.denoise_image(ckpt.model, img)
        elapsed = time.perf_counter() - t0
        save_image(result, out / f.name)
        rows.append(f"{f.name},{elapsed:.4f}")
        print(f"{f.name}: {img.shape[1]}x{img.shape[0]} denoised in {elapsed:.3f}s")
    atomic_write_text(out / TIMINGS_NAME, "\n".join(rows) + "\n")
    return EXIT_OK


def _read_timings(path: str | None) -> dict[str, float]:
    if not path:
        return {}
    return {r["filename"]: float(r["elapsed_seconds"]) for r in metrics.read_records(Path(path).read_text())}


def cmd_evaluate(args) -> int:
    dirs = [Path(args.clean_dir), Path(args.noisy_dir), Path(args.denoised_dir)]
    listings = [{p.name: p for p in _inputs(d)} for d in dirs]
    names = set().union(*listings)
    unpaired = sorted(n for n in names if not all(n in lst for lst in listings))
    if unpaired:
        raise DataError("files not present in all three directories: " + ", ".join(unpaired))
    timings = _read_timings(args.timings)
    rows = []
    for name in sorted(names):
        clean, noisy, den = (load_image(lst[name]) for lst in listings)
        rows.append((name, metrics.evaluate_pair(clean, noisy, den, timings.get(name))))
    if args.out:
        atomic_write_text(args.out, metrics.records_csv(rows))
    print(metrics.summary_table(rows))
    return EXIT_OK


def cmd_colormap(args) -> int:
    img = load_image(args.input)
    save_rgb(apply_hot(img), args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    model = dn.build_dncnn(args.depth, args.width, 1, args.seed)
    probe = np.random.default_rng(args.seed).random((args.batch, 1, args.size, args.size))
    t0 = time.perf_counter()
    report = optim.grad_check(model, probe, args.tolerance, seed=args.seed)
    print(report.format())
    log.info("gradient check took %.1fs", time.perf_counter() - t0)
    return EXIT_OK if report.passed else EXIT_CHECK


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dncnn-pam", description="Residual CNN denoiser for grayscale microscopy images.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("prepare-data", help="grayscale, resize, rotate x4, cut patches, pack a container")
    s.add_argument("input_dir")
    s.add_argument("--out", required=True, help="container file to write")
    s.add_argument("--size", type=int, default=64, help="patch side (default 64)")
    s.add_argument("--stride", type=int, default=32, help="patch stride (default 32)")
    s.add_argument("--resize", type=int, default=datapipe.TARGET_SIZE, help="square working size (default 256)")
    s.set_defaults(func=cmd_prepare_data)

    s = sub.add_parser("train", help="train on a container, checkpointing periodically")
    s.add_argument("dataset", nargs="?")
    s.add_argument("--config", help="key=value file; flags override it")
    s.add_argument("--out", help="run directory (default ./runs)")
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--sigma", type=float)
    s.add_argument("--optimizer", choices=[optim.ADAM, optim.SGD])
    s.add_argument("--lr", type=float)
    s.add_argument("--lr-decay-epoch", type=int, help="multiply lr by 0.1 from this epoch on")
    s.add_argument("--max-grad-norm", type=float)
    s.add_argument("--checkpoint-interval", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--depth", type=int)
    s.add_argument("--width", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("add-noise", help="add seeded white Gaussian noise")
    s.add_argument("input", help="image file or directory")
    s.add_argument("--sigma", type=float, default=25.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_add_noise)

    s = sub.add_parser("denoise", help="denoise images with a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("input", help="image file or directory")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--depth", type=int, help="fail unless the checkpoint has this depth")
    s.add_argument("--width", type=int, help="fail unless the checkpoint has this width")
    s.set_defaults(func=cmd_denoise)

    s = sub.add_parser("evaluate", help="PSNR/SSIM of noisy and denoised images against clean ones")
    s.add_argument("clean_dir")
    s.add_argument("noisy_dir")
    s.add_argument("denoised_dir")
    s.add_argument("--out", help="records CSV to write")
    s.add_argument("--timings", help=f"{TIMINGS_NAME} from denoise, fills elapsed_seconds")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("colormap", help="render a gray image with the hot colormap")
    s.add_argument("input")
    s.add_argument("--out", required=True, help="output .png or .ppm")
    s.set_defaults(func=cmd_colormap)

    s = sub.add_parser("gradcheck", help="finite-difference check of the backward pass")
    s.add_argument("--depth", type=int, default=4)
    s.add_argument("--width", type=int, default=4)
    s.add_argument("--size", type=int, default=8, help="probe side length")
    s.add_argument("--batch", type=int, default=2, help="probe batch size")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tolerance", type=float, default=1e-3)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"dncnn-pam: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"dncnn-pam: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DncnnError, ValueError) as exc:
        print(f"dncnn-pam: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
