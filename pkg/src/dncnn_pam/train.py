"""Training loop: seeded minibatches, fresh noise each epoch, periodic checkpoints."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from dncnn_pam import model as dn
from dncnn_pam import optim
from dncnn_pam.checkpoint import save_checkpoint
from dncnn_pam.container import load_dataset
from dncnn_pam.datapipe import derive_seed, noisy_pixels
from dncnn_pam.errors import DataError
from dncnn_pam.fileio import atomic_write_text
from dncnn_pam.tensor_core import Mode

log = logging.getLogger(__name__)

MANIFEST_NAME = "run_manifest.json"


@dataclass
class TrainConfig:
    dataset: str
    out_dir: str = "runs"
    epochs: int = 10
    batch_size: int = 16
    sigma: float = 25.0
    optimizer: str = optim.ADAM
    lr: float = 1e-3
    lr_decay_epoch: int | None = None
    max_grad_norm: float | None = None
    checkpoint_interval: int = 5
    seed: int = 0
    depth: int = dn.DEFAULT_DEPTH
    width: int = dn.DEFAULT_WIDTH
    # recorded for provenance; the patches themselves come from the container
    patch_size: int | None = None
    patch_stride: int | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.checkpoint_interval < 1:
            raise ValueError("checkpoint interval must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        self.dataset = str(Path(self.dataset).resolve())
        self.out_dir = str(Path(self.out_dir).resolve())


@dataclass
class RunManifest:
    config: dict
    first_batch_loss: float | None = None
    epoch_losses: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> RunManifest:
        return cls(**json.loads(text))


def checkpoint_epochs(epochs: int, interval: int) -> list[int]:
    return [e for e in range(1, epochs + 1) if e % interval == 0 or e == epochs]


def checkpoint_name(epoch: int) -> str:
    return f"dncnn_epoch{epoch:03d}.dnc"


def make_optimizer(cfg: TrainConfig) -> optim.OptimizerState:
    if cfg.optimizer == optim.ADAM:
        return optim.adam(cfg.lr, max_grad_norm=cfg.max_grad_norm)
    return optim.sgd(cfg.lr, max_grad_norm=cfg.max_grad_norm)


def batch_tensors(clean: np.ndarray, noisy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    scale = np.float32(255)
    return (noisy.astype(np.float32) / scale)[:, None], (clean.astype(np.float32) / scale)[:, None]


def train(cfg: TrainConfig, on_epoch=None) -> tuple[dn.DnCNNModel, RunManifest]:
    """Train from the container at ``cfg.dataset``; checkpoints and manifest go to ``cfg.out_dir``.

    ``on_epoch(epoch, model)`` is called after every epoch (the tests use it
    to snapshot models).
    """
    ds = load_dataset(cfg.dataset)
    if ds.count == 0:
        raise DataError(f"{cfg.dataset}: container holds no patches")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    model = dn.build_dncnn(cfg.depth, cfg.width, 1, cfg.seed)
    params = model.parameters()
    opt = make_optimizer(cfg)
    manifest = RunManifest(config=asdict(cfg))
    saves = set(checkpoint_epochs(cfg.epochs, cfg.checkpoint_interval))

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        opt.lr = optim.step_decay_lr(cfg.lr, epoch, cfg.lr_decay_epoch)
        order = np.random.default_rng(derive_seed(cfg.seed, epoch, 0)).permutation(ds.count)
        losses = []
        for b, start in enumerate(range(0, ds.count, cfg.batch_size)):
            clean = ds.patches[np.sort(order[start : start + cfg.batch_size])]
            noisy = noisy_pixels(clean, cfg.sigma, np.random.default_rng(derive_seed(cfg.seed, epoch, b + 1)))
            y, x = batch_tensors(clean, noisy)
            pred, cache = dn.forward(model, y, Mode.TRAIN)
            report, grad = dn.residual_mse_loss(pred.residual, y, x)
            if manifest.first_batch_loss is None:
                manifest.first_batch_loss = report.value
            grads = dn.backward(model, cache, grad)
            optim.step(opt, params, [gp.grad for gp in grads])
            losses.append(report.value)
        manifest.epoch_losses.append(float(np.mean(losses)))
        manifest.epoch_seconds.append(time.perf_counter() - t0)
        log.info("epoch %d/%d  mean loss %.6f  (%.1fs)", epoch, cfg.epochs, manifest.epoch_losses[-1], manifest.epoch_seconds[-1])

        if epoch in saves:
            name = checkpoint_name(epoch)
            save_checkpoint(out / name, model, epoch)
            manifest.checkpoints.append(name)
            atomic_write_text(out / MANIFEST_NAME, manifest.to_json())
            log.info("wrote %s", name)
        if on_epoch is not None:
            on_epoch(epoch, model)
    return model, manifest
