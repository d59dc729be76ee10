"""Parameter updates, learning-rate schedule and finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from dncnn_pam import model as dn
from dncnn_pam.errors import ShapeError
from dncnn_pam.tensor_core import Mode

SGD = "sgd"
ADAM = "adam"


@dataclass
class OptimizerState:
    kind: str = ADAM
    lr: float = 1e-3
    beta1: float = 0.9  # momentum for SGD
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    max_grad_norm: float | None = None
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in (SGD, ADAM):
            raise ValueError(f"unknown optimizer {self.kind!r}; expected {SGD!r} or {ADAM!r}")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")


def adam(lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8, **kw) -> OptimizerState:
    return OptimizerState(ADAM, lr, beta1, beta2, eps, **kw)


def sgd(lr: float = 1e-2, momentum: float = 0.9, **kw) -> OptimizerState:
    return OptimizerState(SGD, lr, momentum, **kw)


def clip_by_global_norm(grads: list[np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``; returns the original norm."""
    norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))
    if norm > max_norm > 0:
        scale = max_norm / norm
        for g in grads:
            g *= g.dtype.type(scale)
    return norm


def step(state: OptimizerState, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
    """Apply one update to ``params`` in place."""
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"parameter shape {p.shape} != gradient shape {g.shape}")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        if state.kind == ADAM:
            state.v = [np.zeros_like(p) for p in params]
    elif len(state.m) != len(params) or any(m.shape != p.shape for m, p in zip(state.m, params)):
        raise ShapeError("optimizer moment buffers do not match the parameters")

    if state.max_grad_norm is not None:
        grads = [g.copy() for g in grads]
        clip_by_global_norm(grads, state.max_grad_norm)

    state.step_count += 1
    t = state.step_count
    if state.kind == SGD:
        for p, g, buf in zip(params, grads, state.m):
            buf *= state.beta1
            buf += g
            p -= p.dtype.type(state.lr) * buf
        return

    b1, b2 = state.beta1, state.beta2
    lr_t = state.lr * np.sqrt(1 - b2**t) / (1 - b1**t)
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * np.square(g)
        p -= (lr_t * m / (np.sqrt(v) + state.eps)).astype(p.dtype, copy=False)


def step_decay_lr(base_lr: float, epoch: int, decay_epoch: int | None, factor: float = 0.1) -> float:
    """Constant ``base_lr``, multiplied by ``factor`` from ``decay_epoch`` (1-based) on."""
    if decay_epoch is not None and epoch >= decay_epoch:
        return base_lr * factor
    return base_lr


# -- gradient checking -------------------------------------------------------------


@dataclass
class GradCheckReport:
    """Per-tensor worst relative error over the probed coordinates.

    The loss is only piecewise smooth: where the +-step stencil flips a ReLU
    the central difference straddles a kink and says nothing about the
    gradient. Such coordinates are retried with a 10x smaller step until the
    activation pattern holds (``refined``); ones still straddling a kink at
    the smallest step are left out (``skipped``).
    """

    tolerance: float
    per_parameter: dict[str, float]
    checked: dict[str, int]
    refined: dict[str, int]
    skipped: dict[str, int]

    @property
    def max_error(self) -> float:
        return max(self.per_parameter.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return sum(self.checked.values()) > 0 and self.max_error < self.tolerance

    def format(self) -> str:
        lines = [f"{'parameter':<16} {'coords':>6} {'refined':>7} {'skipped':>7} {'max rel err':>12}"]
        for name, err in self.per_parameter.items():
            lines.append(
                f"{name:<16} {self.checked[name]:>6} {self.refined[name]:>7} {self.skipped[name]:>7} {err:>12.3e}"
            )
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(f"global max relative error {self.max_error:.3e} (tolerance {self.tolerance:g}): {verdict}")
        return "\n".join(lines)


def relative_error(analytic, numeric, floor: float = 1e-6) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)``.

    The floor sits at the round-off level of a float64 central difference, so
    gradients that are exactly zero (conv biases feeding batch norm) compare
    as zero instead of as noise over noise.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def full_loss(model: dn.DnCNNModel, y: np.ndarray, x: np.ndarray) -> float:
    return _loss_and_pattern(model, y, x)[0]


def _loss_and_pattern(model, y, x):
    pred, cache = dn.forward(model, y, Mode.TRAIN)
    pattern = [r > 0 for r in cache.relu_out if r is not None]
    return dn.residual_mse_loss(pred.residual, y, x)[0].value, pattern


def _same_pattern(a, b) -> bool:
    return all(np.array_equal(p, q) for p, q in zip(a, b))


def central_difference(model, y, x, flat, i, step, base_pattern=None):
    """Central difference of the loss along ``flat[i]``; None if the stencil crosses a ReLU kink."""
    orig = flat[i]
    flat[i] = orig + step
    up, pat_up = _loss_and_pattern(model, y, x)
    flat[i] = orig - step
    down, pat_down = _loss_and_pattern(model, y, x)
    flat[i] = orig
    if base_pattern is not None and not (
        _same_pattern(pat_up, base_pattern) and _same_pattern(pat_down, base_pattern)
    ):
        return None
    return (up - down) / (2 * step)


def grad_check(
    model: dn.DnCNNModel,
    probe_input: np.ndarray,
    tolerance: float = 1e-3,
    clean: np.ndarray | None = None,
    step: float = 1e-3,
    samples: int = 200,
    seed: int = 0,
    backward=None,
    min_step: float = 1e-6,
) -> GradCheckReport:
    """Compare backprop gradients of the full residual loss with central differences.

    Everything runs on a float64 copy of ``model``. Up to ``samples``
    coordinates per parameter tensor are probed (all of them for smaller
    tensors). ``clean`` defaults to the probe minus seeded Gaussian noise.
    ``backward`` can replace :func:`dncnn_pam.model.backward`, which is how
    the checker itself is tested.
    """
    backward = backward or dn.backward
    rng = np.random.default_rng(seed)
    wide = model.astype(np.float64)
    y = np.asarray(probe_input, dtype=np.float64)
    x = y - 0.1 * rng.standard_normal(y.shape) if clean is None else np.asarray(clean, dtype=np.float64)

    pred, cache = dn.forward(wide, y, Mode.TRAIN)
    base_pattern = [r > 0 for r in cache.relu_out if r is not None]
    _, grad_res = dn.residual_mse_loss(pred.residual, y, x)
    grads = {gp.name: gp.grad for gp in backward(wide, cache, grad_res)}

    errors, checked, refined, skipped = {}, {}, {}, {}
    for name, value in wide.named_parameters():
        flat = value.reshape(-1)
        if flat.size <= samples:
            idx = np.arange(flat.size)
        else:
            idx = np.sort(rng.choice(flat.size, size=samples, replace=False))
        analytic = grads[name].reshape(-1)
        worst, n_ok, n_refined, n_skip = 0.0, 0, 0, 0
        for i in idx:
            h = step
            numeric = central_difference(wide, y, x, flat, i, h, base_pattern)
            while numeric is None and h / 10 >= min_step * (1 - 1e-9):
                h /= 10
                numeric = central_difference(wide, y, x, flat, i, h, base_pattern)
            if numeric is None:
                n_skip += 1
                continue
            n_refined += h < step
            worst = max(worst, float(relative_error(analytic[i], numeric)))
            n_ok += 1
        errors[name], checked[name], refined[name], skipped[name] = worst, n_ok, n_refined, n_skip
    return GradCheckReport(tolerance, errors, checked, refined, skipped)
