"""Numerical kernels for the denoiser: 3x3 convolution, ReLU and batch norm.

Tensors are plain numpy arrays laid out ``(n, c, h, w)``. Kernels keep the
dtype they are given: float32 is the production path, float64 is used for
finite-difference gradient checks.

Fast convolution
----------------
The 3x3, padding-1 convolution runs on a zero-padded, channels-last copy of
the input flattened to rows ``(n * (h + 2) * (w + 2), c)``. In that layout
every kernel tap ``(dy, dx)`` is a constant row offset ``dy * (w + 2) + dx``,
so each tap is one contiguous GEMM and no im2col matrix is built for wide
layers; BLAS ``gemm`` with ``beta=1`` accumulates the taps in place. Rows
that land on the padding ring are computed and discarded (about 13% waste on
64x64 patches, 1.5% on 256x256 images).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.linalg import get_blas_funcs

from dncnn_pam.errors import DncnnError, ShapeError

KERNEL = 3
_TAPS = [(dy, dx) for dy in range(KERNEL) for dx in range(KERNEL)]
# below this many channels on the contracted side, stacking taps is cheaper
_STACK_BELOW = 16


class Mode(str, Enum):
    TRAIN = "train"
    EVAL = "eval"


def check_tensor4(x: np.ndarray, name: str = "tensor") -> np.ndarray:
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        raise ShapeError(f"{name} must be a 4-D (n, c, h, w) array, got {getattr(x, 'shape', type(x))}")
    if min(x.shape) < 1:
        raise ShapeError(f"{name} has an empty dimension: {x.shape}")
    if x.dtype not in (np.float32, np.float64):
        raise ShapeError(f"{name} must be float32 or float64, got {x.dtype}")
    return x


@dataclass
class ConvParams:
    weight: np.ndarray  # (c_out, c_in, 3, 3)
    bias: np.ndarray  # (c_out,)

    def __post_init__(self):
        w = self.weight
        if w.ndim != 4 or w.shape[2:] != (KERNEL, KERNEL):
            raise ShapeError(f"conv weight must be (c_out, c_in, 3, 3), got {w.shape}")
        if self.bias.shape != (w.shape[0],):
            raise ShapeError(f"conv bias must have shape ({w.shape[0]},), got {self.bias.shape}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(self.bias))):
            raise ValueError("conv parameters must be finite")

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    def astype(self, dtype) -> ConvParams:
        return ConvParams(self.weight.astype(dtype), self.bias.astype(dtype))


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.9

    def __post_init__(self):
        c = self.gamma.shape
        for name in ("beta", "running_mean", "running_var"):
            if getattr(self, name).shape != c:
                raise ShapeError(f"batch norm {name} shape {getattr(self, name).shape} != gamma shape {c}")
        if np.any(self.running_var < 0):
            raise ValueError("batch norm running variance must be non-negative")
        if not self.eps > 0:
            raise ValueError("batch norm eps must be positive")
        if not 0 < self.momentum < 1:
            raise ValueError("batch norm momentum must lie in (0, 1)")

    @classmethod
    def identity(cls, channels: int, dtype=np.float32, **kw) -> BatchNormParams:
        return cls(
            gamma=np.ones(channels, dtype),
            beta=np.zeros(channels, dtype),
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
            **kw,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def astype(self, dtype) -> BatchNormParams:
        return BatchNormParams(
            self.gamma.astype(dtype),
            self.beta.astype(dtype),
            self.running_mean.astype(dtype),
            self.running_var.astype(dtype),
            self.eps,
            self.momentum,
        )


@dataclass
class GradPair:
    """A parameter array and the gradient of the loss with respect to it."""

    name: str
    value: np.ndarray
    grad: np.ndarray

    def __post_init__(self):
        if self.value.shape != self.grad.shape:
            raise ShapeError(f"{self.name}: gradient shape {self.grad.shape} != value shape {self.value.shape}")


# -- convolution --------------------------------------------------------------
#
# Internal layout: a padded image batch is stored channels-last and flattened to
# ``(n * hp * wp + tail, c)`` rows. Output row ``p`` (grid coordinates, top-left
# aligned) reads input rows ``p + dy * wp + dx``.


@dataclass(frozen=True)
class Grid:
    n: int
    h: int
    w: int

    @property
    def hp(self) -> int:
        return self.h + 2

    @property
    def wp(self) -> int:
        return self.w + 2

    @property
    def length(self) -> int:
        return self.n * self.hp * self.wp

    @property
    def rows(self) -> int:
        return self.length + self.max_offset

    @property
    def max_offset(self) -> int:
        return 2 * self.wp + 2

    def offsets(self) -> list[int]:
        return [dy * self.wp + dx for dy, dx in _TAPS]


def _gemm(dtype):
    return get_blas_funcs("gemm", dtype=dtype)


def to_padded(x: np.ndarray) -> tuple[np.ndarray, Grid]:
    """(n, c, h, w) -> zero-padded channels-last rows ``(grid.rows, c)``."""
    n, c, h, w = x.shape
    grid = Grid(n, h, w)
    buf = np.zeros((grid.rows, c), dtype=x.dtype)
    view = buf[: grid.length].reshape(n, grid.hp, grid.wp, c)
    view[:, 1 : h + 1, 1 : w + 1, :] = x.transpose(0, 2, 3, 1)
    return buf, grid


def from_rows(rows: np.ndarray, grid: Grid, origin: int = 0) -> np.ndarray:
    """Read an (n, c, h, w) tensor out of grid-laid rows starting at ``origin``."""
    c = rows.shape[1]
    view = rows[origin : origin + grid.length].reshape(grid.n, grid.hp, grid.wp, c)
    return np.ascontiguousarray(view[:, : grid.h, : grid.w, :].transpose(0, 3, 1, 2))


def zero_ring(buf: np.ndarray, grid: Grid) -> None:
    """Clear the one-pixel padding ring of every image in a padded buffer."""
    view = buf[: grid.length].reshape(grid.n, grid.hp, grid.wp, buf.shape[1])
    view[:, 0] = 0
    view[:, grid.h + 1] = 0
    view[:, :, 0] = 0
    view[:, :, grid.w + 1] = 0


def conv_rows(buf: np.ndarray, grid: Grid, weight: np.ndarray, dest: np.ndarray | None = None) -> np.ndarray:
    """Convolve padded rows with ``weight`` (c_out, c_in, 3, 3), no bias.

    Result is ``(grid.length, c_out)`` in grid coordinates; rows landing on
    the padding ring hold garbage. ``dest`` must be C-contiguous if given.
    """
    c_out, c_in = weight.shape[:2]
    dtype = buf.dtype
    weight = weight.astype(dtype, copy=False)
    length = grid.length
    offs = grid.offsets()
    if dest is None:
        dest = np.empty((length, c_out), dtype=dtype)

    if c_in < _STACK_BELOW:
        # few input channels: gather the 9 taps side by side, one GEMM
        cols = np.empty((length, KERNEL * KERNEL * c_in), dtype=dtype)
        for k, off in enumerate(offs):
            cols[:, k * c_in : (k + 1) * c_in] = buf[off : off + length]
        np.matmul(cols, weight.transpose(2, 3, 1, 0).reshape(-1, c_out), out=dest)
    elif c_out < _STACK_BELOW:
        # few output channels: one GEMM for all taps, then shift-and-add
        y = buf @ weight.transpose(1, 2, 3, 0).reshape(c_in, -1)
        dest[...] = y[offs[0] : offs[0] + length, :c_out]
        for k, off in enumerate(offs[1:], start=1):
            dest += y[off : off + length, k * c_out : (k + 1) * c_out]
    else:
        gemm = _gemm(dtype)
        ct = dest.T
        for k, (off, (dy, dx)) in enumerate(zip(offs, _TAPS)):
            a = np.asfortranarray(weight[:, :, dy, dx])
            r = gemm(1.0, a, buf[off : off + length].T, beta=0.0 if k == 0 else 1.0, c=ct, overwrite_c=1)
            if not np.shares_memory(r, ct):
                ct[...] = r
    return dest


def conv2d_forward(x: np.ndarray, p: ConvParams, padding: int = 1) -> np.ndarray:
    """3x3 cross-correlation with zero padding 1 plus bias; spatial size is preserved."""
    check_tensor4(x, "conv input")
    if padding != 1:
        raise ValueError("only padding=1 is supported")
    if x.shape[1] != p.c_in:
        raise ShapeError(f"conv input has {x.shape[1]} channels but the kernel expects {p.c_in}")
    buf, grid = to_padded(x)
    rows = conv_rows(buf, grid, p.weight)
    rows += p.bias.astype(x.dtype, copy=False)
    return from_rows(rows, grid)


def conv2d_backward(
    x: np.ndarray,
    p: ConvParams,
    grad_out: np.ndarray,
    padding: int = 1,
    need_input_grad: bool = True,
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Gradients of ``sum(grad_out * conv2d_forward(x, p))``.

    Returns ``(grad_input, grad_weight, grad_bias)``; ``grad_input`` is None
    when ``need_input_grad`` is false (the first layer never needs it).
    """
    check_tensor4(x, "conv input")
    check_tensor4(grad_out, "conv grad_out")
    if padding != 1:
        raise ValueError("only padding=1 is supported")
    n, c_in, h, w = x.shape
    c_out = p.c_out
    if c_in != p.c_in:
        raise ShapeError(f"conv input has {c_in} channels but the kernel expects {p.c_in}")
    if grad_out.shape != (n, c_out, h, w):
        raise ShapeError(f"grad_out shape {grad_out.shape} != conv output shape {(n, c_out, h, w)}")
    dtype = x.dtype
    weight = p.weight.astype(dtype, copy=False)
    buf, grid = to_padded(x)
    length, offs, mo = grid.length, grid.offsets(), grid.max_offset

    # grad_out scattered onto the grid, zero on the ring; ``mo`` leading zero
    # rows let the input-gradient gather below index backwards
    gpad = np.zeros((length + 2 * mo, c_out), dtype=dtype)
    g = gpad[mo : mo + length]
    g.reshape(n, grid.hp, grid.wp, c_out)[:, :h, :w, :] = grad_out.transpose(0, 2, 3, 1)

    grad_w = np.empty((c_out, c_in, KERNEL, KERNEL), dtype=dtype)
    for off, (dy, dx) in zip(offs, _TAPS):
        grad_w[:, :, dy, dx] = g.T @ buf[off : off + length]
    grad_b = grad_out.sum(axis=(0, 2, 3)).astype(dtype, copy=False)
    if not need_input_grad:
        return None, grad_w, grad_b

    if c_out < _STACK_BELOW:
        # dx[q] = sum_k g[q - off_k] @ w_k: gather shifted grads, one GEMM
        cols = np.empty((grid.rows, KERNEL * KERNEL * c_out), dtype=dtype)
        for k, off in enumerate(offs):
            cols[:, k * c_out : (k + 1) * c_out] = gpad[mo - off : mo - off + grid.rows]
        dbuf = cols @ weight.transpose(2, 3, 0, 1).reshape(-1, c_in)
    elif c_in < _STACK_BELOW:
        z = g @ weight.transpose(0, 2, 3, 1).reshape(c_out, -1)
        dbuf = np.zeros((grid.rows, c_in), dtype=dtype)
        for k, off in enumerate(offs):
            dbuf[off : off + length] += z[:, k * c_in : (k + 1) * c_in]
    else:
        gemm = _gemm(dtype)
        dbuf = np.zeros((grid.rows, c_in), dtype=dtype)
        for off, (dy, dx) in zip(offs, _TAPS):
            ct = dbuf[off : off + length].T
            a = np.asfortranarray(weight[:, :, dy, dx].T)
            r = gemm(1.0, a, g.T, beta=1.0, c=ct, overwrite_c=1)
            if not np.shares_memory(r, ct):
                ct[...] = r
    grad_x = from_rows(dbuf, grid, origin=grid.wp + 1)
    return grad_x, grad_w, grad_b


def conv2d_reference(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Direct per-pixel convolution. Slow; exists so the fast path has something to agree with."""
    check_tensor4(x, "conv input")
    n, c, h, w = x.shape
    if c != p.c_in:
        raise ShapeError(f"conv input has {c} channels but the kernel expects {p.c_in}")
    xp = np.zeros((n, c, h + 2, w + 2), dtype=np.float64)
    xp[:, :, 1:-1, 1:-1] = x
    wt = p.weight.astype(np.float64)
    out = np.empty((n, p.c_out, h, w), dtype=np.float64)
    for b in range(n):
        for o in range(p.c_out):
            for i in range(h):
                for j in range(w):
                    out[b, o, i, j] = p.bias[o] + np.sum(xp[b, :, i : i + 3, j : j + 3] * wt[o])
    return out.astype(x.dtype)


# -- ReLU ---------------------------------------------------------------------


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Pass ``grad_out`` where ``x > 0``; the subgradient at exactly 0 is 0."""
    if x.shape != grad_out.shape:
        raise ShapeError(f"relu input shape {x.shape} != grad_out shape {grad_out.shape}")
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


# -- batch normalization ------------------------------------------------------


@dataclass
class BatchNormCache:
    mode: Mode
    xhat: np.ndarray | None = None
    inv_std: np.ndarray | None = None


def batchnorm_forward(
    x: np.ndarray, p: BatchNormParams, mode: Mode | str = Mode.TRAIN
) -> tuple[np.ndarray, BatchNormCache]:
    """Per-channel normalization over (n, h, w).

    Train mode normalizes with the batch statistics and folds them into the
    running statistics of ``p`` (the one side effect). Eval mode uses the
    running statistics.
    """
    check_tensor4(x, "batch norm input")
    mode = Mode(mode)
    n, c, h, w = x.shape
    if c != p.channels:
        raise ShapeError(f"batch norm input has {c} channels, params have {p.channels}")
    dt = x.dtype
    gamma = p.gamma.astype(dt, copy=False)[None, :, None, None]
    beta = p.beta.astype(dt, copy=False)[None, :, None, None]

    if mode is Mode.EVAL:
        scale = p.gamma.astype(dt) / np.sqrt(p.running_var.astype(dt) + dt.type(p.eps))
        shift = p.beta.astype(dt) - p.running_mean.astype(dt) * scale
        out = x * scale[None, :, None, None]
        out += shift[None, :, None, None]
        return out, BatchNormCache(Mode.EVAL)

    m = n * h * w
    if m < 2:
        raise DncnnError("train-mode batch norm needs at least 2 values per channel")
    mean = x.mean(axis=(0, 2, 3))
    centered = x - mean[None, :, None, None]
    var = np.mean(centered * centered, axis=(0, 2, 3))
    inv_std = 1.0 / np.sqrt(var + dt.type(p.eps))
    xhat = centered
    xhat *= inv_std[None, :, None, None]
    out = xhat * gamma + beta

    mom = p.momentum
    unbiased = var * (m / (m - 1))
    p.running_mean[...] = mom * p.running_mean + (1 - mom) * mean
    p.running_var[...] = mom * p.running_var + (1 - mom) * unbiased
    return out, BatchNormCache(Mode.TRAIN, xhat, inv_std)


def batchnorm_backward(
    cache: BatchNormCache, p: BatchNormParams, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact gradients of the train-mode mapping: ``(grad_input, grad_gamma, grad_beta)``."""
    if cache.mode is not Mode.TRAIN or cache.xhat is None:
        raise DncnnError("batch norm backward needs a cache from a train-mode forward")
    xhat = cache.xhat
    if grad_out.shape != xhat.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != batch norm output shape {xhat.shape}")
    n, c, h, w = xhat.shape
    m = n * h * w
    dt = xhat.dtype
    g = grad_out.astype(dt, copy=False)

    grad_beta = g.sum(axis=(0, 2, 3))
    grad_gamma = np.einsum("nchw,nchw->c", g, xhat)
    gamma = p.gamma.astype(dt, copy=False)
    # dxhat = g * gamma, folded into the per-channel coefficients below
    k = (gamma * cache.inv_std / m)[None, :, None, None]
    grad_x = g * dt.type(m)
    grad_x -= grad_beta[None, :, None, None]
    grad_x -= xhat * grad_gamma[None, :, None, None]
    grad_x *= k
    return grad_x, grad_gamma, grad_beta
