"""DnCNN layer stack, residual loss, hand-chained backward pass and inference."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from dncnn_pam import tensor_core as tc
from dncnn_pam.errors import DncnnError, ShapeError
from dncnn_pam.tensor_core import BatchNormParams, ConvParams, GradPair, Mode

DEFAULT_DEPTH = 20
DEFAULT_WIDTH = 64


@dataclass
class Layer:
    conv: ConvParams
    bn: BatchNormParams | None = None
    relu: bool = True


@dataclass
class DnCNNModel:
    """Conv+ReLU, then ``depth - 2`` x Conv+BN+ReLU, then a bare Conv back to ``in_channels``.

    The stack predicts the noise residual; the clean estimate is the input
    minus that residual.
    """

    depth: int
    width: int
    in_channels: int
    layers: list[Layer]
    seed: int = 0

    def __post_init__(self):
        if self.depth < 3:
            raise ValueError(f"depth must be at least 3, got {self.depth}")
        if len(self.layers) != self.depth:
            raise ValueError(f"expected {self.depth} layers, got {len(self.layers)}")
        first, *middle, last = self.layers
        if first.bn is not None or not first.relu:
            raise ValueError("first layer must be Conv+ReLU without batch norm")
        if last.bn is not None or last.relu:
            raise ValueError("last layer must be a bare Conv")
        if any(lay.bn is None or not lay.relu for lay in middle):
            raise ValueError("middle layers must be Conv+BN+ReLU")
        if first.conv.c_in != self.in_channels or last.conv.c_out != self.in_channels:
            raise ValueError("first/last conv do not match in_channels")

    @property
    def receptive_field(self) -> int:
        """Side length of the input window that influences one output pixel."""
        return 2 * self.depth + 1

    def named_parameters(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, lay in enumerate(self.layers, start=1):
            out.append((f"layer{i:02d}.weight", lay.conv.weight))
            out.append((f"layer{i:02d}.bias", lay.conv.bias))
            if lay.bn is not None:
                out.append((f"layer{i:02d}.gamma", lay.bn.gamma))
                out.append((f"layer{i:02d}.beta", lay.bn.beta))
        return out

    def parameters(self) -> list[np.ndarray]:
        return [a for _, a in self.named_parameters()]

    def num_trainable(self) -> int:
        return sum(a.size for a in self.parameters())

    def state_arrays(self) -> list[np.ndarray]:
        """Every stored array in checkpoint order: weight, bias[, gamma, beta, running_mean, running_var]."""
        out = []
        for lay in self.layers:
            out += [lay.conv.weight, lay.conv.bias]
            if lay.bn is not None:
                out += [lay.bn.gamma, lay.bn.beta, lay.bn.running_mean, lay.bn.running_var]
        return out

    def astype(self, dtype) -> DnCNNModel:
        layers = [
            Layer(lay.conv.astype(dtype), None if lay.bn is None else lay.bn.astype(dtype), lay.relu)
            for lay in self.layers
        ]
        return DnCNNModel(self.depth, self.width, self.in_channels, layers, self.seed)

    def copy(self) -> DnCNNModel:
        return copy.deepcopy(self)


def layer_shapes(depth: int, width: int, in_channels: int) -> list[tuple[int, int, bool]]:
    """(c_in, c_out, has_bn) for each conv layer of the stack."""
    if depth < 3:
        raise ValueError(f"depth must be at least 3, got {depth}")
    shapes = [(in_channels, width, False)]
    shapes += [(width, width, True)] * (depth - 2)
    shapes.append((width, in_channels, False))
    return shapes


def build_dncnn(
    depth: int = DEFAULT_DEPTH,
    width: int = DEFAULT_WIDTH,
    in_channels: int = 1,
    seed: int = 0,
    dtype=np.float32,
) -> DnCNNModel:
    """Build a freshly initialized model.

    Conv weights are N(0, 2/fan_in) with fan_in = 9 * c_in, biases zero,
    BN gamma=1, beta=0, running mean/var 0/1. Same seed, same bits.
    """
    shapes = layer_shapes(depth, width, in_channels)
    rng = np.random.default_rng(seed)
    layers = []
    for i, (c_in, c_out, has_bn) in enumerate(shapes):
        std = np.sqrt(2.0 / (c_in * tc.KERNEL * tc.KERNEL))
        w = (rng.standard_normal((c_out, c_in, tc.KERNEL, tc.KERNEL)) * std).astype(dtype)
        conv = ConvParams(w, np.zeros(c_out, dtype))
        bn = BatchNormParams.identity(c_out, dtype) if has_bn else None
        layers.append(Layer(conv, bn, relu=i < depth - 1))
    return DnCNNModel(depth, width, in_channels, layers, seed)


# -- forward / loss / backward --------------------------------------------------


@dataclass
class ResidualPrediction:
    residual: np.ndarray
    denoised: np.ndarray


@dataclass
class LossReport:
    value: float
    batch_size: int


@dataclass
class ForwardCache:
    """Per-layer state kept by a train-mode forward for the backward pass."""

    inputs: list[np.ndarray] = field(default_factory=list)
    bn: list[tc.BatchNormCache | None] = field(default_factory=list)
    relu_out: list[np.ndarray | None] = field(default_factory=list)
    model_id: int = 0
    consumed: bool = False


def forward(
    model: DnCNNModel, y: np.ndarray, mode: Mode | str = Mode.EVAL
) -> tuple[ResidualPrediction, ForwardCache | None]:
    """Run the stack on ``y``; returns the prediction and, in train mode, a cache."""
    tc.check_tensor4(y, "model input")
    mode = Mode(mode)
    if y.shape[1] != model.in_channels:
        raise ShapeError(f"model expects {model.in_channels} input channels, got {y.shape[1]}")
    if mode is Mode.EVAL:
        residual = _eval_stack(model, y)
        return ResidualPrediction(residual=residual, denoised=y - residual), None

    cache = ForwardCache(model_id=id(model))

    h = y
    for lay in model.layers:
        cache.inputs.append(h)
        h = tc.conv2d_forward(h, lay.conv)
        bn_cache = None
        if lay.bn is not None:
            h, bn_cache = tc.batchnorm_forward(h, lay.bn, Mode.TRAIN)
        if lay.relu:
            np.maximum(h, 0, out=h)
        cache.bn.append(bn_cache)
        cache.relu_out.append(h if lay.relu else None)

    residual = h
    return ResidualPrediction(residual=residual, denoised=y - residual), cache


def _eval_stack(model: DnCNNModel, y: np.ndarray) -> np.ndarray:
    """Eval-mode stack without leaving the padded channels-last layout.

    Each conv writes straight into the interior of the next layer's padded
    buffer; bias, frozen BN and ReLU are applied there as one per-channel
    affine plus clamp, then the padding ring is cleared again.
    """
    dtype = y.dtype
    cur, grid = tc.to_padded(y)
    inner = grid.wp + 1
    spare: dict[int, list[np.ndarray]] = {}
    for lay in model.layers:
        c_out = lay.conv.c_out
        pool = spare.setdefault(c_out, [])
        nxt = pool.pop() if pool else np.zeros((grid.rows, c_out), dtype=dtype)
        dest = nxt[inner : inner + grid.length]
        tc.conv_rows(cur, grid, lay.conv.weight, dest=dest)
        bias = lay.conv.bias.astype(dtype)
        if lay.bn is not None:
            bn = lay.bn
            scale = bn.gamma.astype(dtype) / np.sqrt(bn.running_var.astype(dtype) + dtype.type(bn.eps))
            shift = bn.beta.astype(dtype) + (bias - bn.running_mean.astype(dtype)) * scale
            dest *= scale
            dest += shift
        else:
            dest += bias
        if lay.relu:
            np.maximum(dest, 0, out=dest)
        tc.zero_ring(nxt, grid)
        spare.setdefault(cur.shape[1], []).append(cur)
        cur = nxt
    return tc.from_rows(cur, grid, origin=inner)


def residual_mse_loss(
    predicted: np.ndarray, y: np.ndarray, x: np.ndarray
) -> tuple[LossReport, np.ndarray]:
    """``1/(2N) * sum_i ||R(y_i) - (y_i - x_i)||_F^2`` and its gradient w.r.t. R(y)."""
    if not (predicted.shape == y.shape == x.shape):
        raise ShapeError(f"loss shapes differ: predicted {predicted.shape}, y {y.shape}, x {x.shape}")
    n = predicted.shape[0]
    diff = predicted - (y - x)
    value = float(np.sum(np.square(diff, dtype=np.float64))) / (2 * n)
    return LossReport(value=value, batch_size=n), diff / diff.dtype.type(n)


def backward(model: DnCNNModel, cache: ForwardCache | None, grad_residual: np.ndarray) -> list[GradPair]:
    """Gradients for every trainable array, in ``model.named_parameters()`` order.

    A cache can be consumed once.
    """
    if cache is None or cache.consumed or not cache.inputs:
        raise DncnnError("backward needs a fresh cache from a train-mode forward")
    if cache.model_id != id(model) or len(cache.inputs) != model.depth:
        raise DncnnError("cache was produced by a different model")
    if grad_residual.shape != cache.inputs[0].shape:
        raise ShapeError(f"grad shape {grad_residual.shape} != input shape {cache.inputs[0].shape}")
    cache.consumed = True

    grads: dict[str, np.ndarray] = {}
    g = grad_residual.astype(cache.inputs[0].dtype, copy=False)
    for i in reversed(range(model.depth)):
        lay = model.layers[i]
        tag = f"layer{i + 1:02d}"
        if lay.relu:
            # g is always a fresh array here (the last layer has no ReLU)
            np.multiply(g, cache.relu_out[i] > 0, out=g)
        if lay.bn is not None:
            g, grads[f"{tag}.gamma"], grads[f"{tag}.beta"] = tc.batchnorm_backward(cache.bn[i], lay.bn, g)
        g, grads[f"{tag}.weight"], grads[f"{tag}.bias"] = tc.conv2d_backward(
            cache.inputs[i], lay.conv, g, need_input_grad=i > 0
        )
    return [GradPair(name, value, grads[name]) for name, value in model.named_parameters()]


# -- inference on 8-bit images --------------------------------------------------


def image_to_tensor(img: np.ndarray, dtype=np.float32) -> np.ndarray:
    return (img.astype(dtype) / dtype(255))[None, None]


def tensor_to_image(t: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and quantize round-half-up to 8 bits."""
    v = np.clip(t.astype(np.float64), 0.0, 1.0) * 255.0
    return np.floor(v + 0.5).astype(np.uint8)


def denoise_image(model: DnCNNModel, image: np.ndarray) -> np.ndarray:
    """Denoise a 2-D uint8 image with eval-mode statistics."""
    if image.ndim != 2 or image.dtype != np.uint8:
        raise ShapeError(f"expected a 2-D uint8 image, got {image.dtype} {image.shape}")
    pred, _ = forward(model, image_to_tensor(image), Mode.EVAL)
    return tensor_to_image(pred.denoised[0, 0])
