"""Small CNN substrate: layer specs, models, forward/backward passes and the loss.

Arrays are plain float64 numpy arrays in NHWC layout. Every forward pass is
batched; a single example is promoted to a batch of one. Conv weights have
shape ``(kernel_h, kernel_w, in_channels, out_channels)`` and dense weights
``(in_features, out_features)``.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import ClassVar, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, NumericError, ShapeError

PROB_CLAMP = 1e-12


@dataclass(frozen=True)
class Conv2D:
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    kind: ClassVar[str] = "Conv2D"

    def __post_init__(self):
        _require_positive(self, "out_channels", "kernel_h", "kernel_w", "stride")


@dataclass(frozen=True)
class MaxPool2D:
    window: int
    stride: int
    kind: ClassVar[str] = "MaxPool2D"

    def __post_init__(self):
        _require_positive(self, "window", "stride")


@dataclass(frozen=True)
class Flatten:
    kind: ClassVar[str] = "Flatten"


@dataclass(frozen=True)
class Dense:
    out_features: int
    kind: ClassVar[str] = "Dense"

    def __post_init__(self):
        _require_positive(self, "out_features")


@dataclass(frozen=True)
class ReLU:
    kind: ClassVar[str] = "ReLU"


@dataclass(frozen=True)
class Softmax:
    kind: ClassVar[str] = "Softmax"


LayerSpec = Union[Conv2D, MaxPool2D, Flatten, Dense, ReLU, Softmax]
LAYER_KINDS = (Conv2D, MaxPool2D, Flatten, Dense, ReLU, Softmax)


def _require_positive(spec, *names):
    for name in names:
        value = getattr(spec, name)
        if not isinstance(value, (int, np.integer)) or value < 1:
            raise ContractError(f"{spec.kind}.{name} must be a positive integer, got {value!r}")


def output_shape(spec: LayerSpec, in_shape: tuple, index: int = None) -> tuple:
    """Shape produced by ``spec`` for a single example of shape ``in_shape``."""
    if isinstance(spec, Conv2D):
        if len(in_shape) != 3:
            raise ShapeError(f"Conv2D needs a rank-3 (H, W, C) input, got {in_shape}", index)
        h, w, _ = in_shape
        if spec.kernel_h > h or spec.kernel_w > w:
            raise ShapeError(f"kernel {spec.kernel_h}x{spec.kernel_w} larger than input {h}x{w}", index)
        return ((h - spec.kernel_h) // spec.stride + 1, (w - spec.kernel_w) // spec.stride + 1, spec.out_channels)
    if isinstance(spec, MaxPool2D):
        if len(in_shape) != 3:
            raise ShapeError(f"MaxPool2D needs a rank-3 (H, W, C) input, got {in_shape}", index)
        h, w, c = in_shape
        if spec.window > h or spec.window > w:
            raise ShapeError(f"pool window {spec.window} larger than input {h}x{w}", index)
        return ((h - spec.window) // spec.stride + 1, (w - spec.window) // spec.stride + 1, c)
    if isinstance(spec, Flatten):
        return (math.prod(in_shape),)
    if isinstance(spec, Dense):
        if len(in_shape) != 1:
            raise ShapeError(f"Dense needs a rank-1 input (insert Flatten), got {in_shape}", index)
        return (spec.out_features,)
    if isinstance(spec, ReLU):
        return tuple(in_shape)
    if isinstance(spec, Softmax):
        if len(in_shape) != 1:
            raise ShapeError(f"Softmax needs a rank-1 input, got {in_shape}", index)
        return tuple(in_shape)
    raise ContractError(f"unsupported layer spec {spec!r}")


def param_shapes(spec: LayerSpec, in_shape: tuple) -> list[tuple]:
    if isinstance(spec, Conv2D):
        return [(spec.kernel_h, spec.kernel_w, in_shape[2], spec.out_channels), (spec.out_channels,)]
    if isinstance(spec, Dense):
        return [(in_shape[0], spec.out_features), (spec.out_features,)]
    return []


def shape_chain(specs: Sequence[LayerSpec], input_shape: tuple) -> list[tuple]:
    """Per-layer output shapes; raises ShapeError naming the first bad layer."""
    shapes = []
    shape = tuple(int(d) for d in input_shape)
    if not shape or any(d < 1 for d in shape):
        raise ShapeError(f"invalid input shape {input_shape}")
    for i, spec in enumerate(specs):
        shape = output_shape(spec, shape, i)
        if any(d < 1 for d in shape):
            raise ShapeError(f"output shape {shape} is empty", i)
        shapes.append(shape)
    return shapes


@dataclass
class Model:
    """An ordered layer chain with its parameters.

    ``params[i]`` is ``[weight, bias]`` for Conv2D/Dense layers and ``[]``
    otherwise. ``trainable[i]`` is the freeze mask used by backward.
    """

    layers: list
    input_shape: tuple
    params: list
    trainable: list

    def __post_init__(self):
        self.layers = list(self.layers)
        self.input_shape = tuple(int(d) for d in self.input_shape)
        if len(self.params) != len(self.layers) or len(self.trainable) != len(self.layers):
            raise ContractError("params/trainable must have one entry per layer")
        shapes = shape_chain(self.layers, self.input_shape)
        in_shape = self.input_shape
        for i, (spec, plist) in enumerate(zip(self.layers, self.params)):
            expected = param_shapes(spec, in_shape)
            got = [tuple(p.shape) for p in plist]
            if got != expected:
                raise ShapeError(f"parameter shapes {got} do not match {expected}", i)
            in_shape = shapes[i]
        self._shapes = shapes

    @property
    def shapes(self) -> list[tuple]:
        return list(self._shapes)

    @property
    def output_shape(self) -> tuple:
        return self._shapes[-1]

    def num_params(self) -> int:
        return sum(p.size for plist in self.params for p in plist)

    def copy(self) -> "Model":
        return Model(self.layers, self.input_shape, copy_params(self.params), list(self.trainable))

    def set_trainable(self, indices, flag: bool) -> None:
        for i in indices:
            self.trainable[i] = flag

    def same_structure(self, other: "Model") -> bool:
        return self.layers == other.layers and self.input_shape == other.input_shape


def copy_params(params):
    return [[p.copy() for p in plist] for plist in params]


def build_model(specs: Sequence[LayerSpec], input_shape, rng_seed, *, require_softmax: bool = True) -> Model:
    """Instantiate a model with Glorot-uniform weights and zero biases.

    ``rng_seed`` may be an int or a ``numpy.random.Generator``.
    """
    specs = list(specs)
    if not specs:
        raise ContractError("empty layer list")
    shapes = shape_chain(specs, tuple(input_shape))
    if require_softmax:
        if not isinstance(specs[-1], Softmax):
            raise ShapeError("final layer must be Softmax", len(specs) - 1)
        if len(specs) < 2 or not isinstance(specs[-2], Dense):
            raise ShapeError("Softmax must be preceded by Dense", len(specs) - 1)
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    params = []
    in_shape = tuple(input_shape)
    for spec, out in zip(specs, shapes):
        plist = []
        if isinstance(spec, Conv2D):
            receptive = spec.kernel_h * spec.kernel_w
            fan_in, fan_out = receptive * in_shape[2], receptive * spec.out_channels
        elif isinstance(spec, Dense):
            fan_in, fan_out = in_shape[0], spec.out_features
        if isinstance(spec, (Conv2D, Dense)):
            wshape, bshape = param_shapes(spec, in_shape)
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            plist = [rng.uniform(-limit, limit, size=wshape), np.zeros(bshape)]
        params.append(plist)
        in_shape = out
    return Model(specs, tuple(input_shape), params, [True] * len(specs))


def mnist_architecture(num_classes: int = 10) -> list:
    return [
        Conv2D(8, 3, 3, 1), ReLU(), MaxPool2D(2, 2),
        Conv2D(16, 3, 3, 1), ReLU(), MaxPool2D(2, 2),
        Flatten(), Dense(32), ReLU(),
        Dense(num_classes), Softmax(),
    ]


# --------------------------------------------------------------------------
# forward


@dataclass
class ActivationRecord:
    """Outputs of every layer for one batched forward pass.

    ``outputs[i]`` is the batched output of layer ``i``; ``cache`` holds what
    backward needs (im2col matrices, pooling argmaxes).
    """

    model_id: int
    input: np.ndarray
    outputs: list
    cache: list = field(repr=False)
    batched: bool = True

    @property
    def probs(self) -> np.ndarray:
        out = self.outputs[-1]
        return out if self.batched else out[0]

    def layer_output(self, i: int) -> np.ndarray:
        out = self.outputs[i]
        return out if self.batched else out[0]


def _promote(model: Model, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape == model.input_shape:
        return x[None], False
    if x.shape[1:] == model.input_shape:
        return x, True
    raise ShapeError(f"input shape {x.shape} does not match model input {model.input_shape}")


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # (B, OH, OW, C, kh, kw) -> (B, OH*OW, kh*kw*C) ordered to match weight.reshape(-1, cout)
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    b, oh, ow = win.shape[:3]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(b, oh * ow, -1)


def _pool_slices(spec: MaxPool2D, in_shape):
    """One strided slice per window offset, in row-major window order."""
    k, s = spec.window, spec.stride
    oh = (in_shape[1] - k) // s + 1
    ow = (in_shape[2] - k) // s + 1
    return [(slice(None), slice(u, u + s * (oh - 1) + 1, s), slice(v, v + s * (ow - 1) + 1, s), slice(None))
            for u in range(k) for v in range(k)]


def _layer_forward(spec, plist, x):
    """Returns (output, cache)."""
    if isinstance(spec, Conv2D):
        w, bias = plist
        col = _im2col(x, spec.kernel_h, spec.kernel_w, spec.stride)
        oh = (x.shape[1] - spec.kernel_h) // spec.stride + 1
        ow = (x.shape[2] - spec.kernel_w) // spec.stride + 1
        out = col @ w.reshape(-1, spec.out_channels) + bias
        return out.reshape(x.shape[0], oh, ow, spec.out_channels), col
    if isinstance(spec, MaxPool2D):
        out = None
        for sl in _pool_slices(spec, x.shape):
            out = x[sl] if out is None else np.maximum(out, x[sl])
        return out.copy(), None
    if isinstance(spec, Flatten):
        return x.reshape(x.shape[0], -1), None
    if isinstance(spec, Dense):
        w, bias = plist
        return x @ w + bias, None
    if isinstance(spec, ReLU):
        return np.maximum(x, 0.0), None
    if isinstance(spec, Softmax):
        shifted = x - x.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True), None
    raise ContractError(f"unsupported layer spec {spec!r}")


def forward(model: Model, x, *, keep_cache: bool = True) -> ActivationRecord:
    """Run ``x`` (one example or a batch) through every layer."""
    h, batched = _promote(model, x)
    outputs, cache = [], []
    for i, (spec, plist) in enumerate(zip(model.layers, model.params)):
        h, c = _layer_forward(spec, plist, h)
        if not np.isfinite(h).all():
            raise NumericError("non-finite activation", layer_index=i)
        outputs.append(h)
        cache.append(c if keep_cache else None)
    inp = x if batched else x[None]
    return ActivationRecord(id(model), np.asarray(inp, dtype=np.float64), outputs, cache, batched)


def predict(model: Model, x, batch_size: int = 1000) -> np.ndarray:
    """Class probabilities for a batch, computed in chunks without caches."""
    x = np.asarray(x, dtype=np.float64)
    chunks = [forward(model, x[i:i + batch_size], keep_cache=False).outputs[-1]
              for i in range(0, len(x), batch_size)]
    return np.concatenate(chunks) if chunks else np.zeros((0,) + model.output_shape)


# --------------------------------------------------------------------------
# loss


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros(labels.shape + (num_classes,))
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


def _check_loss_args(probs, label):
    probs = np.asarray(probs, dtype=np.float64)
    label = np.asarray(label, dtype=np.float64)
    if probs.shape != label.shape:
        raise ContractError(f"probs shape {probs.shape} != label shape {label.shape}")
    if probs.ndim == 1:
        probs, label = probs[None], label[None]
    if probs.ndim != 2:
        raise ContractError("expected a probability vector or a batch of them")
    if np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-6):
        raise ContractError("probabilities must sum to 1")
    return probs, label


def cce_loss(probs, label) -> float:
    """Cross-entropy with the complementary per-class term, batch-averaged.

    ``-(1/N) sum_i sum_j [y_j log p_j + (1 - y_j) log(1 - p_j)]`` with ``p``
    clamped to ``[1e-12, 1 - 1e-12]`` and ``0 * log 0 = 0``.
    """
    probs, label = _check_loss_args(probs, label)
    p = np.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    pos = np.where(label != 0, label * np.log(p), 0.0)
    neg = np.where(label != 1, (1.0 - label) * np.log1p(-p), 0.0)
    return float(-(pos + neg).sum() / probs.shape[0])


def _loss_grad_wrt_probs(probs, label):
    """d(loss of each example)/d probs, no batch averaging."""
    p = np.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    g = -(label / p) + (1.0 - label) / (1.0 - p)
    inside = (probs > PROB_CLAMP) & (probs < 1.0 - PROB_CLAMP)
    return np.where(inside, g, 0.0)


# --------------------------------------------------------------------------
# backward


def zeros_like_params(params):
    return [[np.zeros_like(p) for p in plist] for plist in params]


def _needs_input_grad(model: Model, index: int) -> bool:
    return any(model.trainable[j] and model.params[j] for j in range(index))


def _backprop(model: Model, record: ActivationRecord, label, per_example: bool):
    if record.model_id != id(model) or len(record.outputs) != len(model.layers):
        raise ContractError("activation record was not produced by this model")
    label = np.asarray(label, dtype=np.float64)
    if label.ndim == 1:
        label = label[None]
    probs = record.outputs[-1]
    if label.shape != probs.shape:
        raise ContractError(f"label shape {label.shape} != output shape {probs.shape}")
    n = probs.shape[0]
    if any(c is None for spec, c in zip(model.layers, record.cache) if isinstance(spec, Conv2D)):
        raise ContractError("activation record was produced without caches")

    # per-example d loss / d probs; the mean path folds 1/N in here
    grad = _loss_grad_wrt_probs(probs, label)
    if not per_example:
        grad = grad / n

    if per_example:
        grads = [[np.zeros((n,) + p.shape) for p in plist] for plist in model.params]
    else:
        grads = zeros_like_params(model.params)

    for i in range(len(model.layers) - 1, -1, -1):
        spec = model.layers[i]
        x = record.input if i == 0 else record.outputs[i - 1]
        out = record.outputs[i]
        want_dx = i > 0 and _needs_input_grad(model, i)
        if isinstance(spec, Softmax):
            grad = out * (grad - (grad * out).sum(axis=1, keepdims=True))
        elif isinstance(spec, ReLU):
            grad = grad * (x > 0)
        elif isinstance(spec, Flatten):
            grad = grad.reshape(x.shape)
        elif isinstance(spec, Dense):
            w, _ = model.params[i]
            if model.trainable[i]:
                if per_example:
                    grads[i][0] = x[:, :, None] * grad[:, None, :]
                    grads[i][1] = grad.copy()
                else:
                    grads[i][0] = x.T @ grad
                    grads[i][1] = grad.sum(axis=0)
            grad = grad @ w.T if want_dx else None
        elif isinstance(spec, Conv2D):
            w, _ = model.params[i]
            col = record.cache[i]
            b, oh, ow, cout = out.shape
            g2 = grad.reshape(b, oh * ow, cout)
            if model.trainable[i]:
                if per_example:
                    grads[i][0] = (col.transpose(0, 2, 1) @ g2).reshape((b,) + w.shape)
                    grads[i][1] = g2.sum(axis=1)
                else:
                    grads[i][0] = (col.reshape(-1, col.shape[2]).T @ g2.reshape(-1, cout)).reshape(w.shape)
                    grads[i][1] = g2.sum(axis=(0, 1))
            if want_dx:
                dcol = (g2 @ w.reshape(-1, cout).T).reshape(b, oh, ow, spec.kernel_h, spec.kernel_w, x.shape[3])
                dx = np.zeros_like(x)
                s = spec.stride
                for u in range(spec.kernel_h):
                    for v in range(spec.kernel_w):
                        dx[:, u:u + s * oh:s, v:v + s * ow:s, :] += dcol[:, :, :, u, v, :]
                grad = dx
            else:
                grad = None
        elif isinstance(spec, MaxPool2D):
            if want_dx:
                # route to the first maximal element of each window (row-major)
                dx = np.zeros_like(x)
                unclaimed = np.ones(out.shape, dtype=bool)
                for sl in _pool_slices(spec, x.shape):
                    hit = unclaimed & (x[sl] == out)
                    unclaimed &= ~hit
                    dx[sl] += np.where(hit, grad, 0.0)
                grad = dx
            else:
                grad = None
        if grad is None:
            break
    return grads


def backward(model: Model, record: ActivationRecord, label):
    """Batch-mean gradient of :func:`cce_loss` for every parameter.

    Frozen layers get zero-filled gradients.
    """
    return _backprop(model, record, label, per_example=False)


def per_example_gradients(model: Model, record: ActivationRecord, label):
    """Gradients of each example's own loss, stacked on a leading batch axis."""
    return _backprop(model, record, label, per_example=True)


# --------------------------------------------------------------------------
# split / compose


def split_model(model: Model) -> tuple[Model, Model]:
    """Cut off the last two layers: returns (layers[:-2], layers[-2:])."""
    p = len(model.layers)
    if p < 3:
        raise ContractError(f"need at least 3 layers to split, model has {p}")
    cut = p - 2
    backbone_out = model.shapes[cut - 1]
    if len(backbone_out) != 1:
        raise ShapeError(f"backbone output must be rank-1, got {backbone_out}", cut - 1)
    params = copy_params(model.params)
    backbone = Model(model.layers[:cut], model.input_shape, params[:cut], list(model.trainable[:cut]))
    head = Model(model.layers[cut:], backbone_out, params[cut:], list(model.trainable[cut:]))
    return backbone, head


def compose(backbone: Model, head: Model) -> Model:
    if backbone.output_shape != head.input_shape:
        raise ShapeError(f"backbone output {backbone.output_shape} != head input {head.input_shape}")
    return Model(
        backbone.layers + head.layers,
        backbone.input_shape,
        copy_params(backbone.params) + copy_params(head.params),
        list(backbone.trainable) + list(head.trainable),
    )


def clone(model: Model) -> Model:
    return copy.deepcopy(model)
