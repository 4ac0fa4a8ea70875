"""Mini-batch SGD and DP-SGD (per-example clipping plus Gaussian noise)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nncore
from .errors import ContractError, NumericError

UNCLIPPED = math.inf


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float
    epochs: int
    batch_size: int

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ContractError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 0:
            raise ContractError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass(frozen=True)
class DpConfig:
    """DP-SGD knobs. ``clip_threshold=UNCLIPPED`` disables clipping."""

    noise_multiplier: float
    clip_threshold: float
    minibatch_size: int
    delta: float

    def __post_init__(self):
        if not self.noise_multiplier >= 0:
            raise ContractError(f"noise_multiplier must be >= 0, got {self.noise_multiplier}")
        if not self.clip_threshold > 0:
            raise ContractError(f"clip_threshold must be > 0, got {self.clip_threshold}")
        if self.minibatch_size < 1:
            raise ContractError(f"minibatch_size must be >= 1, got {self.minibatch_size}")
        if not 0 < self.delta < 1:
            raise ContractError(f"delta must lie in (0, 1), got {self.delta}")


@dataclass
class EpochMetrics:
    loss: float
    accuracy: float
    steps: int


def _check_congruent(a, b):
    if len(a) != len(b) or any(
        len(pa) != len(pb) or any(x.shape != y.shape for x, y in zip(pa, pb)) for pa, pb in zip(a, b)
    ):
        raise ContractError("parameter and gradient structures differ")


def sgd_step(params, avg_grad, learning_rate: float):
    """Return ``params - learning_rate * avg_grad`` as new arrays."""
    _check_congruent(params, avg_grad)
    return [[p - learning_rate * g for p, g in zip(pl, gl)] for pl, gl in zip(params, avg_grad)]


def global_norm(grad) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for gl in grad for g in gl))


def clip_per_example(grad, clip_threshold: float):
    """Scale one example's gradient so its global L2 norm is at most ``clip_threshold``."""
    if not clip_threshold > 0:
        raise ContractError(f"clip_threshold must be > 0, got {clip_threshold}")
    if not all(np.isfinite(g).all() for gl in grad for g in gl):
        raise NumericError("non-finite gradient entry")
    if clip_threshold == UNCLIPPED:
        return [[g.copy() for g in gl] for gl in grad]
    scale = max(1.0, global_norm(grad) / clip_threshold)
    return [[g / scale for g in gl] for gl in grad]


def clip_batch(per_example, clip_threshold: float, trainable=None):
    """Clip stacked per-example gradients and return their sum.

    Equivalent to summing :func:`clip_per_example` over the batch; ``trainable``
    skips layers whose gradients are known to be zero.
    """
    layers = range(len(per_example)) if trainable is None else [i for i, t in enumerate(trainable) if t]
    arrays = [g for i in layers for g in per_example[i]]
    if not arrays:
        raise ContractError("no gradients to clip")
    n = arrays[0].shape[0]
    if clip_threshold == UNCLIPPED:
        factors = np.ones(n)
    else:
        sq = np.zeros(n)
        for g in arrays:
            flat = g.reshape(n, -1)
            sq += np.einsum("ij,ij->i", flat, flat)
        if not np.isfinite(sq).all():
            raise NumericError("non-finite gradient entry")
        factors = 1.0 / np.maximum(1.0, np.sqrt(sq) / clip_threshold)
    total = []
    for i, gl in enumerate(per_example):
        if trainable is not None and not trainable[i]:
            total.append([np.zeros(g.shape[1:]) for g in gl])
        else:
            total.append([np.tensordot(factors, g, axes=1) for g in gl])
    return total


def dp_aggregate(clipped, cfg: DpConfig, rng: np.random.Generator, trainable=None):
    """Noisy mean of a list of clipped per-example gradients.

    Sums the list and hands it to :func:`dp_noisy_mean`. Use that function
    directly when the sum is already available.
    """
    if not clipped:
        raise ContractError("need at least one clipped gradient")
    total = [[np.zeros_like(g) for g in gl] for gl in clipped[0]]
    for grad in clipped:
        _check_congruent(total, grad)
        for tl, gl in zip(total, grad):
            for t, g in zip(tl, gl):
                t += g
    return dp_noisy_mean(total, cfg, rng, trainable)


def dp_noisy_mean(summed, cfg: DpConfig, rng: np.random.Generator, trainable=None):
    """Add per-coordinate Gaussian noise of std ``nm * nc`` to a gradient sum and divide by ``mb``.

    Frozen layers (``trainable[i]`` false) get no noise. With ``nm == 0`` no
    random numbers are drawn.
    """
    std = cfg.noise_multiplier * cfg.clip_threshold
    if cfg.noise_multiplier > 0 and not math.isfinite(std):
        raise ContractError("noise needs a finite clip threshold")
    out = []
    for i, gl in enumerate(summed):
        layer = []
        for g in gl:
            if std > 0 and (trainable is None or trainable[i]):
                g = g + rng.normal(0.0, std, size=g.shape)
            layer.append(g / cfg.minibatch_size)
        out.append(layer)
    return out


def batches(n: int, batch_size: int, rng: np.random.Generator):
    """Shuffled index batches of exactly ``batch_size``; the remainder is dropped."""
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n - batch_size + 1, batch_size)]


def steps_per_epoch(n: int, batch_size: int) -> int:
    return n // batch_size


def train_epoch(model, images, labels, sgd: SgdConfig, dp: DpConfig | None, rng: np.random.Generator,
                *, noise_rng: np.random.Generator | None = None):
    """One pass over shuffled mini-batches; updates ``model`` in place.

    ``rng`` drives the shuffle and ``noise_rng`` (default: ``rng``) the DP
    noise. With ``dp`` set the batch size is ``dp.minibatch_size``.
    Returns :class:`EpochMetrics` with the mean batch loss and the training
    accuracy of the predictions made during the epoch.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(images)
    if n == 0:
        raise ContractError("empty training set")
    if images.shape[1:] != model.input_shape:
        raise ContractError(f"data shape {images.shape[1:]} != model input {model.input_shape}")
    num_classes = model.output_shape[0]
    bsize = dp.minibatch_size if dp is not None else sgd.batch_size
    if bsize > n:
        raise ContractError(f"batch size {bsize} exceeds dataset size {n}")
    noise_rng = rng if noise_rng is None else noise_rng

    losses, correct, seen = [], 0, 0
    for b, idx in enumerate(batches(n, bsize, rng)):
        x, y = images[idx], nncore.one_hot(labels[idx], num_classes)
        try:
            record = nncore.forward(model, x)
            losses.append(nncore.cce_loss(record.probs, y))
            correct += int((record.probs.argmax(axis=1) == labels[idx]).sum())
            seen += len(idx)
            if dp is None:
                grad = nncore.backward(model, record, y)
            else:
                per_ex = nncore.per_example_gradients(model, record, y)
                summed = clip_batch(per_ex, dp.clip_threshold, model.trainable)
                grad = dp_noisy_mean(summed, dp, noise_rng, model.trainable)
            new_params = sgd_step(model.params, grad, sgd.learning_rate)
        except NumericError as exc:
            raise NumericError(str(exc), batch_index=b) from exc
        for i, frozen in enumerate(not t for t in model.trainable):
            if not frozen:
                model.params[i] = new_params[i]
    return EpochMetrics(float(np.mean(losses)), correct / seen, len(losses))


def train(model, images, labels, sgd: SgdConfig, dp: DpConfig | None, rng, *, noise_rng=None, on_epoch=None):
    """Run ``sgd.epochs`` epochs; ``on_epoch(epoch, metrics)`` is called after each."""
    history = []
    for epoch in range(sgd.epochs):
        metrics = train_epoch(model, images, labels, sgd, dp, rng, noise_rng=noise_rng)
        history.append(metrics)
        if on_epoch is not None:
            on_epoch(epoch, metrics)
    return history
