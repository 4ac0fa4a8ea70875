"""Roles of the simulated deployment.

* trusted third party: trains the initial model on public data
  (:func:`train_initial`);
* participant / private edge server: copies the initial model, freezes its
  last two layers, fine-tunes the rest with DP-SGD on private data and
  ships only the truncated backbone (:func:`train_private`);
* cloud: averages the backbones' feature vectors and feeds the mean through
  the initial model's head (:func:`ensemble_forward`).

:func:`run_pipeline` wires the three steps together for one experiment.
"""

from __future__ import annotations

import logging
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import nncore, optim, privacy
from .data import LabeledDataset, partition
from .errors import ContractError, EdpError, StageError
from .rng import substream

log = logging.getLogger(__name__)


@dataclass
class Participant:
    id: int
    train: LabeledDataset
    test: LabeledDataset
    dp: optim.DpConfig
    sgd: optim.SgdConfig
    seed: int


@dataclass
class PrivateModel:
    backbone: nncore.Model
    participant_id: int
    epochs: int
    dp: Optional[optim.DpConfig]
    epsilon: float
    train_size: int = 0
    history: list = field(default_factory=list)  # (epoch, train_acc, test_acc or None)


@dataclass
class EnsembleModel:
    backbones: list
    head: nncore.Model
    weights: list

    def __post_init__(self):
        if not self.backbones:
            raise ContractError("an ensemble needs at least one backbone")
        first = self.backbones[0].backbone
        for pm in self.backbones[1:]:
            if not pm.backbone.same_structure(first):
                raise ContractError(
                    f"structural mismatch: participant {pm.participant_id} backbone differs from "
                    f"participant {self.backbones[0].participant_id}")
        if first.output_shape != self.head.input_shape:
            raise ContractError(f"backbone output {first.output_shape} != head input {self.head.input_shape}")
        _check_weights(self.weights, len(self.backbones))


def _check_weights(weights, n):
    if len(weights) != n:
        raise ContractError(f"{len(weights)} weights for {n} members")
    if any(w < 0 for w in weights) or abs(sum(weights) - 1.0) > 1e-9:
        raise ContractError(f"weights must be non-negative and sum to 1, got {list(weights)}")


def uniform_weights(n: int) -> list:
    if n < 1:
        raise ContractError("an ensemble needs at least one backbone")
    return [1.0 / n] * n


# ---------------------------------------------------------------- step 1


def train_initial(public: LabeledDataset, sgd: optim.SgdConfig, seed: int, architecture=None) -> nncore.Model:
    """Plain mini-batch SGD on the public set from a fresh seeded model."""
    if len(public) == 0:
        raise ContractError("public dataset is empty")
    specs = architecture or nncore.mnist_architecture(public.num_classes)
    model = nncore.build_model(specs, public.image_shape, substream(seed, "init"))
    if sgd.batch_size > len(public):
        warnings.warn(f"batch size {sgd.batch_size} clamped to public set size {len(public)}")
        sgd = optim.SgdConfig(sgd.learning_rate, sgd.epochs, len(public))
    optim.train(model, public.images, public.labels, sgd, None, substream(seed, "shuffle", "initial"))
    return model


# ---------------------------------------------------------------- step 2


def head_indices(model: nncore.Model) -> range:
    p = len(model.layers)
    return range(p - 2, p)


def private_epsilon(dp: Optional[optim.DpConfig], train_size: int, epochs: int) -> float:
    if dp is None:
        return math.inf
    steps = epochs * (train_size // dp.minibatch_size)
    if steps == 0:
        return 0.0
    return privacy.dp_sgd_epsilon(dp.noise_multiplier, train_size, dp.minibatch_size, epochs, dp.delta).epsilon


def fine_tune(m_init: nncore.Model, participant: Participant, *, track_test: bool = False):
    """Transfer + freeze + DP-SGD, without truncation. Returns (model, history)."""
    if participant.train.image_shape != m_init.input_shape:
        raise ContractError(f"participant {participant.id} data shape {participant.train.image_shape} "
                            f"!= model input {m_init.input_shape}")
    model = m_init.copy()
    model.set_trainable(range(len(model.layers)), True)
    model.set_trainable(head_indices(model), False)
    shuffle_rng = substream(participant.seed, "shuffle", participant.id)
    noise_rng = substream(participant.seed, "noise", participant.id)
    history = []

    def record(epoch, metrics):
        test_acc = evaluate(lambda x: nncore.predict(model, x), participant.test) if track_test else None
        history.append((epoch + 1, metrics.accuracy, test_acc))

    optim.train(model, participant.train.images, participant.train.labels, participant.sgd, participant.dp,
                shuffle_rng, noise_rng=noise_rng, on_epoch=record)
    return model, history


def train_private(m_init: nncore.Model, participant: Participant, *, track_test: bool = False) -> PrivateModel:
    model, history = fine_tune(m_init, participant, track_test=track_test)
    backbone, _ = nncore.split_model(model)
    eps = private_epsilon(participant.dp, len(participant.train), participant.sgd.epochs)
    return PrivateModel(backbone, participant.id, participant.sgd.epochs, participant.dp, eps,
                        len(participant.train), history)


# ---------------------------------------------------------------- step 3


def build_ensemble(private_models, m_init: nncore.Model, weights=None) -> EnsembleModel:
    _, head = nncore.split_model(m_init)
    private_models = list(private_models)
    return EnsembleModel(private_models, head, list(weights) if weights else uniform_weights(len(private_models)))


def average_features(features, weights) -> np.ndarray:
    """Weighted mean of equally shaped arrays, written as ``z0 + sum w_i (z_i - z0)``.

    Same value as ``sum w_i z_i`` when the weights sum to 1, but identical
    inputs come back bit-for-bit unchanged.
    """
    base = features[0]
    acc = np.zeros_like(base)
    for w, z in zip(weights[1:], features[1:]):
        acc += w * (z - base)
    return base + acc


def ensemble_forward(ens: EnsembleModel, x) -> np.ndarray:
    """Probabilities for one example or a batch: head(mean_i backbone_i(x))."""
    feats = [nncore.forward(pm.backbone, x, keep_cache=False).outputs[-1] for pm in ens.backbones]
    zbar = average_features(feats, ens.weights)
    single = np.asarray(x).shape == ens.backbones[0].backbone.input_shape
    probs = nncore.forward(ens.head, zbar, keep_cache=False).outputs[-1]
    return probs[0] if single else probs


def ensemble_predict(ens: EnsembleModel, x, batch_size: int = 1000) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.concatenate([ensemble_forward(ens, x[i:i + batch_size]) for i in range(0, len(x), batch_size)])


def weighted_prediction(predictions, weights) -> np.ndarray:
    """Probability-space ensemble: ``sum_i w_i * P_i``."""
    predictions = [np.asarray(p, dtype=np.float64) for p in predictions]
    _check_weights(weights, len(predictions))
    out = weights[0] * predictions[0]
    for w, p in zip(weights[1:], predictions[1:]):
        out = out + w * p
    return out


def evaluate(predict_fn: Callable, dataset: LabeledDataset, batch_size: int = 1000) -> float:
    """Fraction of examples whose argmax prediction (lowest index on ties) matches the label."""
    if len(dataset) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    correct = 0
    for i in range(0, len(dataset), batch_size):
        probs = np.asarray(predict_fn(dataset.images[i:i + batch_size]))
        correct += int((probs.argmax(axis=1) == dataset.labels[i:i + batch_size]).sum())
    return correct / len(dataset)


def composed_model(pm: PrivateModel, head: nncore.Model) -> nncore.Model:
    return nncore.compose(pm.backbone, head)


# ---------------------------------------------------------------- pipeline


@dataclass
class ExperimentReport:
    noise_multiplier: float
    clip_threshold: float
    delta: float
    epsilon: float
    initial_acc: float
    private_accs: list
    final_acc: float
    seed: int
    epochs: int
    batch: int
    curves: list = field(default_factory=list)  # (participant, epoch, train_acc, test_acc)

    @property
    def private_avg_acc(self) -> float:
        return float(np.mean(self.private_accs)) if self.private_accs else math.nan


def thread_cap(default: int = None) -> int:
    raw = os.environ.get("EDP_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise ContractError(f"EDP_THREADS must be an integer, got {raw!r}") from None
    return default or os.cpu_count() or 1


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except EdpError as exc:
        raise StageError(name, exc) from exc


def make_participants(splits: dict, cfg) -> list:
    return [Participant(i + 1, tr, te, cfg.dp, cfg.private, cfg.seed)
            for i, (tr, te) in enumerate(zip(splits["train"], splits["test"]))]


def run_pipeline(cfg, dataset: LabeledDataset = None, *, artifacts: dict = None) -> ExperimentReport:
    """Partition, train the initial model, fine-tune every participant, ensemble, evaluate.

    ``dataset`` overrides the config's data source. When ``artifacts`` is a
    dict it receives the intermediate objects (splits, models, ensemble).
    """
    from .config import load_dataset, partition_plan

    if dataset is None:
        dataset = _stage("load", load_dataset, cfg)
    plan = partition_plan(cfg, len(dataset))
    splits = _stage("partition", partition, dataset, plan)
    log.info("partitioned %d examples: %s", len(dataset), plan)

    m_init = _stage("train-initial", train_initial, splits["public"], cfg.initial, cfg.seed, cfg.layer_specs())
    initial_acc = evaluate(lambda x: nncore.predict(m_init, x), splits["validation"])
    log.info("initial model validation accuracy %.4f", initial_acc)

    participants = make_participants(splits, cfg)
    with ThreadPoolExecutor(max_workers=min(thread_cap(), len(participants))) as pool:
        futures = [pool.submit(_stage, "train-private", train_private, m_init, p, track_test=cfg.record_curves)
                   for p in participants]
        private_models = [f.result() for f in futures]

    _, head = nncore.split_model(m_init)
    private_accs = []
    curves = []
    for pm, part in zip(private_models, participants):
        composed = composed_model(pm, head)
        private_accs.append(evaluate(lambda x: nncore.predict(composed, x), part.test))
        curves.extend((pm.participant_id, ep, tr, te) for ep, tr, te in pm.history)
    ens = _stage("ensemble", build_ensemble, private_models, m_init, cfg.weights)
    final_acc = evaluate(lambda x: ensemble_forward(ens, x), splits["validation"])
    log.info("private accuracies %s, ensemble %.4f", private_accs, final_acc)

    if artifacts is not None:
        artifacts.update(splits=splits, initial=m_init, participants=participants,
                         private_models=private_models, ensemble=ens)
    eps = private_models[0].epsilon if private_models else math.inf
    return ExperimentReport(cfg.dp.noise_multiplier, cfg.dp.clip_threshold, cfg.dp.delta, eps, initial_acc,
                            private_accs, final_acc, cfg.seed, cfg.private.epochs, cfg.dp.minibatch_size,
                            curves if cfg.record_curves else [])
