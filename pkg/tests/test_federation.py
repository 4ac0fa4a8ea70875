import math
from dataclasses import replace

import numpy as np
import pytest

from edp import federation, nncore, privacy
from edp.config import DatasetSource, ExperimentConfig
from edp.data import PartitionPlan, synth_dataset
from edp.errors import ContractError, StageError
from edp.federation import Participant, PrivateModel
from edp.optim import DpConfig, SgdConfig

from oracles import confusion_matrix_accuracy

SHAPE = (12, 12, 1)


def small_init(seed=0):
    return nncore.build_model(nncore.mnist_architecture(3), SHAPE, seed)


def participant(pid=1, epochs=2, nm=1.0, n=42, seed=0):
    ds = synth_dataset(seed + pid, n + 12, height=12, width=12)
    return Participant(pid, ds.take(range(n)), ds.take(range(n, n + 12)), DpConfig(nm, 1.0, 8, 1e-5),
                       SgdConfig(0.05, epochs, 8), seed)


def small_config(seed=0, **kw):
    base = ExperimentConfig(
        dataset=DatasetSource(kind="synthetic", num_classes=3, count=150, height=12, width=12),
        plan=PartitionPlan(30, 12, 27, 9, 3),
        initial=SgdConfig(0.05, 3, 6),
        private=SgdConfig(0.05, 2, 6),
        dp=DpConfig(1.1, 1.0, 6, 1e-4),
        seed=seed,
    )
    return replace(base, **kw)


def test_head_is_frozen_and_backbone_moves():
    m_init = small_init()
    model, history = federation.fine_tune(m_init, participant())
    p = len(m_init.layers)
    for i in (p - 2, p - 1):
        for a, b in zip(model.params[i], m_init.params[i]):
            assert np.array_equal(a, b)
    assert not np.array_equal(model.params[0][0], m_init.params[0][0])
    assert [h[0] for h in history] == [1, 2]


def test_truncate_then_recompose_matches_full_model():
    m_init = small_init(1)
    part = participant(epochs=1)
    full, _ = federation.fine_tune(m_init, part)
    pm = federation.train_private(m_init, part)
    _, head = nncore.split_model(m_init)
    x = np.random.default_rng(0).random((10,) + SHAPE)
    a = nncore.forward(full, x).probs
    b = nncore.forward(federation.composed_model(pm, head), x).probs
    assert np.max(np.abs(a - b)) <= 1e-12


def test_shipped_backbone_excludes_head():
    pm = federation.train_private(small_init(), participant(epochs=1))
    assert len(pm.backbone.layers) == len(small_init().layers) - 2
    assert pm.backbone.output_shape == (32,)


def test_privacy_bookkeeping():
    part = participant(epochs=3, nm=1.3)
    pm = federation.train_private(small_init(), part)
    expect = privacy.dp_sgd_epsilon(1.3, 42, 8, 3, 1e-5).epsilon
    assert pm.epsilon == expect
    assert pm.train_size == 42
    assert federation.private_epsilon(part.dp, 42, 0) == 0.0
    assert federation.private_epsilon(None, 42, 3) == math.inf


def test_degenerate_ensemble_is_bitwise_identity():
    m_init = small_init(2)
    pm = federation.train_private(m_init, participant(epochs=0))
    ens = federation.build_ensemble([pm], m_init)
    x = np.random.default_rng(1).random((100,) + SHAPE)
    assert np.array_equal(federation.ensemble_forward(ens, x), nncore.forward(m_init, x).probs)
    assert np.array_equal(federation.ensemble_forward(ens, x[0]), nncore.forward(m_init, x[0]).probs)


def test_identical_members_change_nothing():
    m_init = small_init(3)
    pm = federation.train_private(m_init, participant(epochs=1))
    one = federation.build_ensemble([pm], m_init)
    three = federation.build_ensemble([pm, pm, pm], m_init, [0.2, 0.5, 0.3])
    x = np.random.default_rng(2).random((20,) + SHAPE)
    assert np.array_equal(federation.ensemble_forward(one, x), federation.ensemble_forward(three, x))


def test_feature_average_equals_logit_average():
    m_init = small_init(4)
    pms = [federation.train_private(m_init, participant(pid=i, epochs=1)) for i in (1, 2)]
    ens = federation.build_ensemble(pms, m_init, [0.3, 0.7])
    x = np.random.default_rng(3).random((15,) + SHAPE)
    _, head = nncore.split_model(m_init)
    w, b = head.params[0]
    logits = [nncore.forward(pm.backbone, x).outputs[-1] @ w + b for pm in pms]
    mixed = 0.3 * logits[0] + 0.7 * logits[1]
    expect = np.exp(mixed - mixed.max(axis=1, keepdims=True))
    expect /= expect.sum(axis=1, keepdims=True)
    assert np.allclose(federation.ensemble_forward(ens, x), expect, rtol=0, atol=1e-12)


def test_structural_mismatch_rejected():
    m_init = small_init()
    good = federation.train_private(m_init, participant(epochs=0))
    other = nncore.build_model([nncore.Conv2D(4, 3, 3), nncore.ReLU(), nncore.Flatten(), nncore.Dense(32),
                                nncore.ReLU(), nncore.Dense(3), nncore.Softmax()], SHAPE, 0)
    bad = PrivateModel(nncore.split_model(other)[0], 2, 0, None, 0.0)
    with pytest.raises(ContractError, match="structural mismatch"):
        federation.build_ensemble([good, bad], m_init)


def test_weight_validation():
    m_init = small_init()
    pm = federation.train_private(m_init, participant(epochs=0))
    with pytest.raises(ContractError):
        federation.build_ensemble([pm, pm], m_init, [0.6, 0.6])
    with pytest.raises(ContractError):
        federation.build_ensemble([pm, pm], m_init, [1.0])
    with pytest.raises(ContractError):
        federation.build_ensemble([], m_init)


def test_weighted_prediction():
    p1, p2 = np.array([[0.2, 0.8]]), np.array([[0.6, 0.4]])
    out = federation.weighted_prediction([p1, p2], [0.25, 0.75])
    assert np.allclose(out, [[0.5, 0.5]], rtol=0, atol=1e-15)


def test_evaluate_matches_confusion_matrix():
    ds = synth_dataset(0, 60, height=12, width=12)
    m = small_init(5)
    pred = nncore.predict(m, ds.images).argmax(axis=1)
    got = federation.evaluate(lambda x: nncore.predict(m, x), ds, batch_size=7)
    assert got == pytest.approx(confusion_matrix_accuracy(pred, ds.labels, 3), abs=1e-15)


def test_participant_shape_mismatch():
    part = participant()
    with pytest.raises(ContractError):
        federation.fine_tune(nncore.build_model(nncore.mnist_architecture(3), (14, 14, 1), 0), part)


def test_pipeline_runs_and_is_deterministic(monkeypatch):
    cfg = small_config(record_curves=True)
    monkeypatch.setenv("EDP_THREADS", "1")
    art = {}
    a = federation.run_pipeline(cfg, artifacts=art)
    monkeypatch.setenv("EDP_THREADS", "3")
    b = federation.run_pipeline(cfg)
    assert len(a.private_accs) == 3
    assert (a.initial_acc, a.private_accs, a.final_acc, a.epsilon) == (b.initial_acc, b.private_accs, b.final_acc,
                                                                     b.epsilon)
    assert len(a.curves) == 3 * 2
    assert set(art) >= {"splits", "initial", "private_models", "ensemble"}
    assert 0 <= a.final_acc <= 1


def test_pipeline_seed_changes_result():
    a = federation.run_pipeline(small_config(seed=0))
    b = federation.run_pipeline(small_config(seed=1))
    assert (a.initial_acc, a.private_accs) != (b.initial_acc, b.private_accs)


def test_pipeline_stage_error():
    cfg = small_config(plan=PartitionPlan(30, 12, 30, 10, 2))
    with pytest.raises(StageError) as exc:
        federation.run_pipeline(cfg)
    assert exc.value.stage == "partition"


def test_thread_cap(monkeypatch):
    monkeypatch.setenv("EDP_THREADS", "2")
    assert federation.thread_cap() == 2
    monkeypatch.setenv("EDP_THREADS", "x")
    with pytest.raises(ContractError):
        federation.thread_cap()
