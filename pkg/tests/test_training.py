import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sespp import tensor as T
from sespp.data import Augmenter, CohortSpec, Normalizer, generate_cohort, to_arrays
from sespp.models import ModelConfig, build_model
from sespp.tensor import Tensor
from sespp.training import (
    SGD,
    DivergenceError,
    EarlyStopping,
    PlateauScheduler,
    TrainConfig,
    bce_loss,
    early_stop_check,
    evaluate_loss,
    plateau_update,
    sgd_step,
    train,
)

import oracles


def t(values):
    return Tensor(np.array(values, dtype=np.float64).reshape(-1, 1), dtype=np.float64)


# -- loss -----------------------------------------------------------------


def test_bce_half():
    assert bce_loss(t([0.5]), t([1])).item() == pytest.approx(math.log(2), abs=1e-12)


def test_bce_exact_prediction_is_near_zero():
    assert bce_loss(t([1.0, 0.0]), t([1, 0])).item() == pytest.approx(1e-7, abs=1e-9)


def test_bce_worked_example():
    assert bce_loss(t([0.9, 0.2]), t([1, 0])).item() == pytest.approx(0.164252, abs=1e-6)


def test_bce_rejects_soft_labels():
    with pytest.raises(ValueError):
        bce_loss(t([0.5]), t([0.5]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1)), min_size=1, max_size=20))
def test_bce_non_negative_and_finite(pairs):
    p, y = zip(*pairs)
    v = bce_loss(t(p), t(y)).item()
    assert v >= 0 and math.isfinite(v)


# -- optimizer ------------------------------------------------------------


def test_sgd_vanilla_step():
    w, v = np.array([1.0]), np.zeros(1)
    sgd_step(w, np.array([0.5]), v, lr=0.1, momentum=0.0, weight_decay=0.0)
    assert w[0] == pytest.approx(0.95)


def test_sgd_velocity_decay():
    w, v = np.array([0.0]), np.array([1.0])
    sgd_step(w, np.array([0.0]), v, lr=0.1, momentum=0.9, weight_decay=0.0)
    assert v[0] == pytest.approx(0.9)
    assert w[0] == pytest.approx(-0.09)


def test_sgd_two_momentum_steps():
    w, v = np.array([0.0]), np.zeros(1)
    trace = []
    for _ in range(2):
        sgd_step(w, np.array([1.0]), v, lr=0.1, momentum=0.9, weight_decay=0.0)
        trace.append(w[0])
    assert trace == pytest.approx([-0.1, -0.29])


def test_weight_decay_shrinks_norm():
    w = np.random.default_rng(0).standard_normal(10)
    v = np.zeros(10)
    norms = []
    for _ in range(30):
        sgd_step(w, np.zeros(10), v, lr=0.1, momentum=0.9, weight_decay=1e-2)
        norms.append(np.linalg.norm(w))
    assert all(b < a for a, b in zip(norms, norms[1:]))


def test_velocity_buffers_mirror_params(rng):
    m = build_model(ModelConfig.preset("desk"))
    opt = SGD(m.named_parameters(), 0.01)
    for name, p in m.named_parameters():
        assert opt.velocity[name].shape == p.shape
        assert not opt.velocity[name].any()


def test_nan_gradient_names_parameter(rng):
    m = build_model(ModelConfig.preset("desk"))
    opt = SGD(m.named_parameters(), 0.01)
    m.head.bias.grad = np.array([np.nan], dtype=np.float32)
    with pytest.raises(DivergenceError, match="head.bias"):
        opt.step()


@pytest.mark.parametrize("seed", range(5))
def test_small_step_decreases_loss(seed):
    rng = np.random.default_rng(seed)
    m = build_model(ModelConfig.preset("desk"), seed=seed)
    m.eval()  # frozen batch statistics so the loss is a fixed function of the weights
    x = Tensor(rng.standard_normal((4, 2, 32, 32)).astype(np.float32))
    y = Tensor(np.array([[1], [0], [1], [0]], dtype=np.float32))
    opt = SGD(m.named_parameters(), lr=1e-4, momentum=0.9, weight_decay=1e-4)
    loss0 = T.bce(T.sigmoid(m.forward(x)), y)
    T.backward(loss0)
    opt.step()
    with T.no_grad():
        loss1 = T.bce(T.sigmoid(m.forward(x)), y)
    assert loss1.item() < loss0.item()


# -- schedules ------------------------------------------------------------


def test_decreasing_losses_keep_lr():
    assert plateau_update(np.linspace(1, 0.1, 50), 0.01) == 0.01


def test_flat_eleven_epochs_decays_once():
    assert plateau_update([1.0] * 10, 0.01) == 0.01
    assert plateau_update([1.0] * 11, 0.01) == pytest.approx(0.001)


def test_flat_twenty_two_epochs():
    assert plateau_update([1.0] * 22, 0.01) == pytest.approx(0.0001)
    assert not early_stop_check([1.0] * 20)
    assert early_stop_check([1.0] * 21)


def test_late_improvement_prevents_stop():
    losses = [1.0] * 19 + [0.5, 0.5]
    assert not early_stop_check(losses)


def test_sawtooth_never_stops():
    losses, v = [], 1.0
    for epoch in range(1, 61):
        if epoch % 19 == 0:
            v -= 0.01
        losses.append(v)
    stopper = EarlyStopping(20)
    assert not any(stopper.step(x) for x in losses)


def test_improvement_needs_tolerance():
    sched = PlateauScheduler(1.0, patience=2)
    sched.step(1.0)
    sched.step(1.0 - 1e-7)
    sched.step(1.0 - 2e-7)
    assert sched.lr == pytest.approx(0.1)


def _run_pair(losses, lr=0.01):
    sched, stopper = PlateauScheduler(lr), EarlyStopping()
    return [(sched.step(v), stopper.step(v)) for v in losses]


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_state_machine_matches_reference(seed):
    rng = np.random.default_rng(seed)
    walk = np.cumsum(rng.normal(0, 0.05, 60)) + 1.0
    # sprinkle exact repeats so ties are exercised
    walk[rng.random(60) < 0.3] = walk.min() + rng.choice([0.0, 1e-7, 0.1])
    ours = _run_pair(walk)
    ref = oracles.plateau_reference(walk, 0.01)
    assert [s for _, s in ours] == [s for _, s in ref]
    assert np.allclose([lr for lr, _ in ours], [lr for lr, _ in ref], rtol=1e-12, atol=0)


# -- loop -----------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_fold():
    recs = generate_cohort(CohortSpec(6, 8, (1, 1), 32, 1.0, 2))
    ids = [r.patient_id for r in recs]
    X, y, _ = to_arrays(recs, ids[:10])
    Xv, yv, _ = to_arrays(recs, ids[10:])
    return X, y, Xv, yv


def _fit(tiny_fold, epochs=10, seed=0, **kw):
    X, y, Xv, yv = tiny_fold
    model = build_model(ModelConfig.preset("desk"), seed=seed)
    aug = Augmenter(Normalizer.fit(X))
    cfg = TrainConfig.for_backbone("densenet", "desk", epochs=epochs, batch_size=4, seed=seed, **kw)
    state, hist = train(model, (X, y), (Xv, yv), cfg, aug)
    return model, state, hist, aug


def test_training_reduces_loss_and_is_reproducible(tiny_fold):
    _, s1, h1, aug = _fit(tiny_fold)
    _, s2, h2, _ = _fit(tiny_fold)
    assert h1.train_loss[9] < h1.train_loss[0]
    assert h1.train_loss == h2.train_loss and h1.val_loss == h2.val_loss and h1.lr == h2.lr
    for k in s1:
        np.testing.assert_array_equal(s1[k], s2[k])
    # flips happen once per training batch and never during validation
    assert aug.flip_calls == 10 * math.ceil(len(tiny_fold[0]) / 4)


def test_best_checkpoint_is_returned(tiny_fold):
    X, y, Xv, yv = tiny_fold
    model, state, hist, aug = _fit(tiny_fold, epochs=6, lr0=0.05)
    assert hist.val_loss[hist.best_epoch - 1] == min(hist.val_loss)
    assert evaluate_loss(model, Xv, yv, aug, 64) == pytest.approx(min(hist.val_loss), abs=1e-6)


def test_lr_trace_and_early_stop(tiny_fold):
    _, _, hist, _ = _fit(tiny_fold, epochs=12, lr0=1e-9, plateau_patience=2, early_stop_patience=4)
    assert hist.stop_reason == "early_stopped"
    for a, b in zip(hist.lr, hist.lr[1:]):
        assert b == a or b == pytest.approx(a * 0.1)
    assert len(hist.lr) < 12


def test_history_csv(tiny_fold):
    _, _, hist, _ = _fit(tiny_fold, epochs=2)
    lines = hist.to_csv().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss,lr"
    assert len(lines) == 3 and lines[1].startswith("1,")


@pytest.mark.parametrize("kw", [dict(epochs=0), dict(momentum=1.0), dict(plateau_patience=20), dict(lr0=-1)])
def test_invalid_train_config(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw).validate()


def test_table_batch_sizes():
    assert TrainConfig.for_backbone("densenet", "paper").batch_size == 48
    assert TrainConfig.for_backbone("resnet18", "paper").batch_size == 64
    assert TrainConfig.for_backbone("densenet", "desk").batch_size == 16
    cfg = TrainConfig()
    assert (cfg.epochs, cfg.lr0, cfg.momentum, cfg.weight_decay) == (50, 0.01, 0.9, 1e-4)
    assert (cfg.plateau_patience, cfg.plateau_factor, cfg.early_stop_patience) == (10, 0.1, 20)
