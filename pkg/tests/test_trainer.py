import dataclasses

import numpy as np
import pytest

from sfsvi.coreset import ContextConfig
from sfsvi.diffcore.mlp import MlpArchitecture
from sfsvi.errors import ConfigError, NumericalError
from sfsvi.tasks import SequenceSpec, TaskSpec, make_toy_sequence
from sfsvi.trainer import (
    AdamState,
    MethodConfig,
    Streams,
    TrainConfig,
    accuracy,
    adam_step,
    default_epochs,
    first_task_prior,
    run_sequence,
    train_task,
)
from sfsvi.variational import MeanFieldGaussian, snapshot

TOY_ARCH = MlpArchitecture(2, (20, 20), (2,))


def toy_config(epochs, **kw):
    return MethodConfig(
        train=TrainConfig(epochs=epochs), context=ContextConfig(mode="noise", noise_range=(-4, 4)), prior_v0=0.1, **kw
    )


def small_toy(n_tasks=2, n=600):
    tasks = make_toy_sequence(0, n_tasks)
    stride = max(1, tasks[0].n_train // n)
    return [dataclasses.replace(t, X_train=t.X_train[::stride], y_train=t.y_train[::stride]) for t in tasks]


def test_adam_zero_gradient_is_a_fixed_point():
    cfg = TrainConfig()
    state = AdamState.zeros_like([np.zeros(2)])
    (p,) = adam_step(state, [np.array([1.5, -2.0])], [np.zeros(2)], cfg)
    assert p.tolist() == [1.5, -2.0] and state.step == 1


def test_adam_moments_decay_under_zero_gradient():
    state = AdamState([np.array([0.4])], [np.array([0.09])], step=3)
    adam_step(state, [np.array([1.5])], [np.zeros(1)], TrainConfig())
    assert state.m[0][0] == pytest.approx(0.36) and state.v[0][0] == pytest.approx(0.09 * 0.999)


def test_adam_first_step_is_signed_lr():
    cfg = TrainConfig(lr=0.01)
    g = np.array([3.0, -0.2, 1e-3])
    state = AdamState.zeros_like([np.zeros(3)])
    (p,) = adam_step(state, [np.zeros(3)], [g], cfg)
    np.testing.assert_allclose(p, -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)


def test_adam_minimizes_quadratic_bowl():
    cfg = TrainConfig(lr=0.01)
    theta = np.array([1.0, -2.0, 0.5])
    state = AdamState.zeros_like([theta])
    for _ in range(2000):
        (theta,) = adam_step(state, [theta], [2 * theta], cfg)
    assert np.abs(theta).max() < 1e-3


def test_adam_aborts_on_nan():
    state = AdamState.zeros_like([np.zeros(2)])
    with pytest.raises(NumericalError, match="non-finite gradient"):
        adam_step(state, [np.zeros(2)], [np.array([0.0, np.nan])], TrainConfig())
    assert state.step == 0


def test_config_guards():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(lr=0.0)
    with pytest.raises(ConfigError):
        MethodConfig(method="ewc")
    with pytest.raises(ConfigError):
        MethodConfig(coreset_capacity=None, context=ContextConfig(mode="coreset"))


def test_epoch_defaults():
    assert default_epochs(SequenceSpec("toy2d")) == 250
    assert default_epochs(SequenceSpec("split_mnist")) == 60
    assert default_epochs(SequenceSpec("split_mnist", "single")) == 80
    assert default_epochs(SequenceSpec("permuted_mnist")) == 10


def test_streams_are_independent_and_reproducible():
    a, b = Streams.from_seed(3), Streams.from_seed(3)
    assert a.mc.standard_normal(4).tobytes() == b.mc.standard_normal(4).tobytes()
    assert a.init.standard_normal(4).tobytes() != a.batch.standard_normal(4).tobytes()


def test_single_task_sequence_gives_one_by_one_matrix():
    tasks = small_toy(1)
    cfg = toy_config(3)
    res = run_sequence(tasks, TOY_ARCH, cfg, seed=0)
    assert res.R.n_tasks == 1 and res.R.is_complete()
    assert len(res.logs) == 3 and {"task", "epoch", "loss", "kl", "loglik"} <= res.logs[0].keys()
    assert "acc_per_task" in res.logs[-1] and "acc_per_task" not in res.logs[0]
    assert all(np.isfinite(r["loss"]) for r in res.logs)


def test_prior_snapshot_untouched_by_training():
    tasks = small_toy(2)
    cfg = toy_config(2)
    streams = Streams.from_seed(0)
    q = MeanFieldGaussian.initialize(TOY_ARCH, streams.init)
    prior = snapshot(q, task=1)
    digest = prior.digest()
    q2, _ = train_task(q, TOY_ARCH, tasks[1], prior, None, dataclasses.replace(cfg, context=ContextConfig(mode="current_task")), streams)
    assert prior.digest() == digest and not np.array_equal(q2.mu, prior.mu)


def test_repeating_a_task_does_not_forget():
    t = small_toy(1, n=1200)[0]
    repeat = dataclasses.replace(t, index=2)
    res = run_sequence([t, repeat], TOY_ARCH, toy_config(100), seed=1)
    assert res.R[1, 1] > 0.95
    assert abs(res.R[2, 1] - res.R[1, 1]) <= 0.01


def test_runs_are_bitwise_reproducible():
    tasks = small_toy(2, n=200)
    a = run_sequence(tasks, TOY_ARCH, toy_config(2), seed=5)
    b = run_sequence(tasks, TOY_ARCH, toy_config(2), seed=5)
    assert a.R.to_csv() == b.R.to_csv()
    assert [s.digest() for s in a.snapshots] == [s.digest() for s in b.snapshots]
    assert a.coreset.digest(1) == b.coreset.digest(1)


def test_vcl_first_prior_is_standard_normal():
    prior = first_task_prior(MethodConfig(method="vcl", coreset_capacity=None, context=ContextConfig(mode="current_task")), TOY_ARCH)
    assert np.all(prior.mu == 0) and np.allclose(prior.sigma, 1.0)


def test_first_toy_task_learned_at_full_budget():
    task = make_toy_sequence(0, 1)[0]
    streams = Streams.from_seed(0)
    cfg = toy_config(250)
    q = MeanFieldGaussian.initialize(TOY_ARCH, streams.init)
    q, _ = train_task(q, TOY_ARCH, task, first_task_prior(cfg, TOY_ARCH), None, cfg, streams)
    train_view = TaskSpec(1, task.X_train, task.y_train, task.X_train, task.y_train, 0)
    assert accuracy(q, TOY_ARCH, train_view, streams.eval.standard_normal((5, TOY_ARCH.n_params))) >= 0.99
