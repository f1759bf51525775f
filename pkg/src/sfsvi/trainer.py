"""Per-task optimization with Adam, and the outer loop over a task sequence."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .coreset import ContextConfig, Coreset, SelectionPolicy, build_context, score_points, select
from .diffcore import autodiff as ad
from .diffcore.mlp import MlpArchitecture
from .errors import ConfigError, NumericalError
from .metrics import AccuracyMatrix
from .objective import ObjectiveConfig, predictive_probs, sfsvi_objective, vcl_objective
from .tasks import SequenceSpec, TaskSpec
from .variational import (
    DEFAULT_INIT_SCALE,
    FunctionSpacePrior,
    MeanFieldGaussian,
    PosteriorSnapshot,
    snapshot,
)

METHODS = ("sfsvi", "vcl")
STREAMS = ("init", "mc", "batch", "context", "coreset", "eval")
EPOCH_DEFAULTS = {
    ("toy2d", "single"): 250,
    ("split_mnist", "multi"): 60,
    ("split_fmnist", "multi"): 60,
    ("permuted_mnist", "single"): 10,
    ("split_mnist", "single"): 80,
}


def default_epochs(sequence: SequenceSpec) -> int:
    return EPOCH_DEFAULTS.get((sequence.kind, sequence.head_mode), 60)


# Adam -------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 128
    epochs: int = 60
    eval_samples: int = 5
    eval_every: int = 0
    init_scale: float = DEFAULT_INIT_SCALE

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.eval_samples < 1 or self.eval_every < 0:
            raise ConfigError("eval_samples must be >= 1 and eval_every >= 0")
        if not self.init_scale > 0:
            raise ConfigError("init_scale must be > 0")


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(
    state: AdamState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray], config: TrainConfig
) -> list[np.ndarray]:
    """One bias-corrected Adam update; returns new parameter arrays and advances ``state``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and Adam moments must align")
    for i, g in enumerate(grads):
        if not np.isfinite(g).all():
            bad = int(np.count_nonzero(~np.isfinite(g)))
            raise NumericalError(f"non-finite gradient in parameter group {i} ({bad} entries) at step {state.step + 1}")
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    c1, c2 = 1 - b1**state.step, 1 - b2**state.step
    out = []
    for k, (p, g) in enumerate(zip(params, grads)):
        state.m[k] = b1 * state.m[k] + (1 - b1) * g
        state.v[k] = b2 * state.v[k] + (1 - b2) * g * g
        out.append(p - config.lr * (state.m[k] / c1) / (np.sqrt(state.v[k] / c2) + config.adam_eps))
    return out


# RNG streams ------------------------------------------------------------------


@dataclass
class Streams:
    """Independent generators per concern, all derived from one seed."""

    init: np.random.Generator
    mc: np.random.Generator
    batch: np.random.Generator
    context: np.random.Generator
    coreset: np.random.Generator
    eval: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int | Sequence[int]) -> "Streams":
        children = np.random.SeedSequence(seed).spawn(len(STREAMS))
        return cls(*(np.random.default_rng(c) for c in children))


# per-task training ----------------------------------------------------------------


@dataclass(frozen=True)
class MethodConfig:
    """Everything besides data that fixes how one task is trained."""

    method: str = "sfsvi"
    train: TrainConfig = field(default_factory=TrainConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    context: ContextConfig = field(default_factory=ContextConfig)
    coreset_capacity: int | None = 40
    policy: SelectionPolicy = field(default_factory=SelectionPolicy)
    prior_v0: float = 1e-3

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.coreset_capacity is not None and self.coreset_capacity < 1:
            raise ConfigError("coreset capacity must be >= 1 when given")
        if self.method == "sfsvi" and self.coreset_capacity is None and self.context.mode != "current_task":
            raise ConfigError(f"context mode {self.context.mode!r} needs a coreset")
        FunctionSpacePrior(self.prior_v0)


def first_task_prior(cfg: MethodConfig, arch: MlpArchitecture):
    if cfg.method == "vcl":
        return snapshot(MeanFieldGaussian.isotropic(arch.n_params), task=0)
    return FunctionSpacePrior(cfg.prior_v0)


def accuracy(q, arch: MlpArchitecture, task: TaskSpec, eps: np.ndarray) -> float:
    probs = predictive_probs(q, arch, task.X_test, task.head, eps)
    return float(np.mean(np.argmax(probs, axis=1) == task.y_test))


def train_task(
    q: MeanFieldGaussian,
    arch: MlpArchitecture,
    task: TaskSpec,
    prior,
    coreset: Coreset | None,
    cfg: MethodConfig,
    streams: Streams,
    evaluate: Callable[[MeanFieldGaussian], list[float]] | None = None,
) -> tuple[MeanFieldGaussian, list[dict]]:
    """Run ``epochs * ceil(N / batch)`` Adam steps on ``task``; returns the new posterior and epoch logs."""
    tc, oc = cfg.train, cfg.objective
    n = task.n_train
    steps = math.ceil(n / tc.batch_size)
    mu, rho = np.array(q.mu, dtype=np.float64), np.array(q.rho, dtype=np.float64)
    adam = AdamState.zeros_like([mu, rho])
    logs = []
    for epoch in range(1, tc.epochs + 1):
        order = streams.batch.permutation(n)
        sums = np.zeros(3)
        for s in range(steps):
            idx = order[s * tc.batch_size : (s + 1) * tc.batch_size]
            batch = (task.X_train[idx], task.y_train[idx])
            eps = streams.mc.standard_normal((oc.mc_samples, arch.n_params))
            leaves = MeanFieldGaussian(ad.leaf(mu), ad.leaf(rho))
            if cfg.method == "vcl":
                terms = vcl_objective(leaves, prior, arch, batch, task.head, eps, task.data_scale)
            else:
                ctx = build_context(coreset, cfg.context, task.X_train, task.index, streams.context)
                X_ctx = ctx.X
                if oc.context_budget is not None:
                    X_ctx = X_ctx[: oc.context_budget]
                terms = sfsvi_objective(
                    leaves, prior, arch, batch, X_ctx, task.head, task.context_heads, eps, oc, n_data=task.data_scale
                )
            if not np.isfinite(terms.loss.value):
                raise NumericalError(f"non-finite loss on task {task.index}, epoch {epoch}, step {s + 1}")
            g_mu, g_rho = ad.grad(terms.loss, [leaves.mu, leaves.rho])
            mu, rho = adam_step(adam, [mu, rho], [g_mu, g_rho], tc)
            sums += (float(terms.loss.value), terms.kl, terms.loglik)
        record = {
            "task": task.index,
            "epoch": epoch,
            "loss": sums[0] / steps,
            "kl": sums[1] / steps,
            "loglik": sums[2] / steps,
        }
        due = epoch == tc.epochs or (tc.eval_every and epoch % tc.eval_every == 0)
        if evaluate is not None and due:
            record["acc_per_task"] = evaluate(MeanFieldGaussian(mu, rho))
        logs.append(record)
    out = MeanFieldGaussian(mu, rho)
    out.clamp_()
    return out, logs


def update_coreset(
    coreset: Coreset,
    q: MeanFieldGaussian,
    arch: MlpArchitecture,
    task: TaskSpec,
    prior,
    cfg: MethodConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """Score the task's training set and store ``capacity`` points drawn from the policy PMF."""
    policy = cfg.policy
    if policy.seed is not None:
        rng = np.random.default_rng([policy.seed, task.index])
    eps = rng.standard_normal((cfg.train.eval_samples, arch.n_params))
    n = min(coreset.capacity, task.n_train)
    if policy.method == "random":
        idx = rng.choice(task.n_train, n, replace=False)
    else:
        scores = score_points(
            q, arch, task.X_train, task.y_train, task.head, policy.method,
            prior=prior, context_heads=task.context_heads, eps=eps,
        )
        idx = select(scores, n, policy.direction, rng)
    coreset.add(task.index, task.X_train[idx], task.y_train[idx])
    return idx


@dataclass
class RunResult:
    R: AccuracyMatrix
    logs: list[dict]
    snapshots: list[PosteriorSnapshot]
    coreset: Coreset | None
    arch: MlpArchitecture


def run_sequence(
    tasks: Sequence[TaskSpec],
    arch: MlpArchitecture,
    cfg: MethodConfig,
    seed: int,
    independent: bool = False,
    progress: Callable[[str], None] | None = None,
) -> RunResult:
    """Train through ``tasks`` in order, filling the accuracy matrix after each task."""
    streams = Streams.from_seed(seed)
    T = len(tasks)
    R = AccuracyMatrix(T)
    q = MeanFieldGaussian.initialize(arch, streams.init, cfg.train.init_scale)
    prior = first_task_prior(cfg, arch)
    coreset = Coreset(cfg.coreset_capacity) if cfg.coreset_capacity and cfg.method == "sfsvi" else None
    logs, snaps = [], []
    for t, task in enumerate(tasks, 1):
        seen = tasks[:t]

        def evaluate(model, seen=seen):
            eps = streams.eval.standard_normal((cfg.train.eval_samples, arch.n_params))
            return [accuracy(model, arch, s, eps) for s in seen]

        q, task_logs = train_task(q, arch, task, prior, coreset, cfg, streams, evaluate)
        for j, acc in enumerate(task_logs[-1]["acc_per_task"], 1):
            R[t, j] = acc
        logs.extend(task_logs)
        snap = snapshot(q, task=t, arch_fingerprint=arch.fingerprint())
        snaps.append(snap)
        if coreset is not None:
            update_coreset(coreset, q, arch, task, prior, cfg, streams.coreset)
        prior = snap
        if progress:
            progress(f"task {t}/{T}: " + " ".join(f"{a:.4f}" for a in task_logs[-1]["acc_per_task"]))
    if independent:
        R.independent = np.array([independent_accuracy(task, arch, cfg, seed) for task in tasks])
    return RunResult(R, logs, snaps, coreset, arch)


def independent_accuracy(task: TaskSpec, arch: MlpArchitecture, cfg: MethodConfig, seed: int) -> float:
    """Test accuracy of a fresh model trained on ``task`` alone with the same settings."""
    streams = Streams.from_seed([seed, 1000 + task.index])
    alone = replace(task, index=1, context_heads=(task.head,))
    q = MeanFieldGaussian.initialize(arch, streams.init, cfg.train.init_scale)
    q, _ = train_task(q, arch, alone, first_task_prior(cfg, arch), None, cfg, streams)
    eps = streams.eval.standard_normal((cfg.train.eval_samples, arch.n_params))
    return accuracy(q, arch, alone, eps)
