"""Coreset storage, score-based selection, and per-step context assembly."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .diffcore.mlp import MlpArchitecture
from .errors import CapacityError, ConfigError, FormatError, ShapeError, StateError
from .io import atomic_write_jsonl
from .objective import gaussian_kl_cells, posterior_distribution, predictive_probs, prior_distribution
from .variational import FunctionSpacePrior, MeanFieldGaussian, PosteriorSnapshot

METHODS = ("random", "entropy", "elbo", "kl")
DIRECTIONS = ("lowest", "highest")
CONTEXT_MODES = ("coreset", "noise", "current_task")
SCORE_CHUNK = 512


class Coreset:
    """Per-task stores of ``(inputs, labels)``; a task's entry is frozen once written."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ConfigError(f"coreset capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._tasks: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def __len__(self) -> int:
        return sum(len(y) for _, y in self._tasks.values())

    @property
    def tasks(self) -> list[int]:
        return sorted(self._tasks)

    def add(self, task: int, X: np.ndarray, y: np.ndarray) -> None:
        if task in self._tasks:
            raise StateError(f"coreset for task {task} is already frozen")
        X, y = np.array(X, dtype=np.float64), np.array(y, dtype=np.int64)
        if X.ndim != 2 or len(X) != len(y):
            raise ShapeError("coreset inputs must be 2-d with one label per row")
        if len(y) > self.capacity:
            raise CapacityError(f"{len(y)} points exceed capacity {self.capacity}")
        if self._tasks:
            dim = next(iter(self._tasks.values()))[0].shape[1]
            if X.shape[1] != dim:
                raise ShapeError(f"input dimension {X.shape[1]} differs from stored {dim}")
        X.setflags(write=False)
        y.setflags(write=False)
        self._tasks[task] = (X, y)

    def points(self, task: int) -> tuple[np.ndarray, np.ndarray]:
        return self._tasks[task]

    def inputs(self, tasks: Sequence[int] | None = None) -> np.ndarray:
        keys = self.tasks if tasks is None else tasks
        if not keys:
            return np.zeros((0, 0))
        return np.concatenate([self._tasks[k][0] for k in keys])

    def digest(self, task: int) -> str:
        X, y = self._tasks[task]
        return hashlib.sha256(X.tobytes() + y.tobytes()).hexdigest()

    def records(self) -> list[dict]:
        return [
            {"task": task, "input": x.tolist(), "label": int(label)}
            for task in self.tasks
            for x, label in zip(*self._tasks[task])
        ]

    def save(self, path: str | Path) -> None:
        atomic_write_jsonl(path, self.records())

    @classmethod
    def load(cls, path: str | Path, capacity: int) -> "Coreset":
        grouped: dict[int, tuple[list, list]] = {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                xs, ys = grouped.setdefault(int(rec["task"]), ([], []))
                xs.append([float(v) for v in rec["input"]])
                ys.append(int(rec["label"]))
            except (KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"{path}:{lineno}: bad coreset record ({exc})") from exc
        store = cls(capacity)
        for task in sorted(grouped):
            store.add(task, *grouped[task])
        return store


@dataclass(frozen=True)
class SelectionPolicy:
    method: str = "random"
    direction: str = "highest"
    seed: int | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown selection method {self.method!r}")
        if self.direction not in DIRECTIONS:
            raise ConfigError(f"direction must be 'lowest' or 'highest', got {self.direction!r}")


@dataclass(frozen=True)
class ContextConfig:
    """How context points are drawn at every step.

    ``coreset`` draws ``points_per_step`` from the union of stored points
    (noise on the first task). ``noise`` draws ``coreset_per_task`` points
    from each earlier task plus ``noise_per_task * t`` uniform points.
    ``current_task`` draws from the current training set.
    """

    mode: str = "coreset"
    points_per_step: int = 40
    noise_range: tuple[float, float] = (0.0, 1.0)
    coreset_per_task: int = 20
    noise_per_task: int = 30

    def __post_init__(self):
        if self.mode not in CONTEXT_MODES:
            raise ConfigError(f"unknown context mode {self.mode!r}")
        if self.points_per_step < 1:
            raise ConfigError("points_per_step must be >= 1")
        lo, hi = self.noise_range
        if not lo < hi:
            raise ConfigError(f"noise_range must satisfy lo < hi, got {self.noise_range}")
        object.__setattr__(self, "noise_range", (float(lo), float(hi)))


# scoring and selection ------------------------------------------------------


def entropy(p: np.ndarray) -> np.ndarray:
    """Row-wise Shannon entropy in nats, with ``0 log 0 = 0``."""
    logp = np.log(np.where(p > 0, p, 1.0))
    return np.maximum(-(p * logp).sum(axis=1), 0.0)


def _pointwise_kl(q, prior, arch, X, heads) -> np.ndarray:
    out = []
    for start in range(0, len(X), SCORE_CHUNK):
        chunk = X[start : start + SCORE_CHUNK]
        post = posterior_distribution(q, arch, chunk, heads)
        pri = prior_distribution(prior, arch, chunk, heads)
        mean = getattr(post.mean, "value", post.mean)
        cells = gaussian_kl_cells(mean, post.cov_diag.value, pri.mean, pri.cov_diag)
        out.append(cells.value.sum(axis=1))
    return np.concatenate(out)


def predictive_probs_per_sample(q, arch, X, head, eps) -> np.ndarray:
    """``(S, n, C)`` softmax outputs, one slice per row of ``eps``."""
    return np.stack([predictive_probs(q, arch, X, head, row[None]) for row in np.atleast_2d(eps)])


def score_points(
    q: MeanFieldGaussian,
    arch: MlpArchitecture,
    X: np.ndarray,
    y: np.ndarray,
    head: int,
    method: str,
    *,
    prior: FunctionSpacePrior | PosteriorSnapshot | None = None,
    context_heads: Sequence[int] = (0,),
    eps: np.ndarray | None = None,
) -> np.ndarray:
    """Non-negative score per candidate.

    ``entropy`` is the entropy of the MC-averaged predictive over the rows
    of ``eps``. ``kl`` is the function-space KL to ``prior`` at the point.
    ``elbo`` is the negated single-point objective (expected negative
    log-likelihood plus that KL), so larger means a worse fit.
    """
    if len(X) == 0:
        raise ShapeError("no candidates to score")
    if method == "random":
        return np.ones(len(X))
    if method not in METHODS:
        raise ConfigError(f"unknown selection method {method!r}")
    if eps is None:
        eps = np.zeros((1, arch.n_params))
    if method == "entropy":
        return entropy(predictive_probs(q, arch, X, head, eps))
    if prior is None:
        raise ConfigError(f"{method} scoring needs a prior")
    kl = _pointwise_kl(q, prior, arch, X, list(context_heads))
    if method == "kl":
        return np.maximum(kl, 0.0)
    probs = predictive_probs_per_sample(q, arch, X, head, eps)
    nll = -np.mean(np.log(np.maximum(probs[:, np.arange(len(y)), y], 1e-300)), axis=0)
    return np.maximum(nll + kl, 0.0)


def selection_pmf(scores: np.ndarray, direction: str) -> np.ndarray:
    """Probabilities proportional to ``s`` (highest) or ``max(s) - s`` (lowest).

    An all-zero weight vector falls back to uniform.
    """
    s = np.asarray(scores, dtype=np.float64)
    if not np.isfinite(s).all() or (s < 0).any():
        raise ShapeError("scores must be finite and non-negative")
    w = s if direction == "highest" else s.max() - s
    total = w.sum()
    if total <= 0:
        return np.full(len(s), 1.0 / len(s))
    return w / total


def select(scores: np.ndarray, n: int, direction: str, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` distinct indices one at a time, renormalizing the PMF after each draw."""
    scores = np.asarray(scores, dtype=np.float64)
    if n > len(scores):
        raise CapacityError(f"cannot select {n} of {len(scores)} candidates")
    w = selection_pmf(scores, direction) * len(scores)
    available = np.ones(len(scores), dtype=bool)
    chosen = np.empty(n, dtype=np.int64)
    for i in range(n):
        mass = np.where(available, w, 0.0)
        total = mass.sum()
        p = mass / total if total > 0 else available / available.sum()
        idx = int(rng.choice(len(scores), p=p))
        chosen[i] = idx
        available[idx] = False
    return chosen


# context assembly ---------------------------------------------------------


class ContextBatch(NamedTuple):
    X: np.ndarray
    n_coreset: int
    n_noise: int
    n_current: int


def _uniform(rng, n, dim, bounds) -> np.ndarray:
    return rng.uniform(bounds[0], bounds[1], size=(n, dim))


def _draw(rng, X, n) -> np.ndarray:
    if n >= len(X):
        return X[rng.permutation(len(X))]
    return X[rng.choice(len(X), n, replace=False)]


def build_context(
    coreset: Coreset | None,
    config: ContextConfig,
    train_X: np.ndarray,
    task: int,
    rng: np.random.Generator,
) -> ContextBatch:
    """Context inputs for one step of training on task ``task`` (1-based)."""
    dim = train_X.shape[1]
    if config.mode == "current_task":
        X = _draw(rng, train_X, config.points_per_step)
        return ContextBatch(X, 0, 0, len(X))
    if config.mode == "noise":
        parts = []
        for k in range(1, task):
            if coreset is None or k not in coreset.tasks:
                raise ConfigError(f"noise context at task {task} needs a coreset for task {k}")
            parts.append(_draw(rng, coreset.points(k)[0], config.coreset_per_task))
        n_core = sum(len(p) for p in parts)
        noise = _uniform(rng, config.noise_per_task * task, dim, config.noise_range)
        return ContextBatch(np.concatenate(parts + [noise]), n_core, len(noise), 0)
    if task == 1:
        return ContextBatch(_uniform(rng, config.points_per_step, dim, config.noise_range), 0, config.points_per_step, 0)
    if coreset is None or len(coreset) == 0:
        raise ConfigError(f"coreset context at task {task} needs a non-empty coreset")
    X = _draw(rng, coreset.inputs(), config.points_per_step)
    return ContextBatch(X, len(X), 0, 0)
