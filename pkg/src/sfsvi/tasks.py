"""Datasets and task sequences: IDX ingestion, split/permuted MNIST, and a 2D toy sequence."""

from __future__ import annotations

import gzip
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .diffcore.mlp import MlpArchitecture
from .errors import ConfigError, DataError, FormatError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
DATA_ENV = "FSVI_DATA_DIR"

KINDS = ("toy2d", "split_mnist", "split_fmnist", "permuted_mnist")
SINGLE_HEAD_ONLY = ("toy2d", "permuted_mnist")
DATASET_DIRS = {"split_mnist": "mnist", "permuted_mnist": "mnist", "split_fmnist": "fashion_mnist"}

TOY_RANGE = (-4.0, 4.0)
TOY_TRAIN_PER_TASK = 3600
TOY_TEST_PER_TASK = 1000


# IDX files ------------------------------------------------------------------


def _read_bytes(path: Path) -> bytes:
    raw = path.read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def load_idx(path: str | Path) -> np.ndarray:
    """Read an IDX file: images become ``(n, rows*cols)`` floats in [0, 1], labels int64.

    Gzipped files are accepted transparently.
    """
    path = Path(path)
    try:
        raw = _read_bytes(path)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if len(raw) < 8:
        raise FormatError(f"{path}: too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic == IMAGE_MAGIC:
        if len(raw) < 16:
            raise FormatError(f"{path}: truncated image header")
        n, rows, cols = struct.unpack(">III", raw[4:16])
        payload, shape = raw[16:], (n, rows * cols)
    elif magic == LABEL_MAGIC:
        (n,) = struct.unpack(">I", raw[4:8])
        payload, shape = raw[8:], (n,)
    else:
        raise FormatError(f"{path}: bad magic 0x{magic:08x}")
    expected = math.prod(shape)
    if len(payload) != expected:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, header implies {expected}")
    data = np.frombuffer(payload, dtype=np.uint8).reshape(shape)
    if magic == IMAGE_MAGIC:
        return data.astype(np.float64) / 255.0
    return data.astype(np.int64)


class Dataset(NamedTuple):
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray


def data_root(explicit: str | Path | None = None) -> Path:
    if explicit is not None:
        return Path(explicit)
    return Path(os.environ.get(DATA_ENV, "data"))


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz"):
        if (directory / name).is_file():
            return directory / name
    raise DataError(f"missing {stem} under {directory}")


def load_image_dataset(directory: str | Path) -> Dataset:
    """Load the four standard MNIST-layout IDX files from ``directory``."""
    directory = Path(directory)
    parts = []
    for split in ("train", "t10k"):
        X = load_idx(_find(directory, f"{split}-images-idx3-ubyte"))
        y = load_idx(_find(directory, f"{split}-labels-idx1-ubyte"))
        if X.ndim != 2 or y.ndim != 1:
            raise FormatError(f"{split} files have swapped image/label roles")
        if X.shape[0] != y.shape[0]:
            raise FormatError(f"{split}: {X.shape[0]} images but {y.shape[0]} labels")
        parts += [X, y]
    return Dataset(*parts)


def stratified_subsample(y: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Sorted indices keeping ``ceil(fraction * N_c)`` points of every class ``c``."""
    if not 0 < fraction <= 1:
        raise ConfigError(f"subsample fraction must be in (0, 1], got {fraction}")
    if fraction == 1:
        return np.arange(len(y))
    keep = []
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        keep.append(rng.permutation(idx)[: math.ceil(fraction * len(idx))])
    return np.sort(np.concatenate(keep))


# task specs -----------------------------------------------------------------


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TaskSpec:
    """One task: data, the head it trains, and the heads its KL covers.

    ``index`` is 1-based. ``class_map`` maps original labels to head-local
    ones. ``output_dims`` counts every output unit active at this point of
    the sequence; ``context_heads`` are the heads the function-space KL
    covers. ``full_size`` is the training-set size before any subsampling;
    the likelihood is scaled to it.
    """

    index: int
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    head: int
    class_map: dict = field(default_factory=dict)
    output_dims: int = 0
    context_heads: tuple[int, ...] = (0,)
    full_size: int | None = None

    def __post_init__(self):
        for name in ("X_train", "y_train", "X_test", "y_test"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))

    @property
    def n_train(self) -> int:
        return len(self.y_train)

    @property
    def data_scale(self) -> int:
        return self.full_size if self.full_size is not None else self.n_train


def make_split(data: Dataset, k: int, head_mode: str = "multi") -> TaskSpec:
    """Binary task on classes ``2k`` and ``2k + 1``."""
    if not 0 <= k <= 4:
        raise ConfigError(f"split pair index must be in [0, 4], got {k}")
    classes = (2 * k, 2 * k + 1)
    tr = np.isin(data.y_train, classes)
    te = np.isin(data.y_test, classes)
    y_tr, y_te = data.y_train[tr], data.y_test[te]
    if head_mode == "multi":
        class_map = {classes[0]: 0, classes[1]: 1}
        y_tr, y_te = (y_tr == classes[1]).astype(np.int64), (y_te == classes[1]).astype(np.int64)
        # the new head's snapshot is an untrained network, so only earlier heads are matched
        head, dims, ctx = k, 2 * (k + 1), tuple(range(k)) or (0,)
    else:
        class_map = {c: c for c in classes}
        head, dims, ctx = 0, 10, (0,)
    return TaskSpec(k + 1, data.X_train[tr], y_tr, data.X_test[te], y_te, head, class_map, dims, ctx)


def permutation_for(task: int, seed: int, size: int = 784) -> np.ndarray:
    if task == 1:
        return np.arange(size)
    return np.random.default_rng([seed, task]).permutation(size)


def make_permuted(data: Dataset, task: int, seed: int) -> TaskSpec:
    """Ten-way task on pixels reordered by a seeded permutation (identity for task 1)."""
    if not 1 <= task <= 10:
        raise ConfigError(f"permuted task index must be in [1, 10], got {task}")
    perm = permutation_for(task, seed, data.X_train.shape[1])
    return TaskSpec(
        task, data.X_train[:, perm], data.y_train, data.X_test[:, perm], data.y_test, 0,
        {c: c for c in range(10)}, 10, (0,),
    )


def _toy_blobs(rng: np.random.Generator, centers: np.ndarray, n: int, std: float):
    per_class = n // 2
    X = np.concatenate([rng.normal(c, std, size=(per_class, 2)) for c in centers])
    y = np.repeat(np.arange(2), per_class)
    return np.clip(X, *TOY_RANGE), y


TOY_STD = 0.2


def toy_centers(n_tasks: int = 5) -> np.ndarray:
    """Class centres ``(task, class, 2)``: class 0 on an inner ring, class 1 just outside it."""
    angles = 2 * np.pi * np.arange(n_tasks) / n_tasks + np.pi / 10
    direction = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return np.stack([1.1 * direction, 2.1 * direction], axis=1)


def make_toy_sequence(seed: int, n_tasks: int = 5) -> list[TaskSpec]:
    """Five binary 2D tasks of two Gaussian blobs each, in disjoint regions of [-4, 4]^2.

    Class centres sit 5 standard deviations apart. Every task covers a
    different arc of the ring, so later tasks extend the same circular
    decision boundary.
    """
    rng = np.random.default_rng([seed, 7])
    tasks = []
    for t, centers in enumerate(toy_centers(n_tasks)):
        X_tr, y_tr = _toy_blobs(rng, centers, TOY_TRAIN_PER_TASK, TOY_STD)
        X_te, y_te = _toy_blobs(rng, centers, TOY_TEST_PER_TASK, TOY_STD)
        tasks.append(TaskSpec(t + 1, X_tr, y_tr, X_te, y_te, 0, {0: 0, 1: 1}, 2, (0,)))
    return tasks


# sequences --------------------------------------------------------------------


@dataclass(frozen=True)
class SequenceSpec:
    kind: str
    head_mode: str | None = None
    seed: int = 0
    subsample: float = 1.0
    n_tasks: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown sequence kind {self.kind!r}; expected one of {', '.join(KINDS)}")
        mode = self.head_mode
        if mode is None:
            mode = "single" if self.kind in SINGLE_HEAD_ONLY else "multi"
            object.__setattr__(self, "head_mode", mode)
        if mode not in ("multi", "single"):
            raise ConfigError(f"head_mode must be 'multi' or 'single', got {mode!r}")
        if self.kind in SINGLE_HEAD_ONLY and mode == "multi":
            raise ConfigError(f"{self.kind} is single-head only")
        if not 0 < self.subsample <= 1:
            raise ConfigError(f"subsample must be in (0, 1], got {self.subsample}")
        limit = 10 if self.kind == "permuted_mnist" else 5
        if self.n_tasks is not None and not 1 <= self.n_tasks <= limit:
            raise ConfigError(f"n_tasks must be in [1, {limit}] for {self.kind}")

    @property
    def total_tasks(self) -> int:
        if self.n_tasks is not None:
            return self.n_tasks
        return 10 if self.kind == "permuted_mnist" else 5

    def architecture(self) -> MlpArchitecture:
        if self.kind == "toy2d":
            return MlpArchitecture(2, (20, 20), (2,))
        if self.kind == "permuted_mnist":
            return MlpArchitecture(784, (100, 100), (10,))
        heads = (2,) * self.total_tasks if self.head_mode == "multi" else (10,)
        return MlpArchitecture(784, (256, 256), heads)


def _subsampled(task: TaskSpec, fraction: float, seed: int) -> TaskSpec:
    if fraction == 1:
        return task
    keep = stratified_subsample(task.y_train, fraction, np.random.default_rng([seed, 11, task.index]))
    return TaskSpec(
        task.index, task.X_train[keep], task.y_train[keep], task.X_test, task.y_test,
        task.head, task.class_map, task.output_dims, task.context_heads, task.data_scale,
    )


def build_sequence(spec: SequenceSpec, root: str | Path | None = None) -> list[TaskSpec]:
    """Materialize the task list for ``spec``, reading image data from ``root``."""
    if spec.kind == "toy2d":
        tasks = make_toy_sequence(spec.seed, spec.total_tasks)
    else:
        data = load_image_dataset(data_root(root) / DATASET_DIRS[spec.kind])
        if spec.kind == "permuted_mnist":
            tasks = [make_permuted(data, t, spec.seed) for t in range(1, spec.total_tasks + 1)]
        else:
            tasks = [make_split(data, k, spec.head_mode) for k in range(spec.total_tasks)]
    return [_subsampled(t, spec.subsample, spec.seed) for t in tasks]
