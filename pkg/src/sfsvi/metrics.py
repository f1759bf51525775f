"""Accuracy-matrix bookkeeping, transfer metrics, and predictive-uncertainty grids."""

from __future__ import annotations

import csv
import io as _io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diffcore.mlp import MlpArchitecture
from .errors import FormatError, ShapeError, StateError
from .io import atomic_write_bytes, atomic_write_text
from .objective import predictive_probs


class AccuracyMatrix:
    """``R[i][j]``: accuracy on task ``j`` after training through task ``i`` (both 1-based)."""

    def __init__(self, n_tasks: int):
        if n_tasks < 1:
            raise ShapeError("need at least one task")
        self.n_tasks = n_tasks
        self.values = np.full((n_tasks, n_tasks), np.nan)
        self.independent: np.ndarray | None = None

    def __setitem__(self, key: tuple[int, int], value: float) -> None:
        i, j = key
        if not 1 <= j <= i <= self.n_tasks:
            raise ShapeError(f"R[{i}][{j}] is outside the lower triangle")
        if not 0.0 <= value <= 1.0:
            raise ShapeError(f"accuracy {value} outside [0, 1]")
        self.values[i - 1, j - 1] = value

    def __getitem__(self, key: tuple[int, int]) -> float:
        i, j = key
        return float(self.values[i - 1, j - 1])

    def rows_done(self) -> int:
        done = 0
        for i in range(self.n_tasks):
            if np.isnan(self.values[i, : i + 1]).any():
                break
            done += 1
        return done

    def is_complete(self) -> bool:
        return self.rows_done() == self.n_tasks

    def require_complete(self) -> None:
        if not self.is_complete():
            raise StateError(f"accuracy matrix has {self.rows_done()} of {self.n_tasks} rows")

    @classmethod
    def from_rows(cls, rows: list[list[float]]) -> "AccuracyMatrix":
        R = cls(len(rows))
        for i, row in enumerate(rows, 1):
            for j, v in enumerate(row[:i], 1):
                R[i, j] = v
        return R

    def to_csv(self) -> str:
        buf = _io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["after_task"] + [f"task_{j}" for j in range(1, self.n_tasks + 1)])
        for i in range(1, self.rows_done() + 1):
            writer.writerow([i] + [repr(self[i, j]) for j in range(1, i + 1)] + [""] * (self.n_tasks - i))
        return buf.getvalue()

    def save(self, path: str | Path) -> None:
        atomic_write_text(path, self.to_csv())

    @classmethod
    def from_csv(cls, text: str) -> "AccuracyMatrix":
        rows = list(csv.reader(_io.StringIO(text)))
        if not rows or rows[0][:1] != ["after_task"]:
            raise FormatError("accuracy CSV must start with an 'after_task' header")
        R = cls(len(rows[0]) - 1)
        try:
            for row in rows[1:]:
                i = int(row[0])
                for j, cell in enumerate(row[1 : i + 1], 1):
                    R[i, j] = float(cell)
        except (ValueError, IndexError) as exc:
            raise FormatError(f"malformed accuracy CSV: {exc}") from exc
        return R

    @classmethod
    def load(cls, path: str | Path) -> "AccuracyMatrix":
        return cls.from_csv(Path(path).read_text())


def mean_final_accuracy(R: AccuracyMatrix) -> float:
    R.require_complete()
    T = R.n_tasks
    return float(np.mean(R.values[T - 1, :T]))


def backward_transfer(R: AccuracyMatrix) -> float:
    R.require_complete()
    T = R.n_tasks
    if T < 2:
        raise StateError("backward transfer needs at least two tasks")
    v = R.values
    return float(np.mean([v[T - 1, i] - v[i, i] for i in range(T - 1)]))


def forward_transfer(R: AccuracyMatrix, independent: np.ndarray | None = None) -> float:
    """Mean advantage of ``R[i][i]`` over a model trained on task ``i`` alone, for ``i >= 2``."""
    R.require_complete()
    ind = R.independent if independent is None else np.asarray(independent, dtype=np.float64)
    if ind is None:
        raise StateError("forward transfer needs independent-model accuracies")
    T = R.n_tasks
    if T < 2:
        raise StateError("forward transfer needs at least two tasks")
    if ind.shape != (T,):
        raise ShapeError(f"expected {T} independent accuracies, got {ind.shape}")
    return float(np.mean([R.values[i, i] - ind[i] for i in range(1, T)]))


def accuracy_so_far(R: AccuracyMatrix) -> list[float]:
    """Mean accuracy over the tasks seen so far, after each task."""
    return [float(np.mean(R.values[i, : i + 1])) for i in range(R.rows_done())]


# uncertainty grids --------------------------------------------------------------


@dataclass(frozen=True)
class UncertaintyGrid:
    """Class-1 probability on a square grid; ``p[r, c]`` sits at ``(xs[c], ys[r])``."""

    xs: np.ndarray
    ys: np.ndarray
    p: np.ndarray

    def points(self) -> np.ndarray:
        gx, gy = np.meshgrid(self.xs, self.ys)
        return np.stack([gx.ravel(), gy.ravel()], axis=1)

    def to_csv(self) -> str:
        pts = self.points()
        lines = ["x,y,p"] + [f"{x!r},{y!r},{p!r}" for (x, y), p in zip(pts.tolist(), self.p.ravel().tolist())]
        return "\n".join(lines) + "\n"

    def to_pgm(self) -> bytes:
        """Binary 8-bit grayscale image, black at p=0 and white at p=1, top row at max y."""
        pixels = np.round(np.clip(self.p[::-1], 0.0, 1.0) * 255).astype(np.uint8)
        rows, cols = pixels.shape
        return f"P5\n{cols} {rows}\n255\n".encode("ascii") + pixels.tobytes()

    def save(self, csv_path: str | Path, image_path: str | Path) -> None:
        atomic_write_text(csv_path, self.to_csv())
        atomic_write_bytes(image_path, self.to_pgm())


def export_uncertainty_grid(
    q,
    arch: MlpArchitecture,
    resolution: int,
    eps: np.ndarray,
    head: int = 0,
    bounds: tuple[float, float] = (-4.0, 4.0),
) -> UncertaintyGrid:
    """MC-averaged class-1 probability over a ``resolution x resolution`` grid."""
    if arch.input_dim != 2:
        raise ShapeError(f"uncertainty grids need 2-d inputs, model takes {arch.input_dim}")
    if resolution < 2:
        raise ShapeError("grid resolution must be >= 2")
    axis = np.linspace(bounds[0], bounds[1], resolution)
    grid = UncertaintyGrid(axis, axis, np.zeros((resolution, resolution)))
    probs = predictive_probs(q, arch, grid.points(), head, eps)[:, 1]
    return UncertaintyGrid(axis, axis, probs.reshape(resolution, resolution))


def border_band_mask(points: np.ndarray, data: np.ndarray, inner: float = 3.0, exclusion: float = 1.0) -> np.ndarray:
    """Points with ``max(|x|, |y|) >= inner`` farther than ``exclusion`` from every data point."""
    in_band = np.abs(points).max(axis=1) >= inner
    far = np.ones(len(points), dtype=bool)
    for start in range(0, len(data), 2048):
        d2 = ((points[:, None, :] - data[None, start : start + 2048, :]) ** 2).sum(-1)
        far &= d2.min(axis=1) > exclusion**2
    return in_band & far


def far_field_deviation(grid: UncertaintyGrid, data: np.ndarray, inner: float = 3.0, exclusion: float = 1.0) -> float:
    """Mean ``|p - 0.5|`` over the border band of the grid."""
    mask = border_band_mask(grid.points(), data, inner, exclusion)
    if not mask.any():
        raise StateError("border band is empty")
    return float(np.mean(np.abs(grid.p.ravel()[mask] - 0.5)))
