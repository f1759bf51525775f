"""Mean-field Gaussian posteriors over a network's flat parameter vector."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diffcore import autodiff as ad
from .diffcore.autodiff import Var
from .diffcore.mlp import MlpArchitecture
from .errors import DomainError, FormatError, ShapeError

RHO_MIN = -10.0
RHO_MAX = 3.0
DEFAULT_INIT_SCALE = 1e-3


def scale(rho):
    """``sigma = exp(clamp(rho, RHO_MIN, RHO_MAX))`` for arrays or Vars."""
    if isinstance(rho, Var):
        clamped = -ad.clip_min(-ad.clip_min(rho, RHO_MIN), -RHO_MAX)
        return ad.exp(clamped)
    return np.exp(np.clip(rho, RHO_MIN, RHO_MAX))


@dataclass
class MeanFieldGaussian:
    """``N(mu, diag(sigma^2))`` with ``sigma = exp(rho)``.

    ``mu`` and ``rho`` are arrays when the distribution is stored, and
    autodiff leaves while an objective is being differentiated.
    """

    mu: np.ndarray | Var
    rho: np.ndarray | Var

    def __post_init__(self):
        if not isinstance(self.mu, Var):
            self.mu = np.array(self.mu, dtype=np.float64)
        if not isinstance(self.rho, Var):
            self.rho = np.array(self.rho, dtype=np.float64)
        if self.mu.shape != self.rho.shape or len(self.mu.shape) != 1:
            raise ShapeError(f"mu {self.mu.shape} and rho {self.rho.shape} must be equal-length vectors")

    @classmethod
    def initialize(
        cls, arch: MlpArchitecture, rng: np.random.Generator, init_scale: float = DEFAULT_INIT_SCALE
    ) -> "MeanFieldGaussian":
        mu = np.zeros(arch.n_params)
        for slot in arch.layout:
            if slot.name.endswith(".W"):
                bound = 1.0 / np.sqrt(slot.shape[0])
                mu[slot.offset : slot.offset + slot.size] = rng.uniform(-bound, bound, slot.size)
        return cls(mu, np.full(arch.n_params, np.log(init_scale)))

    @classmethod
    def isotropic(cls, n_params: int, mean: float = 0.0, std: float = 1.0) -> "MeanFieldGaussian":
        return cls(np.full(n_params, mean), np.full(n_params, np.log(std)))

    @property
    def n_params(self) -> int:
        return self.mu.shape[0]

    @property
    def sigma(self):
        return scale(self.rho)

    @property
    def sigma2(self):
        s = self.sigma
        return ad.square(s) if isinstance(s, Var) else s * s

    def as_leaves(self) -> "MeanFieldGaussian":
        return MeanFieldGaussian(ad.leaf(_value(self.mu)), ad.leaf(_value(self.rho)))

    def detached(self) -> "MeanFieldGaussian":
        return MeanFieldGaussian(_value(self.mu).copy(), _value(self.rho).copy())

    def clamp_(self) -> None:
        np.clip(self.rho, RHO_MIN, RHO_MAX, out=self.rho)


def _value(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else x


@dataclass(frozen=True)
class PosteriorSnapshot:
    """Frozen copy of a posterior taken at the end of task ``task``."""

    mu: np.ndarray
    rho: np.ndarray
    task: int
    arch_fingerprint: str = ""

    def __post_init__(self):
        for name in ("mu", "rho"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def sigma(self) -> np.ndarray:
        return scale(self.rho)

    @property
    def sigma2(self) -> np.ndarray:
        return self.sigma**2

    @property
    def n_params(self) -> int:
        return self.mu.shape[0]

    def as_gaussian(self) -> MeanFieldGaussian:
        return MeanFieldGaussian(self.mu.copy(), self.rho.copy())

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.mu.tobytes())
        h.update(self.rho.tobytes())
        h.update(str(self.task).encode())
        return h.hexdigest()

    def to_json(self) -> str:
        return json.dumps(
            {
                "arch": self.arch_fingerprint,
                "task": self.task,
                "mu": self.mu.astype(">f8").tobytes().hex(),
                "rho": self.rho.astype(">f8").tobytes().hex(),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "PosteriorSnapshot":
        try:
            record = json.loads(text)
            mu = np.frombuffer(bytes.fromhex(record["mu"]), dtype=">f8").astype(np.float64)
            rho = np.frombuffer(bytes.fromhex(record["rho"]), dtype=">f8").astype(np.float64)
            return cls(mu, rho, int(record["task"]), str(record["arch"]))
        except (KeyError, ValueError, TypeError) as exc:
            raise FormatError(f"malformed snapshot record: {exc}") from exc

    def save(self, path: str | Path) -> None:
        from .io import atomic_write_text

        atomic_write_text(path, self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "PosteriorSnapshot":
        return cls.from_json(Path(path).read_text())


@dataclass(frozen=True)
class FunctionSpacePrior:
    """Zero-mean Gaussian over outputs with variance ``v0`` at every point and dimension."""

    v0: float = 1e-3

    def __post_init__(self):
        if not self.v0 > 0:
            raise DomainError(f"prior variance must be positive, got {self.v0}")


def snapshot(q: MeanFieldGaussian | PosteriorSnapshot, task: int = 0, arch_fingerprint: str = "") -> PosteriorSnapshot:
    if isinstance(q, PosteriorSnapshot):
        return q
    return PosteriorSnapshot(_value(q.mu).copy(), _value(q.rho).copy(), task, arch_fingerprint)


def sample_params(q: MeanFieldGaussian | PosteriorSnapshot, eps):
    """Reparameterized draw ``mu + sigma * eps``."""
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape[-1] != q.n_params:
        raise ShapeError(f"noise has {eps.shape[-1]} entries, expected {q.n_params}")
    return q.mu + q.sigma * eps


def kl_weight_space(q, p) -> Var | float:
    """``KL(q || p)`` between two mean-field Gaussians, summed over parameters."""
    if q.n_params != p.n_params:
        raise ShapeError(f"parameter counts differ: {q.n_params} vs {p.n_params}")
    sq, sp = q.sigma, p.sigma
    if isinstance(sq, Var) or isinstance(q.mu, Var) or isinstance(sp, Var) or isinstance(p.mu, Var):
        log_ratio = ad.log(sp) - ad.log(sq)
        terms = log_ratio + (ad.square(sq) + ad.square(q.mu - p.mu)) / (2.0 * ad.square(sp)) - 0.5
        return ad.sum_(terms)
    terms = np.log(sp / sq) + (sq**2 + (q.mu - p.mu) ** 2) / (2.0 * sp**2) - 0.5
    return float(terms.sum())
