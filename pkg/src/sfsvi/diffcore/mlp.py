"""Fully connected ReLU networks over a flat parameter vector.

Layout is layer-major: for each hidden layer the weight matrix (fan_in x
fan_out, row-major) then the bias, followed by each output head in the same
order. Every function here accepts either plain arrays or autodiff ``Var``
values for the parameter vector.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple, Sequence

import numpy as np

from ..errors import CapacityError, DomainError, NumericalError, ShapeError
from . import autodiff as ad
from .autodiff import Var

MAX_FULL_CONTEXT = 512


class Slot(NamedTuple):
    name: str
    offset: int
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


class Params(NamedTuple):
    hidden: list[tuple]
    heads: list[tuple]


@dataclass(frozen=True)
class MlpArchitecture:
    input_dim: int
    hidden: tuple[int, ...] = ()
    heads: tuple[int, ...] = (1,)
    activation: str = field(default="relu")

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "heads", tuple(int(h) for h in self.heads))
        widths = (self.input_dim, *self.hidden, *self.heads)
        if not self.heads or min(widths) < 1:
            raise ShapeError(f"all layer widths must be >= 1, got {widths}")
        if self.activation != "relu":
            raise ShapeError(f"unsupported activation {self.activation!r}")

    @cached_property
    def layout(self) -> list[Slot]:
        slots = []
        offset = 0
        fan_in = self.input_dim
        shapes = []
        for i, width in enumerate(self.hidden):
            shapes += [(f"hidden{i}.W", (fan_in, width)), (f"hidden{i}.b", (width,))]
            fan_in = width
        for h, width in enumerate(self.heads):
            shapes += [(f"head{h}.W", (fan_in, width)), (f"head{h}.b", (width,))]
        for name, shape in shapes:
            slots.append(Slot(name, offset, shape))
            offset += int(np.prod(shape))
        return slots

    @property
    def n_params(self) -> int:
        last = self.layout[-1]
        return last.offset + last.size

    @property
    def feature_dim(self) -> int:
        return self.hidden[-1] if self.hidden else self.input_dim

    def head_offsets(self) -> list[int]:
        return [int(x) for x in np.cumsum((0, *self.heads))[:-1]]

    def fingerprint(self) -> str:
        blob = json.dumps([self.input_dim, list(self.hidden), list(self.heads), self.activation])
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def to_dict(self) -> dict:
        return {"input_dim": self.input_dim, "hidden": list(self.hidden), "heads": list(self.heads)}

    def check_params(self, theta) -> None:
        shape = theta.shape
        if shape != (self.n_params,):
            raise ShapeError(f"parameter vector has shape {shape}, expected ({self.n_params},)")

    def unflatten(self, theta) -> Params:
        """Split a flat vector (array or Var) into per-layer ``(W, b)`` pairs."""
        self.check_params(theta)
        pieces = []
        for slot in self.layout:
            part = theta[slot.offset : slot.offset + slot.size]
            pieces.append(part.reshape(slot.shape))
        pairs = list(zip(pieces[0::2], pieces[1::2]))
        n_hidden = len(self.hidden)
        return Params(pairs[:n_hidden], pairs[n_hidden:])

    def head_mask(self, heads: Sequence[int]) -> np.ndarray:
        """Boolean mask over parameters belonging to the shared body or ``heads``."""
        mask = np.zeros(self.n_params, dtype=bool)
        n_body = 2 * len(self.hidden)
        for i, slot in enumerate(self.layout):
            if i < n_body or (i - n_body) // 2 in heads:
                mask[slot.offset : slot.offset + slot.size] = True
        return mask


def _check_input(arch: MlpArchitecture, X) -> None:
    if X.ndim != 2 or X.shape[1] != arch.input_dim:
        raise ShapeError(f"input has shape {X.shape}, expected (n, {arch.input_dim})")


def _check_heads(arch: MlpArchitecture, heads: Sequence[int]) -> None:
    for h in heads:
        if not 0 <= h < len(arch.heads):
            raise ShapeError(f"head {h} out of range for {len(arch.heads)} heads")


def apply(params: Params, X, heads: Sequence[int]):
    """Logits of the selected heads, concatenated along columns."""
    a = X
    for W, b in params.hidden:
        a = ad.relu(a @ W + b)
    outs = [a @ params.heads[h][0] + params.heads[h][1] for h in heads]
    return outs[0] if len(outs) == 1 else ad.concatenate(outs, axis=1)


def forward(arch: MlpArchitecture, theta, X, head: int | Sequence[int] = 0):
    """Logits ``f(X; theta)`` for one head (or several, concatenated).

    Returns a numpy array when ``theta`` is an array, a ``Var`` otherwise.
    """
    heads = [head] if np.ndim(head) == 0 else list(head)
    _check_input(arch, X)
    _check_heads(arch, heads)
    out = apply(arch.unflatten(theta), X, heads)
    if isinstance(theta, Var):
        return out
    value = out.value if isinstance(out, Var) else np.asarray(out)
    if not np.isfinite(value).all():
        raise NumericalError("non-finite logits")
    return value


def jacobian_rows(arch: MlpArchitecture, mu: np.ndarray, X: np.ndarray, head: int | Sequence[int] = 0) -> np.ndarray:
    """``J[j, k, p] = d f_k(x_j) / d theta_p`` at ``mu``, one reverse sweep per (j, k)."""
    mu = np.asarray(mu, dtype=np.float64)
    if not np.isfinite(mu).all():
        raise NumericalError("non-finite parameters")
    theta = ad.leaf(mu)
    out = forward(arch, theta, np.asarray(X, dtype=np.float64), head)
    n, d = out.shape
    J = np.zeros((n, d, arch.n_params))
    seed = np.zeros((n, d))
    for j in range(n):
        for k in range(d):
            seed[j, k] = 1.0
            J[j, k] = ad.backward(out, seed).get(id(theta), 0.0)
            seed[j, k] = 0.0
    return J


def diag_function_variance(J: np.ndarray, sigma2: np.ndarray) -> np.ndarray:
    """``K[j, k] = sum_p J[j, k, p]^2 sigma2[p]``."""
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    if (sigma2 < 0).any():
        raise DomainError("negative parameter variance")
    if J.shape[-1] != sigma2.shape[0]:
        raise ShapeError(f"Jacobian width {J.shape[-1]} != {sigma2.shape[0]} variances")
    return np.einsum("...p,p->...", J * J, sigma2)


def full_function_covariance(J: np.ndarray, sigma2: np.ndarray) -> np.ndarray:
    """``J diag(sigma2) J^T`` across context points.

    ``J`` is either ``(n, P)`` for one output dimension, giving ``(n, n)``, or
    ``(n, D, P)``, giving one ``(n, n)`` block per output: ``(D, n, n)``.
    """
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    if (sigma2 < 0).any():
        raise DomainError("negative parameter variance")
    n = J.shape[0]
    if n > MAX_FULL_CONTEXT:
        raise CapacityError(f"{n} context points exceeds the full-covariance limit {MAX_FULL_CONTEXT}")
    if J.ndim == 2:
        return (J * sigma2) @ J.T
    Jk = np.swapaxes(J, 0, 1)
    return (Jk * sigma2) @ np.swapaxes(Jk, 1, 2)


class FunctionMoments(NamedTuple):
    mean: Var
    cov_diag: Var
    cov_full: Var | None


def function_moments(
    arch: MlpArchitecture,
    theta,
    sigma2,
    X,
    heads: Sequence[int],
    *,
    detach_jacobian: bool = True,
    full: bool = False,
) -> FunctionMoments:
    """Mean and linearized covariance of the network outputs at ``X``.

    The covariance ``J diag(sigma2) J^T`` is assembled layer by layer from
    the activations and the back-propagated output sensitivities, so no
    ``(n, D, P)`` Jacobian is materialized. With ``detach_jacobian`` the
    Jacobian factors are constants and gradients reach ``theta`` only
    through the mean; ``sigma2`` always stays differentiable.
    """
    heads = list(heads)
    X = np.asarray(X, dtype=np.float64)
    _check_input(arch, X)
    _check_heads(arch, heads)
    n = X.shape[0]
    if full and n > MAX_FULL_CONTEXT:
        raise CapacityError(f"{n} context points exceeds the full-covariance limit {MAX_FULL_CONTEXT}")
    params = arch.unflatten(theta)
    var = arch.unflatten(sigma2)

    acts = [ad.constant(X)]
    masks = []
    a = acts[0]
    for W, b in params.hidden:
        z = a @ W + b
        masks.append((z.value if isinstance(z, Var) else z) > 0)
        a = ad.relu(z)
        acts.append(a)
    mean = ad.concatenate([a @ params.heads[h][0] + params.heads[h][1] for h in heads], axis=1)

    if detach_jacobian:
        acts = [ad.stop_gradient(x) for x in acts]
        weights = [ad.stop_gradient(W) for W, _ in params.hidden]
        head_W = ad.stop_gradient(ad.concatenate([params.heads[h][0] for h in heads], axis=1))
    else:
        weights = [W for W, _ in params.hidden]
        head_W = ad.concatenate([params.heads[h][0] for h in heads], axis=1)
    var_head_W = ad.concatenate([var.heads[h][0] for h in heads], axis=1)
    var_head_b = ad.concatenate([var.heads[h][1] for h in heads], axis=0)

    feats = acts[-1]
    cov_diag = ad.square(feats) @ var_head_W + var_head_b
    cov_full = None
    if full:
        outer = ad.einsum("ja,ia->jia", feats, feats)
        cov_full = ad.einsum("jia,ak->kji", outer, var_head_W) + ad.reshape(var_head_b, (-1, 1, 1))

    if params.hidden:
        # sensitivity of every output to the last hidden pre-activation
        delta = ad.einsum("ak,ja->jka", head_W, masks[-1])
        for layer in reversed(range(len(params.hidden))):
            inp = acts[layer]
            var_W, var_b = var.hidden[layer]
            spread = ad.square(inp) @ var_W + var_b
            cov_diag = cov_diag + ad.einsum("jb,jkb->jk", spread, ad.square(delta))
            if full:
                outer = ad.einsum("ja,ia->jia", inp, inp)
                spread_full = ad.einsum("jia,ab->jib", outer, var_W) + var_b
                pair = ad.einsum("jkb,ikb->kjib", delta, delta)
                cov_full = cov_full + ad.einsum("jib,kjib->kji", spread_full, pair)
            if layer > 0:
                delta = ad.einsum("jkb,ab->jka", delta, weights[layer]) * masks[layer - 1][:, None, :]
    return FunctionMoments(mean, cov_diag, cov_full)
