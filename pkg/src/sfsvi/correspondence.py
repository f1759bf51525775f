"""Numerical checks relating the function-space objective to FROMP and FRCL.

FROMP: with a Dirac variational distribution and a Laplace prior covariance,
the function-space objective minus the variance-matching term ``V`` equals
the FROMP objective (log-likelihood minus a Mahalanobis penalty, tau = 1).

FRCL: for a Bayesian linear model ``f(x) = phi(x) theta`` the linearization
is exact, so the Jacobian-based KL must equal the exact KL between the
induced Gaussians over function values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffcore.mlp import full_function_covariance
from .errors import ShapeError
from .objective import JITTER, FunctionDistribution, full_gaussian_kl, gaussian_kl_cells


def fromp_variance_term(k_prior: np.ndarray, k_post: np.ndarray) -> float:
    """``V = -1/2 sum (log(Kp/Kq) + Kq/Kp - 1)`` over diagonal cells."""
    return float(-0.5 * np.sum(np.log(k_prior / k_post) + k_post / k_prior - 1.0))


def verify_fromp_identity(
    k_prior: np.ndarray,
    k_post: np.ndarray,
    delta: np.ndarray,
    loglik: float,
    penalty_sign: float = -1.0,
    mutate: bool = False,
) -> float:
    """Residual ``(F - V) - L_fromp`` for a single-task block of diagonal cells.

    ``penalty_sign`` selects how the FROMP Mahalanobis term enters its
    objective; -1 treats it as a penalty on a maximized objective, which is
    the convention under which the identity holds. ``mutate`` flips the sign
    of ``V`` so the check can be shown to fail.
    """
    k_prior, k_post, delta = (np.asarray(a, dtype=np.float64) for a in (k_prior, k_post, delta))
    if not k_prior.shape == k_post.shape == delta.shape:
        raise ShapeError("K_prior, K_post and delta must share a shape")
    kl = gaussian_kl_cells(delta, k_post, np.zeros_like(delta), k_prior, floor=0.0)
    objective = loglik - float(kl.value.sum())
    v = fromp_variance_term(k_prior, k_post)
    lhs = objective + v if mutate else objective - v
    fromp = loglik + penalty_sign * 0.5 * float(np.sum(delta**2 / k_prior))
    return lhs - fromp


@dataclass
class LinearModelSpec:
    """Bayesian linear model ``f(x) = phi(x) theta`` evaluated at fixed context inputs.

    ``phi`` has one row per context point. Variances are diagonal; the
    previous posterior defaults to the standard-normal weight prior.
    """

    phi: np.ndarray
    mu: np.ndarray
    var: np.ndarray
    prev_mu: np.ndarray | None = None
    prev_var: np.ndarray | None = None
    _m: int = field(init=False, repr=False)

    def __post_init__(self):
        self.phi = np.atleast_2d(np.asarray(self.phi, dtype=np.float64))
        self._m = self.phi.shape[1]
        if self.prev_mu is None:
            self.prev_mu = np.zeros(self._m)
        if self.prev_var is None:
            self.prev_var = np.ones(self._m)
        for name in ("mu", "var", "prev_mu", "prev_var"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (self._m,):
                raise ShapeError(f"{name} must have {self._m} entries")
            setattr(self, name, arr)
        if not np.isfinite(self.phi).all():
            raise ShapeError("feature matrix must be finite")


def _linear_distribution(phi: np.ndarray, mu: np.ndarray, var: np.ndarray) -> FunctionDistribution:
    cov = full_function_covariance(phi, var)
    return FunctionDistribution((phi @ mu)[:, None], np.diag(cov)[:, None], cov[None])


def linear_function_kl(lin: LinearModelSpec, jitter: float = JITTER) -> float:
    """Full function-space KL built from the (exact) linear-model Jacobian."""
    post = _linear_distribution(lin.phi, lin.mu, lin.var)
    prior = _linear_distribution(lin.phi, lin.prev_mu, lin.prev_var)
    return float(full_gaussian_kl(post, prior, jitter=jitter).value)


def dense_gaussian_kl(m0: np.ndarray, S0: np.ndarray, m1: np.ndarray, S1: np.ndarray) -> float:
    """``KL(N(m0, S0) || N(m1, S1))`` via LU solves and slogdet."""
    k = m0.shape[0]
    diff = m1 - m0
    _, logdet0 = np.linalg.slogdet(S0)
    _, logdet1 = np.linalg.slogdet(S1)
    trace = np.trace(np.linalg.solve(S1, S0))
    return float(0.5 * (trace + diff @ np.linalg.solve(S1, diff) - k + logdet1 - logdet0))


def verify_frcl_identity(lin: LinearModelSpec, jitter: float = JITTER) -> float:
    """Residual between the Jacobian-based KL and the exact induced-Gaussian KL."""
    phi = lin.phi
    eye = jitter * np.eye(phi.shape[0])
    exact = dense_gaussian_kl(
        phi @ lin.mu,
        phi @ np.diag(lin.var) @ phi.T + eye,
        phi @ lin.prev_mu,
        phi @ np.diag(lin.prev_var) @ phi.T + eye,
    )
    return linear_function_kl(lin, jitter) - exact
