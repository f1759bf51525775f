"""Training objectives: function-space (diagonal and full) and weight-space ELBOs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .diffcore import autodiff as ad
from .diffcore.autodiff import Var
from .diffcore.mlp import MAX_FULL_CONTEXT, MlpArchitecture, apply, forward, function_moments
from .errors import CapacityError, ConfigError, DataError, NumericalError, ShapeError
from .variational import FunctionSpacePrior, MeanFieldGaussian, PosteriorSnapshot, kl_weight_space

VARIANCE_FLOOR = 1e-12
JITTER = 1e-8


@dataclass(frozen=True)
class ObjectiveConfig:
    mc_samples: int = 5
    kl_mode: str = "diag"
    context_budget: int | None = None
    stop_gradient_jacobian: bool = True
    kl_weight: float = 1.0
    # per-output constant in the full KL: "printed" uses |X|/D, "standard" uses |X|
    full_kl_constant: str = "printed"

    def __post_init__(self):
        if self.mc_samples < 1:
            raise ConfigError(f"mc_samples must be >= 1, got {self.mc_samples}")
        if self.kl_mode not in ("diag", "full"):
            raise ConfigError(f"kl_mode must be 'diag' or 'full', got {self.kl_mode!r}")
        if self.context_budget is not None and self.context_budget < 1:
            raise ConfigError("context_budget must be >= 1")
        if self.full_kl_constant not in ("printed", "standard"):
            raise ConfigError(f"unknown full_kl_constant {self.full_kl_constant!r}")
        if self.kl_weight < 0:
            raise ConfigError("kl_weight must be >= 0")


@dataclass
class FunctionDistribution:
    """Gaussian over outputs at context points; ``cov_full`` is ``(D, n, n)``."""

    mean: np.ndarray | Var
    cov_diag: np.ndarray | Var
    cov_full: np.ndarray | Var | None = None

    def __post_init__(self):
        if self.mean.shape != self.cov_diag.shape:
            raise ShapeError(f"mean {self.mean.shape} and covariance {self.cov_diag.shape} differ")


class ObjectiveTerms(NamedTuple):
    loss: Var
    loglik: float
    kl: float


def _val(x):
    return x.value if isinstance(x, Var) else x


# function-space distributions ---------------------------------------------


def prior_distribution(
    prior: FunctionSpacePrior | PosteriorSnapshot | MeanFieldGaussian,
    arch: MlpArchitecture,
    X: np.ndarray,
    heads: Sequence[int],
    full: bool = False,
) -> FunctionDistribution:
    """Prior over outputs at ``X``: the fixed first-task prior or a frozen posterior."""
    n = X.shape[0]
    if isinstance(prior, FunctionSpacePrior):
        d = sum(arch.heads[h] for h in heads)
        cov_full = np.broadcast_to(prior.v0 * np.eye(n), (d, n, n)).copy() if full else None
        return FunctionDistribution(np.zeros((n, d)), np.full((n, d), prior.v0), cov_full)
    m = function_moments(arch, _val(prior.mu), _val(prior.sigma2), X, heads, full=full)
    return FunctionDistribution(
        m.mean.value, m.cov_diag.value, None if m.cov_full is None else m.cov_full.value
    )


def posterior_distribution(
    q: MeanFieldGaussian,
    arch: MlpArchitecture,
    X: np.ndarray,
    heads: Sequence[int],
    *,
    full: bool = False,
    stop_gradient_jacobian: bool = True,
    linearization_point: np.ndarray | None = None,
) -> FunctionDistribution:
    """Linearized output distribution of ``q``, differentiable in ``q.mu`` and ``q.rho``.

    With ``stop_gradient_jacobian`` the Jacobian is evaluated at
    ``linearization_point`` (default: the current mean) and held constant.
    """
    sigma2 = q.sigma2
    if not stop_gradient_jacobian:
        m = function_moments(arch, q.mu, sigma2, X, heads, detach_jacobian=False, full=full)
        return FunctionDistribution(m.mean, m.cov_diag, m.cov_full)
    lin = _val(q.mu) if linearization_point is None else np.asarray(linearization_point, dtype=np.float64)
    m = function_moments(arch, lin, sigma2, X, heads, full=full)
    return FunctionDistribution(forward(arch, q.mu, X, list(heads)), m.cov_diag, m.cov_full)


# KL divergences -------------------------------------------------------------


def gaussian_kl_cells(mean_q, var_q, mean_p, var_p, floor: float = VARIANCE_FLOOR):
    """Elementwise ``KL(N(mean_q, var_q) || N(mean_p, var_p))``."""
    if floor > 0:
        var_p, var_q = ad.clip_min(var_p, floor), ad.clip_min(var_q, floor)
    else:
        var_p, var_q = ad.as_var(var_p), ad.as_var(var_q)
    if not (var_p.value > 0).all():
        raise NumericalError("prior function variance is not positive")
    ratio = var_q / var_p
    return 0.5 * (ad.log(var_p) - ad.log(var_q) + ratio - 1.0 + ad.square(mean_q - mean_p) / var_p)


def diag_gaussian_kl(post: FunctionDistribution, prior: FunctionDistribution, floor: float = VARIANCE_FLOOR) -> Var:
    """Sum of per-(point, output) KLs between diagonal output Gaussians."""
    return ad.sum_(gaussian_kl_cells(post.mean, post.cov_diag, prior.mean, prior.cov_diag, floor))


def full_kl_constant(n_points: int, n_outputs: int, convention: str = "printed") -> float:
    """Per-output-dimension constant subtracted inside the full KL."""
    return n_points / n_outputs if convention == "printed" else float(n_points)


def full_kl_offset(n_points: int, n_outputs: int, convention: str = "printed") -> float:
    """``full_gaussian_kl - diag_gaussian_kl`` on diagonal covariances."""
    return 0.5 * n_outputs * (n_points - full_kl_constant(n_points, n_outputs, convention))


def full_gaussian_kl(
    post: FunctionDistribution,
    prior: FunctionDistribution,
    convention: str = "printed",
    jitter: float = JITTER,
) -> Var:
    """Sum over output dimensions of the multivariate KL across context points."""
    if post.cov_full is None or prior.cov_full is None:
        raise ShapeError("full KL needs full covariance blocks")
    n, d = post.mean.shape
    if n > MAX_FULL_CONTEXT:
        raise CapacityError(f"{n} context points exceeds the full-covariance limit {MAX_FULL_CONTEXT}")
    eye = np.eye(n)
    k_prior = np.asarray(prior.cov_full, dtype=np.float64) + jitter * eye
    try:
        chol = np.linalg.cholesky(k_prior)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("prior function covariance is singular after jitter") from exc
    prior_inv = np.linalg.inv(k_prior)
    prior_logdet = 2.0 * np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum(axis=-1)
    k_post = post.cov_full + jitter * eye
    delta = post.mean - prior.mean
    trace = ad.sum_(ad.mul(prior_inv, k_post), axis=(1, 2))
    solved = ad.einsum("kij,jk->ki", prior_inv, delta)
    quad = ad.sum_(ad.transpose(delta) * solved, axis=1)
    const = full_kl_constant(n, d, convention)
    per_dim = 0.5 * (prior_logdet - ad.logdet(k_post) - const + trace + quad)
    return ad.sum_(per_dim)


def kl_diag(q, prior, X: np.ndarray, arch: MlpArchitecture, heads: Sequence[int], **kwargs) -> Var:
    if X.shape[0] == 0:
        raise ShapeError("context set is empty")
    post = posterior_distribution(q, arch, X, heads, **kwargs)
    return diag_gaussian_kl(post, prior_distribution(prior, arch, X, heads))


def kl_full(
    q, prior, X: np.ndarray, arch: MlpArchitecture, heads: Sequence[int], convention: str = "printed", **kwargs
) -> Var:
    if X.shape[0] == 0:
        raise ShapeError("context set is empty")
    post = posterior_distribution(q, arch, X, heads, full=True, **kwargs)
    return full_gaussian_kl(post, prior_distribution(prior, arch, X, heads, full=True), convention)


# likelihood -----------------------------------------------------------------


def check_labels(y: np.ndarray, width: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or not np.issubdtype(y.dtype, np.integer):
        raise DataError("labels must be a 1-d integer vector")
    if y.size and (y.min() < 0 or y.max() >= width):
        raise DataError(f"label outside [0, {width}) for the active head")
    return y


def sampled_params(q: MeanFieldGaussian, arch: MlpArchitecture, eps: np.ndarray, head: int):
    """Per-layer reparameterized weights for each row of ``eps`` (only layers ``head`` touches)."""
    mu_p = arch.unflatten(q.mu)
    sig_p = arch.unflatten(q.sigma)
    draws = []
    for row in np.atleast_2d(eps):
        eps_p = arch.unflatten(row)
        hidden = [
            (mw + sw * ew, mb + sb * eb)
            for (mw, mb), (sw, sb), (ew, eb) in zip(mu_p.hidden, sig_p.hidden, eps_p.hidden)
        ]
        heads: list = [None] * len(arch.heads)
        (mw, mb), (sw, sb), (ew, eb) = mu_p.heads[head], sig_p.heads[head], eps_p.heads[head]
        heads[head] = (mw + sw * ew, mb + sb * eb)
        draws.append(type(mu_p)(hidden, heads))
    return draws


def expected_loglik(
    q: MeanFieldGaussian, arch: MlpArchitecture, X: np.ndarray, y: np.ndarray, head: int, eps: np.ndarray
):
    """Monte-Carlo estimate of ``E_q[log p(y | f(X; theta))]`` summed over the batch.

    ``eps`` holds one standard-normal row per sample.
    """
    eps = np.atleast_2d(eps)
    if eps.shape[1] != arch.n_params:
        raise ShapeError(f"noise rows have {eps.shape[1]} entries, expected {arch.n_params}")
    y = check_labels(y, arch.heads[head])
    rows = np.arange(len(y))
    total = None
    for params in sampled_params(q, arch, eps, head):
        logp = ad.log_softmax(apply(params, X, [head]), axis=1)
        term = ad.sum_(logp[rows, y])
        total = term if total is None else total + term
    return total * (1.0 / eps.shape[0])


def predictive_probs(
    q: MeanFieldGaussian | PosteriorSnapshot, arch: MlpArchitecture, X: np.ndarray, head: int, eps: np.ndarray
) -> np.ndarray:
    """Softmax outputs of ``head`` averaged over the parameter draws ``mu + sigma * eps``."""
    mu, sigma = _val(q.mu), _val(q.sigma)
    total = np.zeros((X.shape[0], arch.heads[head]))
    eps = np.atleast_2d(eps)
    for row in eps:
        logits = forward(arch, mu + sigma * row, X, head)
        logits = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        total += p / p.sum(axis=1, keepdims=True)
    return total / eps.shape[0]


# full objectives --------------------------------------------------------------


def sfsvi_objective(
    q: MeanFieldGaussian,
    prior: FunctionSpacePrior | PosteriorSnapshot,
    arch: MlpArchitecture,
    batch: tuple[np.ndarray, np.ndarray],
    X_context: np.ndarray,
    head: int,
    context_heads: Sequence[int],
    eps: np.ndarray,
    config: ObjectiveConfig = ObjectiveConfig(),
    n_data: int | None = None,
    linearization_point: np.ndarray | None = None,
) -> ObjectiveTerms:
    """Negative function-space ELBO for one mini-batch.

    The batch log-likelihood is rescaled to ``n_data`` points so the KL,
    evaluated once per step at the context points, sees a full-dataset
    likelihood.
    """
    X, y = batch
    scale = (n_data if n_data is not None else len(y)) / len(y)
    ell = expected_loglik(q, arch, X, y, head, eps)
    kwargs = dict(stop_gradient_jacobian=config.stop_gradient_jacobian, linearization_point=linearization_point)
    if config.kl_mode == "full":
        kl = kl_full(q, prior, X_context, arch, context_heads, config.full_kl_constant, **kwargs)
    else:
        kl = kl_diag(q, prior, X_context, arch, context_heads, **kwargs)
    loss = -scale * ell + config.kl_weight * kl
    return ObjectiveTerms(loss, float(ell.value), float(kl.value))


def vcl_objective(
    q: MeanFieldGaussian,
    prior: MeanFieldGaussian | PosteriorSnapshot,
    arch: MlpArchitecture,
    batch: tuple[np.ndarray, np.ndarray],
    head: int,
    eps: np.ndarray,
    n_data: int,
    kl_weight: float = 1.0,
) -> ObjectiveTerms:
    """Per-datapoint negative weight-space ELBO, KL tempered by ``1 / n_data``."""
    X, y = batch
    ell = expected_loglik(q, arch, X, y, head, eps)
    kl = kl_weight_space(q, prior)
    loss = -ell * (1.0 / len(y)) + kl * (kl_weight / n_data)
    return ObjectiveTerms(loss, float(ell.value), float(_val(kl)))
