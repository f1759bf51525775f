import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sfsvi.diffcore.mlp import (
    MlpArchitecture,
    diag_function_variance,
    forward,
    full_function_covariance,
    function_moments,
    jacobian_rows,
)
from sfsvi.errors import CapacityError, DomainError, ShapeError
from sfsvi.verify import central_differences


def hand_rolled_forward(theta, X, n_in, n_hidden, n_out):
    """Straight-line reference: unpack by hand, loop over units."""
    o = 0
    W1 = theta[o : o + n_in * n_hidden].reshape(n_in, n_hidden); o += n_in * n_hidden
    b1 = theta[o : o + n_hidden]; o += n_hidden
    W2 = theta[o : o + n_hidden * n_out].reshape(n_hidden, n_out); o += n_hidden * n_out
    b2 = theta[o : o + n_out]
    out = np.zeros((len(X), n_out))
    for r, x in enumerate(X):
        h = [max(0.0, sum(x[i] * W1[i, u] for i in range(n_in)) + b1[u]) for u in range(n_hidden)]
        for k in range(n_out):
            out[r, k] = sum(h[u] * W2[u, k] for u in range(n_hidden)) + b2[k]
    return out


def test_parameter_count_and_layout():
    arch = MlpArchitecture(784, (256, 256), (2,) * 5)
    assert arch.n_params == 785 * 256 + 257 * 256 + 5 * 257 * 2
    spans = [(s.offset, s.offset + s.size) for s in arch.layout]
    assert spans[0][0] == 0 and all(a[1] == b[0] for a, b in zip(spans, spans[1:]))
    assert MlpArchitecture(784, (100, 100), (10,)).n_params == 785 * 100 + 101 * 100 + 101 * 10


def test_zero_parameters_give_zero_logits(rng):
    arch = MlpArchitecture(3, (4,), (2,))
    np.testing.assert_array_equal(forward(arch, np.zeros(arch.n_params), rng.standard_normal((5, 3))), 0.0)


def test_affine_model():
    arch = MlpArchitecture(1, (), (1,))
    assert forward(arch, np.array([2.0, 1.0]), np.array([[3.0]]))[0, 0] == 7.0


def test_forward_matches_hand_rolled_oracle(rng):
    arch = MlpArchitecture(2, (4,), (2,))
    theta, X = rng.standard_normal(arch.n_params), rng.standard_normal((6, 2))
    np.testing.assert_allclose(forward(arch, theta, X), hand_rolled_forward(theta, X, 2, 4, 2), atol=1e-12)


def test_forward_is_bitwise_deterministic(rng):
    arch = MlpArchitecture(5, (7, 3), (4,))
    theta, X = rng.standard_normal(arch.n_params), rng.standard_normal((9, 5))
    assert forward(arch, theta, X).tobytes() == forward(arch, theta, X).tobytes()


def test_shape_errors(rng):
    arch = MlpArchitecture(3, (4,), (2,))
    with pytest.raises(ShapeError):
        forward(arch, np.zeros(arch.n_params), np.zeros((2, 4)))
    with pytest.raises(ShapeError):
        forward(arch, np.zeros(arch.n_params + 1), np.zeros((2, 3)))
    with pytest.raises(ShapeError):
        forward(arch, np.zeros(arch.n_params), np.zeros((2, 3)), head=1)


def test_affine_jacobian_is_input_and_one():
    arch = MlpArchitecture(1, (), (1,))
    J = jacobian_rows(arch, np.array([0.7, -0.2]), np.array([[3.0], [-1.5]]), 0)
    np.testing.assert_array_equal(J[:, 0, :], [[3.0, 1.0], [-1.5, 1.0]])


def test_dead_relu_zeroes_upstream_rows():
    arch = MlpArchitecture(1, (1,), (1,))
    # layout: hidden W, hidden b, head W, head b; pre-activation 1*2 - 5 < 0
    J = jacobian_rows(arch, np.array([1.0, -5.0, 3.0, 0.5]), np.array([[2.0]]), 0)
    np.testing.assert_array_equal(J[0, 0], [0.0, 0.0, 0.0, 1.0])


def test_jacobian_rows_match_finite_differences(rng):
    arch = MlpArchitecture(2, (3,), (2,))
    mu, X = rng.standard_normal(arch.n_params), rng.standard_normal((4, 2))
    J = jacobian_rows(arch, mu, X, 0)
    for j in range(4):
        for k in range(2):
            fd = central_differences(lambda t: forward(arch, t, X[j : j + 1])[0, k], mu)
            assert np.abs(J[j, k] - fd).max() / max(np.abs(fd).max(), 1e-12) < 1e-5


def test_linear_network_jacobian_is_parameter_independent(rng):
    arch = MlpArchitecture(3, (), (2,))
    X = rng.standard_normal((5, 3))
    J1 = jacobian_rows(arch, rng.standard_normal(arch.n_params), X, 0)
    J2 = jacobian_rows(arch, rng.standard_normal(arch.n_params), X, 0)
    assert np.abs(J1 - J2).max() < 1e-12


def test_diag_variance_examples(rng):
    J = rng.standard_normal((3, 2, 5))
    np.testing.assert_array_equal(diag_function_variance(J, np.zeros(5)), 0.0)
    assert diag_function_variance(np.array([[[3.0]]]), np.array([0.25]))[0, 0] == 2.25
    with pytest.raises(DomainError):
        diag_function_variance(J, -np.ones(5))


def test_full_covariance_examples(rng):
    J = rng.standard_normal((1, 4))
    s2 = rng.uniform(0.1, 1.0, 4)
    assert full_function_covariance(J, s2)[0, 0] == pytest.approx(diag_function_variance(J, s2)[0], abs=1e-15)
    dup = np.vstack([J, J])
    K = full_function_covariance(dup, s2)
    assert abs(np.linalg.det(K)) < 1e-12 * K[0, 0] ** 2
    assert np.linalg.matrix_rank(K) == 1


def test_full_covariance_matches_triple_loop(rng):
    J, s2 = rng.standard_normal((3, 6)), rng.uniform(0, 2, 6)
    ref = np.zeros((3, 3))
    for a in range(3):
        for b in range(3):
            for p in range(6):
                ref[a, b] += J[a, p] * s2[p] * J[b, p]
    np.testing.assert_allclose(full_function_covariance(J, s2), ref, atol=1e-12)


def test_full_covariance_capacity_guard():
    with pytest.raises(CapacityError):
        full_function_covariance(np.zeros((513, 2)), np.ones(2))


@given(st.integers(0, 2**31 - 1))
def test_diag_equals_diagonal_of_full(seed):
    rng = np.random.default_rng(seed)
    J, s2 = rng.standard_normal((4, 3, 7)), rng.uniform(0, 2, 7)
    full = full_function_covariance(J, s2)
    diag = diag_function_variance(J, s2)
    np.testing.assert_allclose(np.diagonal(full, axis1=1, axis2=2).T, diag, atol=1e-12)


@given(st.integers(0, 2**31 - 1), st.booleans())
def test_structured_moments_match_explicit_jacobian(seed, two_heads):
    rng = np.random.default_rng(seed)
    arch = MlpArchitecture(3, (5, 4), (2, 3))
    heads = [0, 1] if two_heads else [1]
    mu, s2 = rng.standard_normal(arch.n_params), rng.uniform(0, 1, arch.n_params)
    X = rng.standard_normal((4, 3))
    m = function_moments(arch, mu, s2, X, heads, full=True)
    J = jacobian_rows(arch, mu, X, heads)
    np.testing.assert_allclose(m.mean.value, forward(arch, mu, X, heads), atol=1e-12)
    np.testing.assert_allclose(m.cov_diag.value, diag_function_variance(J, s2), atol=1e-10)
    np.testing.assert_allclose(m.cov_full.value, full_function_covariance(J, s2), atol=1e-10)


def test_linearized_variance_matches_monte_carlo(rng):
    arch = MlpArchitecture(3, (5,), (2,))
    mu, sigma = rng.standard_normal(arch.n_params), rng.uniform(0.05, 0.3, arch.n_params)
    X = rng.standard_normal((2, 3))
    J = jacobian_rows(arch, mu, X, 0).reshape(-1, arch.n_params)
    K = diag_function_variance(J, sigma**2)
    draws = np.concatenate([(rng.standard_normal((250_000, arch.n_params)) * sigma) @ J.T for _ in range(4)])
    assert np.max(np.abs(draws.var(axis=0, ddof=1) - K) / K) < 0.02
