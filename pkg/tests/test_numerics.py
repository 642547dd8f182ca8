import numpy as np
import pytest
from hypothesis import given, strategies as st

from codingschemes import numerics as nm


def random_psd(rng, n, rank):
    B = rng.standard_normal((n, rank))
    return B @ B.T


# --- quadrature -------------------------------------------------------------

def test_rule_weights_sum_to_sqrt_pi():
    rule = nm.hermite_rule(80)
    assert rule.weights.sum() == pytest.approx(np.sqrt(np.pi), rel=1e-12)
    assert rule.normal_weights.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(rule.weights > 0)


def test_expect_identity_and_second_moment():
    assert nm.gauss_hermite_expect(lambda z: z, 0.7, 2.0) == pytest.approx(0.7, abs=1e-12)
    assert nm.gauss_hermite_expect(lambda z: z ** 2, 0.0, 1.0) == pytest.approx(1.0, abs=1e-10)


def test_expect_erf_matches_closed_form():
    q = nm.gauss_hermite_expect(nm.erf_sigmoid, 1.0, 1.0)
    assert q == pytest.approx(nm.gauss_mean_erf(1.0, 1.0), abs=1e-8)


def test_negative_variance_is_domain_error():
    with pytest.raises(nm.DomainError):
        nm.gauss_hermite_expect(lambda z: z, 0.0, -1.0)
    with pytest.raises(ValueError):
        nm.hermite_rule(1)


@given(st.integers(min_value=2, max_value=30), st.integers(min_value=0, max_value=59))
def test_polynomials_exact_up_to_degree_2n_minus_1(order, degree):
    degree = min(degree, 2 * order - 1)
    # E[z^k] for z ~ N(0,1): (k-1)!! for even k, 0 for odd k
    exact = 0.0 if degree % 2 else float(np.prod(np.arange(degree - 1, 0, -2, dtype=float)) if degree else 1.0)
    rule = nm.hermite_rule(order)
    got = nm.gauss_hermite_expect(lambda z: z ** degree, 0.0, 1.0, rule)
    # odd moments cancel; round-off scales with the absolute moment
    scale = float(np.sum(rule.normal_weights * np.abs(rule.normal_nodes) ** degree))
    assert abs(got - exact) <= 1e-12 * max(scale, 1.0)


# --- closed-form Gaussian means ---------------------------------------------

@given(st.floats(min_value=0.0, max_value=10.0))
def test_erf_mean_at_zero_is_half(var):
    assert nm.gauss_mean_erf(0.0, var) == pytest.approx(0.5, abs=1e-15)


@given(st.floats(min_value=-5, max_value=5))
def test_erf_mean_degenerate(mu):
    assert nm.gauss_mean_erf(mu, 0.0) == pytest.approx(float(nm.erf_sigmoid(mu)), abs=1e-15)


def test_erf_mean_vs_order_200_quadrature_on_grid():
    rule = nm.hermite_rule(200)
    mus, vs = np.meshgrid(np.linspace(-4, 4, 10), np.linspace(0, 4, 10))
    for mu, v in zip(mus.ravel(), vs.ravel()):
        q = nm.gauss_hermite_expect(nm.erf_sigmoid, mu, v, rule)
        assert nm.gauss_mean_erf(mu, v) == pytest.approx(q, rel=1e-10)


@given(st.floats(-4, 4), st.floats(-4, 4), st.floats(0, 4))
def test_erf_mean_monotone_and_bounded(m1, m2, v):
    lo, hi = sorted((m1, m2))
    a, b = nm.gauss_mean_erf(lo, v), nm.gauss_mean_erf(hi, v)
    assert 0 < a <= b < 1


def test_relu_mean_examples():
    assert nm.gauss_mean_relu(0.0, 1.0) == pytest.approx(1 / np.sqrt(2 * np.pi), abs=1e-12)
    assert nm.gauss_mean_relu(2.0, 0.0) == 2.0
    assert nm.gauss_mean_relu(-1.0, 0.0) == 0.0


def test_relu_mean_vs_monte_carlo():
    z = np.random.default_rng(0).standard_normal(1_000_000) - 3.0
    mc = np.maximum(z, 0).mean()
    assert abs(nm.gauss_mean_relu(-3.0, 1.0) - mc) < 1e-3


def test_relu_mean_vs_adaptive_integral():
    from scipy import integrate, stats
    for mu, v in [(-3.0, 1.0), (0.5, 2.0), (1.5, 0.3)]:
        sd = np.sqrt(v)
        q, _ = integrate.quad(lambda s: s * stats.norm.pdf(s, mu, sd), 0, np.inf, epsabs=1e-14)
        assert nm.gauss_mean_relu(mu, v) == pytest.approx(q, rel=1e-8)


@given(st.floats(-4, 4), st.floats(0, 4))
def test_relu_mean_lower_bound(mu, v):
    assert nm.gauss_mean_relu(mu, v) >= max(0.0, mu) - 1e-12


@given(st.floats(0.1, 4))
def test_relu_mean_small_variance_limit(mu):
    assert nm.gauss_mean_relu(mu, 1e-12) == pytest.approx(mu, rel=1e-6)


# --- matrices ---------------------------------------------------------------

def test_pinv_examples(rng):
    assert np.allclose(nm.pseudo_inverse(np.eye(4)), np.eye(4))
    v = rng.standard_normal(5)
    v /= np.linalg.norm(v)
    assert np.allclose(nm.pseudo_inverse(np.outer(v, v)), np.outer(v, v), atol=1e-12)
    with pytest.raises(nm.ShapeError):
        nm.pseudo_inverse(np.ones((2, 3)))


@given(st.integers(2, 7), st.integers(0, 10_000))
def test_penrose_identities(n, seed):
    rng = np.random.default_rng(seed)
    r = int(rng.integers(1, n))
    M = random_psd(rng, n, r)
    Mp = nm.pseudo_inverse(M)
    scale = max(1.0, np.linalg.norm(M), np.linalg.norm(Mp))
    tol = 1e-9 * scale ** 3
    assert np.allclose(M @ Mp @ M, M, atol=tol)
    assert np.allclose(Mp @ M @ Mp, Mp, atol=tol)
    assert np.allclose((M @ Mp).T, M @ Mp, atol=tol)
    assert np.allclose((Mp @ M).T, Mp @ M, atol=tol)


def test_matrix_root_examples(rng):
    assert np.allclose(nm.matrix_root(np.diag([4.0, 9.0]), 2), np.diag([2.0, 3.0]))
    assert np.allclose(nm.matrix_root(np.eye(3), 5), np.eye(3))
    with pytest.raises(nm.DomainError):
        nm.matrix_root(np.diag([1.0, -1.0]), 2)


@given(st.integers(1, 6), st.integers(2, 5), st.integers(0, 10_000))
def test_matrix_root_reconstructs(n, k, seed):
    M = random_psd(np.random.default_rng(seed), n, n) + 0.1 * np.eye(n)
    R = nm.matrix_root(M, k)
    assert np.allclose(R, R.T)
    assert np.min(np.linalg.eigvalsh(R)) >= -1e-12
    assert np.linalg.norm(np.linalg.matrix_power(R, k) - M) <= 1e-9 * np.linalg.norm(M)


@given(st.integers(1, 6), st.integers(0, 10_000))
def test_symmetrize_exact(n, seed):
    A = np.random.default_rng(seed).standard_normal((n, n))
    S = nm.symmetrize(A)
    assert np.array_equal(S, S.T)


def test_is_psd(rng):
    assert nm.is_psd(random_psd(rng, 5, 2))
    assert not nm.is_psd(-np.eye(3))


# --- self-consistent solver ---------------------------------------------------

def test_solver_linear_and_cubic():
    r = nm.solve_self_consistent(lambda x: x - 1.0, np.zeros(1))
    assert r.converged and r.x[0] == pytest.approx(1.0) and r.residual_norm <= 1e-10
    r = nm.solve_self_consistent(lambda x: x ** 3 - 8.0, np.ones(1))
    assert r.converged and r.x[0] == pytest.approx(2.0, abs=1e-8)


def test_solver_reports_nonconvergence():
    # x^2 + 1 has no real root: best iterate returned, flagged
    r = nm.solve_self_consistent(lambda x: x ** 2 + 1.0, np.array([0.5]), max_iter=50)
    assert not r.converged
    assert r.residual_norm >= 1.0 - 1e-8
    assert r.message


@given(st.integers(1, 4), st.integers(0, 10_000))
def test_solver_history_is_monotone(d, seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((d, d)) + 3 * np.eye(d)
    b = rng.standard_normal(d)
    r = nm.solve_self_consistent(lambda x: A @ x + 0.1 * np.tanh(x) ** 3 - b,
                                 rng.standard_normal(d))
    h = np.asarray(r.history)
    assert np.all(np.diff(h) <= 1e-15)


def test_fd_jacobian_matches_analytic(rng):
    A = rng.standard_normal((3, 3))
    J = nm.fd_jacobian(lambda x: A @ x + np.sin(x), np.zeros(3))
    assert np.allclose(J, A + np.eye(3), atol=1e-6)
