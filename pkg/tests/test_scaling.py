from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats
from scipy.special import erfcx, gamma

from volhawkes.errors import (
    DegeneracyError,
    DomainError,
    InsufficientDataError,
    LimitNotConvergedWarning,
    StructuralError,
)
from volhawkes.hawkes import psi_integral, simulate_branching, simulate_thinning
from volhawkes.kernels import ZERO, KernelMatrix, PowerLaw
from volhawkes.scaling import (
    Q_matrix,
    RoughFactorParams,
    _noise_weights,
    _trapezoid_weights,
    general_limit_matrices,
    hurst_estimate,
    mittag_leffler_mean,
    orthonormal_factors,
    rescale,
    seed_sequence,
    simulate_factor_limit,
    simulate_general_vtilde,
    simulate_rough_heston,
)


def test_mittag_leffler_special_cases():
    t = np.linspace(0, 3, 13)
    # E_1(-t) = exp(-t) and E_{1/2}(-sqrt t) = exp(t) erfc(sqrt t)
    np.testing.assert_allclose(mittag_leffler_mean(1.0, 0.0, 1.0, t), np.exp(-t), rtol=1e-10)
    np.testing.assert_allclose(mittag_leffler_mean(0.5, 0.0, 1.0, t), erfcx(np.sqrt(t)), rtol=1e-9)
    np.testing.assert_allclose(mittag_leffler_mean(0.7, 2.0, 2.0, t), 2.0)


@pytest.mark.parametrize("alpha", [0.55, 0.75, 1.0])
def test_fractional_weights_integrate_constants(alpha):
    # I^a 1 = t^a / Gamma(a + 1) for both weight families
    h, n = 0.01, 50
    target = (n * h) ** alpha / gamma(alpha + 1)
    assert h * _noise_weights(alpha, h, n).sum() == pytest.approx(target, rel=1e-12)
    inner, first, last = _trapezoid_weights(alpha, h, n)
    assert inner[1:n].sum() + first[n] + last == pytest.approx(target, rel=1e-12)


def test_trapezoid_weights_integrate_linear_exactly():
    alpha, h, n = 0.65, 0.02, 40
    inner, first, last = _trapezoid_weights(alpha, h, n)
    s = h * np.arange(n + 1)
    f = s  # I^a of s is t^{a+1}/Gamma(a+2)
    approx = first[n] * f[0] + sum(inner[m] * f[n - m] for m in range(1, n)) + last * f[n]
    assert approx == pytest.approx((n * h) ** (alpha + 1) / gamma(alpha + 2), rel=1e-12)


def test_deterministic_scheme_tracks_mittag_leffler():
    p = RoughFactorParams(C=1.0, theta=0.04, lambda_volvol=0.0, alpha=0.7, V0=0.0, speed=2.0)
    t, F, V = simulate_rough_heston(p, 1.0, 400, 0)
    exact = mittag_leffler_mean(0.7, 0.04, 0.0, t, speed=2.0)
    assert np.max(np.abs(V - exact)) / 0.04 < 5e-3


def test_parameter_validation():
    with pytest.raises(DomainError):
        RoughFactorParams(C=1.0, theta=0.1, lambda_volvol=0.1, alpha=0.5)
    with pytest.raises(DomainError):
        RoughFactorParams(C=0.0, theta=0.1, lambda_volvol=0.1, alpha=0.7)
    p = RoughFactorParams(C=1.0, theta=0.1, lambda_volvol=0.1, alpha=0.7)
    with pytest.raises(DomainError):
        simulate_rough_heston(p, 1.0, 5, 0)


def test_rough_heston_is_deterministic_and_nonnegative():
    p = RoughFactorParams(C=1.0, theta=0.05, lambda_volvol=0.5, alpha=0.6, V0=0.05, rho=-0.5)
    a = simulate_rough_heston(p, 1.0, 200, 3, n_paths=4)
    b = simulate_rough_heston(p, 1.0, 200, 3, n_paths=4)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)
    assert np.all(a[2] >= 0)


def _fbm(H, n, paths, rng):
    t = np.arange(1, n + 1, dtype=float)
    cov = 0.5 * (t[:, None] ** (2 * H) + t[None, :] ** (2 * H) - np.abs(t[:, None] - t[None, :]) ** (2 * H))
    L = np.linalg.cholesky(cov)
    return rng.standard_normal((paths, n)) @ L.T


@pytest.mark.parametrize("H", [0.1, 0.3, 0.7])
def test_hurst_estimate_on_exact_fbm(H, rng):
    assert hurst_estimate(_fbm(H, 600, 20, rng)) == pytest.approx(H, abs=0.02)


def test_hurst_estimate_guards():
    with pytest.raises(InsufficientDataError):
        hurst_estimate(np.arange(100.0))
    with pytest.raises(DomainError):
        hurst_estimate(np.arange(600.0) ** 0.5, t=np.arange(600.0) ** 2)


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 8), st.integers(1, 3), st.integers(0, 1000))
def test_orthonormal_factors(n, r, seed):
    z = np.random.default_rng(seed).normal(size=(r, n))
    q = orthonormal_factors(list(z))
    Q = np.array(q)
    np.testing.assert_allclose(Q @ Q.T, np.eye(r), atol=1e-10)
    assert q[0] @ z[0] > 0
    np.testing.assert_allclose(q[0], z[0] / np.linalg.norm(z[0]))


def test_factor_limit_shapes_and_rank():
    vs = orthonormal_factors([np.ones(5), np.linspace(-1, 1, 5)])
    params = RoughFactorParams(C=1.0, theta=0.04, lambda_volvol=0.3, alpha=0.7, V0=0.04)
    t, sigma, F, V = simulate_factor_limit([(vs[0], params), (vs[1], params)], 1.0, 100, 9, n_paths=3)
    assert sigma.shape == (3, 101, 5) and F.shape == (3, 101, 2)
    np.testing.assert_allclose(sigma, F @ np.array(vs))
    s = np.linalg.svd(sigma.reshape(-1, 5), compute_uv=False)
    assert s[2] / s[0] < 1e-12
    with pytest.raises(DomainError):
        simulate_factor_limit([(np.ones(5), params)], 1.0, 100, 0)


def test_seed_sequence_copy_does_not_mutate():
    ss = np.random.SeedSequence(5)
    a = seed_sequence(ss).spawn(2)
    b = seed_sequence(ss).spawn(2)
    assert a[1].generate_state(2).tolist() == b[1].generate_state(2).tolist()
    assert ss.n_children_spawned == 0


def test_rescale_poisson_compensator():
    T, alpha, mu = 200.0, 0.75, 3.0
    k = KernelMatrix.zeros(2)
    log = simulate_thinning(k, mu, T, 1)
    r = rescale(log, k, mu, T, alpha, n_grid=11)
    np.testing.assert_allclose(r.Y[:, 0], mu * r.t * T / T ** (2 * alpha))
    np.testing.assert_allclose(r.sigma[:, 0], r.X[:, 0] - r.X[:, 1])
    np.testing.assert_allclose(r.Z, T**alpha * (r.X - r.Y))
    with pytest.raises(DomainError):
        rescale(log, k, mu, T, 1.0)


def test_q_matrix():
    np.testing.assert_array_equal(Q_matrix(4), [[1, 0], [-1, 0], [0, 1], [0, -1]])
    with pytest.raises(StructuralError):
        Q_matrix(3)


def _critical_kernel(c=1.0, alpha=0.7):
    # one power-law profile with tail exponent alpha: every entry shares it
    W = np.array([[0.3, 0.2], [0.1, 0.4]])
    return KernelMatrix(tuple(tuple(PowerLaw(w, alpha, c) for w in r) for r in W))


@pytest.mark.parametrize("kappa,c", [(1.0, 1.0), (0.5, 2.0)])
def test_general_limit_single_profile_closed_form(kappa, c):
    alpha = 0.7
    mats = general_limit_matrices(_critical_kernel(c, alpha), [1.0, 2.0], alpha, [1e6, 1e8], kappa=kappa)
    assert mats.n_c == 1
    np.testing.assert_allclose(mats.K, [[kappa]], rtol=1e-9)
    # alpha x^a int_x^inf A -> alpha c^a for a unit-mass profile
    np.testing.assert_allclose(mats.M, [[alpha * c**alpha]], rtol=1e-4)
    np.testing.assert_allclose(mats.Lambda, [[kappa / (gamma(1 - alpha) * c**alpha)]], rtol=1e-4)
    assert mats.theta0[0] > 0
    np.testing.assert_allclose(mats.O_inv @ mats.O, np.eye(2), atol=1e-12)


def test_general_limit_rejects_degenerate_kernels():
    with pytest.raises(DegeneracyError):
        general_limit_matrices(KernelMatrix.zeros(2), 1.0, 0.7, [1e4, 1e6])
    with pytest.raises(DomainError):
        general_limit_matrices(_critical_kernel(), 1.0, 0.4, [1e4, 1e6])


def test_general_vtilde_path():
    mats = general_limit_matrices(_critical_kernel(), [1.0, 2.0], 0.7, [1e6, 1e8])
    path = simulate_general_vtilde(mats, 1.0, 100, 4, n_paths=2)
    assert path.sigma.shape == (2, 101, 1)
    assert path.Vtilde.shape == (2, 101, 1)
    np.testing.assert_allclose(path.V, path.Vtilde @ mats.Theta().T)
    again = simulate_general_vtilde(mats, 1.0, 100, 4, n_paths=2)
    np.testing.assert_array_equal(path.sigma, again.sigma)


def test_rescaled_noise_is_a_martingale():
    k = KernelMatrix.exponential([[0.3, 0.2], [0.2, 0.3]], 5.0)
    T, alpha, mu = 20.0, 0.75, np.array([1.0, 1.5])
    z = np.array([rescale(simulate_branching(k, mu, T, s), k, mu, T, alpha, n_grid=3).Z[-1] for s in range(1000)])
    se = z.std(axis=0, ddof=1) / np.sqrt(z.shape[0])
    assert np.all(np.abs(z.mean(axis=0)) < 3 * se)


def test_poisson_rescaled_counts_follow_the_baseline():
    T, alpha, mu = 50.0, 0.75, 2.0
    k = KernelMatrix.zeros(2)
    x = np.mean([rescale(simulate_thinning(k, mu, T, s), k, mu, T, alpha, n_grid=5).X for s in range(200)], axis=0)
    t = np.linspace(0, 1, 5)
    np.testing.assert_allclose(x[:, 0], mu * t * T ** (1 - 2 * alpha), rtol=0.05, atol=1e-12)


def test_deterministic_scheme_converges_under_refinement():
    # fine-grid run at 10x the resolution is the reference
    p = RoughFactorParams(C=1.0, theta=0.04, lambda_volvol=0.0, alpha=0.65, V0=0.01, speed=3.0)
    _, _, coarse = simulate_rough_heston(p, 1.0, 200, 0)
    _, _, fine = simulate_rough_heston(p, 1.0, 2000, 0)
    assert abs(coarse[-1] / fine[-1] - 1) < 1e-3
    assert np.all(np.diff(fine) >= -1e-12)


@settings(max_examples=15, deadline=None)
@given(st.floats(0.55, 1.0), st.floats(0.1, 3.0), st.integers(0, 1000))
def test_variance_is_never_negative(alpha, volvol, seed):
    p = RoughFactorParams(C=1.0, theta=0.01, lambda_volvol=volvol, alpha=alpha, V0=0.0)
    _, _, V = simulate_rough_heston(p, 1.0, 50, seed, n_paths=5)
    assert np.all(V >= 0)


def test_hurst_of_brownian_and_linear_paths(rng):
    w = np.cumsum(rng.standard_normal((100, 10_000)), axis=1)
    assert 0.45 <= hurst_estimate(w) <= 0.55
    assert hurst_estimate(np.linspace(0, 1, 1000)) == pytest.approx(1.0, abs=1e-9)


def test_level_factor_moves_the_grid_in_lockstep():
    v = np.ones(4) / 2.0
    p = RoughFactorParams(C=1.0, theta=0.04, lambda_volvol=0.3, alpha=0.7, V0=0.04)
    _, sigma, F, _ = simulate_factor_limit([(v, p)], 1.0, 100, 2)
    np.testing.assert_allclose(sigma, np.repeat(sigma[:, :1], 4, axis=1))


def test_zero_kernel_has_zero_delta():
    np.testing.assert_array_equal(psi_integral(np.zeros((4, 4))), 0.0)


def test_diagonal_kernel_theta_collapses():
    k = KernelMatrix(((PowerLaw(0.56, 0.7), ZERO), (ZERO, PowerLaw(0.21, 0.7))))
    # unsigned kernel: psi grows with T, so Delta is only extrapolated
    with pytest.warns(LimitNotConvergedWarning):
        mats = general_limit_matrices(k, [1.0, 1.0], 0.7, [1e6, 1e8])
    assert mats.n_c == 1
    np.testing.assert_allclose(mats.B_int, 0.0, atol=1e-15)
    Kinv = np.linalg.inv(mats.K)
    np.testing.assert_allclose(mats.Theta1, mats.O[:1, :1] @ Kinv)
    np.testing.assert_allclose(mats.Theta2, mats.O[1:, :1] @ Kinv)


def test_general_surface_is_a_contrast_of_drivers_without_delta():
    mats = general_limit_matrices(_critical_kernel(), [0.0, 0.0], 0.7, [1e6, 1e8], kappa=1.0)
    mats = replace(mats, Delta=np.zeros_like(mats.Delta), theta0=np.array([1.0]))
    path = simulate_general_vtilde(mats, 1.0, 100, 0, n_paths=400)
    np.testing.assert_allclose(path.sigma, path.drivers @ mats.Q)
    terminal = path.sigma[:, -1, 0]
    assert abs(terminal.mean()) < 3 * terminal.std(ddof=1) / np.sqrt(terminal.size)


def test_one_factor_case_matches_rough_heston_law():
    mats = general_limit_matrices(_critical_kernel(), [1.0, 2.0], 0.7, [1e6, 1e8])
    params = mats.one_factor_params()
    a = simulate_general_vtilde(mats, 1.0, 100, 1, n_paths=2000).Vtilde[:, -1, 0]
    _, _, b = simulate_rough_heston(params, 1.0, 100, 2, n_paths=2000)
    assert stats.ks_2samp(a, b[:, -1]).pvalue > 0.01
