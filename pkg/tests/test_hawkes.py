import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from volhawkes.errors import DomainError, InstabilityError, StructuralError, SupercriticalWarning
from volhawkes.hawkes import (
    EventLog,
    compensator,
    expected_intensity_path,
    intensity_at,
    psi_integral,
    simulate_branching,
    simulate_thinning,
    stationary_intensity,
)
from volhawkes.kernels import Exponential, KernelMatrix, PowerLaw


def test_psi_scalar():
    np.testing.assert_allclose(psi_integral(np.array([[0.5]])), [[1.0]])


def test_stationary_intensity_matches_neumann_series():
    # sum_k Phi^k mu truncated at 400 terms, frozen
    k = KernelMatrix.exponential([[0.3, 0.2], [0.1, 0.4]], 1.0)
    np.testing.assert_allclose(stationary_intensity(k, [1.0, 2.0]), [2.5, 3.75], rtol=1e-12)


def test_unstable_kernel_has_no_stationary_intensity():
    with pytest.raises(InstabilityError):
        stationary_intensity(KernelMatrix.exponential([[1.2]], 1.0), 1.0)


def test_supercritical_simulation_warns():
    with pytest.warns(SupercriticalWarning):
        simulate_thinning(KernelMatrix.exponential([[5.5]], 5.0), 1.0, 1.0, 0)


def test_baseline_validation():
    k = KernelMatrix.zeros(2)
    with pytest.raises(StructuralError):
        simulate_thinning(k, [1.0, 2.0, 3.0], 1.0, 0)
    with pytest.raises(DomainError):
        simulate_thinning(k, [-1.0, 1.0], 1.0, 0)


def test_event_log_validation():
    with pytest.raises(DomainError):
        EventLog((np.array([0.2, 0.1]),), 1.0)
    with pytest.raises(DomainError):
        EventLog((np.array([1.5]),), 1.0)


def _events():
    return EventLog((np.array([0.1, 0.4, 0.9]), np.array([0.3, 0.35])), 2.0)


def _kernel():
    return KernelMatrix(
        (
            (PowerLaw(0.3, 0.5, 0.2), Exponential(0.2, 3.0)),
            (Exponential(0.1, 1.0), PowerLaw(0.25, 0.8, 0.1)),
        )
    )


def test_compensator_matches_quadrature():
    log, k, mu = _events(), _kernel(), np.array([0.7, 1.1])
    breaks = np.concatenate(log.times)
    grid = np.array([0.25, 1.0, 2.0])
    exact = compensator(log, k, mu, grid)
    for n, t in enumerate(grid):
        for i in range(2):
            val, _ = integrate.quad(lambda s: intensity_at(s, log, k, mu)[i], 0, t, points=breaks[breaks < t], limit=200)
            assert exact[n, i] == pytest.approx(val, rel=1e-7)


def test_intensity_jumps_by_kernel_at_zero():
    log, k, mu = _events(), _kernel(), np.array([0.7, 1.1])
    t = 0.4  # component 0 event
    jump = intensity_at(t + 1e-12, log, k, mu) - intensity_at(t, log, k, mu)
    np.testing.assert_allclose(jump, k.at_zero()[:, 0], rtol=1e-6)


def test_expected_intensity_exponential_closed_form():
    a, b, mu = 0.6, 2.0, 1.5
    t = np.linspace(0, 3, 601)
    m = expected_intensity_path(KernelMatrix.exponential([[a]], b), mu, t_grid=t)[:, 0]
    exact = mu * b / (b - a) - mu * a / (b - a) * np.exp(-(b - a) * t)
    np.testing.assert_allclose(m, exact, rtol=1e-5)


@settings(max_examples=20, deadline=None)
@given(st.floats(0.05, 0.9), st.floats(0.2, 2.0))
def test_expected_intensity_is_monotone(mass, mu):
    # power-law mass is alpha / gamma
    k = KernelMatrix.power_law([[0.7 * mass]], 0.7, 0.1)
    m = expected_intensity_path(k, mu, horizon=2.0, steps=100)[:, 0]
    assert np.all(np.diff(m) >= -1e-12)
    assert m[-1] <= mu / (1 - mass) * (1 + 1e-3)


@pytest.mark.parametrize("sampler", [simulate_thinning, simulate_branching])
def test_samplers_are_deterministic(sampler):
    k = _kernel()
    a, b = sampler(k, [1.0, 2.0], 20.0, 7), sampler(k, [1.0, 2.0], 20.0, 7)
    for x, y in zip(a.times, b.times):
        np.testing.assert_array_equal(x, y)


@pytest.mark.parametrize("sampler", [simulate_thinning, simulate_branching])
def test_time_rescaled_gaps_are_unit_exponential(sampler):
    # compensator increments between events are iid Exp(1) under the true law
    k, mu = _kernel(), np.array([1.0, 2.0])
    gaps = []
    for seed in range(10):
        log = sampler(k, mu, 50.0, seed)
        for i, ev in enumerate(log.times):
            lam = compensator(log, k, mu, ev)[:, i]
            gaps.append(np.diff(np.concatenate([[0.0], lam])))
    assert stats.kstest(np.concatenate(gaps), "expon").pvalue > 0.01


def test_stationary_intensity_matches_long_run_mean_intensity():
    k = KernelMatrix.exponential([[0.3, 0.2], [0.1, 0.4]], [[4.0, 2.0], [3.0, 5.0]])
    mu = np.array([1.0, 2.0])
    lam_bar = stationary_intensity(k, mu)
    log = simulate_thinning(k, mu, 2000.0, 3)
    grid = np.linspace(100.0, 2000.0, 3000)
    # intensity_at averaged over time after a burn-in
    emp = np.mean([intensity_at(t, log, k, mu) for t in grid], axis=0)
    np.testing.assert_allclose(emp, lam_bar, rtol=0.05)
