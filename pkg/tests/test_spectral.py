import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from thermolimit.heat_forward import Field, solve_heat
from thermolimit.spectral import (
    NoiseSpec, build_drift_matrix, dct_basis, evolve_kspace, integrate_langevin, lattice_propagator,
    singular_values, spectral_system, stability_limit, wavenumbers,
)

finite = st.floats(-1e3, 1e3, allow_nan=False)


def test_two_cell_matrix():
    np.testing.assert_array_equal(build_drift_matrix(2), [[0.5, -0.5], [-0.5, 0.5]])
    np.testing.assert_allclose(singular_values(2), [0.0, 1.0], atol=1e-15)
    assert wavenumbers(2)[1] == pytest.approx(np.pi / 2)


def test_matrix_structure():
    M = build_drift_matrix(6)
    np.testing.assert_array_equal(M, M.T)
    np.testing.assert_array_equal(np.diag(M), [0.5, 1, 1, 1, 1, 0.5])
    np.testing.assert_array_equal(M @ np.ones(6), 0.0)
    with pytest.raises(ValueError):
        build_drift_matrix(1)


def test_eigenvalues_match_dense_solver():
    eig = np.linalg.eigvalsh(build_drift_matrix(40))
    np.testing.assert_allclose(eig, np.sort(singular_values(40)), atol=1e-10)


def test_continuum_approximation_for_lowest_mode():
    s = spectral_system(40)
    assert s.gamma[0] == 0.0
    assert abs(s.gamma[1] - s.gamma_continuum[1]) / s.gamma[1] < 0.002
    assert np.all(np.diff(s.gamma) >= 0)


@pytest.mark.parametrize("n", [2, 3, 8, 40, 128])
def test_dct_diagonalizes_drift(n):
    F = dct_basis(n)
    np.testing.assert_allclose(F @ F.T, np.eye(n), atol=1e-12)
    err = np.max(np.abs(F @ build_drift_matrix(n) @ F.T - np.diag(singular_values(n))))
    assert err < 1e-10


@settings(max_examples=50, deadline=None)
@given(arrays(float, st.integers(2, 64), elements=finite))
def test_parseval_and_conservation(v):
    s = spectral_system(v.size)
    modes = s.forward(v)
    assert np.sum(modes**2) == pytest.approx(np.sum(v**2), rel=1e-10, abs=1e-10)
    np.testing.assert_allclose(s.inverse(modes), v, atol=1e-9)
    assert abs(np.sum(build_drift_matrix(v.size) @ v)) < 1e-9 * (1 + np.abs(v).sum())


def test_white_noise_has_equal_variance_in_both_domains():
    rng = np.random.default_rng(1)
    noise = 3.0 * rng.standard_normal((20_000, 32))
    modes = spectral_system(32).forward(noise)
    np.testing.assert_allclose(noise.var(axis=0).mean(), modes.var(axis=0).mean(), rtol=0.01)
    np.testing.assert_allclose(modes.var(axis=0), 9.0, rtol=0.05)


def test_lattice_propagator_is_stochastic_and_semigroup():
    P5 = lattice_propagator(10, 5)
    np.testing.assert_allclose(P5.sum(axis=0), 1.0, atol=1e-12)
    assert P5.min() > -1e-12
    np.testing.assert_allclose(lattice_propagator(10, 2) @ lattice_propagator(10, 3), P5, atol=1e-12)


# ---------------------------------------------------------------- Langevin


def test_uniform_state_is_stationary():
    M = build_drift_matrix(12)
    series = integrate_langevin(np.full(12, 4.0), M, None, 0.2, 50)
    np.testing.assert_allclose(series.counts, 4.0, atol=1e-12)


def test_noiseless_delta_matches_heat_solution():
    n = 40
    initial = np.zeros(n)
    initial[20] = 1000.0
    series = integrate_langevin(initial, build_drift_matrix(n), NoiseSpec(0.0), 0.1, 200)
    exact = solve_heat(Field(initial, alpha=0.5), [20.0])[0].values
    assert np.linalg.norm(series.counts[-1] - exact) / np.linalg.norm(exact) < 0.01
    assert series.times[-1] == pytest.approx(20.0)


def test_first_order_convergence():
    n, t_final = 40, 20.0
    s = spectral_system(n)
    initial = np.zeros(n)
    initial[20] = 1000.0
    exact = s.inverse(s.forward(initial) * np.exp(-s.gamma * t_final))
    dts = [0.2, 0.1, 0.05, 0.025]
    errs = []
    for dt in dts:
        steps = int(round(t_final / dt))
        out = integrate_langevin(initial, build_drift_matrix(n), None, dt, steps, record_every=steps)
        errs.append(np.max(np.abs(out.counts[-1] - exact)))
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    np.testing.assert_allclose(orders, 1.0, atol=0.2)


def test_unstable_step_rejected_with_bound():
    M = build_drift_matrix(40)
    limit = stability_limit(M)
    assert limit == pytest.approx(1 / (2 * singular_values(40).max()))
    with pytest.raises(ValueError, match="stability bound"):
        integrate_langevin(np.ones(40), M, None, 0.3, 10)
    with pytest.raises(ValueError):
        integrate_langevin(np.ones(40), M, None, 0.1, 10, noise_model="pink")


def test_noise_is_deterministic_per_seed_and_conserves_total():
    M = build_drift_matrix(16)
    a = integrate_langevin(np.full(16, 10.0), M, NoiseSpec(4.0, seed=3), 0.1, 100)
    b = integrate_langevin(np.full(16, 10.0), M, NoiseSpec(4.0, seed=3), 0.1, 100)
    np.testing.assert_array_equal(a.counts, b.counts)
    np.testing.assert_allclose(a.totals, 160.0, atol=1e-9)


def test_stationary_variance_matches_ou_prediction():
    n, var, dt = 40, 25.0, 0.05
    s = spectral_system(n)
    rng = np.random.default_rng(7)
    n_real = 20
    # start from an exact stationary draw of the mode-space process
    start_modes = evolve_kspace(np.tile(s.forward(np.full(n, 100.0)), (n_real, 1)), 1e6, s, NoiseSpec(var), rng)
    series = integrate_langevin(s.inverse(start_modes), build_drift_matrix(n), NoiseSpec(var, seed=11), dt, 20_000,
                                record_every=10)
    states = series.counts[1:]  # (time, realization, cell)
    dev = states - 100.0
    per_cell = np.mean(dev**2, axis=(0, 1))
    np.testing.assert_allclose(per_cell, var * (1 - 1 / n), rtol=0.10)
    # every decaying mode relaxes to Var; Euler-Maruyama inflates it by 1/(1 - gamma dt / 2)
    modal = np.mean(s.forward(dev) ** 2, axis=(0, 1))[1:]
    em = var / (1 - s.gamma[1:] * dt / 2)
    # relative standard error of a time-averaged OU square: sqrt(2 / (gamma T n_real))
    rel_se = np.sqrt(2 / (s.gamma[1:] * series.times[-1] * n_real)) + 0.01
    assert np.all(np.abs(modal / em - 1) < 4 * rel_se)
    assert abs(np.mean(modal) / var - 1) < 0.1


def test_white_noise_model_runs_and_differs():
    M = build_drift_matrix(8)
    a = integrate_langevin(np.ones(8), M, NoiseSpec(1.0, 2), 0.1, 20, noise_model="white")
    b = integrate_langevin(np.ones(8), M, NoiseSpec(1.0, 2), 0.1, 20, noise_model="fdt")
    assert not np.allclose(a.counts, b.counts)


# ---------------------------------------------------------------- exact OU update


def test_evolve_kspace_noiseless():
    s = spectral_system(3)
    assert s.gamma[1] == pytest.approx(0.5)
    out = evolve_kspace(np.array([5.0, 1000.0, 0.0]), 10.0, s)
    assert out[0] == 5.0
    assert out[1] == pytest.approx(1000 * np.exp(-5))
    assert out[1] == pytest.approx(6.738, abs=5e-4)


def test_evolve_kspace_stationary_variance():
    s = spectral_system(16)
    rng = np.random.default_rng(0)
    draws = evolve_kspace(np.zeros((10_000, 16)), 1e4, s, NoiseSpec(9.0), rng)
    np.testing.assert_allclose(draws[:, 1:].var(axis=0), 9.0, rtol=0.05)
    np.testing.assert_array_equal(draws[:, 0], 0.0)


def test_exact_ou_and_euler_agree_on_transient_variance():
    # cross-check of the two stochastic integrators at a finite time
    n, var, t = 8, 4.0, 3.0
    s = spectral_system(n)
    exact = var * (1 - np.exp(-2 * s.gamma * t))
    draws = evolve_kspace(np.zeros((20_000, n)), t, s, NoiseSpec(var), np.random.default_rng(1))
    np.testing.assert_allclose(draws.var(axis=0)[1:], exact[1:], rtol=0.05)
    em = integrate_langevin(np.zeros((4000, n)), build_drift_matrix(n), NoiseSpec(var, 5), 0.01, 300,
                            record_every=300)
    em_var = s.forward(em.counts[-1]).var(axis=0)
    np.testing.assert_allclose(em_var[1:], exact[1:], rtol=0.1)


def test_noise_spec_rejects_negative_variance():
    with pytest.raises(ValueError):
        NoiseSpec(-1.0)
