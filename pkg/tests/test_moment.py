import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from simulcontrol.errors import IllConditioned, MinimalityFailure, ResonantLadder
from simulcontrol.moment import (MomentProblem, biorthogonal_family, build_ladder, default_time_grid,
                                 density_diagnostics, moment_residuals, solve_moment)

PI2 = np.pi ** 2


def free_lam(K):
    return (np.arange(1, K + 1) * np.pi) ** 2


def test_ladder_single_particle():
    lad = build_ladder(free_lam(4), 1)
    assert np.allclose(lad.omega, np.array([0, 3, 8, 15]) * PI2)
    assert lad.R_map[(1, 1)] == 0 and lad.R_map[(1, 4)] == 3


def test_ladder_two_particles():
    lad = build_ladder(free_lam(4), 2)
    assert np.allclose(lad.omega, np.array([0, 3, 5, 8, 12, 15]) * PI2)
    assert lad.gamma == pytest.approx(2 * PI2)
    assert lad.R_map[(2, 2)] == 0
    assert lad.pairs[lad.R_map[(2, 3)]] == (2, 3)


def test_ladder_free_K8_distinct_against_integers():
    lad = build_ladder(free_lam(8), 1)
    ints = sorted({0} | {k * k - 1 for k in range(2, 9)})
    assert np.allclose(lad.omega / PI2, ints)


def test_ladder_collision_raises():
    with pytest.raises(ResonantLadder) as e:
        build_ladder(free_lam(8), 4)
    assert e.value.collisions


@pytest.mark.parametrize("N,K", [(1, 12), (2, 9), (3, 8)])
def test_ladder_gap_matches_brute_force(N, K):
    lam = free_lam(K) + np.sin(np.arange(K))  # breaks integer coincidences
    lad = build_ladder(lam, N)
    vals = [0.0] + [lam[k] - lam[j] for j in range(N) for k in range(j + 1, K)]
    gaps = [abs(a - b) for a, b in itertools.combinations(vals, 2)]
    assert lad.gamma == pytest.approx(min(gaps))
    assert len(lad) == len(vals)
    diag = density_diagnostics(lad)
    assert diag["gamma"] == pytest.approx(min(gaps))


def test_zero_targets_give_zero_control():
    lad = build_ladder(free_lam(6), 1)
    u = solve_moment(MomentProblem(lad, 1.0, np.zeros(len(lad))))
    assert np.all(u.samples == 0)


def test_unit_mass_target():
    lad = build_ladder(free_lam(6), 1)
    d = np.zeros(len(lad), dtype=complex)
    d[0] = 1
    u = solve_moment(MomentProblem(lad, 1.0, d))
    assert moment_residuals(u, lad.omega, d, nodes=8).max() < 1e-8
    assert u.integral() == pytest.approx(1.0, abs=1e-10)


def _admissible(rng, lad):
    d = rng.normal(size=len(lad)) + 1j * rng.normal(size=len(lad))
    d[lad.omega == 0] = d[lad.omega == 0].real
    return d


def test_random_two_particle_targets(rng, linear):
    b, _ = linear
    lad = build_ladder(b.lam[:8], 2)
    d = _admissible(rng, lad)
    u = solve_moment(MomentProblem(lad, 2.0, d))
    assert moment_residuals(u, lad.omega, d, nodes=8).max() < 1e-8
    u2 = solve_moment(MomentProblem(lad, 2.0, d))
    assert np.array_equal(u.samples, u2.samples)


def test_minimal_norm_among_solutions(rng):
    lad = build_ladder(free_lam(5), 1)
    d = _admissible(rng, lad)
    u = solve_moment(MomentProblem(lad, 1.0, d))
    # adding anything orthogonal to the moment rows only increases the norm
    noise = rng.normal(size=u.samples.size)
    t = u.t_grid
    from simulcontrol.moment import plateau_exp_averages, _real_rows
    rows, _ = _real_rows(plateau_exp_averages(lad.omega, t), lad.omega)
    dt = np.diff(t)
    coef = np.linalg.solve((rows * dt) @ rows.T, (rows * dt) @ noise)
    perp = noise - coef @ rows
    w = u.samples + perp
    assert np.sum(w ** 2 * dt) > np.sum(u.samples ** 2 * dt)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_moment_linearity(seed):
    rng = np.random.default_rng(seed)
    lad = build_ladder(free_lam(6), 2)
    d1, d2 = _admissible(rng, lad), _admissible(rng, lad)
    a = solve_moment(MomentProblem(lad, 2.0, d1))
    b = solve_moment(MomentProblem(lad, 2.0, d2))
    c = solve_moment(MomentProblem(lad, 2.0, d1 + d2))
    assert np.max(np.abs(c.samples - a.samples - b.samples)) < 1e-8 * max(1.0, np.abs(c.samples).max())


def test_ill_conditioned_horizon():
    lam = free_lam(8) + np.array([0, 1e-3, 0, 0, 0, 0, 0, 0])
    lad = build_ladder(lam, 2)
    d = np.zeros(len(lad))
    with pytest.raises(IllConditioned):
        solve_moment(MomentProblem(lad, 1e-3, d), t_grid=default_time_grid(lad.omega.max(), 1e-3, minimum=64),
                     cond_limit=1e6)


def test_problem_validation():
    lad = build_ladder(free_lam(4), 1)
    with pytest.raises(ValueError):
        MomentProblem(lad, 1.0, np.array([1j, 0, 0, 0]))
    with pytest.raises(ValueError):
        MomentProblem(lad, 1.0, np.zeros(3))


def test_orthonormal_family_is_self_dual():
    M = 64
    w = np.full(M, 1.0 / M)
    F = np.array([np.exp(2j * np.pi * n * np.arange(M) / M) for n in range(5)])
    g = biorthogonal_family(F, w)
    assert np.max(np.abs(g - F)) < 1e-12


def test_exponential_family_duality():
    lad = build_ladder(free_lam(8), 1)
    T = 2.0
    t = default_time_grid(lad.omega.max(), T, per_period=16)
    mid = 0.5 * (t[1:] + t[:-1])
    w = np.diff(t)
    F = np.exp(1j * np.outer(lad.omega, mid))
    g = biorthogonal_family(F, w)
    D = (g * w) @ F.conj().T
    assert np.max(np.abs(D - np.eye(len(lad)))) < 1e-8
    with pytest.raises(ValueError):
        biorthogonal_family(F, w, real_indices=[0])


def test_real_duals_of_conjugation_closed_family():
    lad = build_ladder(free_lam(6), 1)
    t = default_time_grid(lad.omega.max(), 2.0, per_period=16)
    mid = 0.5 * (t[1:] + t[:-1])
    w = np.diff(t)
    E = np.exp(1j * np.outer(lad.omega[1:], mid))
    F = np.vstack([np.ones_like(mid), E, E.conj()])
    g = biorthogonal_family(F, w, real_indices=[0])
    assert np.all(g[0].imag == 0)
    D = (g * w) @ F.conj().T
    assert np.max(np.abs(D - np.eye(F.shape[0]))) < 1e-8


def test_dependent_family_rejected():
    F = np.array([np.ones(10), 2 * np.ones(10), np.arange(10.0)])
    with pytest.raises(MinimalityFailure):
        biorthogonal_family(F, np.ones(10))


def test_density_diagnostics_trends():
    lad = build_ladder(free_lam(16), 1)
    diag = density_diagnostics(lad, T_values=(0.5, 1.0, 2.0, 4.0))
    dens = np.array(diag["n_plus_over_r"])
    # vanishing density: the curve decays over the sampled decades
    assert dens[-1] < 0.1 * dens[0]
    assert np.all(dens[6:] <= dens[:-6])
    c = diag["gram_condition"]
    assert all(c[i + 1] <= c[i] * (1 + 1e-9) for i in range(len(c) - 1))
    assert np.all(np.diff(diag["packet_gaps"]) > 0)
