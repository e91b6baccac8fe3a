import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad
from scipy.linalg import eigh_tridiagonal

from simulcontrol.spectral import (Potential, asymptotic_remainders, build_basis, dipole_matrix,
                                   eigenvalue_derivative, frame_basis, h3_distance, make_grid, sobolev_norm)


def fd_eigenvalues(V, n, k):
    """Second-order finite differences on n interior points."""
    h = 1.0 / (n + 1)
    x = h * np.arange(1, n + 1)
    d = 2.0 / h ** 2 + V(x)
    e = -np.ones(n - 1) / h ** 2
    return eigh_tridiagonal(d, e, select="i", select_range=(0, k - 1), eigvals_only=True)


def test_grid_weights_and_nodes(grid):
    assert abs(grid.w.sum() - 1) < 1e-12
    assert np.all(np.diff(grid.x) > 0) and grid.x[0] > 0 and grid.x[-1] < 1


def test_grid_rejects_bad_sizes():
    with pytest.raises(ValueError):
        make_grid(32)
    with pytest.raises(ValueError):
        make_grid(1000)


def test_free_spectrum(free):
    b, _ = free
    k = np.arange(1, 17)
    assert np.max(np.abs(b.lam / (k * np.pi) ** 2 - 1)) < 1e-6


def test_free_eigenfunctions_are_sines(free, grid):
    b, _ = free
    for k in range(1, 6):
        assert np.max(np.abs(b.phi[k - 1] - np.sqrt(2) * np.sin(k * np.pi * grid.x))) < 1e-6


def test_constant_potential_shifts_spectrum(grid):
    b = build_basis(Potential("constant", (3.5,)), 8, grid)
    k = np.arange(1, 9)
    assert np.allclose(b.lam, (k * np.pi) ** 2 + 3.5, rtol=1e-12)


def test_linear_potential_against_finite_differences(grid):
    V = Potential("polynomial", (0.0, 10.0))
    b = build_basis(V, 10, grid)
    # Richardson extrapolation of two second-order solves
    l1 = fd_eigenvalues(V, 4095, 10)
    l2 = fd_eigenvalues(V, 8191, 10)
    ref = (4 * l2 - l1) / 3
    assert np.max(np.abs(b.lam / ref - 1)) < 1e-6
    assert np.max(np.abs(b.lam / l2 - 1)) < 1e-4


def test_orthonormality_and_sign_convention(linear):
    b, _ = linear
    G = (b.phi * b.grid.w) @ b.phi.T
    assert np.max(np.abs(G - np.eye(b.K))) < 1e-10
    assert np.all(b.dphi0 > 0)


def test_resolution_convergence():
    V = Potential("fourier", (0.3, 1.0, -0.5))
    a = build_basis(V, 16, make_grid(1024))
    c = build_basis(V, 16, make_grid(2048))
    assert np.max(np.abs(a.lam[:4] / c.lam[:4] - 1)) < 1e-6


def test_K_beyond_galerkin_space(grid):
    with pytest.raises(ValueError):
        build_basis(Potential(), 500, grid)


def test_remainders_vanish_for_constants(grid):
    for V in (Potential(), Potential("constant", (2.0,))):
        r, cum = asymptotic_remainders(build_basis(V, 12, grid))
        assert np.max(np.abs(r)) < 1e-8
        assert np.all(np.diff(cum) >= 0)


def test_remainders_tail_decreasing(grid):
    b = build_basis(Potential("fourier", (0.0, 0.0, 1.0)), 24, grid)
    r, cum = asymptotic_remainders(b)
    tail = np.maximum.accumulate(np.abs(r)[::-1])[::-1]
    assert np.all(np.diff(tail[4:12]) <= 1e-14)
    assert np.all(np.diff(cum) >= 0)


def test_sobolev_norm_examples():
    e = np.zeros(8)
    e[4] = 1
    assert sobolev_norm(e, 3) == pytest.approx(125.0)
    assert sobolev_norm(np.zeros(8), 3) == 0.0
    c = np.zeros(8)
    c[:2] = 1 / np.sqrt(2)
    assert sobolev_norm(c, 3) == pytest.approx(np.sqrt((1 + 64) / 2))
    assert sobolev_norm(e, 4) == pytest.approx(625.0)


def test_h3_distance_sums_rows():
    a = np.zeros((2, 4))
    b = np.zeros((2, 4))
    b[0, 1] = 1
    b[1, 0] = 1
    assert h3_distance(a, b) == pytest.approx(9.0)


def test_dipole_examples(free, grid):
    b, _ = free
    one = dipole_matrix(Potential("constant", (1.0,)), b)
    assert np.max(np.abs(one.B - np.eye(b.K))) < 1e-10
    Bx = dipole_matrix(Potential("polynomial", (0.0, 1.0)), b).B
    assert np.max(np.abs(np.diag(Bx) - 0.5)) < 1e-10
    val, _ = quad(lambda x: 2 * x * np.sin(np.pi * x) * np.sin(2 * np.pi * x), 0, 1, epsabs=1e-14)
    assert abs(Bx[0, 1] - val) < 1e-10
    assert np.max(np.abs(Bx - Bx.T)) == 0.0


def test_eigenvalue_derivative_trivial(free):
    b, _ = free
    assert eigenvalue_derivative(Potential(), Potential("constant", (1.0,)), 3, b) == pytest.approx(1.0)
    assert eigenvalue_derivative(Potential(), Potential(), 2, b) == 0.0


def test_eigenvalue_derivative_against_fd(grid, rng):
    for _ in range(5):
        W = Potential("polynomial", tuple(rng.normal(size=3)))
        P = Potential("fourier", tuple(rng.normal(size=5)))
        j = int(rng.integers(1, 6))
        bW = build_basis(W, 8, grid)
        d = eigenvalue_derivative(W, P, j, bW)
        s = 1e-4
        lp = build_basis(W + P.scaled(s), 8, grid).lam[j - 1]
        lm = build_basis(W + P.scaled(-s), 8, grid).lam[j - 1]
        fd = (lp - lm) / (2 * s)
        assert abs(d - fd) <= 1e-5 * max(1.0, abs(d))


def test_frame_basis_is_the_shifted_galerkin_problem(free):
    b, B = free
    fb, fB, Q = frame_basis(b, B, -1.0)
    assert np.allclose(Q.T @ Q, np.eye(b.K), atol=1e-13)
    H = np.diag(b.lam) + B.B
    assert np.allclose(Q.T @ H @ Q, np.diag(fb.lam), atol=1e-10)
    # low modes agree with a direct solve for V + mu
    direct = build_basis(Potential("polynomial", (0.0, 0.0, 1.0)), 16, b.grid)
    assert np.max(np.abs(fb.lam[:3] / direct.lam[:3] - 1)) < 1e-6
    assert np.all(fb.dphi0 > 0)


@settings(max_examples=15, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=1, max_size=4))
def test_weyl_bounds_for_polynomial_potentials(coeffs):
    grid = make_grid(256)
    V = Potential("polynomial", tuple(coeffs))
    b = build_basis(V, 6, grid)
    vx = V(np.linspace(0, 1, 2001))
    k = np.arange(1, 7)
    assert np.all(np.diff(b.lam) > 0)
    assert np.all(b.lam >= (k * np.pi) ** 2 + vx.min() - 1e-6)
    assert np.all(b.lam <= (k * np.pi) ** 2 + vx.max() + 1e-6)


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(["constant", "polynomial", "fourier", "samples"]),
       st.lists(st.floats(-5, 5), min_size=5, max_size=7))
def test_potential_round_trip(kind, params):
    p = Potential(kind, tuple(params))
    q = Potential.from_dict(p.to_dict())
    x = np.linspace(0, 1, 11)
    assert np.array_equal(p(x), q(x))
    s = Potential.from_dict((p + q.scaled(2.0)).to_dict())
    assert np.allclose(s(x), 3 * p(x))
