import numpy as np
import pytest

from simulcontrol.spectral import Potential, build_basis, dipole_matrix, make_grid

X2 = Potential("polynomial", (0.0, 0.0, 1.0))


@pytest.fixture(scope="session")
def grid():
    return make_grid(1024)


@pytest.fixture(scope="session")
def free(grid):
    """V = 0, mu = x^2, K = 16."""
    b = build_basis(Potential(), 16, grid)
    return b, dipole_matrix(X2, b)


@pytest.fixture(scope="session")
def linear(grid):
    """V = x, mu = x^2, K = 16."""
    b = build_basis(Potential("polynomial", (0.0, 1.0)), 16, grid)
    return b, dipole_matrix(X2, b)


@pytest.fixture(scope="session")
def small_linear(grid):
    """V = x, mu = x^2, K = 8 (cheap reference trajectories)."""
    b = build_basis(Potential("polynomial", (0.0, 1.0)), 8, grid)
    return b, dipole_matrix(X2, b)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_tuple(rng, N, K, modes=None, decay=3):
    """Orthonormal N x K tuple with k^-decay weighted random entries."""
    modes = modes or K
    c = rng.normal(size=(N, modes)) + 1j * rng.normal(size=(N, modes))
    c /= np.arange(1, modes + 1) ** decay
    q, _ = np.linalg.qr(c.T)
    out = np.zeros((N, K), dtype=complex)
    out[:, :modes] = q.T
    return out
