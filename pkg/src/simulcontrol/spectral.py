"""Dirichlet eigenproblem for -d^2/dx^2 + V on (0, 1).

The operator is discretized by a sine-spectral Galerkin method: it is
expanded in the V=0 eigenfunctions sqrt(2) sin(m pi x), m = 1..M, and the
potential matrix is assembled with a composite Gauss-Legendre rule.
Everything downstream works with coefficients in the resulting eigenbasis.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import EigenSolveError

SQRT2 = np.sqrt(2.0)


@dataclass(frozen=True)
class Grid:
    """Composite Gauss-Legendre quadrature on (0, 1).

    Attributes
    ----------
    n_points : int
        Total number of nodes.
    x : ndarray
        Nodes, strictly increasing inside (0, 1).
    w : ndarray
        Weights, summing to one.
    panel_order : int
        Nodes per panel.
    """

    n_points: int
    x: np.ndarray = field(repr=False)
    w: np.ndarray = field(repr=False)
    panel_order: int = 16

    def integrate(self, values):
        """Integrate samples (last axis on the grid) over (0, 1)."""
        return np.asarray(values) @ self.w


def make_grid(n_points: int = 1024, panel_order: int = 16) -> Grid:
    """Build a composite Gauss-Legendre grid with ``n_points`` nodes."""
    if n_points < 64:
        raise ValueError("n_points must be at least 64")
    if n_points % panel_order:
        raise ValueError(f"n_points={n_points} is not a multiple of panel_order={panel_order}")
    xg, wg = np.polynomial.legendre.leggauss(panel_order)
    panels = n_points // panel_order
    h = 1.0 / panels
    x = ((np.arange(panels)[:, None] + 0.5 * (xg[None, :] + 1.0)) * h).ravel()
    w = np.tile(0.5 * h * wg, panels)
    return Grid(n_points=n_points, x=x, w=w, panel_order=panel_order)


_KINDS = ("zero", "constant", "polynomial", "fourier", "samples", "sum")


@dataclass(frozen=True)
class Potential:
    """Real function on [0, 1] given by a small parametric description.

    ``kind`` selects the form of ``params``:

    * ``zero``: no parameters.
    * ``constant``: ``(c,)``.
    * ``polynomial``: ascending coefficients ``(c0, c1, ...)``.
    * ``fourier``: ``(a0, a1, b1, a2, b2, ...)`` for
      ``a0 + sum_n a_n cos(2 pi n x) + b_n sin(2 pi n x)``.
    * ``samples``: values on a uniform grid including both endpoints,
      interpolated by a cubic spline.
    * ``sum``: ``params`` is a tuple of ``(weight, Potential)`` pairs.
    """

    kind: str = "zero"
    params: tuple = ()

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown potential kind {self.kind!r}")
        if self.kind == "sum":
            object.__setattr__(self, "params", tuple((float(c), p) for c, p in self.params))
        else:
            vals = tuple(float(p) for p in np.ravel(self.params))
            if not np.all(np.isfinite(vals)):
                raise ValueError("potential parameters must be finite")
            object.__setattr__(self, "params", vals)
        if self.kind == "samples" and len(self.params) < 4:
            raise ValueError("samples potential needs at least 4 values")

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        p = self.params
        if self.kind == "zero":
            return np.zeros_like(x)
        if self.kind == "constant":
            return np.full_like(x, p[0] if p else 0.0)
        if self.kind == "polynomial":
            return np.polynomial.polynomial.polyval(x, p) if p else np.zeros_like(x)
        if self.kind == "fourier":
            out = np.full_like(x, p[0] if p else 0.0)
            for n in range(1, (len(p) - 1) // 2 + 1):
                out = out + p[2 * n - 1] * np.cos(2 * np.pi * n * x) + p[2 * n] * np.sin(2 * np.pi * n * x)
            return out
        if self.kind == "samples":
            nodes = np.linspace(0.0, 1.0, len(p))
            return CubicSpline(nodes, np.asarray(p))(x)
        out = np.zeros_like(x)
        for c, pot in p:
            out = out + c * pot(x)
        return out

    def __add__(self, other):
        return Potential("sum", ((1.0, self), (1.0, other)))

    def scaled(self, c):
        return Potential("sum", ((float(c), self),))

    def to_dict(self):
        if self.kind == "sum":
            return {"kind": "sum", "terms": [[c, q.to_dict()] for c, q in self.params]}
        return {"kind": self.kind, "coefficients": list(self.params)}

    @classmethod
    def from_dict(cls, d):
        kind = d.get("kind", "zero")
        if kind == "sum":
            return cls("sum", tuple((c, cls.from_dict(q)) for c, q in d["terms"]))
        coeffs = d.get("coefficients", d.get("params", ()))
        if np.isscalar(coeffs):
            coeffs = (coeffs,)
        return cls(kind, tuple(coeffs))


@dataclass(frozen=True)
class SpectralBasis:
    """First ``K`` eigenpairs of A_V on a quadrature grid.

    ``coeffs`` holds the eigenvectors as rows of sine coefficients when the
    basis comes from :func:`build_basis`; ``dphi0`` stores phi_k'(0), which
    fixes the sign convention.
    """

    V: Potential
    K: int
    lam: np.ndarray = field(repr=False)
    phi: np.ndarray = field(repr=False)
    mean_V: float
    grid: Grid = field(repr=False)
    dphi0: np.ndarray = field(repr=False, default=None)
    coeffs: np.ndarray = field(repr=False, default=None)

    @property
    def lambda_(self):
        return self.lam

    def project(self, f):
        """Coefficients <f, phi_k> of grid samples ``f`` (last axis)."""
        return (np.asarray(f) * self.grid.w) @ self.phi.T

    def synthesize(self, c):
        """Grid samples of sum_k c_k phi_k."""
        return np.asarray(c) @ self.phi


@dataclass(frozen=True)
class DipoleMatrix:
    """Matrix B[j, k] = <mu phi_j, phi_k> in a given eigenbasis."""

    mu: Potential
    B: np.ndarray = field(repr=False)


def _sine_table(m, x):
    return SQRT2 * np.sin(np.pi * np.outer(m, x))


def default_modes(grid: Grid) -> int:
    """Number of sine modes the grid integrates to round-off."""
    return (3 * grid.n_points) // 16


def build_basis(V: Potential, K: int, grid: Grid | None = None, n_modes: int | None = None) -> SpectralBasis:
    """Solve the Dirichlet eigenproblem for A_V and keep the first K pairs.

    Parameters
    ----------
    V : Potential
        Real potential.
    K : int
        Number of eigenpairs to keep.
    grid : Grid, optional
        Quadrature grid, default 1024 nodes.
    n_modes : int, optional
        Size of the sine Galerkin space, default ``3 n_points / 16``.

    Returns
    -------
    SpectralBasis
    """
    grid = grid or make_grid()
    M = n_modes or default_modes(grid)
    if K < 1:
        raise ValueError("K must be positive")
    if K > M:
        raise ValueError(f"K={K} exceeds the Galerkin space size {M}; use a finer grid")
    m = np.arange(1, M + 1)
    S = _sine_table(m, grid.x)
    Vx = V(grid.x)
    H = (S * (grid.w * Vx)) @ S.T
    H = 0.5 * (H + H.T)
    H[np.diag_indices(M)] += (m * np.pi) ** 2
    evals, evecs = np.linalg.eigh(H)
    evals, evecs = evals[:K], evecs[:, :K]
    resid = np.linalg.norm(H @ evecs - evecs * evals, axis=0)
    scale = max(1.0, float(np.abs(evals).max()))
    if not np.all(resid < 1e-8 * scale):
        raise EigenSolveError("eigensolve residual too large", residuals=resid)
    gaps = np.diff(evals)
    if np.any(gaps < 1e-9):
        k = int(np.argmin(gaps))
        raise EigenSolveError(f"near-degenerate eigenvalues at k={k + 1}, gap {gaps[k]:.3e}", residuals=resid)
    C = evecs.T
    d0 = C @ (SQRT2 * np.pi * m)
    sign = np.where(d0 < 0, -1.0, 1.0)
    C = C * sign[:, None]
    d0 = d0 * sign
    phi = C @ S
    return SpectralBasis(V=V, K=K, lam=evals.copy(), phi=phi, mean_V=float(grid.integrate(Vx)),
                         grid=grid, dphi0=d0, coeffs=C)


def asymptotic_remainders(basis: SpectralBasis):
    """Return r_k = lambda_k - k^2 pi^2 - int V and the running sums of r_k^2."""
    k = np.arange(1, basis.K + 1)
    r = basis.lam - (k * np.pi) ** 2 - basis.mean_V
    return r, np.cumsum(r ** 2)


def sobolev_norm(psi, s: int = 3, basis: SpectralBasis | None = None) -> float:
    """k^s weighted l2 norm of eigenbasis coefficients.

    ``psi`` may be a coefficient vector or an N x K array, in which case the
    norm of the whole array is returned.
    """
    psi = np.asarray(psi)
    if basis is not None and psi.shape[-1] > basis.K:
        raise ValueError("coefficient vector longer than the basis")
    k = np.arange(1, psi.shape[-1] + 1, dtype=float)
    return float(np.sqrt(np.sum(np.abs(psi * k ** s) ** 2)))


def h3_distance(a, b) -> float:
    """Sum over rows of the k^3 weighted distance between two tuples."""
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    return float(sum(sobolev_norm(x - y, 3) for x, y in zip(a, b)))


def dipole_matrix(mu: Potential, basis: SpectralBasis) -> DipoleMatrix:
    """Assemble B[j, k] = <mu phi_j, phi_k> by grid quadrature."""
    g = basis.grid
    B = (basis.phi * (g.w * mu(g.x))) @ basis.phi.T
    return DipoleMatrix(mu=mu, B=0.5 * (B + B.T))


def eigenvalue_derivative(W: Potential, P: Potential, j: int, basis_W: SpectralBasis) -> float:
    """d lambda_j(W + s P)/ds at s=0, i.e. <P, phi_j^2> (``j`` is 1-based)."""
    if not 1 <= j <= basis_W.K:
        raise ValueError("j out of range")
    g = basis_W.grid
    return float(g.integrate(P(g.x) * basis_W.phi[j - 1] ** 2))


def frame_basis(basis: SpectralBasis, dipole: DipoleMatrix, u0: float):
    """Eigenbasis of the truncated Hamiltonian diag(lambda) - u0 B.

    This is the Galerkin-consistent basis for the potential V - u0 mu: it
    spans the same K-dimensional space as ``basis``, so propagating in it
    with control u is identical, up to round-off, to propagating in
    ``basis`` with control u + u0.

    Returns
    -------
    new_basis : SpectralBasis
    new_dipole : DipoleMatrix
    Q : ndarray
        Real orthogonal matrix; new coefficients are ``c @ Q`` for old
        coefficient rows ``c``.
    """
    H = np.diag(basis.lam) - u0 * dipole.B
    evals, Q = np.linalg.eigh(0.5 * (H + H.T))
    d0 = Q.T @ basis.dphi0
    sign = np.where(d0 < 0, -1.0, 1.0)
    Q = Q * sign
    d0 = d0 * sign
    phi = Q.T @ basis.phi
    V = basis.V + dipole.mu.scaled(-u0)
    coeffs = Q.T @ basis.coeffs if basis.coeffs is not None else None
    new = SpectralBasis(V=V, K=basis.K, lam=evals, phi=phi,
                        mean_V=basis.mean_V - u0 * float(basis.grid.integrate(dipole.mu(basis.grid.x))),
                        grid=basis.grid, dphi0=d0, coeffs=coeffs)
    Bn = Q.T @ dipole.B @ Q
    return new, DipoleMatrix(mu=dipole.mu, B=0.5 * (Bn + Bn.T)), Q


def basis_to_csv(basis: SpectralBasis, path) -> None:
    """Write columns k, lambda_k, r_k."""
    r, _ = asymptotic_remainders(basis)
    k = np.arange(1, basis.K + 1)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("k,lambda_k,r_k\n")
        for kk, lam, rr in zip(k, basis.lam, r):
            fh.write(f"{kk},{float(lam)!r},{float(rr)!r}\n")
