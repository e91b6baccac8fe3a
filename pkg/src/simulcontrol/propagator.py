"""Propagation of N-tuples of wave functions in a truncated eigenbasis.

Every row c of a state solves i c' = (Lambda - u(t) B) c with
Lambda = diag(lambda). Controls are piecewise constant, so on each plateau
the flow is the exponential of a fixed Hermitian matrix. Two integrators
are available:

``exact``
    eigendecomposition of Lambda - u B on every plateau (batched); exact
    for piecewise-constant controls and the default.
``strang``
    e^{-i Lambda d/2} e^{i u B d} e^{-i Lambda d/2} with B diagonalized
    once; second order in the substep d.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import PropagationError, TrajectoryMismatch
from .spectral import DipoleMatrix, SpectralBasis, make_grid

CHUNK = 2048


# ---------------------------------------------------------------- data types

@dataclass
class StateVec:
    """N-tuple of wave functions; ``coeffs[j, k] = <psi^j, phi_k>``."""

    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.atleast_2d(np.asarray(self.coeffs, dtype=complex))

    @property
    def N(self):
        return self.coeffs.shape[0]

    @property
    def K(self):
        return self.coeffs.shape[1]

    def gram(self):
        return gram(self.coeffs)

    def norms(self):
        return np.linalg.norm(self.coeffs, axis=1)

    def conj(self):
        return StateVec(self.coeffs.conj())

    def copy(self):
        return StateVec(self.coeffs.copy())

    @classmethod
    def eigenstates(cls, N, K, phases=None):
        c = np.zeros((N, K), dtype=complex)
        c[np.arange(N), np.arange(N)] = 1.0 if phases is None else np.exp(1j * np.asarray(phases))
        return cls(c)


def as_coeffs(psi):
    """Coefficient array of a StateVec or array-like (always 2-D complex)."""
    if isinstance(psi, StateVec):
        return psi.coeffs
    return np.atleast_2d(np.asarray(psi, dtype=complex))


def gram(c):
    """G[j, m] = <psi^j, psi^m> = sum_k c_jk conj(c_mk)."""
    c = as_coeffs(c)
    return c @ c.conj().T


@dataclass
class Control:
    """Piecewise-constant real control.

    ``samples[m]`` is the value on ``[t_grid[m], t_grid[m+1])``. An optional
    ``packets`` list records the band-limited description the samples came
    from (each a dict with amplitude, frequency, phase and window).
    """

    t_grid: np.ndarray
    samples: np.ndarray
    packets: list = field(default_factory=list)

    def __post_init__(self):
        self.t_grid = np.asarray(self.t_grid, dtype=float)
        self.samples = np.asarray(self.samples, dtype=float)
        if self.t_grid.ndim != 1 or self.samples.shape != (self.t_grid.size - 1,):
            raise ValueError("t_grid must have one more entry than samples")
        if self.t_grid.size and np.any(np.diff(self.t_grid) <= 0):
            raise ValueError("t_grid must be strictly increasing")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("control samples must be finite")

    @property
    def T(self):
        return float(self.t_grid[-1] - self.t_grid[0]) if self.t_grid.size else 0.0

    @property
    def dt(self):
        return np.diff(self.t_grid)

    def l2_norm(self):
        return float(np.sqrt(np.sum(self.samples ** 2 * self.dt)))

    def integral(self):
        return float(np.sum(self.samples * self.dt))

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        idx = np.clip(np.searchsorted(self.t_grid, t, side="right") - 1, 0, self.samples.size - 1)
        return self.samples[idx]

    def reversed(self):
        """w(t) = u(T - t) on the same time origin."""
        t0, t1 = self.t_grid[0], self.t_grid[-1]
        return Control(t0 + (t1 - self.t_grid[::-1]), self.samples[::-1].copy())

    def shifted(self, c):
        """u + c."""
        return Control(self.t_grid.copy(), self.samples + c)

    def scaled(self, s):
        return Control(self.t_grid.copy(), s * self.samples)

    def starting_at(self, t0):
        return Control(self.t_grid - self.t_grid[0] + t0, self.samples.copy(), list(self.packets))

    def __add__(self, other):
        """Pointwise sum on the union of breakpoints (same horizon)."""
        if not np.isclose(self.t_grid[-1], other.t_grid[-1]) or not np.isclose(self.t_grid[0], other.t_grid[0]):
            raise ValueError("controls must share the time interval")
        t = union_grid(self.t_grid, other.t_grid)
        mid = 0.5 * (t[1:] + t[:-1])
        return Control(t, self(mid) + other(mid))

    def resampled(self, t_grid):
        """Same piecewise-constant function on a finer grid."""
        t_grid = np.asarray(t_grid, dtype=float)
        mid = 0.5 * (t_grid[1:] + t_grid[:-1])
        return Control(t_grid, self(mid))

    def refined(self, dt_max):
        """Split plateaus longer than ``dt_max`` into equal pieces."""
        if dt_max is None:
            return self
        if dt_max <= 0:
            raise PropagationError("dt_max must be positive")
        dt = self.dt
        n = np.maximum(1, np.ceil(dt / dt_max - 1e-9).astype(int))
        if np.all(n == 1):
            return self
        pieces = [self.t_grid[m] + dt[m] * np.arange(n[m]) / n[m] for m in range(dt.size)]
        t = np.concatenate(pieces + [self.t_grid[-1:]])
        return Control(t, np.repeat(self.samples, n))

    @classmethod
    def zero(cls, T, n=1):
        return cls(np.linspace(0.0, T, n + 1), np.zeros(n))

    @classmethod
    def constant(cls, value, T, n=1):
        return cls(np.linspace(0.0, T, n + 1), np.full(n, float(value)))

    @classmethod
    def from_function(cls, f, T, n):
        """Sample ``f`` at plateau midpoints of a uniform grid."""
        t = np.linspace(0.0, T, n + 1)
        return cls(t, np.asarray(f(0.5 * (t[1:] + t[:-1])), dtype=float))

    @classmethod
    def from_packets(cls, packets, T, n):
        """Sample sum of amplitude * window(t/T) * cos(frequency t + phase)."""
        def f(t):
            out = np.zeros_like(t)
            for p in packets:
                win = hann(t / T) if p.get("window", "hann") == "hann" else np.ones_like(t)
                out += p["amplitude"] * win * np.cos(p["frequency"] * t + p.get("phase", 0.0))
            return out
        c = cls.from_function(f, T, n)
        c.packets = [dict(p) for p in packets]
        return c

    def to_csv(self, path):
        """Rows (t_m, u_m); the last row repeats the final value at t = T."""
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("t,u\n")
            for t, u in zip(self.t_grid[:-1], self.samples):
                fh.write(f"{float(t)!r},{float(u)!r}\n")
            if self.samples.size:
                fh.write(f"{float(self.t_grid[-1])!r},{float(self.samples[-1])!r}\n")

    @classmethod
    def from_csv(cls, path):
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, 0], data[:-1, 1])


def hann(s):
    """Hann window on [0, 1], zero outside."""
    s = np.asarray(s, dtype=float)
    return np.where((s >= 0) & (s <= 1), np.sin(np.pi * s) ** 2, 0.0)


def union_grid(*grids):
    t = np.unique(np.concatenate(grids))
    keep = np.concatenate([[True], np.diff(t) > 1e-12 * max(1.0, abs(t[-1]))])
    return t[keep]


def concatenate(controls):
    """Glue controls end to end, each shifted to start where the last ended."""
    controls = [c for c in controls if c.samples.size]
    if not controls:
        return Control(np.array([0.0]), np.array([]))
    t = [controls[0].t_grid - controls[0].t_grid[0]]
    s = [controls[0].samples]
    for c in controls[1:]:
        t.append(c.t_grid[1:] - c.t_grid[0] + t[-1][-1])
        s.append(c.samples)
    return Control(np.concatenate(t), np.concatenate(s))


@dataclass
class Trajectory:
    """Snapshots ``states[i]`` (N x K) at ``times[i]`` under ``control``."""

    times: np.ndarray
    states: np.ndarray
    control: Control

    @property
    def final(self):
        return StateVec(self.states[-1].copy())

    @property
    def initial(self):
        return StateVec(self.states[0].copy())

    def norm_drift(self):
        n = np.linalg.norm(self.states, axis=2)
        return float(np.abs(n - n[0]).max())

    def gram_drift(self):
        G = np.einsum("tjk,tmk->tjm", self.states, self.states.conj())
        return float(np.abs(G - G[0]).max())

    def sobolev_profile(self, s=4):
        """k^s weighted norm of the whole tuple at every snapshot."""
        k = np.arange(1, self.states.shape[2] + 1, dtype=float)
        return np.sqrt(np.sum(np.abs(self.states * k ** s) ** 2, axis=(1, 2)))

    def to_csv(self, path):
        """Columns: time, populations |c_jk|^2, row norms, Gram entries."""
        n_t, N, K = self.states.shape
        cols = ["time"]
        cols += [f"pop_{j + 1}_{k + 1}" for j in range(N) for k in range(K)]
        cols += [f"norm_{j + 1}" for j in range(N)]
        cols += [f"gram_{j + 1}_{m + 1}_{part}" for j in range(N) for m in range(N) for part in ("re", "im")]
        G = np.einsum("tjk,tmk->tjm", self.states, self.states.conj())
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(cols) + "\n")
            for i in range(n_t):
                row = [self.times[i]]
                row += list((np.abs(self.states[i]) ** 2).ravel())
                row += list(np.linalg.norm(self.states[i], axis=1))
                row += list(np.stack([G[i].real, G[i].imag], axis=-1).ravel())
                fh.write(",".join(repr(float(v)) for v in row) + "\n")


# ---------------------------------------------------------------- kernels

def _lam(basis):
    return np.asarray(basis.lam if isinstance(basis, SpectralBasis) else basis, dtype=float)


def _B(B):
    return B.B if isinstance(B, DipoleMatrix) else np.asarray(B, dtype=float)


def default_dt_max(lam):
    """Strang substep bound 1e-3 min(1, 2 pi / lambda_K)."""
    return 1e-3 * min(1.0, 2 * np.pi / abs(float(np.max(np.abs(lam)))))


def plateau_eigh(lam, B, u):
    """Batched eigendecomposition of Lambda - u_m B for each plateau value."""
    u = np.asarray(u, dtype=float)
    vals, inv = np.unique(u, return_inverse=True)
    if vals.size < u.size:
        E, W = plateau_eigh(lam, B, vals)
        return E[inv], W[inv]
    H = np.diag(lam)[None, :, :] - u[:, None, None] * B[None, :, :]
    return np.linalg.eigh(H)


def plateau_propagators(lam, B, u, dt):
    """Exact one-plateau propagators exp(-i (Lambda - u_m B) dt_m), shape (M, K, K)."""
    E, W = plateau_eigh(lam, B, u)
    ph = np.exp(-1j * E * np.asarray(dt)[:, None])
    return (W * ph[:, None, :]) @ np.swapaxes(W, 1, 2).conj()


def _dexp_weights(E, L):
    """Divided differences of x -> exp(-i x L) at eigenvalue pairs."""
    Ea = E[:, :, None]
    Eb = E[:, None, :]
    Lm = np.asarray(L)[:, None, None]
    half = 0.5 * (Ea - Eb) * Lm
    return -1j * Lm * np.exp(-0.5j * (Ea + Eb) * Lm) * np.sinc(half / np.pi)


def plateau_derivatives(lam, B, u, dt):
    """Propagators U_m and their derivatives dU_m/du_m, each shape (M, K, K).

    The derivative is the exact Frechet derivative of
    exp(-i (Lambda - u B) dt) in u, expressed in the plateau eigenbasis.
    """
    E, W = plateau_eigh(lam, B, u)
    dt = np.asarray(dt)
    ph = np.exp(-1j * E * dt[:, None])
    Wh = np.swapaxes(W, 1, 2).conj()
    U = (W * ph[:, None, :]) @ Wh
    Bt = Wh @ (-B) @ W
    D = W @ (Bt * _dexp_weights(E, dt)) @ Wh
    return U, D


def _strang_factors(lam, B):
    D, Q = np.linalg.eigh(B)
    return D, Q


def _check_finite(c, t):
    if not np.all(np.isfinite(c)):
        raise PropagationError(f"non-finite state at t={t:.6g}", time=t)


def _evolve(c0, lam, B, control, method, dt_max, keep_all=True):
    """Core loop; returns (times, states) with states shape (n, N, K)."""
    c = as_coeffs(c0).astype(complex)
    if method == "strang":
        ctrl = control.refined(dt_max if dt_max is not None else default_dt_max(lam))
    else:
        ctrl = control.refined(dt_max)
    dts = ctrl.dt
    if np.any(dts < 1e-15 * max(1.0, ctrl.T)):
        raise PropagationError("step size underflow", time=float(ctrl.t_grid[np.argmin(dts)]))
    M = dts.size
    out = np.empty((M + 1 if keep_all else 1, *c.shape), dtype=complex)
    out[0] = c
    if method == "exact":
        for s in range(0, M, CHUNK):
            U = plateau_propagators(lam, B, ctrl.samples[s:s + CHUNK], dts[s:s + CHUNK])
            for i in range(U.shape[0]):
                c = c @ U[i].T
                if keep_all:
                    out[s + i + 1] = c
            _check_finite(c, float(ctrl.t_grid[min(s + CHUNK, M)]))
    elif method == "strang":
        D, Q = _strang_factors(lam, B)
        for m in range(M):
            d = dts[m]
            half = np.exp(-0.5j * lam * d)
            S = (half[:, None] * Q) @ (np.exp(1j * ctrl.samples[m] * D * d)[:, None] * (Q.T * half[None, :]))
            c = c @ S.T
            if keep_all:
                out[m + 1] = c
            if m % 1024 == 0:
                _check_finite(c, float(ctrl.t_grid[m + 1]))
        _check_finite(c, ctrl.T)
    else:
        raise ValueError("method must be 'exact' or 'strang'")
    if not keep_all:
        out[0] = c
        return ctrl, out
    return ctrl, out


def _truncation_warning(states, K):
    top = max(1, K // 10)
    tail = np.sum(np.abs(states[..., K - top:]) ** 2, axis=-1)
    if tail.max() > 1e-8:
        warnings.warn(f"top {top} modes carry mass {tail.max():.2e} > 1e-8; consider a larger K",
                      RuntimeWarning, stacklevel=3)


def propagate(psi0, u: Control, basis, B, dt_max=None, method="exact", check_truncation=True) -> Trajectory:
    """Propagate an N-tuple under a piecewise-constant control.

    Parameters
    ----------
    psi0 : StateVec or array (N x K)
    u : Control
    basis : SpectralBasis or eigenvalue array
    B : DipoleMatrix or K x K array
    dt_max : float, optional
        Maximal substep. For the exact integrator it only adds snapshots;
        for Strang the default is ``default_dt_max``.
    method : {"exact", "strang"}

    Returns
    -------
    Trajectory
        Snapshots at every (refined) control breakpoint.
    """
    lam = _lam(basis)
    Bm = _B(B)
    ctrl, states = _evolve(psi0, lam, Bm, u, method, dt_max)
    if check_truncation:
        _truncation_warning(states, lam.size)
    return Trajectory(times=ctrl.t_grid.copy(), states=states, control=ctrl)


def final_state(psi0, u: Control, basis, B, method="exact", dt_max=None) -> np.ndarray:
    """Final coefficients only (no snapshot storage)."""
    _, states = _evolve(psi0, _lam(basis), _B(B), u, method, dt_max, keep_all=False)
    return states[0]


def propagator_history(u: Control, basis, B):
    """Full K x K propagators U(t_m, 0) at every breakpoint, shape (M+1, K, K)."""
    lam = _lam(basis)
    K = lam.size
    ctrl, P = _evolve(np.eye(K), lam, _B(B), u, "exact", None)
    # row k of P[m] is U(t_m, 0) phi_k, so P[m] is the transpose of U(t_m, 0)
    return ctrl.t_grid.copy(), np.transpose(P, (0, 2, 1))


def propagate_linearized(Psi0, u_ref: Control, v: Control, ref_traj: Trajectory, basis, B) -> Trajectory:
    """Solve i Psi' = (Lambda - u_ref B) Psi - v B psi_ref.

    ``ref_traj`` must hold the reference states at every breakpoint of
    ``u_ref`` (as returned by :func:`propagate` with the exact integrator).
    ``v`` is resampled onto that grid; it must not have breakpoints the
    reference lacks.
    """
    lam = _lam(basis)
    Bm = _B(B)
    t = u_ref.t_grid
    if ref_traj.times.shape != t.shape or not np.allclose(ref_traj.times, t, rtol=0, atol=1e-12 * max(1.0, t[-1])):
        raise TrajectoryMismatch("reference snapshots do not match the reference control grid")
    if not np.array_equal(ref_traj.control.samples, u_ref.samples) and not np.allclose(
            ref_traj.control(0.5 * (t[1:] + t[:-1])), u_ref.samples, atol=1e-14):
        raise TrajectoryMismatch("reference trajectory was computed with a different control")
    if not np.isclose(v.t_grid[-1], t[-1]) or not np.isclose(v.t_grid[0], t[0]):
        raise TrajectoryMismatch("perturbation and reference have different horizons")
    extra = np.setdiff1d(np.round(v.t_grid, 12), np.round(t, 12))
    if extra.size:
        raise TrajectoryMismatch("perturbation has breakpoints missing from the reference")
    vs = v.resampled(t).samples
    Psi = as_coeffs(Psi0).astype(complex).copy()
    if Psi.shape != ref_traj.states.shape[1:]:
        raise TrajectoryMismatch("tangent state shape differs from the reference")
    out = np.empty_like(ref_traj.states)
    out[0] = Psi
    dts = np.diff(t)
    M = dts.size
    for s in range(0, M, CHUNK):
        U, D = plateau_derivatives(lam, Bm, u_ref.samples[s:s + CHUNK], dts[s:s + CHUNK])
        for i in range(U.shape[0]):
            m = s + i
            Psi = Psi @ U[i].T + vs[m] * (ref_traj.states[m] @ D[i].T)
            out[m + 1] = Psi
    return Trajectory(times=t.copy(), states=out, control=v.resampled(t))


def time_reverse_check(psi0, psif, u: Control, basis, B, method="exact") -> float:
    """Propagate ``psi0`` under w(t) = u(T - t) and return ||psi(T) - psif||."""
    cT = final_state(psi0, u.reversed(), basis, B, method=method)
    return float(np.linalg.norm(cT - as_coeffs(psif)))


def basis_overlap(basis_a: SpectralBasis, basis_b: SpectralBasis):
    """Matrix O[k, l] = <phi^a_k, phi^b_l> by grid quadrature of basis_a."""
    g = basis_a.grid
    phib = basis_b.phi if basis_b.grid is g else _resample_basis(basis_b, g)
    return (basis_a.phi * g.w) @ phib.T


def _resample_basis(basis, grid):
    if basis.coeffs is None:
        raise ValueError("basis has no sine coefficients; cannot resample")
    m = np.arange(1, basis.coeffs.shape[1] + 1)
    return basis.coeffs @ (np.sqrt(2) * np.sin(np.pi * np.outer(m, grid.x)))


def shift_potential_check(psi0, u: Control, basis_V: SpectralBasis, basis_Vmu: SpectralBasis, B,
                          dt_max=None) -> float:
    """Compare (V + mu, u) and (V, u - 1) dynamics.

    ``psi0`` is given in the V eigenbasis. ``B`` is the dipole matrix in
    the V basis; the V + mu dipole matrix is assembled from ``B.mu``.
    Returns the largest row-norm difference over all snapshots, with the
    V + mu states mapped back to the V basis.
    """
    from .spectral import dipole_matrix

    mu = B.mu
    B_mu = dipole_matrix(mu, basis_Vmu)
    O = basis_overlap(basis_V, basis_Vmu)
    c0 = as_coeffs(psi0)
    left = propagate(c0 @ O, u, basis_Vmu, B_mu, dt_max=dt_max, check_truncation=False)
    right = propagate(c0, u.shifted(-1.0), basis_V, B, dt_max=dt_max, check_truncation=False)
    back = left.states @ O.conj().T
    return float(np.linalg.norm(back - right.states, axis=2).max())


__all__ = [
    "StateVec", "Control", "Trajectory", "propagate", "propagate_linearized", "final_state",
    "time_reverse_check", "shift_potential_check", "concatenate", "gram", "hann", "make_grid",
]
