"""Trigonometric moment problems and biorthogonal families.

Controls are piecewise constant, so every moment of a control against
e^{i w t} is a finite sum of exact plateau integrals. The minimal-norm
solution of a finite moment problem therefore lives in the span of the
plateau averages of cos(w_n t) and sin(w_n t), and is found from a small
real Gram system.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from .errors import IllConditioned, MinimalityFailure, ResonantLadder
from .propagator import Control

COND_LIMIT = 1e12


@dataclass
class FrequencyLadder:
    """Sorted frequencies lambda_k - lambda_j with their index pairs.

    ``pairs[n]`` is the 1-based pair (j, k) behind ``omega[n]``; the
    diagonal pair (N, N) carries omega = 0 at position 0.
    """

    omega: np.ndarray
    pairs: list
    R_map: dict
    gamma: float
    N: int
    packets: list = field(default_factory=list)
    packet_gaps: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self):
        return self.omega.size


def build_ladder(lam, N: int, K: int | None = None, tol: float = 1e-8) -> FrequencyLadder:
    """Enumerate {lambda_k - lambda_j : j <= N, j < k <= K} plus 0 for (N, N).

    Raises
    ------
    ResonantLadder
        If two distinct pairs give frequencies closer than ``tol``.
    """
    lam = np.asarray(getattr(lam, "lam", lam), dtype=float)
    K = K or lam.size
    if N > K:
        raise ValueError("N exceeds the truncation")
    pairs = [(N, N)] + [(j + 1, k + 1) for j in range(N) for k in range(j + 1, K)]
    om = np.array([0.0] + [lam[k - 1] - lam[j - 1] for j, k in pairs[1:]])
    order = np.argsort(om, kind="stable")
    om = om[order]
    pairs = [pairs[i] for i in order]
    d = np.diff(om)
    bad = np.flatnonzero(d < tol)
    if bad.size:
        coll = [(pairs[i], pairs[i + 1], float(d[i])) for i in bad]
        raise ResonantLadder(f"{len(coll)} coincident ladder frequencies, first {coll[0][:2]}", coll)
    R_map = {p: n for n, p in enumerate(pairs)}
    packets = []
    for k in range(2, K + 1):
        idx = sorted(R_map[(j, k)] for j in range(1, min(N, k - 1) + 1))
        if idx:
            packets.append(idx)
    gaps = np.array([om[packets[i + 1]].min() - om[packets[i]].max() for i in range(len(packets) - 1)])
    return FrequencyLadder(omega=om, pairs=pairs, R_map=R_map, gamma=float(d.min()) if d.size else np.inf,
                           N=N, packets=packets, packet_gaps=gaps)


@dataclass
class MomentProblem:
    """Targets d_n for int_0^T u(t) exp(i omega_n t) dt over a ladder."""

    ladder: FrequencyLadder
    T: float
    d: np.ndarray

    def __post_init__(self):
        self.d = np.asarray(self.d, dtype=complex)
        if self.d.shape != self.ladder.omega.shape:
            raise ValueError("one target per ladder frequency is required")
        if not np.all(np.isfinite(self.d)):
            raise ValueError("targets must be finite")
        zero = np.flatnonzero(self.ladder.omega == 0.0)
        if zero.size and abs(self.d[zero[0]].imag) > 0:
            raise ValueError("the target at omega = 0 must be real")
        if self.T <= 0:
            raise ValueError("T must be positive")


def plateau_exp_averages(omega, t_grid):
    """Plateau averages of exp(i omega t), shape (len(omega), M)."""
    omega = np.asarray(omega, dtype=float)[:, None]
    t = np.asarray(t_grid, dtype=float)
    dt = np.diff(t)[None, :]
    mid = 0.5 * (t[1:] + t[:-1])[None, :]
    return np.exp(1j * omega * mid) * np.sinc(omega * dt / (2 * np.pi))


def default_time_grid(omega_max, T, per_period=8, minimum=256):
    n = max(minimum, int(np.ceil(T * max(omega_max, 1e-12) * per_period / (2 * np.pi))))
    return np.linspace(0.0, T, n + 1)


def solve_gram(G, b, ridge=1e-12, cond_limit=COND_LIMIT):
    """Solve a symmetric positive (semi)definite system.

    Cholesky first; if it fails, a Tikhonov ridge of ``ridge * trace`` is
    added. Raises :class:`IllConditioned` when the condition number of
    ``G`` exceeds ``cond_limit``. Returns ``(x, cond)``.
    """
    G = 0.5 * (G + G.conj().T)
    ev = np.linalg.eigvalsh(G)
    cond = float(ev[-1] / ev[0]) if ev[0] > 0 else np.inf
    if cond > cond_limit:
        raise IllConditioned(f"Gram condition number {cond:.3e} exceeds {cond_limit:.1e}; "
                             "enlarge the horizon T", condition_number=cond)
    try:
        x = cho_solve(cho_factor(G), b)
    except LinAlgError:
        Gr = G + ridge * np.trace(G).real * np.eye(G.shape[0])
        x = cho_solve(cho_factor(Gr), b)
    return x, cond


def min_norm_real(rows, dt, b, cond_limit=COND_LIMIT):
    """Smallest L2 piecewise-constant u with sum_m u_m rows[r, m] dt_m = b_r."""
    rows = np.asarray(rows, dtype=float)
    G = (rows * dt) @ rows.T
    c, cond = solve_gram(G, np.asarray(b, dtype=float), cond_limit=cond_limit)
    return c @ rows, c, cond


def _real_rows(avg, omega):
    """Stack Re/Im of the averages, dropping Im for omega = 0."""
    rows, kinds = [], []
    for n in range(avg.shape[0]):
        rows.append(avg[n].real)
        kinds.append((n, "re"))
        if omega[n] != 0.0:
            rows.append(avg[n].imag)
            kinds.append((n, "im"))
    return np.array(rows), kinds


def solve_moment(problem: MomentProblem, t_grid=None, cond_limit=COND_LIMIT) -> Control:
    """Minimal-norm real control solving a finite moment problem.

    The control has the form u = Re sum_n a_n P[exp(-i omega_n t)] where P
    is plateau averaging, with a_n real at omega = 0. The coefficients are
    returned in ``control.packets``.
    """
    lad = problem.ladder
    if t_grid is None:
        t_grid = default_time_grid(lad.omega.max(), problem.T)
    t_grid = np.asarray(t_grid, dtype=float)
    if not np.isclose(t_grid[-1] - t_grid[0], problem.T):
        raise ValueError("time grid does not span the horizon")
    t_grid = t_grid - t_grid[0]
    avg = plateau_exp_averages(lad.omega, t_grid)
    rows, kinds = _real_rows(avg, lad.omega)
    b = np.array([problem.d[n].real if kind == "re" else problem.d[n].imag for n, kind in kinds])
    u, c, cond = min_norm_real(rows, np.diff(t_grid), b, cond_limit)
    a = np.zeros(lad.omega.size, dtype=complex)
    for coef, (n, kind) in zip(c, kinds):
        a[n] += coef if kind == "re" else 1j * coef
    ctrl = Control(t_grid, u)
    ctrl.packets = [{"frequency": float(w), "amplitude": float(abs(an)), "phase": float(-np.angle(an)),
                     "window": "none", "coefficient": [float(an.real), float(an.imag)]}
                    for w, an in zip(lad.omega, a)]
    ctrl.condition_number = cond
    return ctrl


def moment_residuals(u: Control, omega, d, nodes: int = 6):
    """|int u exp(i omega t) dt - d| by Gauss-Legendre on every plateau.

    Independent of the solver, which integrates plateau averages in closed
    form.
    """
    xg, wg = np.polynomial.legendre.leggauss(nodes)
    t = u.t_grid
    a, b = t[:-1], t[1:]
    half = 0.5 * (b - a)
    tau = (0.5 * (a + b))[:, None] + half[:, None] * xg[None, :]
    wts = (half[:, None] * wg[None, :]) * u.samples[:, None]
    out = np.array([np.sum(wts * np.exp(1j * w * tau)) for w in np.asarray(omega)])
    return np.abs(out - np.asarray(d))


def biorthogonal_family(functions, weights, real_indices=(), tol=1e-10):
    """Duals g_m in the span of ``functions`` with <g_m, f_n> = delta_mn.

    Parameters
    ----------
    functions : array (n_f, M)
        Complex samples of the family on a time grid.
    weights : array (M,)
        Quadrature weights of the discrete inner product
        <f, g> = sum w f conj(g).
    real_indices : iterable of int
        Members whose duals are real valued. The real part is returned for
        them, which keeps duality only when the family is closed under
        conjugation; a ValueError is raised otherwise.
    tol : float
        Relative bound on the smallest singular value.

    Returns
    -------
    ndarray (n_f, M)
    """
    F = np.asarray(functions, dtype=complex)
    w = np.asarray(weights, dtype=float)
    sq = F * np.sqrt(w)[None, :]
    s = np.linalg.svd(sq, compute_uv=False)
    if s[-1] < tol * s[0]:
        raise MinimalityFailure(f"family is numerically dependent (smallest singular value {s[-1]:.3e})",
                                smallest_singular_value=float(s[-1]))
    G = (F * w) @ F.conj().T
    C = np.linalg.solve(G.T, np.eye(G.shape[0])).T
    g = C @ F
    real_indices = list(real_indices)
    if real_indices:
        g[real_indices] = g[real_indices].real
        D = (g[real_indices] * w) @ F.conj().T
        E = np.eye(F.shape[0])[real_indices]
        if np.abs(D - E).max() > 1e-6:
            raise ValueError("real duals requested for a family not closed under conjugation")
    return g


def exponential_gram(omega, T):
    """Exact Gram matrix of exp(i omega_n t) on [0, T]."""
    om = np.asarray(omega, dtype=float)
    D = om[:, None] - om[None, :]
    return T * np.exp(0.5j * D * T) * np.sinc(D * T / (2 * np.pi))


def density_diagnostics(ladder: FrequencyLadder, T_values=(1.0, 2.0, 4.0), r_values=None):
    """Upper-density curve n+(r)/r, minimal gap, packet gaps and Gram conditioning.

    The Gram matrix is that of the symmetric family exp(+-i omega_n t)
    (omega = 0 counted once) on [0, T].
    """
    om = ladder.omega
    span = float(om[-1] - om[0]) if om.size > 1 else 1.0
    if r_values is None:
        r_values = span * np.geomspace(1e-3, 1.0, 12)
    dens = []
    for r in r_values:
        j = np.searchsorted(om, om + r, side="right")
        dens.append(float((j - np.arange(om.size)).max() / r))
    sym = np.concatenate([-om[om > 0][::-1], om])
    conds = []
    for T in T_values:
        ev = np.linalg.eigvalsh(exponential_gram(sym, T))
        conds.append(float(ev[-1] / ev[0]) if ev[0] > 0 else np.inf)
    return {
        "r": [float(r) for r in r_values],
        "n_plus_over_r": dens,
        "gamma": float(ladder.gamma),
        "packet_gaps": [float(g) for g in ladder.packet_gaps],
        "T": [float(t) for t in T_values],
        "gram_condition": conds,
    }
