"""Local exact control around a reference trajectory (return method).

Around the free eigenstate trajectory the linearized N-tuple system is not
controllable: every diagonal overlap moves with the same integral of the
control. A reference control of size eta breaks this degeneracy. This
module builds such a reference, inverts its linearization with moment
solves plus a biorthogonal correction, and uses that inverse as the
Jacobian of a chord Newton iteration for the nonlinear problem.

Conventions: coefficient rows, <x, y> = sum x conj(y), 1-based pairs.
Histories ``P[m]`` are K x K matrices whose column k holds the
coefficients of Phi_k(t_m), the solution started from phi_k.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import (NewtonDivergence, NotFound, RankDeficiency, TrustRegionShrunk,
                     VerificationFailure)
from .moment import biorthogonal_family, build_ladder, min_norm_real, solve_gram
from .propagator import (CHUNK, Control, Trajectory, as_coeffs, final_state, gram, plateau_derivatives,
                         propagate_linearized)
from .spectral import h3_distance, sobolev_norm


def _lam(basis):
    return np.asarray(getattr(basis, "lam", basis), dtype=float)


def _B(B):
    return np.asarray(getattr(B, "B", B), dtype=float)


# ------------------------------------------------------------ histories

def interaction_history(u: Control, lam, B):
    """Propagators and interaction-picture control derivatives.

    Returns
    -------
    P : ndarray (M+1, K, K)
        P[m] = U(t_m, 0).
    Y : ndarray (M, K, K)
        Y[m] = U(t_m, 0)^H dU_m/du_m U(t_{m-1}, 0). A unit change of the
        control on plateau m moves the final state by P[-1] @ Y[m] (in the
        basis of initial data).
    """
    K = lam.size
    M = u.samples.size
    dts = u.dt
    P = np.empty((M + 1, K, K), dtype=complex)
    Y = np.empty((M, K, K), dtype=complex)
    P[0] = np.eye(K)
    cur = P[0]
    for s in range(0, M, CHUNK):
        U, D = plateau_derivatives(lam, B, u.samples[s:s + CHUNK], dts[s:s + CHUNK])
        for i in range(U.shape[0]):
            prev = cur
            cur = U[i] @ prev
            P[s + i + 1] = cur
            Y[s + i] = cur.conj().T @ (D[i] @ prev)
    return P, Y


# ------------------------------------------------------------ reference

@dataclass
class ReferenceTrajectory:
    """Reference control u_ref on [0, T] and its trajectory from (phi_1..phi_N).

    ``theta`` holds the final phases, psi_ref^j(T) = exp(i theta_j) phi_j up
    to the residuals recorded in ``residuals``.
    """

    eta: float
    u_ref: Control
    traj: Trajectory
    theta: np.ndarray
    epsilon_grid: np.ndarray
    N: int
    residuals: dict = field(default_factory=dict)
    P: np.ndarray = field(default=None, repr=False)
    Y: np.ndarray = field(default=None, repr=False)
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def T(self):
        return self.u_ref.T

    @property
    def final(self):
        """psi_ref(T) as an N x K coefficient array."""
        return self.traj.states[-1]

    @property
    def anchor_final(self):
        """(exp(i theta_j) phi_j) as an N x K array."""
        K = self.final.shape[1]
        z = np.zeros((self.N, K), dtype=complex)
        z[np.arange(self.N), np.arange(self.N)] = np.exp(1j * self.theta)
        return z

    def save(self, prefix):
        """Write ``prefix.csv`` (control) and ``prefix.json`` (metadata)."""
        self.u_ref.to_csv(f"{prefix}.csv")
        meta = {"eta": self.eta, "theta": list(map(float, self.theta)), "N": self.N,
                "epsilon_grid": list(map(float, self.epsilon_grid)), "T": self.T,
                "residuals": {k: float(v) for k, v in self.residuals.items()}}
        with open(f"{prefix}.json", "w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)


def load_reference(prefix, basis, B) -> ReferenceTrajectory:
    """Rebuild a cached reference by re-propagating its control."""
    with open(f"{prefix}.json", encoding="utf-8") as fh:
        meta = json.load(fh)
    u = Control.from_csv(f"{prefix}.csv")
    return _finish_reference(meta["eta"], u, np.array(meta["epsilon_grid"]), meta["N"], basis, B)


def default_epsilon_grid(T, N):
    """eps_k = (k+1) T / (2N), k = 0..N-1, so eps_{N-1} = T/2."""
    return np.array([(k + 1) * T / (2 * N) for k in range(N)])


def reference_time_grid(lam, T, N, per_period=8, minimum=512):
    """Uniform grid resolving lambda_K - lambda_1 with eps_k on breakpoints."""
    om = float(lam[-1] - lam[0])
    n = max(minimum, int(np.ceil(T * om * per_period / (2 * np.pi))))
    n = int(np.ceil(n / (2 * N)) * 2 * N)
    return np.linspace(0.0, T, n + 1)


def _newton_min_norm(residual, jacobian_rows, u0, mask, dt, tol, max_iter, what):
    """Damped Newton with minimal-norm steps supported on ``mask``.

    ``residual(u)`` returns a real vector and ``jacobian_rows(u)`` the
    derivative densities (rows x plateaus) restricted to ``mask``.
    """
    u = u0.copy()
    r = residual(u)
    nr = np.linalg.norm(r)
    for it in range(max_iter):
        if nr < tol:
            return u, nr, it
        rows = jacobian_rows(u)
        step, _, _ = min_norm_real(rows, dt[mask], -r, cond_limit=1e14)
        s = 1.0
        for _ in range(30):
            trial = u.copy()
            trial[mask] += s * step
            r2 = residual(trial)
            if np.linalg.norm(r2) < nr:
                break
            s *= 0.5
        else:
            raise TrustRegionShrunk(f"{what}: no decreasing Newton step", residual=nr)
        u, r, nr = trial, r2, np.linalg.norm(r2)
    if nr < tol:
        return u, nr, max_iter
    raise NewtonDivergence(f"{what}: residual {nr:.3e} after {max_iter} iterations; try a smaller eta",
                           residual=nr)


def build_reference(eta, T, epsilon_grid=None, basis=None, B=None, N=None, t_grid=None,
                    tol=1e-12, max_iter=30) -> ReferenceTrajectory:
    """Reference control for N equations started at (phi_1..phi_N).

    Stage 1 finds u on (eps_0, eps) with
    <mu psi^j(eps_k), psi^j(eps_k)> = <mu phi_j, phi_j> + eta [j = k]
    for k = 1..N-1; stage 2 finds u on (eps, T) with
    <psi^j(T), phi_k> = 0 for every k > j. Both stages are damped Newton
    iterations with minimal-norm steps.
    """
    lam = _lam(basis)
    Bm = _B(B)
    if epsilon_grid is None:
        if N is None:
            raise ValueError("give N or epsilon_grid")
        epsilon_grid = default_epsilon_grid(T, N)
    eps = np.asarray(epsilon_grid, dtype=float)
    N = eps.size if N is None else N
    if eps.size != N or not (0 < eps[0] and np.all(np.diff(eps) > 0) and eps[-1] < T):
        raise ValueError("need 0 < eps_0 < ... < eps_{N-1} < T")
    t = reference_time_grid(lam, T, N) if t_grid is None else np.asarray(t_grid, dtype=float)
    dt = np.diff(t)
    mid = 0.5 * (t[1:] + t[:-1])
    idx_eps = [int(np.argmin(np.abs(t - e))) for e in eps]
    if max(abs(t[i] - e) for i, e in zip(idx_eps, eps)) > 1e-9 * T:
        raise ValueError("epsilon grid points must be time-grid breakpoints")
    u = np.zeros(dt.size)
    if eta != 0.0 and N > 1:
        mask1 = (mid > eps[0]) & (mid < eps[-1])
        u = _stage_interior(u, t, mask1, idx_eps, eta, lam, Bm, N, tol, max_iter)
    if N > 1 or eta != 0.0:
        mask2 = mid > eps[-1]
        u = _stage_final(u, t, mask2, lam, Bm, N, tol, max_iter)
    ctrl = Control(t, u)
    return _finish_reference(eta, ctrl, eps, N, basis, B)


def _stage_interior(u, t, mask, idx_eps, eta, lam, Bm, N, tol, max_iter):
    dt = np.diff(t)
    m_last = idx_eps[-1]
    targets = np.array([[Bm[j, j] + (eta if j == k else 0.0) for k in range(1, N)] for j in range(N)])
    cache = {}

    def hist(uu):
        key = uu[:m_last].tobytes()
        if key not in cache:
            cache.clear()
            cache[key] = interaction_history(Control(t[:m_last + 1], uu[:m_last]), lam, Bm)
        return cache[key]

    def residual(uu):
        P, _ = hist(uu)
        out = []
        for j in range(N):
            for k in range(1, N):
                psi = P[idx_eps[k]][:, j]
                out.append(np.real(psi.conj() @ Bm @ psi) - targets[j, k - 1])
        return np.array(out)

    def rows(uu):
        P, Y = hist(uu)
        out = []
        sel = np.flatnonzero(mask)
        for j in range(N):
            for k in range(1, N):
                me = idx_eps[k]
                Pe = P[me]
                # d/du_m <B psi(eps), psi(eps)> = 2 Re[(Pe e_j)^H B Pe Y_m e_j]
                a = (Bm @ Pe[:, j]).conj() @ Pe          # row vector
                g = np.zeros(dt.size)
                ok = sel[sel < me]
                g[ok] = 2 * np.real(np.einsum("k,mk->m", a, Y[ok][:, :, j]))
                out.append(g[mask] / dt[mask])
        return np.array(out)

    u_new, _, _ = _newton_min_norm(residual, rows, u, mask, dt, tol * max(1.0, abs(eta)), max_iter,
                                   "interior reference conditions")
    return u_new


def _stage_final(u, t, mask, lam, Bm, N, tol, max_iter):
    dt = np.diff(t)
    K = lam.size
    pairs = [(j, k) for j in range(N) for k in range(j + 1, K)]
    cache = {}

    def hist(uu):
        key = uu.tobytes()
        if key not in cache:
            cache.clear()
            cache[key] = interaction_history(Control(t, uu), lam, Bm)
        return cache[key]

    def residual(uu):
        P, _ = hist(uu)
        v = np.array([P[-1][k, j] for j, k in pairs])
        return np.concatenate([v.real, v.imag])

    def rows(uu):
        P, Y = hist(uu)
        PT = P[-1]
        Ym = Y[mask]
        J = np.array([np.einsum("i,mi->m", PT[k], Ym[:, :, j]) for j, k in pairs])
        J = J / dt[mask]
        return np.concatenate([J.real, J.imag])

    u_new, _, _ = _newton_min_norm(residual, rows, u, mask, dt, tol, max_iter, "final projections")
    return u_new


def _finish_reference(eta, ctrl, eps, N, basis, B):
    lam = _lam(basis)
    Bm = _B(B)
    P, Y = interaction_history(ctrl, lam, Bm)
    states = np.transpose(P[:, :, :N], (0, 2, 1)).copy()
    traj = Trajectory(times=ctrl.t_grid.copy(), states=states, control=ctrl)
    fin = states[-1]
    theta = np.angle(fin[np.arange(N), np.arange(N)])
    proj = max((np.linalg.norm(fin[j, j + 1:]) for j in range(N)), default=0.0)
    t = ctrl.t_grid
    interior = 0.0
    for k in range(1, N):
        i = int(np.argmin(np.abs(t - eps[k])))
        for j in range(N):
            psi = states[i, j]
            val = np.real(psi.conj() @ Bm @ psi)
            interior = max(interior, abs(val - Bm[j, j] - (eta if j == k else 0.0)))
    res = {"projection": float(proj), "interior": float(interior), "u_l2": ctrl.l2_norm()}
    return ReferenceTrajectory(eta=float(eta), u_ref=ctrl, traj=traj, theta=theta, epsilon_grid=eps, N=N,
                               residuals=res, P=P, Y=Y)


# ------------------------------------------------------------ tangent spaces

def tangent_defects(Phi, psi_ref):
    """Largest violations of the X_t conditions for a tangent tuple.

    Returns ``(real_part, antisymmetry)`` where the first is
    max_j |Re <Phi^j, psi_ref^j>| and the second
    max_{k<j} |<Phi^j, psi_ref^k> + conj(<Phi^k, psi_ref^j>)|.
    """
    Phi = as_coeffs(Phi)
    ref = as_coeffs(psi_ref)
    O = Phi @ ref.conj().T          # O[j, k] = <Phi^j, psi_ref^k>
    re = float(np.abs(np.real(np.diag(O))).max()) if O.size else 0.0
    anti = O + O.conj().T
    N = O.shape[0]
    off = [abs(anti[j, k]) for j in range(N) for k in range(j)]
    return re, float(max(off, default=0.0))


@dataclass
class TangentState:
    """Tangent N-tuple with its X_t membership flags."""

    coeffs: np.ndarray
    in_X: bool = True
    defects: tuple = (0.0, 0.0)

    @classmethod
    def check(cls, coeffs, psi_ref, tol=1e-9):
        d = tangent_defects(coeffs, psi_ref)
        return cls(as_coeffs(coeffs).copy(), bool(max(d) < tol), d)


def project_to_X(phi, psi_ref):
    """The projection P~ onto X_T built from an orthonormal tuple psi_ref.

    P~_j(phi^j) = phi^j - Re<phi^j, r^j> r^j
                  - sum_{k<j} (<phi^j, r^k> + <r^j, phi^k>) r^k.
    """
    phi = as_coeffs(phi)
    r = as_coeffs(psi_ref)
    N = r.shape[0]
    out = phi.copy()
    for j in range(N):
        out[j] -= np.real(np.vdot(r[j], phi[j])) * r[j]
        for k in range(j):
            out[j] -= (np.vdot(r[k], phi[j]) + np.vdot(phi[k], r[j])) * r[k]
    return out


def random_tangent(ref: ReferenceTrajectory, size, rng, at_end=True, modes=None):
    """Random element of X_T (or X_0) with k^3-weighted norm ``size``."""
    K = ref.final.shape[1]
    N = ref.N
    base = ref.final if at_end else ref.traj.states[0]
    c = rng.normal(size=(N, K)) + 1j * rng.normal(size=(N, K))
    if modes is not None:
        c[:, modes:] = 0
    c /= np.arange(1, K + 1) ** 3
    c = project_to_X(c, base)
    return c * (size / sobolev_norm(c, 3))


# ------------------------------------------------------------ linearized inverse

def _signals(ref: ReferenceTrajectory, basis, B):
    """Plateau averages of f_n (ladder order) and f_jj, cached on ``ref``."""
    if "signals" in ref._cache:
        return ref._cache["signals"]
    lam = _lam(basis)
    Bm = _B(B)
    N = ref.N
    K = lam.size
    lad = build_ladder(lam, N, K)
    dt = ref.u_ref.dt
    Y = ref.Y
    F = np.empty((len(lad), dt.size), dtype=complex)
    for n, (j, k) in enumerate(lad.pairs):
        F[n] = Y[:, k - 1, j - 1] / (1j * Bm[j - 1, k - 1])
    Fd = np.empty((max(N - 1, 0), dt.size))
    for j in range(N - 1):
        Fd[j] = np.real(Y[:, j, j] / (1j * Bm[j, j]))
    Fa = F / dt
    Fda = Fd / dt
    rows, kinds = [], []
    for n in range(len(lad)):
        rows.append(Fa[n].real)
        kinds.append((n, "re"))
        if lad.omega[n] != 0.0:
            rows.append(Fa[n].imag)
            kinds.append((n, "im"))
    rows = np.array(rows)
    G = (rows * dt) @ rows.T
    duals = None
    if N > 1:
        fam = [Fa[n] for n in range(len(lad))] + [Fa[n].conj() for n in range(len(lad)) if lad.omega[n] != 0.0]
        fam += list(Fda)
        n_f = len(fam)
        real_idx = range(n_f - (N - 1), n_f)
        g = biorthogonal_family(np.array(fam), dt, real_indices=real_idx, tol=1e-12)
        duals = np.real(g[n_f - (N - 1):])
    out = {"ladder": lad, "F": F, "Fd": Fd, "rows": rows, "kinds": kinds, "G": G, "duals": duals}
    ref._cache["signals"] = out
    return out


def linearized_control(Psi0, Psif, ref: ReferenceTrajectory, basis, B, verify=True, verify_tol=1e-6,
                       check_membership=True) -> Control:
    """Control v steering the linearized system from Psi0 to Psif in time T.

    Builds f_n(t) = <mu psi_ref^j(t), Phi_k(t)> / <mu phi_j, phi_k> over
    the ladder pairs (j, k) and the diagonal f_jj, solves the moment
    problem for v0, then adds the real biorthogonal duals g_jj to fix the
    imaginary diagonal overlaps of particles 1..N-1.
    """
    Bm = _B(B)
    N = ref.N
    Psi0 = as_coeffs(getattr(Psi0, "coeffs", Psi0))
    Psif = as_coeffs(getattr(Psif, "coeffs", Psif))
    if check_membership:
        d0 = max(tangent_defects(Psi0, ref.traj.states[0]))
        dT = max(tangent_defects(Psif, ref.final))
        scale = 1e-9 * max(1.0, np.abs(Psi0).max(), np.abs(Psif).max())
        if d0 > scale or dT > scale:
            raise ValueError(f"tangent data outside X_0 / X_T (defects {d0:.2e}, {dT:.2e})")
    sig = _signals(ref, basis, B)
    lad = sig["ladder"]
    PT = ref.P[-1]
    # <Psif^j, Phi_k(T)> = sum_i Psif[j, i] conj(PT[i, k])
    ovf = Psif @ PT.conj()
    dd = np.empty(len(lad), dtype=complex)
    for n, (j, k) in enumerate(lad.pairs):
        dd[n] = (ovf[j - 1, k - 1] - Psi0[j - 1, k - 1]) / (1j * Bm[j - 1, k - 1])
    b = np.array([dd[n].real if kind == "re" else dd[n].imag for n, kind in sig["kinds"]])
    c, _ = solve_gram(sig["G"], b, cond_limit=1e16)
    v = c @ sig["rows"]
    if N > 1:
        for j in range(N - 1):
            target = (np.imag(ovf[j, j]) - np.imag(Psi0[j, j])) / Bm[j, j]
            have = float(np.sum(v * sig["Fd"][j]))
            v = v + (target - have) * sig["duals"][j]
    ctrl = Control(ref.u_ref.t_grid.copy(), v)
    if verify:
        err = closed_loop_error(Psi0, Psif, ctrl, ref, basis, B)
        ctrl.verification_error = err
        if err > verify_tol:
            raise VerificationFailure(f"linearized closed loop misses the target by {err:.3e}", error=err)
    return ctrl


def closed_loop_error(Psi0, Psif, v: Control, ref: ReferenceTrajectory, basis, B):
    lin = propagate_linearized(Psi0, ref.u_ref, v, ref.traj, basis, B)
    return h3_distance(lin.states[-1], as_coeffs(Psif))


def moment_identity_values(Psi0, v: Control, ref: ReferenceTrajectory, basis, B):
    """<Psi0^j, phi_k> + i B_jk int v f_n for every ladder pair, via plateau sums."""
    sig = _signals(ref, basis, B)
    Bm = _B(B)
    Psi0 = as_coeffs(Psi0)
    vals = np.empty(len(sig["ladder"]), dtype=complex)
    for n, (j, k) in enumerate(sig["ladder"].pairs):
        vals[n] = Psi0[j - 1, k - 1] + 1j * Bm[j - 1, k - 1] * np.sum(v.samples * sig["F"][n])
    return vals


def nc_obstruction(ref: ReferenceTrajectory, basis, B, v: Control | None = None):
    """Residual of B_kk <Psi^j(T), Phi_j(T)> = B_jj <Psi^k(T), Phi_k(T)>.

    The tangent trajectory starts at zero and is driven by ``v``; by default
    v is the unit-L2 control along f_11 - f_NN (the direction that the
    reference makes visible), or a constant when that difference vanishes.
    """
    Bm = _B(B)
    N = ref.N
    t = ref.u_ref.t_grid
    dt = ref.u_ref.dt
    if v is None:
        Y = ref.Y
        f = [np.real(Y[:, j, j] / (1j * Bm[j, j])) / dt for j in range(N)]
        diff = f[0] - f[-1]
        nrm = np.sqrt(np.sum(diff ** 2 * dt))
        vs = diff / nrm if nrm > 1e-14 else np.full(dt.size, 1 / np.sqrt(t[-1]))
        v = Control(t.copy(), vs)
    lin = propagate_linearized(np.zeros_like(ref.traj.states[0]), ref.u_ref, v, ref.traj, basis, B)
    PT = ref.P[-1]
    ov = np.array([np.vdot(PT[:, j], lin.states[-1][j]) for j in range(N)])
    res = 0.0
    for j in range(N):
        for k in range(N):
            res = max(res, abs(Bm[k, k] * ov[j] - Bm[j, j] * ov[k]))
    return float(res)


# ------------------------------------------------------------ nonlinear steering

@dataclass
class LocalSteerResult:
    control: Control
    final_error_H3: float
    newton_iters: int
    delta_used: float
    history: list = field(default_factory=list)


def _full_newton_step(c0, u, t, lam, Bm, residual, rcond=1e-13):
    """Gauss-Newton step from the exact Jacobian along the current trajectory.

    Minimal-norm least-squares solution of J du = -residual in the k^3
    weighted norm, with J built from the interaction-picture derivatives.
    Directions the control cannot reach (norm and Gram constraints) carry
    vanishing singular values and are cut by ``rcond``.
    """
    P, Y = interaction_history(Control(t, u), lam, Bm)
    PT = P[-1]
    dt = np.diff(t)
    w = np.arange(1, lam.size + 1, dtype=float) ** 3
    Z = Y @ c0.T                                   # (M, K, N)
    J = np.einsum("ik,mkn->mni", PT, Z) * w        # (M, N, K)
    J = J.reshape(J.shape[0], -1).T / dt           # densities, (N K, M)
    rows = np.concatenate([J.real, J.imag])
    r = (residual * w).ravel()
    b = -np.concatenate([r.real, r.imag])
    G = (rows * dt) @ rows.T
    ev, V = np.linalg.eigh(G)
    keep = ev > rcond * ev[-1]
    c = V[:, keep] @ ((V[:, keep].T @ b) / ev[keep])
    return c @ rows


def local_steer(psi0, psif, ref: ReferenceTrajectory, basis, B, tol=1e-6, max_iter=30,
                gram_tol=1e-9, jacobian="auto", check_half_space=True) -> LocalSteerResult:
    """Exact steering from near (phi_j) to near (exp(i theta_j) phi_j).

    Newton iteration on the projected final mismatch with backtracking on
    its k^3 weighted norm. ``jacobian="chord"`` reuses the linearized
    inverse at the reference for every step; ``"full"`` re-linearizes
    along the current trajectory (Gauss-Newton); ``"auto"`` starts with
    the chord and switches to full steps once a chord step fails to
    decrease the residual (or only halves it).

    With ``check_half_space`` the iteration stops with
    :class:`NewtonDivergence` as soon as some Re<psi^j(T), psi_ref^j(T)>
    becomes non-positive, i.e. the iterate left the neighbourhood where
    the projection P~ is a chart.
    """
    if jacobian not in ("auto", "chord", "full"):
        raise ValueError("jacobian must be 'auto', 'chord' or 'full'")
    c0 = as_coeffs(psi0)
    cf = as_coeffs(psif)
    N = ref.N
    if c0.shape[0] != N or cf.shape[0] != N:
        raise ValueError("state sizes differ from the reference")
    if np.abs(gram(c0) - gram(cf)).max() > gram_tol:
        raise ValueError("psi0 and psif are not unitarily equivalent")
    start = np.zeros_like(c0)
    start[np.arange(N), np.arange(N)] = 1.0
    delta = max(h3_distance(c0, start), h3_distance(cf, ref.anchor_final))
    rT = ref.final
    target = project_to_X(cf, rT)
    lam = _lam(basis)
    Bm = _B(B)
    u = ref.u_ref.samples.copy()
    t = ref.u_ref.t_grid
    mode = "full" if jacobian == "full" else "chord"

    def evaluate(uu):
        fin = final_state(c0, Control(t, uu), lam, Bm)
        return fin, project_to_X(fin, rT) - target

    fin, R = evaluate(u)
    res = sobolev_norm(R, 3)
    hist = []
    it = 0
    while True:
        err = h3_distance(fin, cf)
        overlaps = np.real(np.sum(fin * rT.conj(), axis=1))
        hist.append({"iter": it, "error_H3": err, "residual": res, "min_re_overlap": float(overlaps.min()),
                     "jacobian": mode})
        if check_half_space and np.any(overlaps <= 0):
            raise NewtonDivergence("final state left the half-space Re<psi^j(T), psi_ref^j(T)> > 0",
                                   residual=err)
        if err < tol:
            return LocalSteerResult(Control(t.copy(), u), err, it, delta, hist)
        if it == max_iter:
            break
        if mode == "chord":
            dv = linearized_control(np.zeros_like(c0), -R, ref, basis, B, verify=False,
                                    check_membership=False).samples
        else:
            dv = _full_newton_step(c0, u, t, lam, Bm, fin - cf)
        s = 1.0
        for _ in range(30):
            fin2, R2 = evaluate(u + s * dv)
            res2 = sobolev_norm(R2, 3)
            if res2 < res:
                break
            s *= 0.5
        else:
            if mode == "chord" and jacobian == "auto":
                mode = "full"
                continue
            raise TrustRegionShrunk("no decreasing Newton step; reduce the perturbation size", residual=res)
        if mode == "chord" and jacobian == "auto" and res2 > 0.5 * res:
            mode = "full"
        u = u + s * dv
        fin, R, res = fin2, R2, res2
        it += 1
    raise NewtonDivergence(f"error {err:.3e} after {max_iter} Newton iterations", residual=err)


# ------------------------------------------------------------ phase alignment

def _wrap(x):
    return (x + np.pi) % (2 * np.pi) - np.pi


def alignment_margin(a, lam, T, tol):
    """max_j |exp(i (a_j - lambda_j T)) - 1| / tol_j (feasible iff < 1)."""
    a = np.asarray(a, dtype=float)
    lam = np.asarray(lam, dtype=float)
    return float(np.max(np.abs(np.exp(1j * (a - lam * T)) - 1) / np.asarray(tol)))


def phase_alignment_time(a, lam, tol, T_max, T_min=0.0, chunk=1_000_000):
    """Smallest feasible interval of T in (T_min, T_max] with
    |exp(i (a_j - lambda_j T)) - 1| < tol_j for all j; returns its midpoint.

    Each condition is a union of intervals around (a_j + 2 pi m) / lambda_j;
    they are intersected exactly, starting from the sparsest family.
    """
    a = np.asarray(a, dtype=float)
    lam = np.asarray(lam, dtype=float)
    tol = np.broadcast_to(np.asarray(tol, dtype=float), a.shape)
    active = tol < 2.0
    fixed = np.abs(lam) < 1e-300
    if np.any(active & fixed & (np.abs(np.exp(1j * a) - 1) >= tol)):
        raise NotFound("a condition with zero frequency can never hold", best_margin=np.inf)
    act = np.flatnonzero(active & ~fixed)
    if act.size == 0:
        return 0.5 * (T_min + T_max) if T_min > 0 else min(T_max, 1.0) * 0.5
    h = 2 * np.arcsin(tol[act] / 2)
    la = lam[act]
    aa = a[act]
    order = np.argsort(np.abs(la))
    la, aa, h = la[order], aa[order], h[order]
    # intervals of the slowest condition
    period = 2 * np.pi / abs(la[0])
    best = (np.inf, None)
    T0 = T_min
    while T0 < T_max:
        T1 = min(T_max, T0 + chunk * period)
        lo, hi = _intervals(aa[0], la[0], h[0], T0, T1)
        for j in range(1, la.size):
            if lo.size == 0:
                break
            lo, hi = _intersect(lo, hi, aa[j], la[j], h[j])
        keep = hi > max(T_min, 0.0)
        lo, hi = np.maximum(lo[keep], T_min), hi[keep]
        keep = hi > lo
        lo, hi = lo[keep], hi[keep]
        if lo.size:
            i = int(np.argmin(lo))
            Tr = 0.5 * (lo[i] + hi[i])
            if alignment_margin(a[act], lam[act], Tr, tol[act]) < 1:
                return float(Tr)
        # keep track of the best candidate for the error report
        mids = (np.arange(np.ceil((la[0] * T0 - aa[0]) / (2 * np.pi)),
                          np.floor((la[0] * T1 - aa[0]) / (2 * np.pi)) + 1) * 2 * np.pi + aa[0]) / la[0]
        if mids.size:
            marg = np.max(np.abs(np.exp(1j * (a[act][:, None] - lam[act][:, None] * mids[None, :])) - 1)
                          / tol[act][:, None], axis=0)
            k = int(np.argmin(marg))
            if marg[k] < best[0]:
                best = (float(marg[k]), float(mids[k]))
        T0 = T1
    raise NotFound(f"no aligned time in ({T_min}, {T_max}]; best margin {best[0]:.3g} at T={best[1]}",
                   best_margin=best[0])


def _intervals(a, lam, h, T0, T1):
    """Intervals {T in [T0, T1] : |wrap(a - lam T)| < h}."""
    if lam > 0:
        m0 = np.floor((lam * T0 - a - h) / (2 * np.pi))
        m1 = np.ceil((lam * T1 - a + h) / (2 * np.pi))
        m = np.arange(m0, m1 + 1)
        c = (a + 2 * np.pi * m) / lam
        w = h / lam
    else:
        m0 = np.floor((-lam * T0 + a - h) / (2 * np.pi))
        m1 = np.ceil((-lam * T1 + a + h) / (2 * np.pi))
        m = np.arange(m0, m1 + 1)
        c = (2 * np.pi * m - a) / (-lam)
        w = h / (-lam)
    lo, hi = np.maximum(c - w, T0), np.minimum(c + w, T1)
    keep = hi > lo
    return lo[keep], hi[keep]


def _intersect(lo, hi, a, lam, h):
    """Intersect intervals with the condition |wrap(a - lam T)| < h."""
    out_lo, out_hi = [], []
    w = h / abs(lam)
    mid = 0.5 * (lo + hi)
    if lam > 0:
        mc = np.round((lam * mid - a) / (2 * np.pi))
        for dm in (-1, 0, 1):
            c = (a + 2 * np.pi * (mc + dm)) / lam
            l2, h2 = np.maximum(lo, c - w), np.minimum(hi, c + w)
            k = h2 > l2
            out_lo.append(l2[k])
            out_hi.append(h2[k])
    else:
        mc = np.round((-lam * mid + a) / (2 * np.pi))
        for dm in (-1, 0, 1):
            c = (2 * np.pi * (mc + dm) - a) / (-lam)
            l2, h2 = np.maximum(lo, c - w), np.minimum(hi, c + w)
            k = h2 > l2
            out_lo.append(l2[k])
            out_hi.append(h2[k])
    lo2, hi2 = np.concatenate(out_lo), np.concatenate(out_hi)
    o = np.argsort(lo2)
    return lo2[o], hi2[o]


def rotation_time(theta, lam, delta, N, T_max, T_min=0.0):
    """Smallest free-evolution time with
    |lambda_j|^{3/2} |exp(i (2 theta_j - lambda_j T_r)) - 1| < delta / N.
    """
    theta = np.asarray(theta, dtype=float)[:N]
    lam = np.asarray(lam, dtype=float)[:N]
    tol = delta / (N * np.abs(lam) ** 1.5)
    Tr = phase_alignment_time(2 * theta, lam, tol, T_max, T_min)
    if not np.all(np.abs(lam) ** 1.5 * np.abs(np.exp(1j * (2 * theta - lam * Tr)) - 1) < delta / N):
        raise NotFound("alignment check failed", best_margin=None)
    return Tr


# ------------------------------------------------------------ unitary completion

def _pivoted_gram_schmidt(basis_rows, cand, need, tol):
    """Extend orthonormal ``basis_rows`` by ``need`` vectors chosen greedily from ``cand``."""
    Q = [q for q in basis_rows]
    cand = [c.astype(complex) for c in cand]
    out = []
    for _ in range(need):
        best, bi = -1.0, -1
        resid = []
        for c in cand:
            r = c.copy()
            for _ in range(2):
                for q in Q:
                    r -= np.vdot(q, r) * q
            resid.append(r)
        norms = [np.linalg.norm(r) for r in resid]
        bi = int(np.argmax(norms))
        best = norms[bi]
        if best < tol:
            raise RankDeficiency(f"family lost rank (residual norm {best:.3e})")
        q = resid[bi] / best
        Q.append(q)
        out.append(q)
        cand.pop(bi)
    return out


def unitary_completion(z, phi, M, rank_tol=1e-8, gram_tol=1e-8):
    """K x K unitary U with U z^j = phi^j and U phi_k close to phi_k for k <= M.

    Rows of ``z`` must lie in the span of the first M eigenfunctions and
    have the same Gram matrix as ``phi``. Coefficient rows transform as
    ``c @ U.T``.
    """
    z = as_coeffs(z)
    phi = as_coeffs(phi)
    N, K = z.shape
    if np.abs(z[:, M:]).max(initial=0.0) > 1e-8:
        raise ValueError("z has components beyond the first M modes")
    if np.abs(gram(z) - gram(phi)).max() > gram_tol:
        raise ValueError("z and phi are not unitarily equivalent")
    U_, s, Vh = np.linalg.svd(z, full_matrices=False)
    n = int(np.sum(s > rank_tol * max(1.0, s[0])))
    a = (U_[:, :n].conj().T) / s[:n, None]           # n x N: psi^z = a z
    psi_z = a @ z
    psi_phi = a @ phi
    comp = _pivoted_gram_schmidt(list(psi_z), list(np.eye(K)[:M]), M - n, 1e-10)
    psi_z_full = np.vstack([psi_z] + ([np.array(comp)] if comp else []))
    tilde = []
    for q in comp:
        t = q - sum(np.vdot(p, q) * p for p in psi_phi)
        tilde.append(t)
    hat = list(psi_phi)
    for t in tilde:
        r = t.copy()
        for _ in range(2):
            for q in hat:
                r -= np.vdot(q, r) * q
        nr = np.linalg.norm(r)
        if nr < rank_tol:
            raise RankDeficiency(f"corrected family is numerically dependent (norm {nr:.3e})")
        hat.append(r / nr)
    hat = np.array(hat)
    # columns: U maps psi_z_full[k] (as a column) to hat[k]
    U = hat.T @ psi_z_full.conj()
    if K > M:
        E = np.eye(K)[:, M:].astype(complex)
        X = E - hat.T @ (hat.conj() @ E)
        w, V = np.linalg.eigh(X.conj().T @ X)
        if w.min() < rank_tol:
            raise RankDeficiency("complement lost rank")
        Xo = X @ (V @ np.diag(w ** -0.5) @ V.conj().T)
        U = U + Xo @ E.conj().T
    err = np.abs(z @ U.T - phi).max()
    if err > 1e-8 * max(1.0, np.abs(phi).max()):
        raise RankDeficiency(f"completion does not map z to phi (error {err:.3e})")
    return U
