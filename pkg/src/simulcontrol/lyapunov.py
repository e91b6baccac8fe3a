"""Lyapunov descent towards tuples of eigenstates.

The Lyapunov function is

    V(z) = alpha sum_j sum_{k>N} lambda_k^4 |<z^j, phi_k>|^2
           + 1 - prod_j |<z^j, phi_j>|^2,

and the derivative of sigma -> V(psi(T, psi0, sigma w)) at sigma = 0 is
int_0^T Phi(tau) w(tau) dtau with Phi a finite sum of exponentials at the
gaps lambda_k - lambda_p. Each descent step excites the dominant gap with
a Hann-windowed cosine and line-searches its amplitude.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NoDescentDirection, NotInE, StagnationError
from .moment import plateau_exp_averages
from .plans import SteerPlan
from .propagator import Control, as_coeffs, final_state, hann


@dataclass
class LyapunovConfig:
    """Settings of the descent loop.

    ``segment_T`` is the horizon of one descent step; ``None`` picks 20
    periods of the smallest spectral gap. ``target_value`` stops the loop
    once V drops below it.
    """

    alpha: float
    N: int
    K: int
    descent_tolerance: float = 1e-12
    max_iters: int = 200
    segment_T: float | None = None
    samples_per_period: int = 16
    armijo: float = 1e-4
    max_expansions: int = 12
    max_backtracks: int = 40
    target_value: float = 0.0
    stagnation_iters: int = 10


@dataclass
class PhiSeries:
    """Phi(tau) = sum_{k<p} P e^{i (lambda_k - lambda_p) tau} + conj(P) e^{-i ...}.

    ``k`` and ``p`` are 1-based index arrays with k < p.
    """

    k: np.ndarray
    p: np.ndarray
    P: np.ndarray
    freq: np.ndarray = field(repr=False)

    @property
    def P_tilde(self):
        return self.P.conj()

    def __call__(self, tau):
        tau = np.atleast_1d(np.asarray(tau, dtype=float))
        e = np.exp(1j * np.outer(tau, self.freq))
        return e @ self.P + e.conj() @ self.P.conj()

    def coefficient(self, k, p):
        hit = np.flatnonzero((self.k == k) & (self.p == p))
        return complex(self.P[hit[0]]) if hit.size else 0.0j


def _lam(basis):
    return np.asarray(getattr(basis, "lam", basis), dtype=float)


def _B(B):
    return np.asarray(getattr(B, "B", B), dtype=float)


def diagonal_overlaps(z, N):
    c = as_coeffs(z)
    return c[np.arange(N), np.arange(N)]


def high_mode_energy(z, lam, N):
    """sum_j sum_{k>N} lambda_k^4 |c_jk|^2."""
    c = as_coeffs(z)
    return float(np.sum(lam[N:] ** 4 * np.abs(c[:, N:]) ** 2))


def init_alpha(psi0, basis, N, eps=1e-300):
    """Weight alpha keeping V(psi0) < 1.

    alpha = min(1e-4, 0.5 (1 - Pi) / S, 0.5 Pi / S) where Pi is the product
    of squared diagonal overlaps and S the high-mode energy.
    """
    lam = _lam(basis)
    Pi = float(np.prod(np.abs(diagonal_overlaps(psi0, N)) ** 2))
    S = high_mode_energy(psi0, lam, N)
    cands = [1e-4]
    if S > eps:
        if 1 - Pi > 0:
            cands.append(0.5 * (1 - Pi) / S)
        cands.append(0.5 * Pi / S)
    return float(min(cands))


def lyapunov_value(z, cfg: LyapunovConfig, basis) -> float:
    lam = _lam(basis)
    c = as_coeffs(z)
    N = cfg.N
    Pi = float(np.prod(np.abs(c[np.arange(N), np.arange(N)]) ** 2))
    return cfg.alpha * high_mode_energy(c, lam, N) + 1.0 - Pi


def phi_series(psi0, cfg: LyapunovConfig, basis, B) -> PhiSeries:
    """Coefficients of the derivative series Phi for the initial tuple psi0."""
    lam = _lam(basis)
    Bm = _B(B)
    c = as_coeffs(psi0)
    N, K = cfg.N, c.shape[1]
    dsq = np.abs(c[np.arange(N), np.arange(N)]) ** 2
    X = np.zeros((K, K), dtype=complex)
    w4 = np.where(np.arange(K) >= N, cfg.alpha * lam ** 4, 0.0)
    for j in range(N):
        cj = c[j]
        # alpha lambda_b^4 [b > N] c_b conj(c_a) B_ab
        X += np.outer(cj.conj(), w4 * cj) * Bm
        # - prod_{q != j} |c_qq|^2 c_j conj(c_a) B_aj (column b = j)
        w = np.prod(np.delete(dsq, j))
        X[:, j] -= w * cj[j] * cj.conj() * Bm[:, j]
    kk, pp = np.triu_indices(K, 1)
    P = -1j * (X[kk, pp] - X[pp, kk].conj())
    return PhiSeries(k=kk + 1, p=pp + 1, P=P, freq=lam[kk] - lam[pp])


def dV_dsigma(psi0, w: Control, T, cfg: LyapunovConfig, basis, B, series: PhiSeries | None = None) -> float:
    """int_0^T Phi(tau) w(tau) dtau, with exact plateau integrals."""
    if w.T > T * (1 + 1e-12) + 1e-15:
        raise ValueError("probe control is longer than the horizon")
    s = series or phi_series(psi0, cfg, basis, B)
    if not s.P.size or not w.samples.size:
        return 0.0
    avg = plateau_exp_averages(s.freq, w.t_grid - w.t_grid[0])
    m = avg @ (w.samples * w.dt)
    return float(2.0 * np.real(np.sum(s.P * m)))


def select_pair(series: PhiSeries):
    """Index of the dominant coefficient; ties go to the smallest (p, k)."""
    a = np.abs(series.P)
    top = a.max()
    cand = np.flatnonzero(a >= top * (1 - 1e-12))
    best = min(cand, key=lambda i: (series.p[i], series.k[i]))
    return int(best)


def default_segment_T(lam):
    gap = float(np.min(np.diff(np.sort(lam))))
    return 20 * 2 * np.pi / gap


def probe_control(series: PhiSeries, i: int, T_seg: float, samples_per_period: int = 16) -> Control:
    """Hann-windowed cosine aligned with the phase of P(k, p), unit peak."""
    P = series.P[i]
    om = -series.freq[i]
    n = max(64, int(np.ceil(T_seg * om * samples_per_period / (2 * np.pi))))
    phase = -np.angle(P)

    def f(t):
        # Re(conj(P) e^{i om t}) / |P|
        return hann(t / T_seg) * np.cos(om * t + phase)
    c = Control.from_function(f, T_seg, n)
    c.packets = [{"amplitude": 1.0, "frequency": float(om), "phase": float(phase), "window": "hann",
                  "pair": [int(series.k[i]), int(series.p[i])]}]
    return c


def descent_step(psi0, cfg: LyapunovConfig, basis, B, return_info=False):
    """One strict-decrease step of the Lyapunov function.

    Returns ``(control, new_state, new_value)``; with ``return_info`` a dict
    with the chosen pair, sigma and derivative is appended.

    Raises
    ------
    NotInE
        If the product of diagonal overlaps vanishes.
    NoDescentDirection
        If max |P(k, p)| < ``cfg.descent_tolerance`` or no decreasing
        amplitude is found.
    """
    c = as_coeffs(psi0)
    N = cfg.N
    prod = np.prod(diagonal_overlaps(c, N))
    if abs(prod) < 1e-14:
        raise NotInE("product of diagonal overlaps vanishes; state is outside E")
    V0 = lyapunov_value(c, cfg, basis)
    s = phi_series(c, cfg, basis, B)
    top = float(np.abs(s.P).max()) if s.P.size else 0.0
    if top < cfg.descent_tolerance:
        raise NoDescentDirection(f"max |P| = {top:.3e} below tolerance", top)
    i = select_pair(s)
    T_seg = cfg.segment_T or default_segment_T(_lam(basis))
    w = probe_control(s, i, T_seg, cfg.samples_per_period)
    d = dV_dsigma(c, w, T_seg, cfg, basis, B, series=s)
    if d == 0.0:
        raise NoDescentDirection("probe is orthogonal to the derivative series", top)
    sgn = -np.sign(d)
    sigma = 0.1 / w.l2_norm()

    def trial(sig):
        z = final_state(c, w.scaled(sgn * sig), basis, B)
        return z, lyapunov_value(z, cfg, basis)

    def ok(sig, val):
        return val < V0 - cfg.armijo * sig * abs(d)

    z, val = trial(sigma)
    if ok(sigma, val):
        for _ in range(cfg.max_expansions):
            z2, v2 = trial(2 * sigma)
            if not (ok(2 * sigma, v2) and v2 < val):
                break
            sigma, z, val = 2 * sigma, z2, v2
    else:
        for _ in range(cfg.max_backtracks):
            sigma *= 0.5
            z, val = trial(sigma)
            if ok(sigma, val):
                break
        else:
            raise NoDescentDirection("line search found no decreasing amplitude", top)
    ctrl = w.scaled(sgn * sigma)
    ctrl.packets = [dict(w.packets[0], amplitude=float(sgn * sigma))]
    if return_info:
        info = {"k": int(s.k[i]), "p": int(s.p[i]), "sigma": float(sgn * sigma), "dV": d, "max_P": top}
        return ctrl, z, val, info
    return ctrl, z, val


def achieved_M(z, N, mass=1 - 1e-6):
    """max(N, smallest M such that every row keeps ``mass`` in its first M modes)."""
    c = as_coeffs(z)
    cum = np.cumsum(np.abs(c) ** 2, axis=1) / np.sum(np.abs(c) ** 2, axis=1, keepdims=True)
    M = int(max(np.argmax(row >= mass) + 1 for row in cum))
    return max(N, M)


def stabilize(psi0, cfg: LyapunovConfig, basis, B, log=None):
    """Repeat descent steps until the target value, a critical point or max_iters.

    Parameters
    ----------
    log : list, optional
        Receives one dict per iteration (iter, V, k, p, sigma, tail_mass).

    Returns
    -------
    plan : SteerPlan
    state : ndarray
    M : int

    Raises
    ------
    StagnationError
        When ``cfg.stagnation_iters`` consecutive steps give no relative
        decrease above 1e-12.
    """
    c = as_coeffs(psi0).copy()
    plan = SteerPlan()
    V = lyapunov_value(c, cfg, basis)
    values = [V]
    stall = 0
    for it in range(cfg.max_iters):
        if V <= cfg.target_value:
            break
        try:
            ctrl, c_new, V_new, info = descent_step(c, cfg, basis, B, return_info=True)
        except NoDescentDirection:
            break
        if V - V_new <= 1e-12 * max(V, 1e-300):
            stall += 1
            if stall >= cfg.stagnation_iters:
                raise StagnationError(f"no progress for {stall} iterations (V = {V_new:.3e})", V_new)
        else:
            stall = 0
        plan.append("lyapunov", ctrl, note=f"pair ({info['k']},{info['p']})")
        c, V = c_new, V_new
        values.append(V)
        if log is not None:
            M = achieved_M(c, cfg.N)
            tail = float(np.max(np.sum(np.abs(c[:, M:]) ** 2, axis=1))) if M < c.shape[1] else 0.0
            log.append({"iter": it + 1, "V": V, "k": info["k"], "p": info["p"], "sigma": info["sigma"],
                        "tail_mass": tail})
    plan.info["lyapunov_values"] = values
    return plan, c, achieved_M(c, cfg.N)


def write_log_csv(log, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("iter,V,k,p,sigma,tail_mass\n")
        for r in log:
            fh.write(f"{r['iter']},{float(r['V'])!r},{r['k']},{r['p']},{float(r['sigma'])!r},{float(r['tail_mass'])!r}\n")
