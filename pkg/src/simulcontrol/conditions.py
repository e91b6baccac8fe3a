"""Finite-truncation checks of the spectral and coupling hypotheses.

Each check returns a :class:`ConditionReport`. Indices in witnesses are
1-based, matching the usual labelling of eigenpairs.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from .spectral import DipoleMatrix

NONVANISHING_TOL = 1e-12
RESONANCE_TOL = 1e-8


@dataclass
class ConditionReport:
    """Outcome of one condition check.

    ``witnesses`` lists ``(indices, margin)`` pairs for every violation; it
    is empty exactly when the condition holds at the given truncation.
    """

    condition_id: str
    holds_at_truncation: bool
    witnesses: list = field(default_factory=list)
    fitted_constants: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "condition_id": self.condition_id,
            "holds_at_truncation": bool(self.holds_at_truncation),
            "witnesses": [{"indices": [int(i) for i in idx], "margin": float(m)} for idx, m in self.witnesses],
            "fitted_constants": _jsonable(self.fitted_constants),
        }

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    return obj


def _matrix(B):
    return B.B if isinstance(B, DipoleMatrix) else np.asarray(B)


def check_nonvanishing(B, N: int, tol: float = NONVANISHING_TOL) -> ConditionReport:
    """Flag couplings |B[j, k]| < tol for j <= N and every k in the truncation."""
    Bm = _matrix(B)
    K = Bm.shape[0]
    if N > K:
        raise ValueError("N exceeds the truncation")
    wit = []
    for j in range(N):
        for k in range(K):
            m = abs(Bm[j, k])
            if m < tol:
                wit.append(((j + 1, k + 1), m))
    return ConditionReport("C1", not wit, wit, {"min_abs_coupling": float(np.abs(Bm[:N]).min())})


def check_decay(B, N: int, K: int | None = None, tol: float = NONVANISHING_TOL,
                condition_id: str = "C3") -> ConditionReport:
    """Fit C_j = min_k k^3 |B[j, k]| for j <= N.

    The report also carries the slope of log(k^3 |B[j, k]|) against log k
    over the top decade of k; a slope near zero means the k^-3 law is
    visible at this truncation.
    """
    Bm = _matrix(B)
    K = K or Bm.shape[0]
    k = np.arange(1, K + 1, dtype=float)
    wit = []
    consts = {}
    trends = {}
    for j in range(N):
        scaled = k ** 3 * np.abs(Bm[j, :K])
        c = float(scaled.min())
        consts[f"C_{j + 1}"] = c
        if c <= tol:
            kk = int(np.argmin(scaled))
            wit.append(((j + 1, kk + 1), c))
        top = k >= max(1.0, 0.1 * K) if K >= 10 else k >= 1
        sel = top & (scaled > 0)
        if sel.sum() >= 2:
            trends[f"slope_{j + 1}"] = float(np.polyfit(np.log(k[sel]), np.log(scaled[sel]), 1)[0])
    consts.update(trends)
    return ConditionReport(condition_id, not wit, wit, consts)


def _lam_array(lam):
    lam = np.asarray(getattr(lam, "lam", lam), dtype=float)
    return lam


def check_gap_nonresonance(lam, N: int, K: int | None = None, tol: float = RESONANCE_TOL,
                           condition: str = "C2") -> ConditionReport:
    """Look for coincident eigenvalue gaps inside the truncation.

    ``condition="C2"`` enumerates lambda_j - lambda_k = lambda_p - lambda_q
    with j <= N, k != j and {j, k} != {p, q} (all other indices free);
    ``condition="C4"`` enumerates lambda_k - lambda_j = lambda_p - lambda_n
    with j, n <= N, k > j, p > n and {j, k} != {p, n}.

    Witnesses are ``((j, k, p, q), |difference|)``; for C2 each unordered
    coincidence is reported once.
    """
    lam = _lam_array(lam)
    K = K or lam.size
    lam = lam[:K]
    if N > K:
        raise ValueError("N exceeds the truncation")
    wit = []
    if condition == "C4":
        pairs = [(j, k) for j in range(N) for k in range(j + 1, K)]
        gaps = np.array([lam[k] - lam[j] for j, k in pairs])
        for a, b in itertools.combinations(range(len(pairs)), 2):
            if {*pairs[a]} == {*pairs[b]}:
                continue
            d = abs(gaps[a] - gaps[b])
            if d < tol:
                j, k = pairs[a]
                n, p = pairs[b]
                wit.append(((j + 1, k + 1, p + 1, n + 1), d))
    elif condition == "C2":
        D = lam[:, None] - lam[None, :]
        seen = set()
        for j in range(N):
            for k in range(K):
                if k == j:
                    continue
                target = lam[j] - lam[k]
                hits = np.argwhere(np.abs(D - target) < tol)
                for p, q in hits:
                    if {p, q} == {j, k} or p == q:
                        continue
                    key = frozenset([(j, k), (int(p), int(q))])
                    if key in seen:
                        continue
                    seen.add(key)
                    wit.append(((j + 1, k + 1, int(p) + 1, int(q) + 1), float(abs(D[p, q] - target))))
    else:
        raise ValueError("condition must be 'C2' or 'C4'")
    return ConditionReport(condition, not wit, wit, {"K": K, "tol": tol})


def check_rational_independence(lam, N: int, R_max: int = 20, tol: float = 1e-9,
                                condition_id: str = "C7") -> ConditionReport:
    """Bounded integer-relation search for {1, lambda_1, ..., lambda_N}.

    Searches r in Z^{N+1}, 0 < ||r||_inf <= R_max, with
    |r_0 + sum_j r_j lambda_j| < tol. For every choice of (r_1..r_N) the
    best r_0 is the rounded value, so the search costs (2 R_max + 1)^N.
    """
    lam = _lam_array(lam)[:N]
    best = (np.inf, None)
    wit = []
    rng = np.arange(-R_max, R_max + 1)
    for r in itertools.product(rng, repeat=N):
        r = np.array(r)
        s = float(r @ lam)
        if not np.any(r):
            continue
        r0 = -np.round(s)
        if abs(r0) > R_max:
            continue
        res = abs(r0 + s)
        if res < best[0]:
            best = (res, (int(r0), *map(int, r)))
        if res < tol:
            wit.append(((int(r0), *map(int, r)), res))
    consts = {"R_max": R_max, "best_residual": best[0], "best_relation": best[1]}
    return ConditionReport(condition_id, not wit, wit, consts)


def check_all(basis, dipole, N: int, R_max: int = 10):
    """Run every check on one basis; returns a dict keyed by condition id."""
    K = basis.K
    reports = [
        check_nonvanishing(dipole, N),
        check_gap_nonresonance(basis.lam, N, K, condition="C2"),
        check_decay(dipole, N, K, condition_id="C3"),
        check_gap_nonresonance(basis.lam, N, K, condition="C4"),
        check_rational_independence(basis.lam, N, R_max, condition_id="C5"),
    ]
    return {r.condition_id: r for r in reports}
