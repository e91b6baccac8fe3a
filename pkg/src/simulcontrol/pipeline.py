"""Global steering plans and gate targeting.

A plan is assembled in five pieces:

1. a smooth ramp of the control from 0 to u_shift, after which the
   system is the one with potential V - u_shift mu and control u - u_shift
   (the "frame");
2. Lyapunov descent from the initial tuple towards eigenstates of the frame;
3. the same from the time-reversed target side;
4. a free rotation followed by one or more local exact steers that join
   the two ends along a unitary path;
5. the time reversal of step 3 and the reversed ramp.

The final error is always measured by propagating the complete control
from psi0 in the original basis.
"""
from __future__ import annotations

import copy
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import yaml
from scipy.linalg import schur

from .conditions import check_all
from .errors import BudgetExceeded, NotFound, NotInE, ScenarioError
from .local_control import build_reference, local_steer, phase_alignment_time, unitary_completion
from .lyapunov import LyapunovConfig, init_alpha, stabilize
from .plans import SteerPlan
from .propagator import Control, concatenate, final_state, gram
from .spectral import Potential, build_basis, dipole_matrix, frame_basis, h3_distance, make_grid

log = logging.getLogger(__name__)


# ------------------------------------------------------------ scenarios

def _complex(x):
    if isinstance(x, (list, tuple)):
        if len(x) != 2:
            raise ScenarioError(f"complex entries are [re, im] pairs, got {x!r}")
        return complex(float(x[0]), float(x[1]))
    if isinstance(x, str):
        return complex(x.replace(" ", ""))
    return complex(x)


def state_from_spec(spec, K, N=None):
    """Build an N x K coefficient array from a state description.

    Accepted forms (indices are 1-based):

    * ``{"eigenstates": [1, 2], "phases": [0.0, 0.5]}``
    * ``{"mix": [[[1, 1.0], [2, 1.0]], ...]}``, one list of (k, c) per row,
      each row normalized
    * ``{"coeffs": [[c_1, c_2, ...], ...]}``, rows zero-padded to K
    * ``{"unitary": [[...], ...]}``: row j is sum_k U[j, k] phi_k

    Complex numbers may be given as numbers, ``[re, im]`` or strings.
    """
    if not isinstance(spec, dict) or len(set(spec) - {"phases"}) != 1:
        raise ScenarioError(f"state spec must have exactly one form, got {spec!r}")
    if "eigenstates" in spec:
        idx = [int(k) for k in spec["eigenstates"]]
        ph = spec.get("phases", [0.0] * len(idx))
        c = np.zeros((len(idx), K), dtype=complex)
        for r, (k, p) in enumerate(zip(idx, ph)):
            c[r, k - 1] = np.exp(1j * float(p))
    elif "mix" in spec:
        rows = spec["mix"]
        c = np.zeros((len(rows), K), dtype=complex)
        for r, row in enumerate(rows):
            for k, v in row:
                c[r, int(k) - 1] += _complex(v)
            nrm = np.linalg.norm(c[r])
            if nrm == 0:
                raise ScenarioError("a mixed state row vanishes")
            c[r] /= nrm
    elif "coeffs" in spec:
        rows = spec["coeffs"]
        c = np.zeros((len(rows), K), dtype=complex)
        for r, row in enumerate(rows):
            vals = [_complex(v) for v in row]
            if len(vals) > K:
                raise ScenarioError("coefficient row longer than K")
            c[r, :len(vals)] = vals
    elif "unitary" in spec:
        U = np.array([[_complex(v) for v in row] for row in spec["unitary"]])
        n = U.shape[0]
        if U.shape != (n, n) or np.abs(U @ U.conj().T - np.eye(n)).max() > 1e-9:
            raise ScenarioError("unitary spec is not a square unitary matrix")
        c = np.zeros((n, K), dtype=complex)
        c[:, :n] = U
    else:
        raise ScenarioError(f"unknown state spec {sorted(spec)}")
    if N is not None and c.shape[0] != N:
        raise ScenarioError(f"state has {c.shape[0]} rows, expected N={N}")
    return c


@dataclass
class Scenario:
    """Everything needed to plan one steering problem.

    States are given in the eigenbasis of the unshifted potential ``V``.
    Time budgets: ``T_ramp`` (each ramp), ``T_local`` (each local steer),
    ``T_rotation_max`` (free rotation search) and ``max_total_T``.
    """

    V: Potential = field(default_factory=Potential)
    mu: Potential = field(default_factory=lambda: Potential("polynomial", (0.0, 0.0, 1.0)))
    N: int = 1
    K: int = 16
    psi0_spec: dict = field(default_factory=lambda: {"eigenstates": [1]})
    psif_spec: dict = field(default_factory=lambda: {"eigenstates": [1]})
    name: str = "scenario"
    n_points: int = 1024
    tolerance: float = 1e-4
    seed: int = 0
    u_shift: float = -1.0
    eta: float = 1e-3
    T_ramp: float = 10.0
    T_local: float = 4.0
    T_rotation_max: float = 1e5
    max_total_T: float = 1e7
    hop_delta: float = 0.1
    rotation_tol: float = 0.05
    max_hops: int = 40
    lyapunov_max_iters: int = 60
    lyapunov_target: float = 1e-4
    lyapunov_segment_T: float | None = None
    R_max: int = 10

    _FIELDS = ("name", "N", "K", "n_points", "tolerance", "seed", "u_shift", "eta", "T_ramp", "T_local",
               "T_rotation_max", "max_total_T", "hop_delta", "rotation_tol", "max_hops", "lyapunov_max_iters",
               "lyapunov_target", "lyapunov_segment_T", "R_max")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        kw = {}
        try:
            if "V" in d:
                kw["V"] = Potential.from_dict(d.pop("V"))
            if "mu" in d:
                kw["mu"] = Potential.from_dict(d.pop("mu"))
        except (ValueError, KeyError, TypeError) as exc:
            raise ScenarioError(f"bad potential: {exc}") from exc
        kw["psi0_spec"] = d.pop("psi0", {"eigenstates": [1]})
        kw["psif_spec"] = d.pop("psif", {"eigenstates": [1]})
        for sec in ("lyapunov", "budgets", "local"):
            for k, v in (d.pop(sec, None) or {}).items():
                key = {"max_iters": "lyapunov_max_iters", "target": "lyapunov_target",
                       "segment_T": "lyapunov_segment_T"}.get(k, k) if sec == "lyapunov" else k
                d[key] = v
        unknown = set(d) - set(cls._FIELDS)
        if unknown:
            raise ScenarioError(f"unknown scenario keys {sorted(unknown)}")
        for k, v in d.items():
            kw[k] = _coerce(k, v)
        sc = cls(**kw)
        sc.validate()
        return sc

    def to_dict(self):
        out = {k: getattr(self, k) for k in self._FIELDS}
        out["V"] = self.V.to_dict()
        out["mu"] = self.mu.to_dict()
        out["psi0"] = self.psi0_spec
        out["psif"] = self.psif_spec
        return out

    def validate(self):
        if not (1 <= self.N <= self.K):
            raise ScenarioError("need 1 <= N <= K")
        if self.tolerance <= 0 or self.T_ramp <= 0 or self.T_local <= 0:
            raise ScenarioError("tolerance and time budgets must be positive")

    def with_states(self, psi0_spec, psif_spec, N=None):
        sc = copy.deepcopy(self)
        sc.psi0_spec, sc.psif_spec = psi0_spec, psif_spec
        if N is not None:
            sc.N = N
        return sc


_INT_FIELDS = {"N", "K", "n_points", "seed", "max_hops", "lyapunov_max_iters", "R_max"}


def _coerce(key, value):
    # YAML 1.1 reads "1.0e5" (unsigned exponent) as a string
    if key == "name" or (key == "lyapunov_segment_T" and value is None):
        return value
    try:
        if key in _INT_FIELDS:
            f = float(value)
            if f != int(f):
                raise ValueError
            return int(f)
        return float(value)
    except (TypeError, ValueError):
        raise ScenarioError(f"scenario key {key!r} expects a number, got {value!r}") from None


def load_scenario(path) -> Scenario:
    """Read a YAML scenario file."""
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict):
        raise ScenarioError("scenario file must hold a mapping")
    return Scenario.from_dict(data)


@dataclass
class Setup:
    """Bases and matrices derived from a scenario."""

    basis: object
    dipole: object
    frame: object
    frame_dipole: object
    Q: np.ndarray
    psi0: np.ndarray
    psif: np.ndarray


def prepare(sc: Scenario) -> Setup:
    grid = make_grid(sc.n_points)
    basis = build_basis(sc.V, sc.K, grid)
    dip = dipole_matrix(sc.mu, basis)
    frame, fdip, Q = frame_basis(basis, dip, sc.u_shift)
    psi0 = state_from_spec(sc.psi0_spec, sc.K, sc.N)
    psif = state_from_spec(sc.psif_spec, sc.K, sc.N)
    G0, Gf = gram(psi0), gram(psif)
    if np.abs(G0 - Gf).max() > 1e-9:
        raise ScenarioError(f"psi0 and psif are not unitarily equivalent (Gram mismatch "
                            f"{np.abs(G0 - Gf).max():.2e})")
    return Setup(basis, dip, frame, fdip, Q, psi0, psif)


# ------------------------------------------------------------ pieces

def smoothstep(s):
    s = np.clip(s, 0.0, 1.0)
    return s * s * (3 - 2 * s)


def ramp_control(T_ramp, n=None, target=-1.0) -> Control:
    """Monotone ramp from 0 to ``target`` (cubic smoothstep).

    Plateau m carries target * smoothstep(m / (n - 1)), so the first value
    is 0 and the last is ``target`` exactly.
    """
    if T_ramp <= 0:
        raise ValueError("T_ramp must be positive")
    n = n or max(64, int(np.ceil(50 * T_ramp)))
    vals = target * smoothstep(np.arange(n) / (n - 1))
    return Control(np.linspace(0.0, T_ramp, n + 1), vals)


def _enter_E(z, basis, B, N, rng, tries=10, floor=1e-3):
    """Random short controls until the product of diagonal overlaps is not small."""
    segs = []
    lam = basis.lam
    for _ in range(tries):
        if abs(np.prod(z[np.arange(N), np.arange(N)])) > floor:
            return z, segs
        freqs = rng.choice(np.abs(np.diff(lam[:N + 3])), size=3)
        packets = [{"amplitude": float(rng.uniform(0.5, 2.0)), "frequency": float(f),
                    "phase": float(rng.uniform(0, 2 * np.pi)), "window": "hann"} for f in freqs]
        T = 2.0
        c = Control.from_packets(packets, T, max(256, int(T * lam[min(N + 3, lam.size) - 1])))
        z = final_state(z, c, basis, B)
        segs.append(c)
    if abs(np.prod(z[np.arange(N), np.arange(N)])) > floor:
        return z, segs
    raise NotInE("random pre-controls failed to reach a state with non-vanishing diagonal overlaps")


def _fractional_power(G):
    """Principal s-th powers of a unitary matrix via its Schur form."""
    T, Z = schur(G, output="complex")
    ang = np.angle(np.diag(T))

    def power(s):
        return (Z * np.exp(1j * s * ang)) @ Z.conj().T
    return power


def _lyapunov(z, sc: Scenario, basis, B, label):
    cfg = LyapunovConfig(alpha=init_alpha(z, basis, sc.N), N=sc.N, K=sc.K, max_iters=sc.lyapunov_max_iters,
                         segment_T=sc.lyapunov_segment_T, target_value=sc.lyapunov_target)
    plan, state, M = stabilize(z, cfg, basis, B)
    vals = plan.info["lyapunov_values"]
    log.info("%s Lyapunov: %d steps, V %.3e -> %.3e", label, len(vals) - 1, vals[0], vals[-1])
    return plan, state, {"alpha": cfg.alpha, "values": vals, "M": M}


def connect(z_a, w, ref, sc: Scenario, frame, fdip):
    """Controls (in the frame) steering z_a exactly to w.

    A free rotation aligns the diagonal phases; then ``H`` local steers
    follow the interaction-picture path z_a -> exp(i Lambda T_end) w,
    each of length ``ref.T``.
    """
    N = sc.N
    lam = frame.lam
    T_loc = ref.T
    info = {}
    H = 1
    T_r = 0.0
    for _ in range(6):
        dz = z_a[np.arange(N), np.arange(N)]
        dw = w[np.arange(N), np.arange(N)]
        T_r = 0.0
        if np.all(np.abs(dz) > 0.5) and np.all(np.abs(dw) > 0.5):
            a = np.angle(dz) - np.angle(dw) - lam[:N] * H * T_loc
            try:
                T_r = phase_alignment_time(a, lam[:N], sc.rotation_tol, sc.T_rotation_max)
            except NotFound as exc:
                log.info("no aligned rotation time: %s", exc)
        T_end = T_r + H * T_loc
        w_I = w * np.exp(1j * lam * T_end)
        dist = h3_distance(z_a, w_I)
        need = max(1, int(np.ceil(dist / sc.hop_delta)))
        if need <= H:
            break
        H = need
        if H > sc.max_hops:
            raise BudgetExceeded(f"{H} local steers needed (max_hops = {sc.max_hops})")
    info.update({"rotation_time": float(T_r), "hops": H, "path_distance": float(dist)})
    segs = []
    if T_r > 0:
        segs.append(("rotation", Control.constant(0.0, T_r), f"free rotation {T_r:.6g}"))
    state = z_a * np.exp(-1j * lam * T_r)
    power = _fractional_power(unitary_completion(z_a, w_I, sc.K))
    iters, deltas = [], []
    for k in range(1, H + 1):
        anchor = z_a @ power(k / H).T
        target = anchor * np.exp(-1j * lam * (T_r + k * T_loc))
        if k == H:
            target = w
        tol = 1e-2 * sc.tolerance if k == H else 0.1 * sc.hop_delta
        res = local_steer(state, target, ref, frame, fdip, tol=tol, check_half_space=False, max_iter=40)
        state = final_state(state, res.control, frame, fdip)
        iters.append(res.newton_iters)
        deltas.append(res.delta_used)
        segs.append(("local", res.control, f"hop {k}/{H}, {res.newton_iters} Newton steps"))
    info.update({"newton_iters": iters, "delta_used": deltas})
    return segs, state, info


# ------------------------------------------------------------ plans

def _condition_summary(frame, fdip, N, R_max):
    reps = check_all(frame, fdip, N, R_max)
    out = {}
    for cid, r in reps.items():
        out[cid] = bool(r.holds_at_truncation)
        if not r.holds_at_truncation:
            warnings.warn(f"condition {cid} fails at truncation for the shifted potential", RuntimeWarning,
                          stacklevel=3)
    return out


def verify_plan(plan: SteerPlan, setup: Setup):
    """Re-propagate the whole control from psi0 in the original basis."""
    u = plan.control()
    if not u.samples.size:
        fin = setup.psi0.copy()
    else:
        fin = final_state(setup.psi0, u, setup.basis, setup.dipole)
    plan.final_state = fin
    plan.achieved_error = h3_distance(fin, setup.psif)
    return plan.achieved_error


def plan_global(sc: Scenario, setup: Setup | None = None) -> SteerPlan:
    """Steer psi0 to psif (both from the scenario) and verify the result."""
    setup = setup or prepare(sc)
    N = sc.N
    plan = SteerPlan()
    plan.info["scenario"] = sc.name
    plan.info["seed"] = sc.seed
    if h3_distance(setup.psi0, setup.psif) <= 1e-2 * sc.tolerance:
        plan.info["shortcut"] = "initial state already matches the target"
        verify_plan(plan, setup)
        return plan
    plan.info["conditions"] = _condition_summary(setup.frame, setup.frame_dipole, N, sc.R_max)
    rng = np.random.default_rng(sc.seed)
    basis, dip, frame, fdip, Q = setup.basis, setup.dipole, setup.frame, setup.frame_dipole, setup.Q
    shift = sc.u_shift
    ramp = ramp_control(sc.T_ramp, target=shift)

    # forward side: ramp, optional pre-control, Lyapunov
    z = final_state(setup.psi0, ramp, basis, dip) @ Q
    z, pre_f = _enter_E(z, frame, fdip, N, rng)
    lyap_f, z_a, info_f = _lyapunov(z, sc, frame, fdip, "forward")

    # backward side: the state the reversed ramp maps to psif, then conjugate
    Xf = np.conj(final_state(np.conj(setup.psif), ramp, basis, dip)) @ Q
    y = np.conj(Xf)
    y, pre_b = _enter_E(y, frame, fdip, N, rng)
    lyap_b, z_b, info_b = _lyapunov(y, sc, frame, fdip, "backward")
    w = np.conj(z_b)

    ref = build_reference(sc.eta, sc.T_local, basis=frame, B=fdip, N=N)
    segs, _, info_c = connect(z_a, w, ref, sc, frame, fdip)

    plan.append("ramp", ramp, note=f"0 -> {shift}")
    for c in pre_f:
        plan.append("lyapunov", c.shifted(shift), note="random pre-control")
    for s in lyap_f.segments:
        plan.append("lyapunov", s.control.shifted(shift), note=s.note)
    for purpose, c, note in segs:
        plan.append(purpose, c.shifted(shift), note=note)
    back = concatenate(pre_b + [s.control for s in lyap_b.segments])
    if back.samples.size:
        plan.append("reversed", back.reversed().shifted(shift), note="time-reversed backward half")
    plan.append("unramp", ramp.reversed(), note=f"{shift} -> 0")
    if plan.total_T > sc.max_total_T:
        raise BudgetExceeded(f"total time {plan.total_T:.3g} exceeds {sc.max_total_T:.3g}")
    plan.info.update({"u_shift": shift, "eta": sc.eta, "reference_theta": ref.theta,
                      "reference_residuals": ref.residuals, "forward": info_f, "backward": info_b,
                      "connection": info_c, "pre_controls": [len(pre_f), len(pre_b)]})
    verify_plan(plan, setup)
    return plan


def gate_realization(U_target, sc: Scenario) -> SteerPlan:
    """Plan psi0 = (phi_1..phi_n) -> psif = U_target (phi_1..phi_n).

    Per-channel fidelities |<psi^j(T), psif^j>| are stored in
    ``plan.info["fidelities"]``.
    """
    U = np.asarray(U_target, dtype=complex)
    n = U.shape[0]
    if U.shape != (n, n) or n > sc.K:
        raise ScenarioError("gate must be a square matrix of size at most K")
    sc2 = sc.with_states({"eigenstates": list(range(1, n + 1))},
                         {"unitary": [[[float(v.real), float(v.imag)] for v in row] for row in U]}, N=n)
    setup = prepare(sc2)
    plan = plan_global(sc2, setup)
    fin = plan.final_state
    fid = [float(abs(np.vdot(setup.psif[j], fin[j]))) for j in range(n)]
    plan.info["fidelities"] = fid
    return plan
