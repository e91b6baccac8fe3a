"""Return method for two particles in V = x.

Around the free eigenstates the linearized system cannot move the diagonal
overlaps independently. A small reference control u_ref (size eta) breaks
that, after which both the linearized and the nonlinear problems are
solved exactly near the reference.

Run: python3 demos/03_local_exact_steering.py
"""
# %%
import numpy as np
from scipy.linalg import expm

from simulcontrol.local_control import (build_reference, linearized_control, local_steer, nc_obstruction,
                                        random_tangent)
from simulcontrol.propagator import final_state, gram
from simulcontrol.spectral import Potential, build_basis, dipole_matrix, h3_distance, make_grid

b = build_basis(Potential("polynomial", (0.0, 1.0)), 16, make_grid(1024))
B = dipole_matrix(Potential("polynomial", (0.0, 0.0, 1.0)), b)
rng = np.random.default_rng(0)

# %% References for a few eta. ||u_ref|| grows linearly in eta.
for eta in (0.0, 5e-4, 1e-3, 2e-3):
    ref = build_reference(eta, 4.0, basis=b, B=B, N=2)
    print(f"eta = {eta:.0e}: |u_ref| = {ref.residuals['u_l2']:.4e}, "
          f"projection residual {ref.residuals['projection']:.1e}, obstruction {nc_obstruction(ref, b, B):.2e}")

# %% Linearized inverse at eta = 1e-3, checked by propagating the tangent system.
ref = build_reference(1e-3, 4.0, basis=b, B=B, N=2)
v = linearized_control(np.zeros((2, 16)), random_tangent(ref, 1e-3, rng), ref, b, B)
print("linearized closed loop error:", v.verification_error)


# %% Nonlinear steering between perturbed eigenstates and perturbed final anchors.
def perturb(c, size):
    H = rng.normal(size=(5, 5)) + 1j * rng.normal(size=(5, 5))
    A = np.zeros((16, 16), dtype=complex)
    A[:5, :5] = H + H.conj().T
    s = size
    for _ in range(20):
        s *= size / h3_distance(c @ expm(1j * s * A).T, c)
    return c @ expm(1j * s * A).T


psi0 = perturb(np.eye(16)[:2].astype(complex), 1e-3)
psif = perturb(ref.anchor_final, 1e-3)
res = local_steer(psi0, psif, ref, b, B, tol=1e-8)
for h in res.history:
    print(f"  newton {h['iter']}: error {h['error_H3']:.3e} ({h['jacobian']})")
fin = final_state(psi0, res.control, b, B)
print("final error", h3_distance(fin, psif), " Gram - I:", np.abs(gram(fin) - np.eye(2)).max())
