"""Spectrum of -d2/dx2 + V on (0, 1) and the coupling checks.

Run: python3 demos/01_spectrum_and_conditions.py
"""
# %%
import numpy as np

from simulcontrol.conditions import check_all
from simulcontrol.spectral import Potential, asymptotic_remainders, build_basis, dipole_matrix, make_grid

grid = make_grid(1024)
mu = Potential("polynomial", (0.0, 0.0, 1.0))

# %% Free well: the Galerkin spectrum is k^2 pi^2 up to round-off.
free = build_basis(Potential(), 16, grid)
k = np.arange(1, 17)
print("V = 0, lambda_k / (k pi)^2 - 1:", np.abs(free.lam / (k * np.pi) ** 2 - 1).max())

# %% A linear potential shifts every level by about its mean, and the remainder
# r_k = lambda_k - k^2 pi^2 - <V> decays.
lin = build_basis(Potential("polynomial", (0.0, 1.0)), 16, grid)
r, _ = asymptotic_remainders(lin)
print("V = x, first remainders:", np.round(r[:5], 6))

# %% The free spectrum has exact gap coincidences (lambda_7 - lambda_1 = lambda_8 - lambda_4),
# the linear one does not.
for name, b in (("V = 0", free), ("V = x", lin)):
    reps = check_all(b, dipole_matrix(mu, b), N=2)
    status = {cid: rep.holds_at_truncation for cid, rep in reps.items()}
    print(name, status)
    for cid, rep in reps.items():
        if rep.witnesses:
            print("   ", cid, "first witness", rep.witnesses[0])

# %% The dipole x has parity zeros, x^2 does not.
Bx = dipole_matrix(Potential("polynomial", (0.0, 1.0)), free).B
Bx2 = dipole_matrix(mu, free).B
print("|<x phi_1, phi_3>| =", abs(Bx[0, 2]), "  |<x^2 phi_1, phi_3>| =", abs(Bx2[0, 2]))
print("k^3 |<x^2 phi_1, phi_k>| for k = 8..16:", np.round(k[7:] ** 3 * np.abs(Bx2[0, 7:]), 4))
