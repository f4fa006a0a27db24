"""
Numerical checks on the theory
==============================

Log-determinants sit below d log of the mean eigenvalue, InfoNCE never
exceeds log K, and squared norms of standard normal vectors concentrate
around their width.
"""

import math

import numpy as np

from fairlatent.diagnostics import i_nce, jacobi_eigenvalues, jensen_gap, norm_concentration, random_psd

rng = np.random.default_rng(0)

# the gap vanishes only when every eigenvalue is equal
C = random_psd(6, rng)
lhs, rhs, gap = jensen_gap(C)
print(f"log det = {lhs:.3f}  d log mean eig = {rhs:.3f}  gap = {gap:.3f}")
print("isotropic gap:", jensen_gap(2.5 * np.eye(6))[2])

# our Jacobi solver against LAPACK
print("eig error:", np.abs(np.sort(jacobi_eigenvalues(C)) - np.linalg.eigvalsh(C)).max())

# paired views: InfoNCE can never exceed log of the batch size
K = 64
z0 = rng.standard_normal((K, 4))
for noise in (0.1, 0.5, 1.0):
    z1 = z0 + noise * rng.standard_normal((K, 4))
    print(f"noise {noise}: I_NCE = {i_nce(z0, z1):.3f}  (log K = {math.log(K):.3f})")

# mean ||z||^2 approaches the width for standard normal rows
for width in (4, 16, 64):
    m, R, rel = norm_concentration(rng.standard_normal((5000, width)))
    print(f"width {width}: mean {m:.2f} vs {R:.0f}  rel {rel:.3f}")
