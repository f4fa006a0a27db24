"""Numerical checks of the information-theoretic argument behind the losses.

Includes the InfoNCE bound between paired groups, a Gaussian
information-bottleneck estimate from covariance log-determinants, Gaussian
entropy, the eigenvalue Jensen gap, and norm concentration of a latent block.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "InsufficientClassError",
    "SingularCovarianceError",
    "i_nce",
    "ib_estimate",
    "gaussian_entropy",
    "jacobi_eigenvalues",
    "jensen_gap",
    "norm_concentration",
    "thm2_monotonicity",
    "random_psd",
]


class InsufficientClassError(ValueError):
    pass


class SingularCovarianceError(ValueError):
    pass


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    return (m + np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True))).squeeze(axis)


def i_nce(z0, z1) -> float:
    """InfoNCE bound for ``K`` pairs ``(z0[i], z1[i])`` with inner-product critic.

    ``mean_i [ z0_i.z1_i - logsumexp_j z0_i.z1_j ] + log K``.
    """
    z0 = np.atleast_2d(np.asarray(z0, dtype=np.float64))
    z1 = np.atleast_2d(np.asarray(z1, dtype=np.float64))
    if z0.shape != z1.shape:
        raise ValueError(f"paired groups differ in shape: {z0.shape} vs {z1.shape}")
    K = z0.shape[0]
    if K < 1:
        raise ValueError("need at least one pair")
    scores = z0 @ z1.T
    return float(np.mean(np.diag(scores) - _logsumexp(scores, axis=1)) + math.log(K))


def jacobi_eigenvalues(C, tol: float = 1e-12, max_sweeps: int = 100) -> np.ndarray:
    """Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending."""
    A = np.array(C, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("need a square matrix")
    if not np.allclose(A, A.T, atol=1e-12 * max(1.0, np.abs(A).max())):
        raise ValueError("matrix is not symmetric")
    A = 0.5 * (A + A.T)
    n = A.shape[0]
    scale = max(np.linalg.norm(A), 1e-300)
    for _ in range(max_sweeps):
        off = math.sqrt(max(np.sum(A * A) - np.sum(np.diag(A) ** 2), 0.0))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) < 1e-300:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = math.copysign(1.0, theta) / (abs(theta) + math.hypot(theta, 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                rp = A[p, :].copy()
                rq = A[q, :].copy()
                A[p, :] = c * rp - s * rq
                A[q, :] = s * rp + c * rq
                cp = A[:, p].copy()
                cq = A[:, q].copy()
                A[:, p] = c * cp - s * cq
                A[:, q] = s * cp + c * cq
    return np.sort(np.diag(A))


def _logdet(C: np.ndarray) -> float:
    lam = jacobi_eigenvalues(C)
    if lam[0] <= 1e-12 * max(lam[-1], 1e-300):
        raise SingularCovarianceError(f"covariance is singular (smallest eigenvalue {lam[0]:.3e})")
    return float(np.sum(np.log(lam)))


def _cov(Z: np.ndarray) -> np.ndarray:
    Zc = Z - Z.mean(axis=0)
    return Zc.T @ Zc / Z.shape[0]


def ib_estimate(Z, y, lam: float = 1.0, ridge: float = 1e-8) -> float:
    """Class-weighted mean of ``logdet(C_{Z|y} + ridge I)`` minus ``lam * logdet(C_Z + ridge I)``."""
    Z = np.asarray(Z, dtype=np.float64)
    y = np.asarray(y).ravel()
    if lam <= 0:
        raise ValueError("lam must be positive")
    k = Z.shape[1]
    eye = ridge * np.eye(k)
    total = 0.0
    for c in np.unique(y):
        Zc = Z[y == c]
        if Zc.shape[0] < 2:
            raise InsufficientClassError(f"class {c} has fewer than two samples")
        total += Zc.shape[0] / Z.shape[0] * _logdet(_cov(Zc) + eye)
    return total - lam * _logdet(_cov(Z) + eye)


def gaussian_entropy(C, d: int | None = None) -> float:
    """Differential entropy of ``N(mu, C)``: ``d/2 + d log(2 pi)/2 + logdet(C)/2``."""
    C = np.atleast_2d(np.asarray(C, dtype=np.float64))
    d = C.shape[0] if d is None else d
    return d / 2 + d * math.log(2 * math.pi) / 2 + _logdet(C) / 2


def jensen_gap(C) -> tuple[float, float, float]:
    """``(sum log lambda_i, d log mean lambda_i, gap)`` with ``gap >= 0``."""
    lam = jacobi_eigenvalues(C)
    if lam[0] <= 0:
        raise SingularCovarianceError("jensen_gap needs strictly positive eigenvalues")
    lhs = float(np.sum(np.log(lam)))
    rhs = float(lam.size * math.log(np.mean(lam)))
    return lhs, rhs, rhs - lhs


def norm_concentration(Z, c: float = 1.0) -> tuple[float, float, float]:
    """Mean squared row norm against ``R = width * c``; returns ``(mean, R, |mean - R| / R)``."""
    Z = np.asarray(Z, dtype=np.float64)
    R = Z.shape[1] * c
    m = float(np.mean(np.sum(Z * Z, axis=1)))
    return m, R, abs(m - R) / R


def thm2_monotonicity(radius: float = 1.0, angles_deg=None, K: int = 32) -> list[tuple[float, float, float]]:
    """InfoNCE for pairs at a controlled within-pair angle, cross pairs orthogonal.

    Pair ``i`` is ``(r a_i, r (cos t a_i + sin t b_i))`` with ``{a_i, b_i}``
    orthonormal in ``R^{2K}``. Returns ``(angle_deg, pair_distance, i_nce)`` rows.
    """
    if angles_deg is None:
        angles_deg = np.linspace(0.0, 90.0, 10)
    eye = np.eye(2 * K)
    a, b = eye[:K], eye[K:]
    rows = []
    for deg in angles_deg:
        t = math.radians(float(deg))
        z0 = radius * a
        z1 = radius * (math.cos(t) * a + math.sin(t) * b)
        dist = float(np.linalg.norm(z0[0] - z1[0]))
        rows.append((float(deg), dist, i_nce(z0, z1)))
    return rows


def random_psd(d: int, rng: np.random.Generator, min_eig: float = 1e-3) -> np.ndarray:
    """Random symmetric positive-definite matrix with eigenvalues in ``[min_eig, 10]``."""
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    lam = rng.uniform(min_eig, 10.0, d)
    C = (q * lam) @ q.T
    return 0.5 * (C + C.T)
