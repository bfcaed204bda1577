"""Small helpers for symmetric positive definite matrices."""
from __future__ import annotations

import numpy as np


class DegenerateCovarianceError(ValueError):
    """Raised when a matrix required to be SPD fails factorisation."""


def symmetrize(a: np.ndarray) -> np.ndarray:
    """Return (A + A^T)/2, suppressing floating-point asymmetry."""
    return 0.5 * (a + a.T)


def is_symmetric(a: np.ndarray, rtol: float = 1e-12) -> bool:
    scale = max(np.abs(a).max(), 1.0)
    return bool(np.abs(a - a.T).max() <= rtol * scale)


def assert_spd(a: np.ndarray, name: str = "matrix") -> None:
    """Check symmetry and positive definiteness via Cholesky."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DegenerateCovarianceError(f"{name} must be square, got shape {a.shape}")
    if not is_symmetric(a):
        raise DegenerateCovarianceError(f"{name} is not symmetric")
    try:
        np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise DegenerateCovarianceError(f"{name} is not positive definite") from exc


def spd_cholesky(a: np.ndarray, name: str = "covariance") -> np.ndarray:
    """Lower Cholesky factor, raising DegenerateCovarianceError on failure."""
    try:
        return np.linalg.cholesky(np.asarray(a, dtype=float))
    except np.linalg.LinAlgError as exc:
        raise DegenerateCovarianceError(f"{name} is not positive definite") from exc


def signed_eigh(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix with a deterministic sign
    convention: the largest-magnitude entry of each eigenvector is positive.
    Returns (eigenvalues ascending, eigenvector matrix with vectors in columns)."""
    w, v = np.linalg.eigh(symmetrize(a))
    idx = np.abs(v).argmax(axis=0)
    signs = np.sign(v[idx, np.arange(v.shape[1])])
    signs[signs == 0] = 1.0
    return w, v * signs


def robust_svd(a: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """SVD that falls back to the slower QR-based LAPACK driver when the
    default divide-and-conquer driver fails to converge (which happens for
    matrices with a very large dynamic range)."""
    if not np.all(np.isfinite(a)):
        raise DegenerateCovarianceError("matrix contains non-finite entries")
    try:
        return np.linalg.svd(a)
    except np.linalg.LinAlgError:
        from scipy.linalg import svd as _scipy_svd

        return _scipy_svd(a, lapack_driver="gesvd")


def signed_svd(a: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """SVD A = P diag(g) F^T with the sign of each left singular vector fixed
    so the largest-magnitude entry is positive (sign flips pushed into F)."""
    p, g, ft = robust_svd(a)
    idx = np.abs(p).argmax(axis=0)
    signs = np.sign(p[idx, np.arange(p.shape[1])])
    signs[signs == 0] = 1.0
    return p * signs, g, ft * signs[:, None]
