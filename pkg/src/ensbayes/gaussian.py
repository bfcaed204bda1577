"""Kalman algebra and the class of Gaussian updating maps.

An updating map sends a forecast member x to B x + shift + noise(S).  Every
map constructed here reproduces the assumed Gaussian posterior exactly:
B Q B^T + S = (I - K H) Q and B mu + shift = mu*.  Three constructions are
provided: the conditional-independence map (B = 0), the stochastic-filter
equivalent map, and the optimal square-root map minimising the expected
Mahalanobis displacement of each member.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .distributions import RngStream, mvn_sample
from .linalg import (
    DegenerateCovarianceError,
    robust_svd,
    signed_eigh,
    signed_svd,
    spd_cholesky,
    symmetrize,
)

__all__ = [
    "GaussianParams",
    "LikelihoodSpec",
    "PosteriorGaussian",
    "UpdateMap",
    "MahalanobisSpec",
    "RankDeficiencyError",
    "kalman_gain",
    "posterior_moments",
    "stochastic_update",
    "enkf_equivalent_map",
    "conditional_independence_map",
    "optimal_sqrt_map",
    "trace_objective",
    "theorem1_solve",
    "apply_update_map",
]


class RankDeficiencyError(ValueError):
    """Raised when the standardised trace problem is rank deficient."""


@dataclass
class GaussianParams:
    """Assumed forecast model N(mu, Q)."""

    mu: np.ndarray
    Q: np.ndarray

    def __post_init__(self) -> None:
        self.mu = np.asarray(self.mu, dtype=float)
        self.Q = np.asarray(self.Q, dtype=float)
        if self.mu.shape[0] != self.Q.shape[0]:
            raise ValueError("mu and Q dimensions do not conform")

    @property
    def dim(self) -> int:
        return self.mu.shape[0]


@dataclass
class LikelihoodSpec:
    """Linear-Gaussian observation model y | x ~ N(H x, R)."""

    H: np.ndarray
    R: np.ndarray

    def __post_init__(self) -> None:
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        if self.H.shape[0] != self.R.shape[0]:
            raise ValueError("H and R dimensions do not conform")


@dataclass
class PosteriorGaussian:
    """Assumed posterior N(mu_star, Q_star) with the gain that produced it."""

    mu_star: np.ndarray
    Q_star: np.ndarray
    K: np.ndarray


@dataclass
class UpdateMap:
    """Realised updating distribution: x -> B x + shift + eps, eps ~ N(0, S).

    S is the zero matrix for square-root (deterministic) maps.
    """

    B: np.ndarray
    shift: np.ndarray
    S: np.ndarray

    @property
    def deterministic(self) -> bool:
        return not np.any(self.S)


@dataclass
class MahalanobisSpec:
    """Distance metric (a-b)^T Sigma^-1 (a-b) with a factor A^T A = Sigma^-1."""

    Sigma: np.ndarray
    A: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        self.Sigma = np.asarray(self.Sigma, dtype=float)
        if self.A is None:
            # Upper-triangular Cholesky factor of Sigma^-1; the optimal map is
            # invariant to which factor is chosen.
            inv = np.linalg.inv(self.Sigma)
            self.A = np.linalg.cholesky(symmetrize(inv)).T
        else:
            self.A = np.asarray(self.A, dtype=float)

    @classmethod
    def euclidean(cls, n: int) -> "MahalanobisSpec":
        return cls(Sigma=np.eye(n), A=np.eye(n))


def kalman_gain(params: GaussianParams, lik: LikelihoodSpec) -> np.ndarray:
    """K = Q H^T (H Q H^T + R)^-1, computed by an SPD solve."""
    H, R, Q = lik.H, lik.R, params.Q
    innov_cov = symmetrize(H @ Q @ H.T + R)
    try:
        # Solve innov_cov X = H Q, then K = X^T.
        x = np.linalg.solve(innov_cov, H @ Q)
    except np.linalg.LinAlgError as exc:
        raise DegenerateCovarianceError("innovation covariance is singular") from exc
    return x.T


def posterior_moments(
    params: GaussianParams, lik: LikelihoodSpec, y: np.ndarray
) -> PosteriorGaussian:
    """Assumed posterior mean mu + K(y - H mu) and covariance (I - K H) Q."""
    y = np.asarray(y, dtype=float)
    K = kalman_gain(params, lik)
    mu_star = params.mu + K @ (y - lik.H @ params.mu)
    q_star = symmetrize((np.eye(params.dim) - K @ lik.H) @ params.Q)
    return PosteriorGaussian(mu_star=mu_star, Q_star=q_star, K=K)


def stochastic_update(
    x: np.ndarray,
    y: np.ndarray,
    params: GaussianParams,
    lik: LikelihoodSpec,
    rng: RngStream,
) -> np.ndarray:
    """Perturbed-observation update x + K(y - H x + eps), eps ~ N(0, R)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    K = kalman_gain(params, lik)
    eps = mvn_sample(np.zeros(lik.R.shape[0]), lik.R, rng)
    return x + K @ (y - lik.H @ x + eps)


def _shift(params: GaussianParams, post: PosteriorGaussian, B: np.ndarray) -> np.ndarray:
    # Constant term so that B mu + shift = mu*.
    return post.mu_star - B @ params.mu


def enkf_equivalent_map(
    params: GaussianParams, lik: LikelihoodSpec, y: np.ndarray
) -> UpdateMap:
    """The map with B = I - K H and S = (I - K H) Q (K H)^T, which reproduces
    the perturbed-observation update in distribution (S also equals K R K^T)."""
    post = posterior_moments(params, lik, y)
    kh = post.K @ lik.H
    B = np.eye(params.dim) - kh
    S = symmetrize(B @ params.Q @ kh.T)
    return UpdateMap(B=B, shift=_shift(params, post, B), S=S)


def conditional_independence_map(
    params: GaussianParams, lik: LikelihoodSpec, y: np.ndarray
) -> UpdateMap:
    """B = 0: draw fresh posterior samples, ignoring the incoming member."""
    post = posterior_moments(params, lik, y)
    B = np.zeros((params.dim, params.dim))
    return UpdateMap(B=B, shift=post.mu_star.copy(), S=post.Q_star.copy())


def theorem1_solve(Z: np.ndarray) -> np.ndarray:
    """Maximiser of tr(B~ Z) over B~ with I - B~^T B~ positive semidefinite.

    For full-rank Z = P G F^T the unique maximiser is the orthogonal matrix
    B~ = F P^T, attaining tr(B~ Z) = sum of the singular values.
    """
    Z = np.asarray(Z, dtype=float)
    p, g, ft = signed_svd(Z)
    if g[0] <= 0.0 or g[-1] <= 1e-12 * g[0]:
        raise RankDeficiencyError("Z is rank deficient beyond tolerance")
    return ft.T @ p.T


def trace_objective(B: np.ndarray, metric: MahalanobisSpec, Q: np.ndarray) -> float:
    """tr(A B Q A^T): the term of the expected displacement that depends on B."""
    return float(np.trace(metric.A @ B @ Q @ metric.A.T))


def optimal_sqrt_map(
    params: GaussianParams,
    lik: LikelihoodSpec,
    y: np.ndarray,
    metric: MahalanobisSpec | None = None,
    *,
    eig_floor: float = 1e-12,
) -> UpdateMap:
    """The square-root map minimising the expected Mahalanobis displacement.

    Diagonalises Q = V D V^T and (I - K H) Q = U L U^T, solves the
    standardised trace problem for Z = L^{1/2} U^T A^T A Q V D^{-1/2} and
    maps the orthogonal solution back:  B = U L^{1/2} P F^T D^{-1/2} V^T,
    S = 0.  Eigenvalues are clipped at eig_floor times the largest before
    the inverse square roots, which keeps the map well defined for
    rank-deficient forecast covariances (e.g. empirical estimates from
    fewer members than state dimensions).
    """
    if metric is None:
        metric = MahalanobisSpec.euclidean(params.dim)
    post = posterior_moments(params, lik, y)

    d_raw, v = signed_eigh(params.Q)
    lam_raw, u = signed_eigh(post.Q_star)
    if d_raw[-1] <= 0.0:
        raise DegenerateCovarianceError("forecast covariance has no positive eigenvalue")
    d = np.maximum(d_raw, eig_floor * d_raw[-1])
    lam = np.maximum(lam_raw, eig_floor * max(lam_raw[-1], 0.0))
    if lam[-1] <= 0.0:
        raise DegenerateCovarianceError("posterior covariance has no positive eigenvalue")

    ata = metric.A.T @ metric.A
    z = (np.sqrt(lam)[:, None] * u.T) @ ata @ params.Q @ (v / np.sqrt(d)[None, :])
    p, g, ft = signed_svd(z)
    if g[0] <= 0.0 or not np.isfinite(g[0]):
        raise RankDeficiencyError("standardised trace problem is degenerate")
    b_std = ft.T @ p.T  # orthogonal maximiser of tr(B~ Z)
    B = (u * np.sqrt(lam)[None, :]) @ b_std.T @ (v / np.sqrt(d)[None, :]).T
    S = np.zeros((params.dim, params.dim))
    return UpdateMap(B=B, shift=_shift(params, post, B), S=S)


def _posterior_moments_batch(
    mus: np.ndarray,  # (B, n)
    qs: np.ndarray,  # (B, n, n)
    H: np.ndarray,
    R: np.ndarray,
    y: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stacked Kalman update for a batch of parameter values.

    Returns (gains (B, n, m), posterior means (B, n), posterior covs (B, n, n)).
    """
    hq = H @ qs  # (B, m, n)
    innov = hq @ H.T + R
    gains = np.linalg.solve(innov, hq).transpose(0, 2, 1)
    mu_star = mus + np.einsum("bnm,bm->bn", gains, y[None, :] - mus @ H.T)
    q_star = qs - gains @ hq
    return gains, mu_star, 0.5 * (q_star + q_star.transpose(0, 2, 1))


def _optimal_sqrt_update_batch(
    mus: np.ndarray,  # (B, n)
    qs: np.ndarray,  # (B, n, n)
    H: np.ndarray,
    R: np.ndarray,
    y: np.ndarray,
    members: np.ndarray,  # (B, n)
    *,
    eig_floor: float = 1e-12,
) -> np.ndarray:
    """Apply the optimal square-root map per batch entry, Euclidean metric.

    Same construction as optimal_sqrt_map but with stacked linear algebra;
    the map is invariant to eigenvector sign choices, so no convention is
    needed here.
    """
    _, mu_star, q_star = _posterior_moments_batch(mus, qs, H, R, y)
    d, v = np.linalg.eigh(0.5 * (qs + qs.transpose(0, 2, 1)))
    lam, u = np.linalg.eigh(q_star)
    d = np.maximum(d, eig_floor * d[:, -1:])
    lam = np.maximum(lam, eig_floor * np.maximum(lam[:, -1:], 0.0))
    if np.any(d[:, -1] <= 0.0) or np.any(lam[:, -1] <= 0.0):
        raise DegenerateCovarianceError("covariance has no positive eigenvalue")
    sd = np.sqrt(d)
    sl = np.sqrt(lam)
    z = (sl[:, :, None] * u.transpose(0, 2, 1)) @ qs @ (v / sd[:, None, :])
    try:
        p, _, ft = np.linalg.svd(z)
    except np.linalg.LinAlgError:
        # Divide-and-conquer SVD can fail on ill-conditioned slices; redo
        # those with the QR-based driver.
        p = np.empty_like(z)
        ft = np.empty_like(z)
        for i in range(z.shape[0]):
            p[i], _, ft[i] = robust_svd(z[i])
    b = (u * sl[:, None, :]) @ p @ ft @ (v / sd[:, None, :]).transpose(0, 2, 1)
    return np.einsum("bij,bj->bi", b, members - mus) + mu_star


def _stochastic_update_batch(
    mus: np.ndarray,
    qs: np.ndarray,
    H: np.ndarray,
    R: np.ndarray,
    y: np.ndarray,
    members: np.ndarray,
    rng: RngStream,
) -> np.ndarray:
    """Perturbed-observation update applied per batch entry."""
    gains, _, _ = _posterior_moments_batch(mus, qs, H, R, y)
    chol_r = spd_cholesky(R, "observation covariance")
    eps = rng.generator.standard_normal((members.shape[0], R.shape[0])) @ chol_r.T
    innovations = y[None, :] - members @ H.T + eps
    return members + np.einsum("bnm,bm->bn", gains, innovations)


def apply_update_map(update: UpdateMap, x: np.ndarray, rng: RngStream) -> np.ndarray:
    """B x + shift + eps with eps ~ N(0, S); no draw is made when S = 0."""
    x = np.asarray(x, dtype=float)
    out = update.B @ x + update.shift
    if update.deterministic:
        return out
    chol = getattr(update, "_noise_chol", None)
    if chol is None:
        S = symmetrize(update.S)
        w, _ = np.linalg.eigh(S)
        if w[0] < -1e-10 * max(w[-1], 1.0):
            raise DegenerateCovarianceError(
                "noise covariance S is not positive semidefinite"
            )
        # S may be singular (it is a PSD difference); factor through a jitter.
        jitter = max(w[-1], 1.0) * 1e-14
        chol = spd_cholesky(S + jitter * np.eye(S.shape[0]), "noise covariance")
        update._noise_chol = chol  # cached; S is never mutated after construction
    return out + chol @ rng.generator.standard_normal(x.shape[0])
