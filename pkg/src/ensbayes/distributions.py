"""Seeded random sampling and the special functions used across the package.

Every sampler takes an explicit RngStream; two calls with equal
(seed, stream_id) reproduce bit-identical draws.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.linalg import solve_triangular

from .linalg import DegenerateCovarianceError, spd_cholesky, symmetrize

__all__ = [
    "RngStream",
    "mvn_sample",
    "inv_wishart_sample",
    "dirichlet_sample",
    "student_t_cdf",
    "student_t_quantile",
]


@dataclass
class RngStream:
    """A named, reproducible random stream.

    Identical (seed, stream_id) pairs reproduce identical draw sequences;
    distinct stream_ids give statistically independent streams.  Each
    concurrent task should own its own stream.
    """

    seed: int
    stream_id: int = 0
    _gen: np.random.Generator | None = field(default=None, repr=False, compare=False)

    @property
    def generator(self) -> np.random.Generator:
        if self._gen is None:
            self._gen = np.random.default_rng(
                np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id,))
            )
        return self._gen

    def substream(self, *ids: int) -> "RngStream":
        """Derive an independent child stream keyed by an index path."""
        child = RngStream(self.seed, self.stream_id)
        child._gen = np.random.default_rng(
            np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id, *ids))
        )
        return child


def mvn_sample(mean: np.ndarray, cov: np.ndarray, rng: RngStream) -> np.ndarray:
    """Draw from N(mean, cov) as mean + L z with L the lower Cholesky factor."""
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    if mean.shape[0] != cov.shape[0]:
        raise ValueError(f"mean dim {mean.shape[0]} != cov dim {cov.shape[0]}")
    chol = spd_cholesky(cov)
    z = rng.generator.standard_normal(mean.shape[0])
    return mean + chol @ z


def inv_wishart_sample(V: np.ndarray, nu: float, rng: RngStream) -> np.ndarray:
    """Draw from the inverse Wishart W^-1(V, nu).

    Samples W(V^-1, nu) through the Bartlett decomposition and inverts.
    Non-integer nu is supported through gamma variates on the diagonal.
    For nu > dim + 1 the mean is V / (nu - dim - 1).
    """
    V = np.asarray(V, dtype=float)
    n = V.shape[0]
    if not nu > n - 1:
        raise ValueError(f"degrees of freedom nu={nu} must exceed dim-1={n - 1}")
    gen = rng.generator
    chol_v = spd_cholesky(V, "scale matrix V")
    # Bartlett: A A^T ~ W(I, nu); chi^2_{nu-i} = 2 Gamma((nu-i)/2) handles real nu.
    a = np.zeros((n, n))
    tril = np.tril_indices(n, k=-1)
    a[tril] = gen.standard_normal(len(tril[0]))
    df = nu - np.arange(n)
    a[np.diag_indices(n)] = np.sqrt(2.0 * gen.standard_gamma(df / 2.0))
    # With C = chol(V), F = C^-T satisfies F F^T = V^-1, so F A A^T F^T ~ W(V^-1, nu).
    f = solve_triangular(chol_v.T, a, lower=False)
    x = f @ f.T
    try:
        sample = np.linalg.inv(x)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - A diag > 0 a.s.
        raise DegenerateCovarianceError("singular Wishart draw") from exc
    return symmetrize(sample)


def dirichlet_sample(alpha: np.ndarray, rng: RngStream) -> np.ndarray:
    """Draw a probability vector from Dirichlet(alpha)."""
    alpha = np.asarray(alpha, dtype=float)
    if np.any(alpha <= 0.0):
        raise ValueError("all Dirichlet concentrations must be > 0")
    return rng.generator.dirichlet(alpha)


def student_t_cdf(x: float | np.ndarray, nu: float) -> float | np.ndarray:
    """CDF of the standard t-distribution with nu > 0 degrees of freedom."""
    if not nu > 0:
        raise ValueError(f"degrees of freedom must be positive, got {nu}")
    return stats.t.cdf(x, df=nu)


def student_t_quantile(p: float | np.ndarray, nu: float) -> float | np.ndarray:
    """Quantile function of the standard t-distribution; p must lie in (0, 1)."""
    if not nu > 0:
        raise ValueError(f"degrees of freedom must be positive, got {nu}")
    p_arr = np.asarray(p, dtype=float)
    if np.any(p_arr <= 0.0) or np.any(p_arr >= 1.0):
        raise ValueError("probability must lie strictly inside (0, 1)")
    return stats.t.ppf(p, df=nu)
