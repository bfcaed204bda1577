"""Normal-Inverse-Wishart prior layer and the three ways of producing
Gaussian model parameters from a forecast ensemble:

* a Gibbs sampler targeting the parameter posterior given the observation
  and all members except the one being updated (the proposed scheme),
* a direct draw from the posterior given all members and no observation,
* the plain empirical estimate.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .distributions import RngStream, inv_wishart_sample, mvn_sample
from .gaussian import (
    GaussianParams,
    LikelihoodSpec,
    _posterior_moments_batch,
    posterior_moments,
)
from .linalg import symmetrize

__all__ = [
    "NIWHyper",
    "Ensemble",
    "niw_posterior",
    "gibbs_theta_excluding",
    "sample_theta_all_members",
    "empirical_estimate",
]


@dataclass
class NIWHyper:
    """Normal-Inverse-Wishart hyperparameters: Q ~ W^-1(V, nu), mu | Q ~ N(mu0, Q/kappa)."""

    mu0: np.ndarray
    kappa: float
    nu: float
    V: np.ndarray

    def __post_init__(self) -> None:
        self.mu0 = np.asarray(self.mu0, dtype=float)
        self.V = np.asarray(self.V, dtype=float)
        n = self.mu0.shape[0]
        if self.V.shape != (n, n):
            raise ValueError("mu0 and V dimensions do not conform")
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")
        if not self.nu > n - 1:
            raise ValueError("nu must exceed dim - 1")

    @classmethod
    def vague(cls, n: int, kappa: float = 10.0) -> "NIWHyper":
        """Vague but proper prior with E[Q] = I a priori: nu = n + 1.1, V = (nu-n-1) I."""
        nu = n + 1.1
        return cls(mu0=np.zeros(n), kappa=kappa, nu=nu, V=(nu - n - 1.0) * np.eye(n))


@dataclass
class Ensemble:
    """Ordered forecast ensemble, one member per row."""

    members: np.ndarray
    time_index: int = 0

    def __post_init__(self) -> None:
        self.members = np.atleast_2d(np.asarray(self.members, dtype=float))
        if self.members.shape[0] < 2:
            raise ValueError("an ensemble needs at least two members")

    @property
    def size(self) -> int:
        return self.members.shape[0]

    @property
    def dim(self) -> int:
        return self.members.shape[1]

    def excluding(self, i: int) -> np.ndarray:
        return np.delete(self.members, i, axis=0)


def niw_posterior(hyper: NIWHyper, samples: Sequence[np.ndarray] | np.ndarray) -> NIWHyper:
    """Conjugate update of the NIW hyperparameters given iid Gaussian samples.

    With M samples, mean x_bar and centred scatter C:
    nu~ = nu + M, kappa~ = kappa + M, mu0~ = (kappa mu0 + M x_bar)/(kappa + M),
    V~ = V + C + kappa M/(kappa + M) (x_bar - mu0)(x_bar - mu0)^T.
    """
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    if x.shape[0] == 0:
        raise ValueError("samples must be non-empty")
    if x.shape[1] != hyper.mu0.shape[0]:
        raise ValueError("sample dimension does not match hyperparameters")
    m = x.shape[0]
    xbar = x.mean(axis=0)
    centred = x - xbar
    scatter = centred.T @ centred
    dev = xbar - hyper.mu0
    kappa_new = hyper.kappa + m
    v_new = hyper.V + scatter + (hyper.kappa * m / kappa_new) * np.outer(dev, dev)
    mu0_new = (hyper.kappa * hyper.mu0 + m * xbar) / kappa_new
    return NIWHyper(mu0=mu0_new, kappa=kappa_new, nu=hyper.nu + m, V=symmetrize(v_new))


def _sample_params(hyper: NIWHyper, rng: RngStream) -> GaussianParams:
    # Q first, then mu | Q, following the posterior factorisation.
    q = inv_wishart_sample(hyper.V, hyper.nu, rng)
    mu = mvn_sample(hyper.mu0, q / hyper.kappa, rng)
    return GaussianParams(mu=mu, Q=q)


def gibbs_theta_excluding(
    hyper: NIWHyper,
    ensemble: Ensemble,
    exclude_index: int,
    lik: LikelihoodSpec,
    y: np.ndarray,
    n_iter: int,
    rng: RngStream,
) -> GaussianParams:
    """Draw (mu, Q) from its posterior given y and all members except one.

    Two-block Gibbs sampler: the latent state is drawn from the assumed
    Gaussian posterior under the current parameters, then the parameters
    from the NIW posterior given that state and the conditioning members.
    The chain starts from a parameter draw conditioned on the members alone
    and the state after the final iteration is discarded.
    """
    if n_iter < 1:
        raise ValueError("n_iter must be at least 1")
    y = np.asarray(y, dtype=float)
    others = ensemble.excluding(exclude_index)
    m_cond = others.shape[0]  # conditioning members; Gibbs state adds one more
    n = ensemble.dim

    # Fixed-sample statistics reused every iteration.
    sum_others = others.sum(axis=0)
    scatter_others = others.T @ others
    m_total = m_cond + 1
    kappa_new = hyper.kappa + m_total
    nu_new = hyper.nu + m_total

    params = _sample_params(niw_posterior(hyper, others), rng)
    for _ in range(n_iter):
        post = posterior_moments(params, lik, y)
        x = mvn_sample(post.mu_star, post.Q_star, rng)
        xbar = (sum_others + x) / m_total
        scatter = (scatter_others + np.outer(x, x)) - m_total * np.outer(xbar, xbar)
        dev = xbar - hyper.mu0
        v_new = hyper.V + scatter + (hyper.kappa * m_total / kappa_new) * np.outer(dev, dev)
        mu0_new = (hyper.kappa * hyper.mu0 + m_total * xbar) / kappa_new
        q = inv_wishart_sample(symmetrize(v_new), nu_new, rng)
        mu = mvn_sample(mu0_new, q / kappa_new, rng)
        params = GaussianParams(mu=mu, Q=q)
    return params


def _niw_draw_batch(
    mu0s: np.ndarray,  # (B, n)
    kappa: float,
    nu: float,
    vs: np.ndarray,  # (B, n, n)
    rng: RngStream,
) -> tuple[np.ndarray, np.ndarray]:
    """Stacked NIW draws: Q_b ~ W^-1(V_b, nu), mu_b | Q_b ~ N(mu0_b, Q_b/kappa).

    Same Bartlett construction as inv_wishart_sample, vectorised over the
    batch dimension.
    """
    gen = rng.generator
    b, n = mu0s.shape
    chol_v = np.linalg.cholesky(vs)
    a = np.zeros((b, n, n))
    tril = np.tril_indices(n, k=-1)
    a[:, tril[0], tril[1]] = gen.standard_normal((b, len(tril[0])))
    df = nu - np.arange(n)
    diag = np.sqrt(2.0 * gen.standard_gamma(df / 2.0, size=(b, n)))
    a[:, np.arange(n), np.arange(n)] = diag
    f = np.linalg.solve(chol_v.transpose(0, 2, 1), a)
    x = f @ f.transpose(0, 2, 1)
    qs = np.linalg.inv(x)
    qs = 0.5 * (qs + qs.transpose(0, 2, 1))
    z = gen.standard_normal((b, n))
    mus = mu0s + np.einsum("bij,bj->bi", np.linalg.cholesky(qs / kappa), z)
    return mus, qs


def _outer_batch(x: np.ndarray) -> np.ndarray:
    return x[:, :, None] * x[:, None, :]


def _gibbs_theta_excluding_all(
    hyper: NIWHyper,
    ensemble: Ensemble,
    lik: LikelihoodSpec,
    y: np.ndarray,
    n_iter: int,
    rng: RngStream,
) -> tuple[np.ndarray, np.ndarray]:
    """Run gibbs_theta_excluding for every member in lockstep.

    Identical chain structure to the scalar sampler, with member i's chain
    conditioning on all members except i; returns stacked (mus (M, n),
    Qs (M, n, n)).  One stream drives the whole batch.
    """
    if n_iter < 1:
        raise ValueError("n_iter must be at least 1")
    y = np.asarray(y, dtype=float)
    x_all = ensemble.members
    m, n = x_all.shape
    sum_o = x_all.sum(axis=0)[None, :] - x_all  # (M, n): totals excluding self
    scatter_o = (x_all.T @ x_all)[None] - _outer_batch(x_all)

    def _posterior_hyper(x_sum, x_scatter, count):
        kap = hyper.kappa + count
        xbar = x_sum / count
        centred = x_scatter - count * _outer_batch(xbar)
        dev = xbar - hyper.mu0[None, :]
        v = hyper.V[None] + centred + (hyper.kappa * count / kap) * _outer_batch(dev)
        mu0 = (hyper.kappa * hyper.mu0[None, :] + count * xbar) / kap
        return mu0, kap, hyper.nu + count, 0.5 * (v + v.transpose(0, 2, 1))

    mus, qs = _niw_draw_batch(*_posterior_hyper(sum_o, scatter_o, m - 1), rng)
    gen = rng.generator
    for _ in range(n_iter):
        _, mu_star, q_star = _posterior_moments_batch(mus, qs, lik.H, lik.R, y)
        z = gen.standard_normal((m, n))
        x = mu_star + np.einsum("bij,bj->bi", np.linalg.cholesky(q_star), z)
        mus, qs = _niw_draw_batch(
            *_posterior_hyper(sum_o + x, scatter_o + _outer_batch(x), m), rng
        )
    return mus, qs


def _sample_theta_all_batch(
    hyper: NIWHyper, ensemble: Ensemble, count: int, rng: RngStream
) -> tuple[np.ndarray, np.ndarray]:
    """`count` iid draws from the NIW posterior given every member, stacked."""
    post = niw_posterior(hyper, ensemble.members)
    mu0s = np.tile(post.mu0, (count, 1))
    vs = np.tile(post.V, (count, 1, 1))
    return _niw_draw_batch(mu0s, post.kappa, post.nu, vs, rng)


def sample_theta_all_members(
    hyper: NIWHyper, ensemble: Ensemble, rng: RngStream
) -> GaussianParams:
    """Direct draw from the NIW posterior given every member (no observation)."""
    return _sample_params(niw_posterior(hyper, ensemble.members), rng)


def empirical_estimate(ensemble: Ensemble) -> GaussianParams:
    """Sample mean and unbiased sample covariance of the ensemble."""
    mu = ensemble.members.mean(axis=0)
    centred = ensemble.members - mu
    q = symmetrize(centred.T @ centred / (ensemble.size - 1))
    return GaussianParams(mu=mu, Q=q)
