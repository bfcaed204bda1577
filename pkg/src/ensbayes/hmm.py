"""Assumed first-order Markov chain model for categorical state vectors:
forward-backward posterior computation, ancestral sampling, and the
conjugate Dirichlet layer for the initial and per-site transition rows.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .distributions import RngStream

__all__ = [
    "MarkovChainParams",
    "DirichletHyper",
    "ChainPosterior",
    "SiteLikelihood",
    "ZeroLikelihoodError",
    "forward_backward",
    "chain_sample",
    "dirichlet_posterior",
    "gibbs_theta_hmm",
    "estimate_theta_hmm",
]


class ZeroLikelihoodError(ValueError):
    """Raised when the data has zero probability under the assumed chain."""


@dataclass
class MarkovChainParams:
    """Heterogeneous first-order chain: initial row and one K x K transition
    matrix per site j = 2..n (no parameter tying across sites)."""

    initial: np.ndarray  # (K,)
    transitions: np.ndarray  # (n-1, K, K), [j-2, previous state, next state]

    def __post_init__(self) -> None:
        self.initial = np.asarray(self.initial, dtype=float)
        self.transitions = np.asarray(self.transitions, dtype=float)
        k = self.initial.shape[0]
        if self.transitions.ndim != 3 or self.transitions.shape[1:] != (k, k):
            raise ValueError("transitions must have shape (n-1, K, K)")

    @property
    def K(self) -> int:
        return self.initial.shape[0]

    @property
    def n(self) -> int:
        return self.transitions.shape[0] + 1

    def validate_rows(self, atol: float = 1e-12) -> None:
        if abs(self.initial.sum() - 1.0) > atol:
            raise ValueError("initial probabilities do not sum to 1")
        if np.abs(self.transitions.sum(axis=2) - 1.0).max() > atol:
            raise ValueError("a transition row does not sum to 1")

    def site_marginals(self) -> np.ndarray:
        """Marginal distribution of each site under the chain, shape (n, K)."""
        out = np.empty((self.n, self.K))
        out[0] = self.initial
        for j in range(1, self.n):
            out[j] = out[j - 1] @ self.transitions[j - 1]
        return out


@dataclass
class DirichletHyper:
    """Independent Dirichlet priors for the initial row and each (site,
    previous-state) transition row."""

    alpha1: np.ndarray  # (K,)
    alpha_trans: np.ndarray  # (n-1, K, K)

    def __post_init__(self) -> None:
        self.alpha1 = np.asarray(self.alpha1, dtype=float)
        self.alpha_trans = np.asarray(self.alpha_trans, dtype=float)
        if np.any(self.alpha1 <= 0) or np.any(self.alpha_trans <= 0):
            raise ValueError("all Dirichlet parameters must be > 0")

    @classmethod
    def flat(cls, n: int, K: int = 2, alpha: float = 2.0) -> "DirichletHyper":
        return cls(alpha1=np.full(K, alpha), alpha_trans=np.full((n - 1, K, K), alpha))


@dataclass
class ChainPosterior:
    """Posterior chain given data: initial row, per-site transition rows,
    site marginals and adjacent pair marginals."""

    initial: np.ndarray  # (K,)
    transitions: np.ndarray  # (n-1, K, K)
    marginals: np.ndarray  # (n, K)
    pair_marginals: np.ndarray  # (n-1, K, K), [j-1, x_j, x_{j+1}]


@dataclass
class SiteLikelihood:
    """Per-site observation densities f(y_j | x_j = k), strictly positive."""

    dens: np.ndarray  # (n, K)

    def __post_init__(self) -> None:
        self.dens = np.asarray(self.dens, dtype=float)
        if np.any(self.dens <= 0.0):
            raise ValueError("site likelihood densities must be > 0")

    @classmethod
    def gaussian(cls, y: np.ndarray, sigma2: float, K: int = 2) -> "SiteLikelihood":
        """Densities N(y_j; k, sigma2), k = 0..K-1, evaluated in log space
        with per-site max subtraction so outliers cannot underflow to zero."""
        y = np.asarray(y, dtype=float)
        levels = np.arange(K)
        log_dens = -0.5 * (y[:, None] - levels[None, :]) ** 2 / sigma2
        log_dens -= log_dens.max(axis=1, keepdims=True)
        return cls(dens=np.exp(log_dens))

    @classmethod
    def flat(cls, n: int, K: int = 2) -> "SiteLikelihood":
        return cls(dens=np.ones((n, K)))


def _forward_backward_batch(
    initial: np.ndarray,  # (B, K)
    transitions: np.ndarray,  # (B, n-1, K, K)
    dens: np.ndarray,  # (n, K), shared across the batch
) -> tuple[np.ndarray, np.ndarray]:
    """Posterior chain for a batch of parameter vectors under shared data.

    Returns (posterior initial (B, K), posterior transitions (B, n-1, K, K)).
    Backward messages are normalised per site to avoid underflow.
    """
    n = dens.shape[0]
    nb = initial.shape[0]
    k = initial.shape[1]
    beta = np.ones((nb, k))
    post_trans = np.empty_like(transitions)
    for j in range(n - 1, 0, -1):
        # weight(b, prev, next) = T(prev, next) * dens[j, next] * beta(next)
        weight = transitions[:, j - 1] * (dens[j][None, None, :] * beta[:, None, :])
        row_sums = weight.sum(axis=2)
        if np.any(row_sums <= 0.0):
            raise ZeroLikelihoodError("data has zero likelihood under the chain")
        post_trans[:, j - 1] = weight / row_sums[:, :, None]
        beta = row_sums
        beta = beta / beta.max(axis=1, keepdims=True)
    g1 = initial * dens[0][None, :] * beta
    totals = g1.sum(axis=1)
    if np.any(totals <= 0.0):
        raise ZeroLikelihoodError("data has zero likelihood under the chain")
    return g1 / totals[:, None], post_trans


def forward_backward(theta: MarkovChainParams, lik: SiteLikelihood) -> ChainPosterior:
    """Exact posterior chain f(x | theta, y) with marginals and pair marginals."""
    if lik.dens.shape != (theta.n, theta.K):
        raise ValueError("likelihood table does not conform to the chain")
    init_b, trans_b = _forward_backward_batch(
        theta.initial[None], theta.transitions[None], lik.dens
    )
    initial = init_b[0]
    transitions = trans_b[0]
    marginals = np.empty((theta.n, theta.K))
    marginals[0] = initial
    pair = np.empty_like(transitions)
    for j in range(1, theta.n):
        pair[j - 1] = marginals[j - 1][:, None] * transitions[j - 1]
        marginals[j] = pair[j - 1].sum(axis=0)
    return ChainPosterior(
        initial=initial, transitions=transitions, marginals=marginals, pair_marginals=pair
    )


def _chain_sample_batch(
    initial: np.ndarray,  # (B, K)
    transitions: np.ndarray,  # (B, n-1, K, K)
    uniforms: np.ndarray,  # (B, n)
) -> np.ndarray:
    """Ancestral sampling by inverse CDF against pre-drawn uniforms."""
    nb, k = initial.shape
    n = transitions.shape[1] + 1
    out = np.empty((nb, n), dtype=np.int64)
    cdf = initial.cumsum(axis=1)
    out[:, 0] = (uniforms[:, 0][:, None] >= cdf[:, : k - 1]).sum(axis=1)
    rows_idx = np.arange(nb)
    for j in range(1, n):
        rows = transitions[rows_idx, j - 1, out[:, j - 1]]
        cdf = rows.cumsum(axis=1)
        out[:, j] = (uniforms[:, j][:, None] >= cdf[:, : k - 1]).sum(axis=1)
    return out


def chain_sample(
    initial: np.ndarray, transitions: np.ndarray, rng: RngStream
) -> np.ndarray:
    """Draw one path from the chain with the given initial and transition rows."""
    initial = np.asarray(initial, dtype=float)
    transitions = np.asarray(transitions, dtype=float)
    n = transitions.shape[0] + 1
    u = rng.generator.random((1, n))
    return _chain_sample_batch(initial[None], transitions[None], u)[0]


def _transition_counts(states: np.ndarray, K: int) -> tuple[np.ndarray, np.ndarray]:
    """(initial counts (K,), transition counts (n-1, K, K)) over state vectors."""
    states = np.atleast_2d(np.asarray(states, dtype=np.int64))
    if states.size and (states.min() < 0 or states.max() >= K):
        raise ValueError("state value outside 0..K-1")
    n = states.shape[1]
    init_counts = np.bincount(states[:, 0], minlength=K).astype(float)
    # Encode each (previous, next) pair per site as one index into K*K cells.
    pair_codes = states[:, :-1] * K + states[:, 1:]
    offsets = np.arange(n - 1) * K * K
    flat = (pair_codes + offsets[None, :]).ravel()
    trans_counts = np.bincount(flat, minlength=(n - 1) * K * K).astype(float)
    return init_counts, trans_counts.reshape(n - 1, K, K)


def dirichlet_posterior(
    hyper: DirichletHyper, conditioning_states: np.ndarray
) -> DirichletHyper:
    """Add initial-state and transition counts to the Dirichlet parameters.

    conditioning_states is a (possibly empty) collection of state vectors of
    length n with values in 0..K-1.  Blocks stay independent a posteriori.
    """
    states = np.asarray(conditioning_states, dtype=np.int64)
    if states.size == 0:
        return DirichletHyper(
            alpha1=hyper.alpha1.copy(), alpha_trans=hyper.alpha_trans.copy()
        )
    k = hyper.alpha1.shape[0]
    init_counts, trans_counts = _transition_counts(states, k)
    return DirichletHyper(
        alpha1=hyper.alpha1 + init_counts, alpha_trans=hyper.alpha_trans + trans_counts
    )


def _member_counts(states: np.ndarray, K: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-row one-hot counts: initial (B, K) and transitions (B, n-1, K, K)."""
    b, n = states.shape
    init = np.eye(K)[states[:, 0]]
    codes = states[:, :-1] * K + states[:, 1:]
    trans = np.eye(K * K)[codes].reshape(b, n - 1, K, K)
    return init, trans


def _gibbs_theta_batch(
    alpha1: np.ndarray,  # (B, K): fixed Dirichlet parameters per batch entry
    alpha_trans: np.ndarray,  # (B, n-1, K, K)
    dens: np.ndarray,  # (n, K): shared site likelihood table
    n_iter: int,
    rng: RngStream,
) -> tuple[np.ndarray, np.ndarray]:
    """Run B independent two-block Gibbs chains in lockstep.

    Each batch entry alternates a latent path from its posterior chain with a
    Dirichlet draw given that path plus its fixed parameters.  Returns the
    final (initial rows (B, K), transition rows (B, n-1, K, K)).
    """
    gen = rng.generator
    b, k = alpha1.shape
    n = dens.shape[0]
    g1 = gen.gamma(alpha1)
    gt = gen.gamma(alpha_trans)
    init = g1 / g1.sum(axis=1, keepdims=True)
    trans = gt / gt.sum(axis=3, keepdims=True)
    for _ in range(n_iter):
        post_init, post_trans = _forward_backward_batch(init, trans, dens)
        u = gen.random((b, n))
        x = _chain_sample_batch(post_init, post_trans, u)
        ci, ct = _member_counts(x, k)
        g1 = gen.gamma(alpha1 + ci)
        gt = gen.gamma(alpha_trans + ct)
        init = g1 / g1.sum(axis=1, keepdims=True)
        trans = gt / gt.sum(axis=3, keepdims=True)
    return init, trans


def gibbs_theta_hmm(
    hyper: DirichletHyper,
    ensemble: np.ndarray,
    exclude_index: int,
    lik: SiteLikelihood,
    n_iter: int,
    rng: RngStream,
) -> MarkovChainParams:
    """Draw chain parameters from their posterior given the data and all
    ensemble members except one, by two-block Gibbs: a latent path from the
    posterior chain, then Dirichlet rows given that path and the others."""
    if n_iter < 1:
        raise ValueError("n_iter must be at least 1")
    members = np.atleast_2d(np.asarray(ensemble, dtype=np.int64))
    if members.shape[0] < 2:
        raise ValueError("need at least two ensemble members")
    others = np.delete(members, exclude_index, axis=0)
    fixed = dirichlet_posterior(hyper, others)
    init, trans = _gibbs_theta_batch(
        fixed.alpha1[None], fixed.alpha_trans[None], lik.dens, n_iter, rng
    )
    return MarkovChainParams(initial=init[0], transitions=trans[0])


def estimate_theta_hmm(hyper: DirichletHyper, ensemble: np.ndarray) -> MarkovChainParams:
    """Deterministic posterior-mean point estimate given all members."""
    members = np.atleast_2d(np.asarray(ensemble, dtype=np.int64))
    post = dirichlet_posterior(hyper, members)
    return MarkovChainParams(
        initial=post.alpha1 / post.alpha1.sum(),
        transitions=post.alpha_trans / post.alpha_trans.sum(axis=2, keepdims=True),
    )
