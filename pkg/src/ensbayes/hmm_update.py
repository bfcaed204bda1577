"""Updating policies for binary Markov chains.

A policy moves a forecast member x, assumed distributed as the prior chain,
to an updated member x~ through per-site conditional rows:

    x~_1 | x        ~ q1(. | x_1)
    x~_j | x~_{j-1}, x ~ qj(. | x~_{j-1}, x_j)      j = 2..n

subject to the updated chain reproducing the posterior exactly at the level
of the initial distribution and all adjacent pair distributions.  Within
that constraint set the optimal policy maximises the expected number of
sites where x~ agrees with x.

The optimisation reduces to a linear program over the scalar couplings
t_j = P(x~_j = 1, x_j = 1): the expected matches are affine in the t_j and
the feasible region is an intersection of per-edge constraints affine in
(t_{j-1}, t_j), so the global optimum is found in one solve.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

from .distributions import RngStream
from .hmm import ChainPosterior, MarkovChainParams

__all__ = [
    "TransitionPolicy",
    "JointTable",
    "PolicyError",
    "conditional_independence_policy",
    "optimal_policy",
    "propagate_joints",
    "expected_matches",
    "verify_bivariate_constraint",
    "apply_policy",
]

_TINY = 1e-10  # mass below this is treated as a degenerate conditioning event


class PolicyError(RuntimeError):
    """Raised when no valid updating policy can be constructed."""


@dataclass
class TransitionPolicy:
    """Conditional updating rows for a binary chain.

    q1[b, a]      = P(x~_1 = a | x_1 = b)
    qj[e, a, c, b] = P(x~_j = b | x~_{j-1} = a, x_j = c), edge e = j - 2.
    fallback_sites lists 1-based sites where a conditioning event had
    (numerically) zero probability and the row was filled with the
    posterior-chain row instead.
    """

    q1: np.ndarray  # (2, 2)
    qj: np.ndarray  # (n-1, 2, 2, 2)
    fallback_sites: tuple[int, ...] = field(default_factory=tuple)

    @property
    def n(self) -> int:
        return self.qj.shape[0] + 1

    def validate_rows(self, atol: float = 1e-9) -> None:
        if np.any(self.q1 < -atol) or np.any(self.qj < -atol):
            raise PolicyError("negative conditional probability")
        if abs(self.q1.sum(axis=1) - 1.0).max() > atol:
            raise PolicyError("a q1 row does not sum to 1")
        if self.qj.size and np.abs(self.qj.sum(axis=3) - 1.0).max() > atol:
            raise PolicyError("a qj row does not sum to 1")


@dataclass
class JointTable:
    """Exact joint distributions implied by a policy under the prior chain.

    site[j, a, c] = P(x~_j = a, x_j = c)
    edge[e, a, b] = P(x~_j = a, x~_{j+1} = b), e = j - 1.
    """

    site: np.ndarray  # (n, 2, 2)
    edge: np.ndarray  # (n-1, 2, 2)

    @property
    def match_probabilities(self) -> np.ndarray:
        return self.site[:, 0, 0] + self.site[:, 1, 1]


def conditional_independence_policy(posterior: ChainPosterior) -> TransitionPolicy:
    """Redraw x~ from the posterior chain, ignoring the member's own state."""
    n = posterior.marginals.shape[0]
    q1 = np.tile(posterior.initial, (2, 1))
    qj = np.empty((n - 1, 2, 2, 2))
    for a in range(2):
        for c in range(2):
            qj[:, a, c, :] = posterior.transitions[:, a, :]
    return TransitionPolicy(q1=q1, qj=qj)


def propagate_joints(theta: MarkovChainParams, policy: TransitionPolicy) -> JointTable:
    """Run the coupling recursion exactly (no sampling).

    r_j(a, c) = P(x~_j = a, x_j = c) starts from r_1(a, b) = p_1(b) q1(a | b)
    and advances through m_j(a, c) = sum_c' r_{j-1}(a, c') T_j(c', c), after
    which qj splits the mass over x~_j.
    """
    n = theta.n
    site = np.empty((n, 2, 2))
    edge = np.empty((n - 1, 2, 2))
    # r_1(a, b): rows x~_1, columns x_1.
    r = (theta.initial[None, :] * policy.q1.T).copy()
    site[0] = r
    for e in range(n - 1):
        m = r @ theta.transitions[e]  # m(a, c)
        q = policy.qj[e]  # q[a, c, b]
        edge[e] = np.einsum("ac,acb->ab", m, q)
        r = np.einsum("ac,acb->bc", m, q)
        site[e + 1] = r
    return JointTable(site=site, edge=edge)


def expected_matches(theta: MarkovChainParams, policy: TransitionPolicy) -> float:
    """Expected number of sites where the updated member keeps its value."""
    return float(propagate_joints(theta, policy).match_probabilities.sum())


def verify_bivariate_constraint(
    theta: MarkovChainParams, posterior: ChainPosterior, policy: TransitionPolicy
) -> float:
    """Largest absolute discrepancy between the distribution of the updated
    member and the posterior chain, over the initial distribution and every
    adjacent pair distribution."""
    joints = propagate_joints(theta, policy)
    initial_gap = np.abs(joints.site[0].sum(axis=1) - posterior.initial).max()
    if joints.edge.size == 0:
        return float(initial_gap)
    pair_gap = np.abs(joints.edge - posterior.pair_marginals).max()
    return float(max(initial_gap, pair_gap))


def _edge_coefficients(
    pi_prev: float, pm_prev: float, trans: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Affine pieces of m_j(a, c) in t = t_{j-1}: m(a, c) = base[a, c] + slope[a, c] t.

    pi_prev = posterior P(x~_{j-1} = 1), pm_prev = prior P(x_{j-1} = 1).
    Follows from r_{j-1} having fixed margins: r(1, 1) = t,
    r(1, 0) = pi_prev - t, r(0, 1) = pm_prev - t, r(0, 0) = 1 - pi_prev - pm_prev + t.
    """
    base = np.empty((2, 2))
    slope = np.empty((2, 2))
    for c in range(2):
        base[1, c] = pi_prev * trans[0, c]
        slope[1, c] = trans[1, c] - trans[0, c]
        base[0, c] = (1.0 - pi_prev - pm_prev) * trans[0, c] + pm_prev * trans[1, c]
        slope[0, c] = trans[0, c] - trans[1, c]
    return base, slope


def _solve_couplings(
    theta: MarkovChainParams, posterior: ChainPosterior, prior_marg: np.ndarray
) -> np.ndarray:
    """Maximise sum_j t_j over the feasible scalar couplings by linear programming.

    Per edge j the reachable interval of t_j given t_{j-1} is
    [sum_a max(0, rho_a - m(a,0)), sum_a min(m(a,1), rho_a)] with
    rho_a = posterior P(x_{j-1} = a, x_j = 1); expanding the min/max of the
    two-term sums over choice subsets gives six affine inequalities.
    """
    n = theta.n
    pi1 = posterior.marginals[:, 1]
    pm1 = prior_marg[:, 1]
    lower = np.maximum(0.0, pi1 + pm1 - 1.0)
    upper = np.minimum(pi1, pm1)
    if n == 1:
        return upper.copy()

    rows: list[int] = []
    cols: list[int] = []
    vals: list[float] = []
    rhs: list[float] = []
    row = 0
    subsets = ((0,), (1,), (0, 1))
    for e in range(n - 1):
        j = e + 1  # 0-based index of t_j
        base, slope = _edge_coefficients(pi1[j - 1], pm1[j - 1], theta.transitions[e])
        rho = posterior.pair_marginals[e][:, 1]  # rho_a = P(x_{j-1}=a, x_j=1)
        for chosen in subsets:
            # Upper: t_j - sum_{a in S} slope[a,1] t_{j-1}
            #        <= sum_{a in S} base[a,1] + sum_{a not in S} rho_a
            coeff_prev = -sum(slope[a, 1] for a in chosen)
            bound = sum(base[a, 1] for a in chosen) + sum(
                rho[a] for a in range(2) if a not in chosen
            )
            rows += [row, row]
            cols += [j - 1, j]
            vals += [coeff_prev, 1.0]
            rhs.append(bound)
            row += 1
            # Lower: sum_{a in S} (rho_a - base[a,0] - slope[a,0] t_{j-1}) <= t_j
            coeff_prev = -sum(slope[a, 0] for a in chosen)
            bound = -sum(rho[a] - base[a, 0] for a in chosen)
            rows += [row, row]
            cols += [j - 1, j]
            vals += [coeff_prev, -1.0]
            rhs.append(bound)
            row += 1
    a_ub = sparse.coo_matrix((vals, (rows, cols)), shape=(row, n)).tocsr()
    res = linprog(
        c=-np.ones(n),
        A_ub=a_ub,
        b_ub=np.asarray(rhs),
        bounds=list(zip(lower, np.maximum(upper, lower))),
        method="highs",
    )
    if not res.success:
        raise PolicyError(f"coupling optimisation failed: {res.message}")
    return np.asarray(res.x, dtype=float)


def optimal_policy(
    theta: MarkovChainParams, posterior: ChainPosterior
) -> TransitionPolicy:
    """Policy maximising expected matches among all posterior-reproducing ones.

    Solves for the optimal scalar couplings, then reconstructs conditional
    rows forward through the chain.  Conditioning events of numerically zero
    probability get posterior-chain rows (recorded in fallback_sites); if the
    reconstruction ever fell below the redraw-from-posterior baseline it is
    replaced by that baseline, so the result never does worse.
    """
    if theta.K != 2:
        raise PolicyError("optimal policy is implemented for binary chains only")
    n = theta.n
    prior_marg = theta.site_marginals()
    t = _solve_couplings(theta, posterior, prior_marg)

    fallback: list[int] = []
    pi1 = posterior.marginals[:, 1]
    pm1 = prior_marg[:, 1]

    def _coupling(tt: float, pi: float, pm: float) -> np.ndarray:
        r = np.array([[1.0 - pi - pm + tt, pm - tt], [pi - tt, tt]])
        return np.clip(r, 0.0, None)

    # Site 1 rows: q1[b, a] = r_1(a, b) / p_1(b).
    r = _coupling(min(t[0], pi1[0], pm1[0]), pi1[0], pm1[0])
    q1 = np.empty((2, 2))
    for b in range(2):
        mass = theta.initial[b]
        if mass > _TINY:
            q1[b] = r[:, b] / mass
        else:
            q1[b] = posterior.initial
            if 1 not in fallback:
                fallback.append(1)
    q1 = np.clip(q1, 0.0, 1.0)
    q1 /= q1.sum(axis=1, keepdims=True)

    qj = np.empty((n - 1, 2, 2, 2))
    for e in range(n - 1):
        j = e + 1
        m = r @ theta.transitions[e]  # m(a, c), exact under the realised r
        rho = posterior.pair_marginals[e][:, 1]
        w_lo = np.maximum(0.0, rho - m[:, 0])
        w_hi = np.minimum(m[:, 1], rho)
        target = float(np.clip(t[j], w_lo.sum(), w_hi.sum()))
        w1 = float(np.clip(target - w_lo[0], w_lo[1], w_hi[1]))
        w0 = float(np.clip(target - w1, w_lo[0], w_hi[0]))
        w = np.array([w0, w1])
        used_fallback = False
        for a in range(2):
            if m[a, 1] > _TINY:
                qj[e, a, 1, 1] = w[a] / m[a, 1]
            else:
                qj[e, a, 1, 1] = posterior.transitions[e, a, 1]
                used_fallback = True
            if m[a, 0] > _TINY:
                qj[e, a, 0, 1] = (rho[a] - w[a]) / m[a, 0]
            else:
                qj[e, a, 0, 1] = posterior.transitions[e, a, 1]
                used_fallback = True
        qj[e, :, :, 1] = np.clip(qj[e, :, :, 1], 0.0, 1.0)
        qj[e, :, :, 0] = 1.0 - qj[e, :, :, 1]
        if used_fallback:
            fallback.append(j + 1)
        # Advance the realised coupling.
        r = np.einsum("ac,acb->bc", m, qj[e])
        r = np.clip(r, 0.0, None)

    policy = TransitionPolicy(q1=q1, qj=qj, fallback_sites=tuple(fallback))
    baseline = conditional_independence_policy(posterior)
    if expected_matches(theta, policy) < expected_matches(theta, baseline):
        return TransitionPolicy(
            q1=baseline.q1, qj=baseline.qj, fallback_sites=tuple(fallback)
        )
    return policy


def _apply_policy_batch(
    q1: np.ndarray,  # (B, 2, 2)
    qj: np.ndarray,  # (B, n-1, 2, 2, 2)
    x: np.ndarray,  # (B, n)
    uniforms: np.ndarray,  # (B, n)
) -> np.ndarray:
    """Sample x~ for a batch of members, each with its own policy."""
    nb, n = x.shape
    out = np.empty((nb, n), dtype=np.int64)
    idx = np.arange(nb)
    p1 = q1[idx, x[:, 0], 1]
    out[:, 0] = (uniforms[:, 0] < p1).astype(np.int64)
    for j in range(1, n):
        p = qj[idx, j - 1, out[:, j - 1], x[:, j], 1]
        out[:, j] = (uniforms[:, j] < p).astype(np.int64)
    return out


def apply_policy(policy: TransitionPolicy, x: np.ndarray, rng: RngStream) -> np.ndarray:
    """Sample the updated member x~ given the forecast member x."""
    x = np.asarray(x, dtype=np.int64)
    if x.shape[0] != policy.n:
        raise ValueError("state vector length does not match the policy")
    u = rng.generator.random((1, x.shape[0]))
    return _apply_policy_batch(policy.q1[None], policy.qj[None], x[None], u)[0]
