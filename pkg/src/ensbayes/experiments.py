"""Simulation studies and their diagnostics.

Two twin experiments: a Gaussian state with linear or heavy-tailed
nonlinear deterministic dynamics, updated by six procedures (three ways of
producing model parameters from the ensemble crossed with two updating
maps), and a binary oil/water chain filtered with the coupling policies.
Diagnostics: the rank statistic of the truth within the ensemble, and the
coefficient of unalikeability for binary ensembles.
"""
from __future__ import annotations

import functools
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import stats as sp_stats

from .distributions import RngStream, mvn_sample, student_t_cdf, student_t_quantile
from .gaussian import (
    LikelihoodSpec,
    _optimal_sqrt_update_batch,
    _stochastic_update_batch,
)
from .gaussian_bayes import (
    Ensemble,
    NIWHyper,
    _gibbs_theta_excluding_all,
    _sample_theta_all_batch,
    empirical_estimate,
)
from .hmm import (
    DirichletHyper,
    SiteLikelihood,
    _gibbs_theta_batch,
    _member_counts,
    estimate_theta_hmm,
    forward_backward,
    MarkovChainParams,
)
from .hmm_update import _apply_policy_batch, optimal_policy

__all__ = [
    "THETA_GENERATIONS",
    "UPDATE_KINDS",
    "GaussianExperimentConfig",
    "HmmExperimentConfig",
    "RunResult",
    "gen_initial_state",
    "initial_covariance",
    "linear_forward",
    "nonlinear_forward",
    "simulate_observations",
    "binary_truth_process",
    "run_gaussian_experiment",
    "run_hmm_experiment",
    "rank_statistic",
    "unalikeability",
]

THETA_GENERATIONS = ("bayes_excluding", "bayes_all_members", "empirical")
UPDATE_KINDS = ("optimal_sqrt", "stochastic")
FORWARD_KINDS = ("linear", "nonlinear")
HMM_METHODS = ("bayesian", "non_bayesian")

# Substream purpose codes; the full key of any draw is
# (replicate, purpose, ...) so procedures sharing a seed share the same
# truth, observations and initial ensembles.
_P_TRUTH, _P_OBS, _P_INIT, _P_THETA, _P_UPDATE, _P_RANK, _P_FORECAST = range(7)


@dataclass
class GaussianExperimentConfig:
    n: int = 100
    T: int = 11
    M: int = 19
    forward_kind: str = "linear"
    theta_generation: str = "bayes_excluding"
    update_kind: str = "optimal_sqrt"
    replicates: int = 1
    seed: int = 0
    hyper: NIWHyper | None = None
    obs_var: float = 20.0
    gibbs_iters: int = 25
    # Whether each replicate redraws the truth trajectory and observations
    # (in addition to the initial ensemble).
    randomise_truth: bool = True

    def __post_init__(self) -> None:
        if self.forward_kind not in FORWARD_KINDS:
            raise ValueError(f"unknown forward_kind {self.forward_kind!r}")
        if self.theta_generation not in THETA_GENERATIONS:
            raise ValueError(f"unknown theta_generation {self.theta_generation!r}")
        if self.update_kind not in UPDATE_KINDS:
            raise ValueError(f"unknown update_kind {self.update_kind!r}")
        if min(self.n, self.T, self.M) < 1 or self.replicates < 1:
            raise ValueError("n, T, M and replicates must all be >= 1")
        if self.hyper is None:
            self.hyper = NIWHyper.vague(self.n)


@dataclass
class HmmExperimentConfig:
    n: int = 400
    T: int = 100
    M: int = 20
    sigma2: float = 4.0
    alpha: float = 2.0
    gibbs_iters: int = 100
    method: str = "bayesian"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.method not in HMM_METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if min(self.n, self.T, self.M) < 1:
            raise ValueError("n, T and M must all be >= 1")
        if self.sigma2 <= 0 or self.alpha <= 0 or self.gibbs_iters < 1:
            raise ValueError("sigma2, alpha and gibbs_iters must be positive")


@dataclass
class RunResult:
    """Artifacts of one experiment run.

    Per-time ensembles (and the truth/observations they refer to) are kept
    for the first replicate only; the rank draws cover every replicate.
    """

    truth: np.ndarray  # (T, n)
    observations: np.ndarray  # (T, n)
    prediction_ensembles: np.ndarray  # (T, M, n), before each update
    filtering_ensembles: np.ndarray  # (T, M, n), after each update
    z_draws: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    marginal_estimates: np.ndarray | None = None  # (T, n) ensemble means
    unalikeability_series: np.ndarray | None = None  # (T,)


@functools.lru_cache(maxsize=8)
def initial_covariance(n: int) -> np.ndarray:
    """Covariance with variance 20 and Corr(r, s) = exp(-3 |r-s| / 20)."""
    idx = np.arange(n)
    return 20.0 * np.exp(-3.0 * np.abs(idx[:, None] - idx[None, :]) / 20.0)


def gen_initial_state(n: int, rng: RngStream) -> np.ndarray:
    """Zero-mean Gaussian draw from the exponentially correlated initial law."""
    return mvn_sample(np.zeros(n), initial_covariance(n), rng)


def linear_forward(x_prev: np.ndarray, t: int) -> np.ndarray:
    """Local smoothing: elements j = 5t-4 .. 5t+5 (1-based, clipped to the
    state length) are replaced by the mean of elements max(1, j-4) ..
    min(n, j+5) of the previous state; all other elements are copied."""
    if t < 2:
        raise ValueError("forward map is defined for t >= 2")
    x_prev = np.asarray(x_prev, dtype=float)
    n = x_prev.shape[0]
    out = x_prev.copy()
    for j in range(5 * t - 4, 5 * t + 6):  # 1-based
        if 1 <= j <= n:
            lo, hi = max(1, j - 4), min(n, j + 5)
            out[j - 1] = x_prev[lo - 1 : hi].mean()
    return out


def _t_dof(t: int) -> float:
    return 100.0 / (2 * t - 3)


def nonlinear_forward(x_prev: np.ndarray, t: int) -> np.ndarray:
    """Quantile-matching map into Student-t margins with nu_t = 100/(2t-3),
    so the marginal tails get heavier with every step."""
    if t < 2:
        raise ValueError("forward map is defined for t >= 2")
    x_prev = np.asarray(x_prev, dtype=float)
    scale = np.sqrt(20.0)
    if t == 2:
        u = sp_stats.norm.cdf(x_prev / scale)
    else:
        u = student_t_cdf(x_prev / scale, _t_dof(t - 1))
    u = np.clip(u, 1e-300, 1.0 - 1e-16)
    return scale * np.asarray(student_t_quantile(u, _t_dof(t)))


def simulate_observations(
    x: np.ndarray, obs_cov_scale: float, rng: RngStream
) -> np.ndarray:
    """Observe every component with independent N(0, obs_cov_scale) noise."""
    x = np.asarray(x, dtype=float)
    if obs_cov_scale < 0:
        raise ValueError("observation variance must be nonnegative")
    if obs_cov_scale == 0:
        return x.copy()
    return x + np.sqrt(obs_cov_scale) * rng.generator.standard_normal(x.shape[0])


def _initial_water_state(n: int, gen: np.random.Generator) -> np.ndarray:
    """All oil (0) except one contiguous water segment of length 5..20."""
    length = int(gen.integers(5, 21))
    length = min(length, n)
    start = int(gen.integers(0, n - length + 1))
    x = np.zeros(n, dtype=np.int64)
    x[start : start + length] = 1
    return x


def _advance_water(x: np.ndarray, gen: np.random.Generator) -> np.ndarray:
    """One step of the oil/water dynamics: each maximal water segment
    extends one cell left and/or right with probability 0.25 per side, and
    with probability 0.02 a new unit seed appears at a uniform oil cell.
    Water never reverts to oil."""
    n = x.shape[0]
    out = x.copy()
    starts = np.flatnonzero((x == 1) & (np.concatenate(([0], x[:-1])) == 0))
    ends = np.flatnonzero((x == 1) & (np.concatenate((x[1:], [0])) == 0))
    for s in starts:
        if s > 0 and gen.random() < 0.25:
            out[s - 1] = 1
    for e in ends:
        if e < n - 1 and gen.random() < 0.25:
            out[e + 1] = 1
    if gen.random() < 0.02:
        oil = np.flatnonzero(out == 0)
        if oil.size:
            out[oil[int(gen.integers(oil.size))]] = 1
    return out


def binary_truth_process(config: HmmExperimentConfig, rng: RngStream) -> np.ndarray:
    """Seeded substitute truth for the binary study, shape (T, n).

    The process is monotone (water never reverts) and, because segment
    growth depends on segment boundaries, it is not first-order Markov in
    the site index.
    """
    gen = rng.generator
    out = np.empty((config.T, config.n), dtype=np.int64)
    out[0] = _initial_water_state(config.n, gen)
    for t in range(1, config.T):
        out[t] = _advance_water(out[t - 1], gen)
    return out


def rank_statistic(
    prediction_ensemble: np.ndarray, truth: np.ndarray, rng: RngStream
) -> int:
    """Number of members not exceeding the truth at one uniform random site.

    Uniform on 0..M under exchangeability of the members and the truth.
    """
    ens = np.atleast_2d(np.asarray(prediction_ensemble, dtype=float))
    truth = np.asarray(truth, dtype=float)
    if ens.shape[1] != truth.shape[0]:
        raise ValueError("ensemble and truth dimensions do not conform")
    j = int(rng.generator.integers(ens.shape[1]))
    return int(np.sum(ens[:, j] <= truth[j]))


def unalikeability(filtering_ensemble: np.ndarray, tuple_width: int = 4) -> float:
    """Mean over sliding windows of the coefficient of unalikeability.

    Each member's window of tuple_width binary values is one of
    2^tuple_width categories with counts c_k; per window
    u = 1 - sum_k c_k (c_k - 1) / (M (M - 1)), the fraction of member
    pairs whose windows differ.
    """
    ens = np.atleast_2d(np.asarray(filtering_ensemble, dtype=np.int64))
    m, n = ens.shape
    if n < tuple_width:
        raise ValueError("state length is shorter than the window")
    if m < 2:
        raise ValueError("need at least two members")
    windows = np.lib.stride_tricks.sliding_window_view(ens, tuple_width, axis=1)
    weights = 1 << np.arange(tuple_width - 1, -1, -1)
    codes = windows @ weights  # (M, n - tuple_width + 1)
    n_cat = 1 << tuple_width
    counts = np.zeros((codes.shape[1], n_cat))
    for i in range(m):
        counts[np.arange(codes.shape[1]), codes[i]] += 1.0
    u = 1.0 - (counts * (counts - 1.0)).sum(axis=1) / (m * (m - 1))
    return float(u.mean())


def _forward_fn(kind: str) -> Callable[[np.ndarray, int], np.ndarray]:
    return linear_forward if kind == "linear" else nonlinear_forward


def _gaussian_replicate(
    config: GaussianExperimentConfig, rep: int
) -> tuple[int, tuple | None]:
    """One replicate: truth, observations, ensemble filtering, rank draw."""
    root = RngStream(config.seed)
    n, big_t, m = config.n, config.T, config.M
    forward = _forward_fn(config.forward_kind)
    truth_key = rep if config.randomise_truth else 0

    truth = np.empty((big_t, n))
    truth[0] = gen_initial_state(n, root.substream(truth_key, _P_TRUTH))
    for t in range(2, big_t + 1):
        truth[t - 1] = forward(truth[t - 2], t)
    obs = np.stack(
        [
            simulate_observations(
                truth[t - 1], config.obs_var, root.substream(truth_key, _P_OBS, t)
            )
            for t in range(1, big_t + 1)
        ]
    )

    members = np.stack(
        [gen_initial_state(n, root.substream(rep, _P_INIT, i)) for i in range(m)]
    )
    lik = LikelihoodSpec(H=np.eye(n), R=config.obs_var * np.eye(n))
    keep = rep == 0
    preds = np.empty((big_t, m, n)) if keep else None
    filts = np.empty((big_t, m, n)) if keep else None

    final_prediction = None
    for t in range(1, big_t + 1):
        if t > 1:
            members = np.stack([forward(x, t) for x in members])
        if t == big_t:
            # The calibration diagnostic scores the last prediction
            # ensemble, i.e. the sample of x^T given data up to T - 1 only.
            final_prediction = members
        if keep:
            preds[t - 1] = members
        y = obs[t - 1]
        ens = Ensemble(members, time_index=t)
        theta_rng = root.substream(rep, _P_THETA, t)
        if config.theta_generation == "empirical":
            shared = empirical_estimate(ens)
            mus = np.tile(shared.mu, (m, 1))
            qs = np.tile(shared.Q, (m, 1, 1))
        elif config.theta_generation == "bayes_all_members":
            mus, qs = _sample_theta_all_batch(config.hyper, ens, m, theta_rng)
        else:
            mus, qs = _gibbs_theta_excluding_all(
                config.hyper, ens, lik, y, config.gibbs_iters, theta_rng
            )
        if config.update_kind == "optimal_sqrt":
            members = _optimal_sqrt_update_batch(mus, qs, lik.H, lik.R, y, members)
        else:
            members = _stochastic_update_batch(
                mus, qs, lik.H, lik.R, y, members, root.substream(rep, _P_UPDATE, t)
            )
        if keep:
            filts[t - 1] = members

    z = rank_statistic(final_prediction, truth[-1], root.substream(rep, _P_RANK))
    detail = (truth, obs, preds, filts) if keep else None
    return z, detail


def run_gaussian_experiment(
    config: GaussianExperimentConfig, n_workers: int = 1
) -> RunResult:
    """Run all replicates of one procedure and collect the rank draws.

    The initial ensemble is drawn iid from the initial law, dynamics are
    deterministic per member, and at every time the prediction ensemble is
    recorded before the configured update is applied.
    """
    reps = range(config.replicates)
    if n_workers > 1 and config.replicates > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(_gaussian_replicate, [config] * config.replicates, reps))
    else:
        results = [_gaussian_replicate(config, rep) for rep in reps]
    z_draws = np.array([z for z, _ in results], dtype=np.int64)
    truth, obs, preds, filts = results[0][1]
    return RunResult(
        truth=truth,
        observations=obs,
        prediction_ensembles=preds,
        filtering_ensembles=filts,
        z_draws=z_draws,
    )


def run_hmm_experiment(config: HmmExperimentConfig) -> RunResult:
    """Filter the binary oil/water study with coupling-policy updates.

    The forecast step advances each member with the same stochastic kernel
    as the truth.  Parameters come either from per-member Gibbs draws
    conditioned on the data and the other members (bayesian) or from one
    shared posterior-mean estimate (non_bayesian); each member is then
    moved by the optimal policy for its parameters.
    """
    root = RngStream(config.seed)
    n, big_t, m = config.n, config.T, config.M
    truth = binary_truth_process(config, root.substream(0, _P_TRUTH))
    obs = np.stack(
        [
            simulate_observations(
                truth[t - 1].astype(float), config.sigma2, root.substream(0, _P_OBS, t)
            )
            for t in range(1, big_t + 1)
        ]
    )
    hyper = DirichletHyper.flat(n, K=2, alpha=config.alpha)
    members = np.stack(
        [
            _initial_water_state(n, root.substream(0, _P_INIT, i).generator)
            for i in range(m)
        ]
    )

    preds = np.empty((big_t, m, n), dtype=np.int64)
    filts = np.empty((big_t, m, n), dtype=np.int64)
    p_hat = np.empty((big_t, n))
    u_series = np.empty(big_t)

    for t in range(1, big_t + 1):
        if t > 1:
            members = np.stack(
                [
                    _advance_water(
                        members[i], root.substream(0, _P_FORECAST, t, i).generator
                    )
                    for i in range(m)
                ]
            )
        preds[t - 1] = members
        lik = SiteLikelihood.gaussian(obs[t - 1], config.sigma2)

        if config.method == "bayesian":
            own_init, own_trans = _member_counts(members, 2)
            fixed_init = hyper.alpha1[None] + own_init.sum(axis=0) - own_init
            fixed_trans = hyper.alpha_trans[None] + own_trans.sum(axis=0) - own_trans
            theta_init, theta_trans = _gibbs_theta_batch(
                fixed_init,
                fixed_trans,
                lik.dens,
                config.gibbs_iters,
                root.substream(0, _P_THETA, t),
            )
            q1 = np.empty((m, 2, 2))
            qj = np.empty((m, n - 1, 2, 2, 2))
            for i in range(m):
                theta = MarkovChainParams(
                    initial=theta_init[i], transitions=theta_trans[i]
                )
                policy = optimal_policy(theta, forward_backward(theta, lik))
                q1[i], qj[i] = policy.q1, policy.qj
        else:
            theta = estimate_theta_hmm(hyper, members)
            policy = optimal_policy(theta, forward_backward(theta, lik))
            q1 = np.broadcast_to(policy.q1, (m, 2, 2))
            qj = np.broadcast_to(policy.qj, (m, n - 1, 2, 2, 2))

        u = root.substream(0, _P_UPDATE, t).generator.random((m, n))
        members = _apply_policy_batch(np.ascontiguousarray(q1), qj, members, u)
        filts[t - 1] = members
        p_hat[t - 1] = members.mean(axis=0)
        u_series[t - 1] = unalikeability(members)

    return RunResult(
        truth=truth,
        observations=obs,
        prediction_ensembles=preds,
        filtering_ensembles=filts,
        marginal_estimates=p_hat,
        unalikeability_series=u_series,
    )
