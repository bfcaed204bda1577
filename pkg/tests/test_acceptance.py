"""End-to-end acceptance checks, one per shipped guarantee.

Each test prints exactly one PASS/FAIL line.  The later tests run the full
desk-scale simulation studies and dominate the suite's runtime.
"""
import json
import time

import numpy as np
import pytest

from ensbayes import (
    DirichletHyper,
    Ensemble,
    GaussianParams,
    LikelihoodSpec,
    MarkovChainParams,
    NIWHyper,
    RngStream,
    SiteLikelihood,
    apply_update_map,
    conditional_independence_map,
    conditional_independence_policy,
    dirichlet_posterior,
    enkf_equivalent_map,
    expected_matches,
    forward_backward,
    gibbs_theta_excluding,
    gibbs_theta_hmm,
    niw_posterior,
    optimal_policy,
    optimal_sqrt_map,
    posterior_moments,
    theorem1_solve,
    verify_bivariate_constraint,
)
from ensbayes.cli import main as cli_main
from ensbayes.experiments import (
    GaussianExperimentConfig,
    HmmExperimentConfig,
    run_gaussian_experiment,
    run_hmm_experiment,
)


def _report(num: int, name: str, ok: bool, detail: str) -> None:
    print(f"\n{'PASS' if ok else 'FAIL'} criterion {num:02d} ({name}): {detail}")
    assert ok, f"criterion {num} ({name}): {detail}"


def _random_spd(gen, n, scale=1.0):
    a = gen.standard_normal((n, n))
    return scale * (a @ a.T + n * np.eye(n))


def _random_instance(gen):
    n = int(gen.integers(1, 9))
    m = int(gen.integers(1, 9))
    params = GaussianParams(mu=gen.standard_normal(n), Q=_random_spd(gen, n))
    lik = LikelihoodSpec(H=gen.standard_normal((m, n)), R=_random_spd(gen, m))
    y = gen.standard_normal(m)
    return params, lik, y


def test_criterion_01_kalman_vs_precision_form():
    gen = RngStream(101).generator
    start = time.perf_counter()
    worst = 0.0
    for _ in range(500):
        params, lik, y = _random_instance(gen)
        post = posterior_moments(params, lik, y)
        q_inv = np.linalg.inv(params.Q)
        r_inv = np.linalg.inv(lik.R)
        prec = q_inv + lik.H.T @ r_inv @ lik.H
        q_star = np.linalg.inv(prec)
        mu_star = q_star @ (q_inv @ params.mu + lik.H.T @ r_inv @ y)
        rel_q = np.abs(post.Q_star - q_star).max() / np.abs(q_star).max()
        rel_mu = np.abs(post.mu_star - mu_star).max() / max(np.abs(mu_star).max(), 1.0)
        worst = max(worst, rel_q, rel_mu)
    elapsed = time.perf_counter() - start
    ok = worst < 1e-9 and elapsed < 5.0
    _report(1, "kalman oracle", ok, f"max rel err {worst:.2e}, {elapsed:.1f}s")


def test_criterion_02_trace_optimality():
    gen = RngStream(102).generator
    start = time.perf_counter()
    worst_trace = 0.0
    worst_margin = np.inf
    for _ in range(200):
        n = int(gen.integers(1, 11))
        z = gen.standard_normal((n, n)) + 2.0 * np.eye(n)
        sigma = np.linalg.svd(z, compute_uv=False)
        b = theorem1_solve(z)
        attained = float(np.trace(b @ z))
        worst_trace = max(worst_trace, abs(attained - sigma.sum()))
        # Random feasible competitors: spectral norm at most one.
        cand = gen.standard_normal((1000, n, n))
        norms = np.linalg.svd(cand, compute_uv=False)[:, 0]
        cand *= (gen.random(1000) / norms)[:, None, None]
        traces = np.einsum("kij,ji->k", cand, z)
        worst_margin = min(worst_margin, attained - traces.max())
    elapsed = time.perf_counter() - start
    ok = worst_trace < 1e-10 and worst_margin >= 0.0 and elapsed < 30.0
    _report(
        2,
        "trace optimality",
        ok,
        f"max |tr - sum sv| {worst_trace:.2e}, min margin {worst_margin:.2e}, {elapsed:.1f}s",
    )


def test_criterion_03_optimal_map_feasibility():
    gen = RngStream(103).generator
    worst = 0.0
    any_noise = False
    for _ in range(500):
        params, lik, y = _random_instance(gen)
        post = posterior_moments(params, lik, y)
        update = optimal_sqrt_map(params, lik, y)
        resid = np.linalg.norm(update.B @ params.Q @ update.B.T - post.Q_star, "fro")
        worst = max(worst, resid / np.linalg.norm(params.Q, "fro"))
        any_noise = any_noise or np.any(update.S)
    ok = worst <= 1e-8 and not any_noise
    _report(3, "optimal map feasibility", ok, f"max rel residual {worst:.2e}, S == 0: {not any_noise}")


def test_criterion_04_gain_identities():
    gen = RngStream(104).generator
    worst = 0.0
    for _ in range(500):
        params, lik, y = _random_instance(gen)
        post = posterior_moments(params, lik, y)
        kr = post.K @ lik.R
        lhs = (np.eye(params.dim) - post.K @ lik.H) @ params.Q @ lik.H.T
        worst = max(worst, np.abs(lhs - kr).max() / max(np.abs(kr).max(), 1e-30))
        update = enkf_equivalent_map(params, lik, y)
        krk = post.K @ lik.R @ post.K.T
        worst = max(worst, np.abs(update.S - krk).max() / max(np.abs(krk).max(), 1e-30))
    ok = worst < 1e-9
    _report(4, "gain identities", ok, f"max rel err {worst:.2e}")


def test_criterion_05_moment_matching():
    gen_stream = RngStream(105)
    gen = gen_stream.generator
    n, n_draws = 4, 100_000
    params = GaussianParams(mu=gen.standard_normal(n), Q=_random_spd(gen, n))
    lik = LikelihoodSpec(H=gen.standard_normal((3, n)), R=_random_spd(gen, 3))
    y = gen.standard_normal(3)
    post = posterior_moments(params, lik, y)
    chol_q = np.linalg.cholesky(params.Q)
    maps = {
        "conditional_independence": conditional_independence_map(params, lik, y),
        "enkf_equivalent": enkf_equivalent_map(params, lik, y),
        "optimal_sqrt": optimal_sqrt_map(params, lik, y),
    }
    se_mean = np.sqrt(np.diag(post.Q_star) / n_draws)
    qd = np.diag(post.Q_star)
    se_cov = np.sqrt((np.outer(qd, qd) + post.Q_star**2) / n_draws)
    start = time.perf_counter()
    worst = 0.0
    for name, update in maps.items():
        draw_rng = gen_stream.substream(hash(name) % 1000)
        xs = params.mu + draw_rng.generator.standard_normal((n_draws, n)) @ chol_q.T
        out = np.stack(
            [apply_update_map(update, x, draw_rng.substream(i)) for i, x in enumerate(xs)]
        )
        mean_dev = np.abs(out.mean(axis=0) - post.mu_star) / (4.0 * se_mean)
        cov_dev = np.abs(np.cov(out.T, ddof=1) - post.Q_star) / (4.0 * se_cov)
        worst = max(worst, mean_dev.max(), cov_dev.max())
    elapsed = time.perf_counter() - start
    ok = worst <= 1.0 and elapsed < 20.0
    _report(5, "moment matching", ok, f"max deviation {worst:.2f} x (4 se), {elapsed:.1f}s")


def test_criterion_06_conjugacy_oracles():
    start = time.perf_counter()
    n_draws = 10_000
    # Gaussian block: with a vague likelihood the theta-marginal is the
    # conjugate posterior of the conditioning members alone.
    gen = RngStream(106).generator
    n, m = 2, 5
    members = gen.standard_normal((m, n))
    hyper = NIWHyper(mu0=np.zeros(n), kappa=2.0, nu=7.0, V=np.eye(n))
    lik = LikelihoodSpec(H=np.eye(n), R=1e8 * np.eye(n))
    ens = Ensemble(members)
    ref = niw_posterior(hyper, ens.excluding(0))
    qs = np.empty((n_draws, n, n))
    mus = np.empty((n_draws, n))
    for i in range(n_draws):
        theta = gibbs_theta_excluding(
            hyper, ens, 0, lik, np.zeros(n), 4, RngStream(107, i)
        )
        qs[i], mus[i] = theta.Q, theta.mu
    se_q = qs.std(axis=0, ddof=1) / np.sqrt(n_draws)
    se_mu = mus.std(axis=0, ddof=1) / np.sqrt(n_draws)
    dev_q = np.abs(qs.mean(axis=0) - ref.V / (ref.nu - n - 1)) / (3.0 * se_q)
    dev_mu = np.abs(mus.mean(axis=0) - ref.mu0) / (3.0 * se_mu)
    worst_gauss = max(dev_q.max(), dev_mu.max())

    # Chain block: with a flat likelihood the theta-marginal is the
    # Dirichlet posterior of the conditioning members alone.
    cn = 3
    states = gen.integers(0, 2, size=(4, cn))
    dhyper = DirichletHyper.flat(cn)
    dref = dirichlet_posterior(dhyper, np.delete(states, 0, axis=0))
    flat = SiteLikelihood.flat(cn)
    inits = np.empty((n_draws, 2))
    trans = np.empty((n_draws, cn - 1, 2, 2))
    for i in range(n_draws):
        theta = gibbs_theta_hmm(dhyper, states, 0, flat, 3, RngStream(108, i))
        inits[i], trans[i] = theta.initial, theta.transitions
    want_init = dref.alpha1 / dref.alpha1.sum()
    want_trans = dref.alpha_trans / dref.alpha_trans.sum(axis=2, keepdims=True)
    se_i = inits.std(axis=0, ddof=1) / np.sqrt(n_draws)
    se_t = trans.std(axis=0, ddof=1) / np.sqrt(n_draws)
    dev_i = np.abs(inits.mean(axis=0) - want_init) / (3.0 * se_i)
    dev_t = np.abs(trans.mean(axis=0) - want_trans) / (3.0 * se_t)
    worst_hmm = max(dev_i.max(), dev_t.max())

    elapsed = time.perf_counter() - start
    ok = worst_gauss <= 1.0 and worst_hmm <= 1.0 and elapsed < 120.0
    _report(
        6,
        "conjugacy oracles",
        ok,
        f"gaussian {worst_gauss:.2f} x (3 se), chain {worst_hmm:.2f} x (3 se), {elapsed:.0f}s",
    )


def _enumerate_chain(theta, dens):
    """Vectorised exact posterior by summing over all K^n paths."""
    n, k = dens.shape
    paths = np.stack(
        np.meshgrid(*([np.arange(k)] * n), indexing="ij"), axis=-1
    ).reshape(-1, n)
    w = theta.initial[paths[:, 0]] * dens[0, paths[:, 0]]
    for j in range(1, n):
        w = w * theta.transitions[j - 1, paths[:, j - 1], paths[:, j]] * dens[j, paths[:, j]]
    w = w / w.sum()
    pair = np.zeros((n - 1, k, k))
    marg = np.stack(
        [np.bincount(paths[:, j], weights=w, minlength=k) for j in range(n)]
    )
    for j in range(n - 1):
        codes = paths[:, j] * k + paths[:, j + 1]
        pair[j] = np.bincount(codes, weights=w, minlength=k * k).reshape(k, k)
    return marg, pair


def test_criterion_07_forward_backward_vs_enumeration():
    gen = RngStream(109).generator
    worst = 0.0
    for _ in range(100):
        n = int(gen.integers(2, 11))
        k = int(gen.integers(2, 4))
        theta = MarkovChainParams(
            initial=gen.dirichlet(np.ones(k)),
            transitions=gen.dirichlet(np.ones(k), size=(n - 1, k)),
        )
        dens = gen.random((n, k)) + 0.05
        post = forward_backward(theta, SiteLikelihood(dens))
        marg, pair = _enumerate_chain(theta, dens)
        worst = max(
            worst,
            np.abs(post.marginals - marg).max(),
            np.abs(post.pair_marginals - pair).max(),
        )
    ok = worst < 1e-12
    _report(7, "forward-backward vs enumeration", ok, f"max abs err {worst:.2e}")


def _coupling_grid(t, pi, pm):
    """Couplings with margins (pi, pm) and P(both = 1) = t; t may be a vector."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    r = np.empty(t.shape + (2, 2))
    r[..., 0, 0] = 1.0 - pi - pm + t
    r[..., 0, 1] = pm - t
    r[..., 1, 0] = pi - t
    r[..., 1, 1] = t
    return r


def _grid_best_matches(theta, posterior, points=2001):
    """Exhaustive grid search over the scalar couplings, n <= 3.

    The chain of couplings is Markov in the scalar t_j = P(updated = kept = 1):
    the feasible interval for t_j depends only on t_{j-1}, and the objective
    gains 2 t_j per site, so the last t is always at its upper bound.
    """
    n = theta.n
    pm = theta.site_marginals()[:, 1]
    pi = posterior.marginals[:, 1]
    const = float(np.sum(1.0 - pi - pm))

    lo1, hi1 = max(0.0, pi[0] + pm[0] - 1.0), min(pi[0], pm[0])
    t1 = np.linspace(lo1, hi1, points)
    if n == 1:
        return const + 2.0 * t1[-1]

    def interval(r_prev, e):
        m = r_prev @ theta.transitions[e]  # (..., 2, 2)
        rho = posterior.pair_marginals[e][:, 1]
        lo = np.maximum(0.0, rho - m[..., :, 0]).sum(axis=-1)
        hi = np.minimum(m[..., :, 1], rho).sum(axis=-1)
        return lo, hi

    r1 = _coupling_grid(t1, pi[0], pm[0])
    lo2, hi2 = interval(r1, 0)
    if n == 2:
        return const + float((2.0 * t1 + 2.0 * hi2).max())

    best = -np.inf
    for i in range(points):
        t2 = np.linspace(lo2[i], hi2[i], points)
        r2 = _coupling_grid(t2, pi[1], pm[1])
        _, hi3 = interval(r2, 1)
        best = max(best, 2.0 * t1[i] + float((2.0 * t2 + 2.0 * hi3).max()))
    return const + best


def test_criterion_08_policy_optimality():
    gen = RngStream(110).generator

    def instance(n, spread=1.0):
        theta = MarkovChainParams(
            initial=gen.dirichlet(np.ones(2)),
            transitions=gen.dirichlet(np.ones(2), size=(n - 1, 2)),
        )
        dens = gen.random((n, 2)) * spread + 0.05
        return theta, forward_backward(theta, SiteLikelihood(dens))

    worst_gap = 0.0
    for n in (1, 2, 3):
        for _ in range(50):
            theta, posterior = instance(n)
            lp = expected_matches(theta, optimal_policy(theta, posterior))
            grid = _grid_best_matches(theta, posterior, points=401 if n == 3 else 2001)
            worst_gap = max(worst_gap, abs(lp - grid))

    worst_residual = 0.0
    worst_margin = np.inf
    for _ in range(30):
        n = int(gen.integers(2, 51))
        theta, posterior = instance(n, spread=3.0)
        policy = optimal_policy(theta, posterior)
        worst_residual = max(
            worst_residual, verify_bivariate_constraint(theta, posterior, policy)
        )
        margin = expected_matches(theta, policy) - expected_matches(
            theta, conditional_independence_policy(posterior)
        )
        worst_margin = min(worst_margin, margin)

    ok = worst_gap <= 1e-3 and worst_residual <= 1e-6 and worst_margin >= -1e-12
    _report(
        8,
        "policy optimality",
        ok,
        f"grid gap {worst_gap:.2e}, residual {worst_residual:.2e}, min margin {worst_margin:.2e}",
    )


_SIX_PROCEDURES = [
    ("bayes_excluding", "optimal_sqrt"),
    ("bayes_excluding", "stochastic"),
    ("bayes_all_members", "optimal_sqrt"),
    ("bayes_all_members", "stochastic"),
    ("empirical", "optimal_sqrt"),
    ("empirical", "stochastic"),
]


def _desk_z(forward_kind, M, replicates, gibbs_iters):
    """Rank-statistic draws for all six updating procedures at desk scale.

    All procedures share the seed, so truths, observations and initial
    ensembles are common random numbers across the comparison.
    """
    out = {}
    for theta_generation, update_kind in _SIX_PROCEDURES:
        cfg = GaussianExperimentConfig(
            n=40, T=11, M=M, forward_kind=forward_kind,
            theta_generation=theta_generation, update_kind=update_kind,
            replicates=replicates, seed=42, gibbs_iters=gibbs_iters,
            obs_var=5.0,
        )
        out[(theta_generation, update_kind)] = np.asarray(
            run_gaussian_experiment(cfg).z_draws
        )
    return out


def _chi2_20bins(z, M):
    """Chi-square uniformity statistic of rank draws, folded into 20 bins.

    For M = 19 the bins are the 20 raw rank values; for larger M
    consecutive ranks are pooled so statistics stay comparable across
    ensemble sizes.
    """
    idx = np.minimum(z * 20 // (M + 1), 19)
    counts = np.bincount(idx, minlength=20)
    expected = len(z) / 20.0
    return float(((counts - expected) ** 2 / expected).sum())


def _extreme_mass(z, M):
    counts = np.bincount(z, minlength=M + 1)
    return float((counts[0] + counts[M]) / len(z))


@pytest.fixture(scope="module")
def desk_linear_small_ensemble():
    start = time.perf_counter()
    z = _desk_z("linear", 19, 200, 30)
    return z, time.perf_counter() - start


def test_criterion_09_calibration_ordering(desk_linear_small_ensemble):
    z_linear, elapsed = desk_linear_small_ensemble
    proposed = ("bayes_excluding", "optimal_sqrt")

    chi2 = {p: _chi2_20bins(z, 19) for p, z in z_linear.items()}
    order_ok = all(chi2[proposed] < v for p, v in chi2.items() if p != proposed)
    emp_opt = _extreme_mass(z_linear[("empirical", "optimal_sqrt")], 19)
    emp_stoch = _extreme_mass(z_linear[("empirical", "stochastic")], 19)
    emp_ok = emp_opt >= 0.30 and emp_stoch >= 0.30

    z_nonlinear = _desk_z("nonlinear", 19, 200, 30)
    chi2_non = {p: _chi2_20bins(z, 19) for p, z in z_nonlinear.items()}
    order_non_ok = all(
        chi2_non[proposed] < v for p, v in chi2_non.items() if p != proposed
    )

    # The 10-minute figure is a stated target, not a gate; it is reported
    # alongside the calibration clauses.
    ok = order_ok and emp_ok and order_non_ok
    short = {"bayes_excluding": "bex", "bayes_all_members": "ball", "empirical": "emp"}
    fmt = ", ".join(
        f"{short[tg]}:{uk[:5]} {chi2[(tg, uk)]:.0f}" for tg, uk in _SIX_PROCEDURES
    )
    _report(
        9,
        "calibration ordering",
        ok,
        f"linear chi2 [{fmt}], empirical extreme mass {emp_opt:.2f}/{emp_stoch:.2f}, "
        f"nonlinear proposed {chi2_non[proposed]:.0f} vs min other "
        f"{min(v for p, v in chi2_non.items() if p != proposed):.0f}, "
        f"linear block {elapsed:.0f}s",
    )


def test_criterion_10_procedure_convergence_with_members(desk_linear_small_ensemble):
    z_small, _ = desk_linear_small_ensemble
    # Same replicate count on both sides: the first 100 replicates of a
    # 200-replicate run are identical to a 100-replicate run because the
    # harness keys every draw by replicate index.
    chi2_small = [_chi2_20bins(z[:100], 19) for z in z_small.values()]
    z_big = _desk_z("linear", 199, 100, 3)
    chi2_big = [_chi2_20bins(z, 199) for z in z_big.values()]
    spread_small = max(chi2_small) - min(chi2_small)
    spread_big = max(chi2_big) - min(chi2_big)
    ok = spread_big <= 0.5 * spread_small
    _report(
        10,
        "procedure convergence with ensemble size",
        ok,
        f"max pairwise chi2 difference {spread_small:.1f} (M=19) -> "
        f"{spread_big:.1f} (M=199), ratio {spread_big / spread_small:.2f}",
    )


def test_criterion_11_binary_study_method_agreement():
    start = time.perf_counter()
    results = {}
    for method in ("bayesian", "non_bayesian"):
        cfg = HmmExperimentConfig(
            n=400, T=100, M=20, sigma2=4.0, alpha=2.0, gibbs_iters=100,
            method=method, seed=42,
        )
        results[method] = run_hmm_experiment(cfg)
    elapsed = time.perf_counter() - start
    a = results["bayesian"]
    b = results["non_bayesian"]
    corr = float(np.corrcoef(a.marginal_estimates[49], b.marginal_estimates[49])[0, 1])
    mad = float(np.abs(a.unalikeability_series - b.unalikeability_series).mean())
    # The 15-minute figure is a stated target, not a gate.
    ok = corr >= 0.9 and mad <= 0.05
    _report(
        11,
        "binary study method agreement",
        ok,
        f"corr(t=50) {corr:.3f}, unalikeability MAD {mad:.3f}, {elapsed:.0f}s",
    )


def test_criterion_12_manifest_rerun_byte_identical(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(
        "n = 10\nT = 2\nM = 5\nreplicates = 3\nseed = 13\ngibbs_iters = 3\n"
        "procedures = bayes_excluding:optimal_sqrt,empirical:stochastic\n"
    )
    hmm_cfg = tmp_path / "hmm.cfg"
    hmm_cfg.write_text("n = 16\nT = 3\nM = 5\ngibbs_iters = 3\nseed = 13\n")
    identical = True
    for command, conf in (("run-gaussian", cfg), ("run-hmm", hmm_cfg)):
        out1 = tmp_path / f"{command}-a"
        out2 = tmp_path / f"{command}-b"
        assert cli_main([command, "--config", str(conf), "--out", str(out1)]) == 0
        assert cli_main(
            [command, "--config", str(out1 / "manifest.json"), "--out", str(out2)]
        ) == 0
        for name in json.loads((out1 / "manifest.json").read_text())["outputs"]:
            if name.endswith(".csv"):
                identical &= (out1 / name).read_bytes() == (out2 / name).read_bytes()
    _report(12, "manifest reproducibility", identical, "all CSV outputs byte-identical")
