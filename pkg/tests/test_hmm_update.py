import numpy as np
import pytest

from ensbayes import (
    MarkovChainParams,
    PolicyError,
    RngStream,
    SiteLikelihood,
    TransitionPolicy,
    apply_policy,
    conditional_independence_policy,
    expected_matches,
    forward_backward,
    optimal_policy,
    propagate_joints,
    verify_bivariate_constraint,
)


def random_instance(gen, n, spread=1.0):
    theta = MarkovChainParams(
        initial=gen.dirichlet(np.ones(2)),
        transitions=gen.dirichlet(np.ones(2), size=(n - 1, 2)),
    )
    dens = gen.random((n, 2)) * spread + 0.05
    posterior = forward_backward(theta, SiteLikelihood(dens))
    return theta, posterior


def copy_policy(n):
    """Deterministic policy that keeps the member unchanged."""
    q1 = np.eye(2)
    qj = np.empty((n - 1, 2, 2, 2))
    for c in range(2):
        qj[:, :, c, :] = np.eye(2)[c]
    return TransitionPolicy(q1=q1, qj=qj)


def enumerate_joints(theta, policy):
    """Brute-force joint law of (x, x~): oracle for propagate_joints."""
    n = theta.n
    site = np.zeros((n, 2, 2))
    edge = np.zeros((n - 1, 2, 2))
    for xc in range(2**n):
        x = [(xc >> j) & 1 for j in range(n)]
        px = theta.initial[x[0]]
        for j in range(1, n):
            px *= theta.transitions[j - 1, x[j - 1], x[j]]
        for tc in range(2**n):
            xt = [(tc >> j) & 1 for j in range(n)]
            w = px * policy.q1[x[0], xt[0]]
            for j in range(1, n):
                w *= policy.qj[j - 1, xt[j - 1], x[j], xt[j]]
            for j in range(n):
                site[j, xt[j], x[j]] += w
            for j in range(n - 1):
                edge[j, xt[j], xt[j + 1]] += w
    return site, edge


def test_propagate_joints_copy_policy_is_diagonal():
    gen = RngStream(51).generator
    theta, _ = random_instance(gen, 6)
    joints = propagate_joints(theta, copy_policy(6))
    marg = theta.site_marginals()
    for j in range(6):
        assert np.allclose(joints.site[j], np.diag(marg[j]), atol=1e-12)
    assert expected_matches(theta, copy_policy(6)) == pytest.approx(6.0)


def test_propagate_joints_matches_enumeration():
    gen = RngStream(52).generator
    for _ in range(20):
        n = int(gen.integers(2, 6))
        theta, posterior = random_instance(gen, n)
        for policy in (
            conditional_independence_policy(posterior),
            optimal_policy(theta, posterior),
        ):
            joints = propagate_joints(theta, policy)
            site, edge = enumerate_joints(theta, policy)
            assert np.abs(joints.site - site).max() < 1e-12
            assert np.abs(joints.edge - edge).max() < 1e-12


def test_conditional_independence_reproduces_posterior():
    gen = RngStream(53).generator
    for _ in range(20):
        n = int(gen.integers(2, 20))
        theta, posterior = random_instance(gen, n)
        policy = conditional_independence_policy(posterior)
        assert verify_bivariate_constraint(theta, posterior, policy) < 1e-12


def test_optimal_policy_reproduces_posterior():
    gen = RngStream(54).generator
    for _ in range(30):
        n = int(gen.integers(2, 51))
        theta, posterior = random_instance(gen, n, spread=3.0)
        policy = optimal_policy(theta, posterior)
        policy.validate_rows(atol=1e-8)
        assert verify_bivariate_constraint(theta, posterior, policy) < 1e-6


def test_optimal_policy_dominates_redraw():
    gen = RngStream(55).generator
    for _ in range(30):
        n = int(gen.integers(2, 31))
        theta, posterior = random_instance(gen, n)
        best = expected_matches(theta, optimal_policy(theta, posterior))
        base = expected_matches(theta, conditional_independence_policy(posterior))
        assert best >= base - 1e-12


def test_optimal_policy_single_site_value():
    # Prior P(x=1) = 0.4, posterior P(x=1) = 0.7: the best coupling keeps
    # all of min(0.4, 0.7) on the diagonal, so matches = 0.3 + 0.4 = 0.7.
    theta = MarkovChainParams(
        initial=np.array([0.6, 0.4]), transitions=np.empty((0, 2, 2))
    )
    posterior = forward_backward(theta, SiteLikelihood(np.array([[0.5, 1.75]])))
    assert posterior.marginals[0, 1] == pytest.approx(0.7)
    policy = optimal_policy(theta, posterior)
    assert expected_matches(theta, policy) == pytest.approx(0.7, abs=1e-12)


def test_optimal_policy_identity_when_posterior_equals_prior():
    gen = RngStream(56).generator
    theta, posterior = random_instance(gen, 8)
    posterior_flat = forward_backward(theta, SiteLikelihood.flat(8))
    policy = optimal_policy(theta, posterior_flat)
    # With nothing to correct, every site should keep its value.
    assert expected_matches(theta, policy) == pytest.approx(8.0, abs=1e-9)


def test_verify_constraint_detects_perturbed_rows():
    gen = RngStream(57).generator
    theta, posterior = random_instance(gen, 10)
    policy = conditional_independence_policy(posterior)
    qj = policy.qj.copy()
    qj[4, 0, 1] = np.clip(qj[4, 0, 1] + np.array([0.2, -0.2]), 0.0, 1.0)
    qj[4, 0, 1] /= qj[4, 0, 1].sum()
    broken = TransitionPolicy(q1=policy.q1, qj=qj)
    assert verify_bivariate_constraint(theta, posterior, broken) >= 0.01


def test_optimal_policy_fallback_on_degenerate_prior():
    # Prior puts zero mass on x_1 = 1, so that conditioning row cannot be
    # derived from the coupling and the posterior row is substituted.
    theta = MarkovChainParams(
        initial=np.array([1.0, 0.0]),
        transitions=np.array([[[0.5, 0.5], [0.5, 0.5]]]),
    )
    posterior = forward_backward(theta, SiteLikelihood(np.array([[1.0, 1.0], [0.2, 0.8]])))
    policy = optimal_policy(theta, posterior)
    assert 1 in policy.fallback_sites
    assert verify_bivariate_constraint(theta, posterior, policy) < 1e-9


def test_optimal_policy_binary_only():
    theta = MarkovChainParams(
        initial=np.full(3, 1 / 3), transitions=np.full((1, 3, 3), 1 / 3)
    )
    posterior = forward_backward(theta, SiteLikelihood.flat(2, K=3))
    with pytest.raises(PolicyError):
        optimal_policy(theta, posterior)


def test_apply_policy_copy_is_identity():
    gen = RngStream(58).generator
    x = gen.integers(0, 2, size=12)
    out = apply_policy(copy_policy(12), x, RngStream(59))
    assert np.array_equal(out, x)


def test_apply_policy_reproducible_and_length_checked():
    gen = RngStream(60).generator
    theta, posterior = random_instance(gen, 9)
    policy = optimal_policy(theta, posterior)
    x = gen.integers(0, 2, size=9)
    a = apply_policy(policy, x, RngStream(61))
    b = apply_policy(policy, x, RngStream(61))
    assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        apply_policy(policy, x[:5], RngStream(61))


def test_apply_policy_frequencies_match_joints():
    gen = RngStream(62).generator
    theta, posterior = random_instance(gen, 4)
    policy = optimal_policy(theta, posterior)
    n_draws = 20000
    stream = RngStream(63)
    chain_gen = stream.substream(0).generator
    acc = np.zeros(4)
    for i in range(n_draws):
        x = np.empty(4, dtype=np.int64)
        x[0] = chain_gen.random() < theta.initial[1]
        for j in range(1, 4):
            x[j] = chain_gen.random() < theta.transitions[j - 1, x[j - 1], 1]
        acc += apply_policy(policy, x, stream.substream(1, i))
    want = posterior.marginals[:, 1]
    se = np.sqrt(want * (1 - want) / n_draws)
    assert np.all(np.abs(acc / n_draws - want) < 4 * se)
