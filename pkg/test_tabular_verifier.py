import numpy as np
import pytest
from numpy.testing import assert_allclose

from errors import ShapeMismatch, SupportMismatch
from tabular_verifier import (RegularizerSpec, TabularMDP, TabularPolicy, bellman_apply, certify, certify_instance,
                              contraction_check, evaluate_policy, improve_policy, omega, policy_iteration, random_mdp,
                              random_policy, regularized_objective, render_certificate, value_iteration)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def no_regularizer(n_states, n_actions):
    return RegularizerSpec(0.0, 0.0, TabularPolicy.uniform(n_states, n_actions))


def test_unregularized_operator_is_bellman_expectation(rng):
    mdp = random_mdp(4, 3, 0.9, rng)
    pi = random_policy(4, 3, rng)
    q = rng.normal(size=(4, 3))
    expected = mdp.rewards + 0.9 * np.einsum("sat,t->sa", mdp.transitions, (pi.probs * q).sum(axis=1))
    assert_allclose(bellman_apply(q, pi, mdp, no_regularizer(4, 3)), expected)


def test_zero_discount_returns_rewards(rng):
    mdp = random_mdp(3, 2, 0.0, rng)
    reg = RegularizerSpec(0.3, 0.5, random_policy(3, 2, rng))
    assert_allclose(bellman_apply(rng.normal(size=(3, 2)), random_policy(3, 2, rng), mdp, reg), mdp.rewards)


def test_deterministic_successor_attains_gamma(rng):
    transitions = np.zeros((3, 2, 3))
    for s in range(3):
        transitions[s, :, (s + 1) % 3] = 1.0
    mdp = TabularMDP(transitions, rng.normal(size=(3, 2)), 0.8)
    reg = RegularizerSpec(0.3, 0.5, random_policy(3, 2, rng))
    pi = random_policy(3, 2, rng)
    q1 = rng.normal(size=(3, 2))
    q2 = q1 + 2.5
    diff = np.abs(bellman_apply(q1, pi, mdp, reg) - bellman_apply(q2, pi, mdp, reg)).max()
    assert diff / 2.5 == pytest.approx(0.8)
    assert contraction_check(mdp, pi, reg, trials=50, rng=rng) <= 0.8 + 1e-9


def test_evaluation_is_the_operator_fixed_point(rng):
    mdp = random_mdp(5, 3, 0.9, rng)
    reg = RegularizerSpec(0.3, 0.5, random_policy(5, 3, rng))
    pi = random_policy(5, 3, rng)
    q, v = evaluate_policy(mdp, pi, reg)
    assert_allclose(bellman_apply(q, pi, mdp, reg), q, atol=1e-10)
    assert_allclose(v, (pi.probs * q).sum(axis=1) + omega(pi, reg), atol=1e-10)


def test_iterated_operator_converges_geometrically(rng):
    mdp = random_mdp(4, 2, 0.7, rng)
    reg = RegularizerSpec(0.2, 0.4, random_policy(4, 2, rng))
    pi = random_policy(4, 2, rng)
    fixed, _ = evaluate_policy(mdp, pi, reg)
    q = rng.normal(size=(4, 2)) * 5
    error = np.abs(q - fixed).max()
    for _ in range(30):
        q = bellman_apply(q, pi, mdp, reg)
        new_error = np.abs(q - fixed).max()
        assert new_error <= 0.7 * error + 1e-12
        error = new_error


def test_kl_needs_policy_support():
    ref = TabularPolicy(np.array([[0.5, 0.5]]))
    pi = TabularPolicy(np.array([[1.0, 0.0]]))
    with pytest.raises(SupportMismatch):
        omega(pi, RegularizerSpec(0.1, 0.5, ref))
    assert omega(pi, RegularizerSpec(0.1, 0.0, ref))[0] == 0.0


def test_mdp_validation(rng):
    with pytest.raises(ValueError):
        TabularMDP(np.full((2, 2, 2), 0.4), np.zeros((2, 2)), 0.9)
    with pytest.raises(ValueError):
        TabularMDP(np.full((2, 2, 2), 0.5), np.zeros((2, 2)), 1.0)
    with pytest.raises(ShapeMismatch):
        TabularMDP(np.full((2, 2, 2), 0.5), np.zeros((2, 3)), 0.9)
    with pytest.raises(ValueError):
        RegularizerSpec(-0.1, 0.0, TabularPolicy.uniform(2, 2))


def test_entropy_only_improvement_is_softmax(rng):
    q = rng.normal(size=(3, 4))
    mu = improve_policy(q, RegularizerSpec(0.5, 0.0, TabularPolicy.uniform(3, 4))).probs
    expected = np.exp(q / 0.5)
    assert_allclose(mu, expected / expected.sum(axis=1, keepdims=True))


def test_kl_only_with_flat_q_returns_reference(rng):
    ref = random_policy(3, 4, rng)
    q = np.tile(rng.normal(size=(3, 1)), (1, 4))
    mu = improve_policy(q, RegularizerSpec(0.0, 0.7, ref)).probs
    assert_allclose(mu, ref.probs, atol=1e-8)


def test_two_action_improvement_matches_grid_search(rng):
    ref = TabularPolicy(np.array([[0.3, 0.7]]))
    reg = RegularizerSpec(0.3, 0.5, ref)
    q = np.array([[1.2, 0.4]])
    mu = improve_policy(q, reg)
    best = regularized_objective(mu.probs, q, reg)[0]

    p = np.linspace(1e-6, 1 - 1e-6, 999_999)
    grid = np.stack([p, 1 - p], axis=1)
    values = (grid * q).sum(axis=1)
    values += 0.3 * -(grid * np.log(grid)).sum(axis=1)
    values -= 0.5 * (ref.probs * (np.log(ref.probs) - np.log(grid))).sum(axis=1)
    assert best >= values.max() - 1e-5
    assert abs(best - values.max()) < 1e-5


def test_improvement_never_lowers_values(rng):
    for _ in range(10):
        mdp = random_mdp(4, 3, 0.9, rng)
        reg = RegularizerSpec(0.3, 0.5, random_policy(4, 3, rng))
        pi = random_policy(4, 3, rng)
        q, v = evaluate_policy(mdp, pi, reg)
        _, v_new = evaluate_policy(mdp, improve_policy(q, reg), reg)
        assert (v_new - v).min() >= -1e-8


def test_policy_iteration_trace_is_monotone(rng):
    mdp = random_mdp(5, 3, 0.9, rng)
    reg = RegularizerSpec(0.3, 0.5, random_policy(5, 3, rng))
    result = policy_iteration(mdp, reg)
    steps = np.diff(np.stack(result.trace), axis=0)
    assert steps.min() >= -1e-8
    assert_allclose(evaluate_policy(mdp, result.policy, reg)[1], result.values)


def test_strong_kl_stays_near_reference(rng):
    mdp = random_mdp(4, 3, 0.9, rng)
    ref = random_policy(4, 3, rng)
    result = policy_iteration(mdp, RegularizerSpec(0.01, 1e3, ref))
    assert result.policy.total_variation(ref).max() < 0.05


def test_unregularized_policy_iteration_matches_value_iteration(rng):
    mdp = random_mdp(6, 4, 0.9, rng)
    result = policy_iteration(mdp, no_regularizer(6, 4))
    v_star, _ = value_iteration(mdp)
    assert_allclose(result.values, v_star, atol=1e-8)


@pytest.mark.parametrize("alpha", [0.0, 0.4])
def test_single_state_converges_fast(alpha):
    mdp = TabularMDP(np.ones((1, 3, 1)), np.array([[0.2, 1.0, -0.5]]), 0.9)
    result = policy_iteration(mdp, RegularizerSpec(alpha, 0.0, TabularPolicy.uniform(1, 3)))
    assert result.iterations <= 2


def test_improvement_is_stationary_under_a_sharp_reference_pull():
    q = np.array([[50.0, -50.0, 0.0], [-40.0, 40.0, 3.0]])
    ref = TabularPolicy(np.array([[1e-3, 0.998, 1e-3], [0.999, 5e-4, 5e-4]]))
    reg = RegularizerSpec(0.3, 0.5, ref)
    mu = improve_policy(q, reg).probs
    assert np.all(mu > 0) and np.isfinite(mu).all()
    # q_a - alpha (log mu_a + 1) + beta ref_a / mu_a is the same for every action
    multiplier = q - 0.3 * (np.log(mu) + 1.0) + 0.5 * ref.probs / mu
    assert_allclose(multiplier, multiplier[:, :1].repeat(3, axis=1), rtol=1e-9, atol=1e-9)
    best = regularized_objective(mu, q, reg)
    rng = np.random.default_rng(0)
    for _ in range(200):
        other = 0.9 * mu + 0.1 * rng.dirichlet(np.ones(3), size=2)
        assert np.all(regularized_objective(other, q, reg) <= best + 1e-12)


def test_kl_only_improvement_can_leave_the_reference_support():
    ref = TabularPolicy(np.array([[0.5, 0.5, 0.0]]))
    mu = improve_policy(np.array([[0.0, 0.0, 10.0]]), RegularizerSpec(0.0, 1.0, ref)).probs
    assert_allclose(mu, [[0.05, 0.05, 0.9]], atol=1e-12)


def test_hard_certificate_instance():
    result = certify_instance(3551713253, max_states=6, max_actions=4, gamma=0.9, alpha=0.3, beta=0.5, trials=20)
    assert result.ratio <= 0.9 + 1e-9
    assert result.margin >= -1e-9
    assert result.trace_decrease <= 1e-9
    assert result.iterations < 200


def test_certificate_passes_on_random_instances():
    report = certify(instances=50, seed=0, gamma=0.9, alpha=0.3, beta=0.5, trials=50, progress=False)
    assert report.passed
    assert report.max_contraction_ratio <= 0.9 + 1e-9
    assert len(report.instance_seeds) == len(report.iterations) == 50
    text = render_certificate(report)
    assert "Overall: PASS" in text
    assert str(report.instance_seeds[0]) in text


def test_certificate_is_reproducible():
    a = certify(instances=3, seed=7, trials=10, progress=False)
    b = certify(instances=3, seed=7, trials=10, progress=False)
    assert a.instance_seeds == b.instance_seeds
    assert a.max_contraction_ratio == b.max_contraction_ratio
