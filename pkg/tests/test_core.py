"""Game primitives: transfers, utilities, welfare, corrected gradients."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedgame.core import (
    BOUND_TOL,
    ConfigError,
    GameInstance,
    NumericError,
    PaymentRule,
    clamp_profile,
    mu_correct,
    payment,
    payment_vector,
    raw_strategy_derivatives,
    social_welfare,
    strategy_gradient,
    utility,
    welfare_gradient,
)

from conftest import quadratic_game


def test_payment_none_is_zero():
    rule = PaymentRule.none()
    s = np.array([1.0, 2.0, 3.0])
    assert payment(rule, s, 0) == 0.0
    assert np.all(payment_vector(rule, s) == 0.0)


def test_payment_linear_two_agents():
    rule = PaymentRule.linear(0.5)
    s = np.array([3.0, 1.0])
    # p_0 = 0.5 * (3 - 1), p_1 = 0.5 * (1 - 3)
    assert payment(rule, s, 0) == pytest.approx(1.0)
    assert payment(rule, s, 1) == pytest.approx(-1.0)


def test_payment_linear_uses_mean_of_others():
    rule = PaymentRule.linear(2.0)
    s = np.array([4.0, 1.0, 1.0])
    assert payment(rule, s, 0) == pytest.approx(2.0 * (4.0 - 1.0))


def test_payment_requires_valid_agent_index():
    rule = PaymentRule.linear(1.0)
    with pytest.raises(ConfigError):
        payment(rule, np.array([1.0, 2.0]), 2)


def test_payment_linear_needs_two_agents():
    with pytest.raises(ConfigError):
        payment(PaymentRule.linear(1.0), np.array([1.0]), 0)


def test_payment_rule_validation():
    with pytest.raises(ConfigError):
        PaymentRule(kind="linear", beta=-0.1)
    with pytest.raises(ConfigError):
        PaymentRule(kind="quadratic", beta=0.0)
    with pytest.raises(ConfigError):
        PaymentRule(kind="none", beta=0.3)


@settings(max_examples=200, deadline=None)
@given(
    st.integers(min_value=2, max_value=12),
    st.floats(min_value=0.0, max_value=10.0, allow_nan=False),
    st.integers(min_value=0, max_value=2**32 - 1),
)
def test_budget_balance_property(n, beta, seed):
    rng = np.random.default_rng(seed)
    s = rng.uniform(0.0, 50.0, size=n)
    total = float(np.sum(payment_vector(PaymentRule.linear(beta), s)))
    assert abs(total) <= 1e-9 * beta * float(np.sum(np.abs(s))) + 1e-15


def test_utility_decomposition(example_game_paid):
    w = np.array([0.5, 1.5])
    s = np.array([2.0, 3.0])
    rep = utility(example_game_paid, 0, w, s)
    assert rep.utility == rep.accuracy - rep.cost + rep.payment
    # a_0 = 1 - 0.5/5, c_0 = 0.04*2, p_0 = 0.05*(2-3)
    assert rep.accuracy == pytest.approx(0.9)
    assert rep.cost == pytest.approx(0.08)
    assert rep.payment == pytest.approx(-0.05)


def test_welfare_is_sum_of_accuracies_costs_excluded(example_game):
    w = np.array([1.0, 2.0])
    s = np.array([5.0, 5.0])
    assert social_welfare(example_game, w, s) == pytest.approx(2.0, abs=1e-12)
    # individual utilities do subtract costs
    assert utility(example_game, 0, w, s).utility == pytest.approx(0.8)


def test_welfare_gradient_is_mean_gradient(example_game):
    w = np.array([0.5, 1.5])
    s = np.array([0.0, 5.0])
    # defining property of the family: grad of mean accuracy = 2 (theta - w) / sigma
    assert welfare_gradient(example_game, w, s) == pytest.approx([0.2, 0.2])


def test_strategy_gradient_interior_matches_finite_differences(five_agent_game):
    g = five_agent_game
    rng = np.random.default_rng(11)
    w = rng.normal(size=g.m)
    s = rng.uniform(0.3, 1.7, size=g.n)
    grad = strategy_gradient(g, w, s)
    h = 1e-6
    for i in range(g.n):
        up, dn = s.copy(), s.copy()
        up[i] += h
        dn[i] -= h
        fd = (utility(g, i, w, up).utility - utility(g, i, w, dn).utility) / (2 * h)
        assert grad[i] == pytest.approx(fd, rel=1e-6, abs=1e-9)


def test_welfare_gradient_matches_finite_differences(five_agent_game):
    g = five_agent_game
    rng = np.random.default_rng(12)
    w = rng.normal(size=g.m)
    s = rng.uniform(0.3, 1.7, size=g.n)
    grad = welfare_gradient(g, w, s)
    h = 1e-6
    for j in range(g.m):
        up, dn = w.copy(), w.copy()
        up[j] += h
        dn[j] -= h
        fd = (social_welfare(g, up, s) - social_welfare(g, dn, s)) / (2 * h * g.n)
        assert grad[j] == pytest.approx(fd, rel=1e-6, abs=1e-9)


def test_mu_correction_zeroes_outward_components_only():
    s = np.array([0.0, 5.0, 2.0, 0.0, 5.0])
    s_max = np.full(5, 5.0)
    raw = np.array([-1.0, 1.0, -3.0, 2.0, -2.0])
    out = mu_correct(raw, s, s_max)
    assert out == pytest.approx([0.0, 0.0, -3.0, 2.0, -2.0])


def test_mu_correction_uses_absolute_tolerance():
    s = np.array([BOUND_TOL / 2, 5.0 - BOUND_TOL / 2])
    out = mu_correct(np.array([-1.0, 1.0]), s, np.array([5.0, 5.0]))
    assert out == pytest.approx([0.0, 0.0])


def test_strategy_gradient_includes_transfer_slope(example_game, example_game_paid):
    w = np.array([0.5, 1.5])
    s = np.array([2.0, 3.0])
    base = raw_strategy_derivatives(example_game, w, s)
    paid = raw_strategy_derivatives(example_game_paid, w, s)
    assert paid == pytest.approx(base + 0.05)


def test_strategy_gradient_rejects_singular_pool(example_game):
    # sigma0 = 0 and an empty pool make the family singular
    from fedgame.core import GameError

    with pytest.raises(GameError):
        strategy_gradient(example_game, np.array([0.0, 0.0]), np.array([0.0, 0.0]))


def test_clamp_profile(example_game):
    out = clamp_profile(np.array([-1.0, 7.0]), example_game)
    assert out == pytest.approx([0.0, 5.0])
    with pytest.raises(ConfigError):
        clamp_profile(np.array([1.0]), example_game)


def test_game_instance_validation():
    g = quadratic_game(2, 2, (0.0, 0.0), 1.0, 1.0, 0.0)
    with pytest.raises(ConfigError):
        GameInstance(
            agents=g.agents,
            accuracy=g.accuracy,
            cost=g.cost,
            payment=g.payment,
            m=3,  # disagrees with the accuracy family
        )
    with pytest.raises(ConfigError):
        quadratic_game(1, 1, (0.0,), 1.0, 1.0, 0.0, payment=PaymentRule.linear(1.0))


def test_agent_ids_must_be_dense(example_game):
    from fedgame.core import AgentSpec

    bad = (AgentSpec(id=1, s_max=1.0, initial_s=0.0),)
    with pytest.raises(ConfigError):
        GameInstance(
            agents=bad,
            accuracy=quadratic_game(1, 1, (0.0,), 1.0, 1.0, 0.0).accuracy,
            cost=quadratic_game(1, 1, (0.0,), 1.0, 1.0, 0.0).cost,
            payment=PaymentRule.none(),
            m=1,
        )
