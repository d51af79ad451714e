import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from liabval import valuation as va
from liabval.errors import DataError, GuardError, MeasurabilityError
from liabval.generators import random_flows, random_tree, uniform_tree
from liabval.risk import RiskMeasureSpec
from liabval.tree import ScenarioTree, price_all

SPECS = [RiskMeasureSpec.var(0.3), RiskMeasureSpec.es(0.25), RiskMeasureSpec.mixture([(0.4, 0.5), (0.9, 0.5)])]
spec_st = st.sampled_from(SPECS)


def two_leaf(density=(1.0, 1.0)):
    return ScenarioTree([-1, 0, 0], [1.0, 0.5, 0.5], [1.0, *density], ["root", "up", "down"])


X2 = np.array([np.nan, 0.0, 2.0])


def test_two_leaf_var_040():
    t = two_leaf()
    res = va.backward_valuation(t, X2, RiskMeasureSpec.var(0.4))
    assert (res.R0, res.C0, res.V0) == (2.0, 1.0, 1.0)
    assert res.tau_star() == {1: 2, 2: 2}


def test_two_leaf_var_060():
    t = two_leaf()
    res = va.backward_valuation(t, X2, RiskMeasureSpec.var(0.6))
    assert (res.R0, res.C0, res.V0) == (0.0, 0.0, 0.0)
    # the X = 2 leaf defaults immediately, the other runs off
    assert res.tau_star() == {1: 2, 2: 1}


def test_two_leaf_cost_of_capital():
    t = two_leaf((0.8, 1.2))
    res = va.backward_valuation(t, X2, RiskMeasureSpec.var(0.4))
    assert res.C0 == pytest.approx(0.8)
    eta = va.cost_of_capital_rates(t, res)
    assert eta[0] == pytest.approx(0.25)
    assert np.isnan(eta[1:]).all()


def test_eta_undefined_when_owner_value_zero():
    res = va.backward_valuation(two_leaf(), X2, RiskMeasureSpec.var(0.6))
    assert np.isnan(va.cost_of_capital_rates(two_leaf(), res)[0])


def test_missing_flow_rejected():
    with pytest.raises(DataError):
        va.backward_valuation(two_leaf(), np.array([np.nan, 1.0, np.nan]), SPECS[0])


def test_zero_flows_give_zero_values(rng):
    t = uniform_tree(3, 2, rng)
    res = va.backward_valuation(t, np.zeros(t.n_nodes), SPECS[1])
    assert not res.v.any() and not res.c.any() and not res.r.any()


@given(st.integers(0, 10**6), spec_st)
def test_recursion_identities(seed, spec):
    rng = np.random.default_rng(seed)
    t = random_tree(rng)
    x = random_flows(rng, t).x_o
    res = va.backward_valuation(t, x, spec)
    np.testing.assert_allclose(res.v + res.c, res.r, atol=1e-12)
    assert (res.c >= 0).all()
    gaps = va.submartingale_gaps(t, res, "Q")
    assert np.nanmin(gaps) >= -1e-12
    assert not res.v[t.leaves].any()


@given(st.integers(0, 10**6), spec_st)
def test_batch_recursion_matches_single(seed, spec):
    rng = np.random.default_rng(seed)
    t = random_tree(rng)
    xs = rng.normal(size=(t.n_nodes, 3))
    v, c, r, flag = va.recursion(t, xs, spec)
    for j in range(3):
        single = va.backward_valuation(t, xs[:, j], spec)
        np.testing.assert_array_equal(v[:, j], single.v)
        np.testing.assert_array_equal(flag[:, j], single.default_flag)


@given(st.integers(0, 10**6), spec_st)
def test_composition_representation(seed, spec):
    rng = np.random.default_rng(seed)
    t = random_tree(rng)
    x = random_flows(rng, t).x_o
    res = va.backward_valuation(t, x, spec)
    for s in range(t.horizon):
        comp = va.compose_phi(t, va.pathwise_sum(t, x, start=s + 1), spec, s)
        layer = t.layers[s]
        np.testing.assert_allclose(comp[layer], res.v[layer], atol=1e-12, rtol=0)


@given(st.integers(0, 10**6), spec_st)
def test_recursion_equals_brute_force_stopping(seed, spec):
    rng = np.random.default_rng(seed)
    t = random_tree(rng)
    x = random_flows(rng, t).x_o
    res = va.backward_valuation(t, x, spec)
    for node in range(t.n_nodes):
        if t.time[node] == t.horizon:
            continue
        enum = va.enumerate_optimal_stopping(t, node, res.r, x)
        assert enum.sup_owner == pytest.approx(res.c[node], rel=1e-10, abs=1e-12)
        assert enum.inf_policyholder == pytest.approx(res.v[node], rel=1e-10, abs=1e-12)
        tau = va.optimal_default_time(res, node)
        assert va.stopping_value(t, node, res.r, x, tau) == pytest.approx(res.c[node], rel=1e-10, abs=1e-12)
        assert va.stopping_value(t, node, res.r, x, tau, "policyholder") == pytest.approx(
            res.v[node], rel=1e-10, abs=1e-12
        )


def test_enumeration_returns_largest_optimal_time():
    # with VaR 0.6 the up leaf is indifferent (payoff zero either way); the largest rule continues
    t = two_leaf()
    res = va.backward_valuation(t, np.array([np.nan, 0.0, 0.0]), RiskMeasureSpec.var(0.6))
    enum = va.enumerate_optimal_stopping(t, 0, res.r, np.array([np.nan, 0.0, 0.0]))
    assert enum.tau == {1: 2, 2: 2}
    assert enum.n_rules == 4


def test_rule_count():
    t = uniform_tree(2, 2)
    # each time-1 node: stop, or continue with one of (1+1)^2 subrules
    assert va.count_stopping_rules(t, 0) == (1 + 4) ** 2


def test_enumeration_guard():
    t = uniform_tree(3, 3)
    x = np.ones(t.n_nodes)
    with pytest.raises(GuardError) as err:
        va.enumerate_optimal_stopping(t, 0, np.zeros(t.n_nodes), x)
    assert err.value.exit_code == 4


def test_non_adapted_rule_rejected():
    t = uniform_tree(2, 2)
    r = np.zeros(t.n_nodes)
    x = np.ones(t.n_nodes)
    leaves = [int(i) for i in t.leaves]
    # stop at time 1 on one grandchild only: {tau = 1} is not known at time 1
    tau = {leaves[0]: 1, leaves[1]: 3, leaves[2]: 3, leaves[3]: 3}
    with pytest.raises(MeasurabilityError):
        va.stopping_value(t, 0, r, x, tau)
    with pytest.raises(MeasurabilityError):
        va.stopping_value(t, 0, r, x, {leaves[0]: 3})
    with pytest.raises(MeasurabilityError):
        va.stopping_value(t, 0, r, x, {leaf: 0 for leaf in leaves})


def test_stopping_value_by_hand():
    t = two_leaf()
    r = np.array([2.0, 0.0, 0.0])
    # runoff on both leaves: owner gets R_0 - X_1 averaged, policyholders get X_1
    assert va.stopping_value(t, 0, r, X2, {1: 2, 2: 2}) == pytest.approx(1.0)
    assert va.stopping_value(t, 0, r, X2, {1: 2, 2: 2}, "policyholder") == pytest.approx(1.0)
    # immediate default everywhere: policyholders get R_0
    assert va.stopping_value(t, 0, r, X2, {1: 1, 2: 1}, "policyholder") == pytest.approx(2.0)


@given(st.integers(0, 10**6), spec_st, st.floats(-5, 5))
def test_translation_by_constant_flow(seed, spec, b):
    rng = np.random.default_rng(seed)
    t = random_tree(rng)
    x = random_flows(rng, t).x_o
    base = va.backward_valuation(t, x, spec)
    shifted = va.backward_valuation(t, x + b, spec)
    np.testing.assert_allclose(shifted.c, base.c, atol=1e-10)
    expected = base.v + b * (t.horizon - t.time)
    np.testing.assert_allclose(shifted.v, expected, atol=1e-10)


def test_liability_value(rng):
    t = random_tree(rng)
    f = random_flows(rng, t, m=1)
    v = np.array([0.7])
    res = va.backward_valuation(t, f.residual(v), SPECS[1])
    L = va.liability_value(t, np.nan_to_num(f.replicating(v)), res)
    assert L[0] == pytest.approx(price_all(t, np.nan_to_num(f.replicating(v)))[0] + res.V0)
    assert L[0] <= price_all(t, f.x_o)[0] + 1e-12


def test_iid_matches_product_tree():
    laws = [
        va.DiscreteMarginal((0.0, 1.0, 4.0), (0.5, 0.3, 0.2), (0.4, 0.3, 0.3)),
        va.DiscreteMarginal((-1.0, 2.0), (0.6, 0.4)),
        va.DiscreteMarginal((0.0, 3.0), (0.9, 0.1), (0.8, 0.2)),
    ]
    for spec in SPECS:
        closed = va.iid_closed_form(laws, spec)
        tree, x = va.product_tree(laws)
        res = va.backward_valuation(tree, x, spec)
        for t in range(tree.horizon):
            layer = tree.layers[t]
            np.testing.assert_allclose(res.v[layer], closed.v[t], atol=1e-12)
            np.testing.assert_allclose(res.c[layer], closed.c[t], atol=1e-12)
            np.testing.assert_allclose(res.r[layer], closed.r[t], atol=1e-12)


def test_iid_single_period_matches_two_leaf():
    closed = va.iid_closed_form([va.DiscreteMarginal((0.0, 2.0), (0.5, 0.5))], RiskMeasureSpec.var(0.4))
    assert (closed.v[0], closed.c[0], closed.r[0]) == (1.0, 1.0, 2.0)


def test_marginal_validation():
    with pytest.raises(DataError):
        va.DiscreteMarginal((0.0, 1.0), (0.5, 0.4))
    with pytest.raises(DataError):
        va.DiscreteMarginal((0.0, 1.0), (1.0, 0.0))


@given(st.integers(0, 10**6))
def test_lipschitz_bound_holds_empirically(seed):
    rng = np.random.default_rng(seed)
    t = random_tree(rng, max_horizon=3)
    f = random_flows(rng, t, m=2, integer=False)
    spec = RiskMeasureSpec.es(0.2)
    bound = va.lipschitz_bound(t, f.x_o, f.x_f)
    for _ in range(5):
        v, w = rng.normal(size=2), rng.normal(size=2)
        a = va.backward_valuation(t, f.residual(v), spec).V0
        b = va.backward_valuation(t, f.residual(w), spec).V0
        assert abs(a - b) <= bound * np.abs(v - w).sum() + 1e-12
