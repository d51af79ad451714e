import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from liabval.errors import DataError, StructuralError, TreeValidationError
from liabval.generators import random_flows, random_tree
from liabval.tree import (
    CashflowSet,
    ScenarioTree,
    conditional_expectation,
    ensure_valid,
    expectation_via_branches,
    load_tree_csv,
    price_all,
    price_cashflow,
    validate_tree,
    write_tree_csv,
)


def two_leaf(density=(1.0, 1.0)):
    return ScenarioTree([-1, 0, 0], [1.0, 0.5, 0.5], [1.0, *density], ["root", "up", "down"])


def test_breadth_first_layout():
    # children listed before their parent in the input
    t = ScenarioTree([2, 2, -1, 0, 1], [0.5, 0.5, 1.0, 1.0, 1.0], [1] * 5, ["a", "b", "r", "aa", "bb"])
    assert t.node_ids == ("r", "a", "b", "aa", "bb")
    assert t.horizon == 2
    assert [list(layer) for layer in t.layers] == [[0], [1, 2], [3, 4]]
    assert t.ancestors[4].tolist() == [0, 2, 4]


@pytest.mark.parametrize(
    "parent, match",
    [
        ([-1, -1], "exactly one root"),
        ([-1, 5], "orphan"),
        ([-1, 2, 1], "unreachable"),
    ],
)
def test_structural_errors(parent, match):
    n = len(parent)
    with pytest.raises(StructuralError, match=match):
        ScenarioTree(parent, np.ones(n), np.ones(n))


def test_leaves_must_sit_at_horizon():
    with pytest.raises(StructuralError, match="horizon"):
        ScenarioTree([-1, 0, 0, 1], [1, 0.5, 0.5, 1], [1, 1, 1, 1])


def test_validation_reports_each_violation():
    t = ScenarioTree([-1, 0, 0], [1.0, 0.5, 0.4], [1.0, 1.0, -1.0])
    kinds = {v.kind for v in validate_tree(t).violations}
    assert kinds == {"probability_sum", "density_positive", "martingale"}
    with pytest.raises(TreeValidationError):
        ensure_valid(t)
    assert validate_tree(two_leaf((0.8, 1.2))).ok


def test_q_branch_probabilities():
    t = two_leaf((0.8, 1.2))
    np.testing.assert_allclose(t.branch_probs(0, "Q"), [0.4, 0.6])
    np.testing.assert_allclose(t.branch_probs(0, "P"), [0.5, 0.5])
    with pytest.raises(ValueError):
        t.branch_probs(0, "R")


def test_conditional_expectation_two_leaf():
    t = two_leaf((0.8, 1.2))
    x = np.array([np.nan, 0.0, 2.0])
    assert conditional_expectation(t, 0, x, 1, "Q") == pytest.approx(1.2)
    assert conditional_expectation(t, 0, x, 1, "P") == pytest.approx(1.0)
    with pytest.raises(ValueError):
        conditional_expectation(t, 1, x, 1)
    with pytest.raises(DataError):
        conditional_expectation(t, 0, np.array([np.nan, np.nan, 1.0]), 1)


@given(st.integers(0, 10_000))
def test_two_routes_to_conditional_expectation_agree(seed):
    rng = np.random.default_rng(seed)
    t = random_tree(rng)
    x = random_flows(rng, t).x_o
    for node in range(t.n_nodes):
        for u in range(t.time[node] + 1, t.horizon + 1):
            for m in ("P", "Q"):
                a = conditional_expectation(t, node, x, u, m)
                b = expectation_via_branches(t, node, x, u, m)
                assert a == pytest.approx(b, rel=1e-12, abs=1e-12)


@given(st.integers(0, 10_000))
def test_price_all_matches_sum_of_expectations(seed):
    rng = np.random.default_rng(seed)
    t = random_tree(rng)
    x = random_flows(rng, t).x_o
    prices = price_all(t, x)
    for node in range(t.n_nodes):
        assert prices[node] == pytest.approx(price_cashflow(t, x, node), rel=1e-12, abs=1e-12)


def test_cashflow_set_lift_and_residual():
    flows = CashflowSet([np.nan, 1.0, 3.0], [[np.nan, np.nan], [1.0, 0.0], [0.0, 2.0]])
    np.testing.assert_allclose(flows.residual([1.0, 1.0])[1:], [0.0, 1.0])
    np.testing.assert_allclose(flows.lifted([2.0, 1.0, 1.0])[1:], [1.0, 4.0])
    assert np.isnan(flows.residual([0, 0])[0])


def test_csv_roundtrip(tmp_path, rng):
    t = random_tree(rng)
    flows = random_flows(rng, t, m=2)
    path = tmp_path / "tree.csv"
    write_tree_csv(path, t, flows)
    t2, f2 = load_tree_csv(path)
    assert t2.node_ids == t.node_ids
    np.testing.assert_array_equal(t2.prob, t.prob)
    np.testing.assert_array_equal(f2.x_f[1:], flows.x_f[1:])


def test_csv_fixture_and_discounting(fixtures):
    t, flows = load_tree_csv(fixtures / "two_leaf.csv")
    assert t.node_ids == ("root", "up", "down")
    np.testing.assert_array_equal(flows.x_o[1:], [0.0, 2.0])
    _, disc = load_tree_csv(fixtures / "two_leaf.csv", discount_factors=[0.5])
    np.testing.assert_array_equal(disc.x_o[1:], [0.0, 1.0])
    with pytest.raises(DataError):
        load_tree_csv(fixtures / "two_leaf.csv", discount_factors=[0.5, 0.5])


def test_csv_rejects_bad_density(fixtures):
    with pytest.raises(TreeValidationError) as err:
        load_tree_csv(fixtures / "two_leaf_bad_density.csv")
    assert err.value.exit_code == 2


def test_csv_renormalizes_rounding(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text(
        "node_id,parent_id,time,branch_prob,density,x_o\n"
        "r,,0,,1,\n"
        "a,r,1,0.3333333333333333,1,1\n"
        "b,r,1,0.3333333333333333,1,2\n"
        "c,r,1,0.3333333333333333,1,3\n"
    )
    t, _ = load_tree_csv(path)
    assert t.prob[1:].sum() == pytest.approx(1.0, abs=1e-15)


def test_csv_missing_flow(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("node_id,parent_id,time,branch_prob,density,x_o\nr,,0,,1,\na,r,1,1,1,\n")
    with pytest.raises(DataError):
        load_tree_csv(path)
