import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from liabval import replication as rp
from liabval.errors import DegeneracyError
from liabval.generators import random_flows, random_tree, uniform_tree, with_risk_free_instrument
from liabval.risk import RiskMeasureSpec
from liabval.tree import CashflowSet, ScenarioTree
from liabval.verify import terminal_value_lstsq, zcb_flows

ES = RiskMeasureSpec.es(0.25)
VAR = RiskMeasureSpec.var(0.3)


def spanned(rng, tree, weights):
    """Liability that is an exact combination of random instruments."""
    x_f = rng.normal(size=(tree.n_nodes, len(weights)))
    x_f[0] = np.nan
    return CashflowSet(x_f @ np.asarray(weights), x_f)


def zoom_argmin(f, lo, hi, steps=6, n=41):
    """Nested grid search on a box; each pass shrinks the box around the best point."""
    lo, hi = np.array(lo, float), np.array(hi, float)
    for _ in range(steps):
        axes = [np.linspace(a, b, n) for a, b in zip(lo, hi)]
        pts = np.array(np.meshgrid(*axes, indexing="ij")).reshape(len(lo), -1).T
        vals = np.array([f(p) for p in pts])
        best = pts[int(np.argmin(vals))]
        half = (hi - lo) / (n - 1) * 2
        lo, hi = best - half, best + half
    return best


def test_zcb_cashflow_match_is_best_estimate(rng):
    tree = uniform_tree(3, 2, rng)
    x_o = random_flows(rng, tree).x_o
    for measure, w in (("P", tree.path_prob), ("Q", tree.path_q)):
        v = rp.cashflow_match(tree, zcb_flows(tree, x_o), measure).v_hat
        expect = [w[layer] @ x_o[layer] for layer in tree.layers[1:]]
        np.testing.assert_allclose(v, expect, atol=1e-12)


def test_cashflow_l2_matches_zoomed_grid(rng):
    tree = uniform_tree(3, 2, rng)
    flows = random_flows(rng, tree, m=2, integer=False)
    v = rp.cashflow_match(tree, flows, "Q").v_hat
    ref = zoom_argmin(lambda p: rp.cashflow_l2_objective(tree, flows, p, "Q"), v - 2, v + 2, steps=9)
    np.testing.assert_allclose(v, ref, atol=1e-6)


def test_cashflow_l2root_improves_on_seed(rng):
    tree = uniform_tree(2, 3, rng)
    flows = random_flows(rng, tree, m=2, integer=False)
    l2 = rp.cashflow_match(tree, flows, "P", "l2")
    root = rp.cashflow_match(tree, flows, "P", "l2root")
    assert root.objective <= rp.cashflow_l2root_objective(tree, flows, l2.v_hat, "P") + 1e-12
    ref = zoom_argmin(lambda p: rp.cashflow_l2root_objective(tree, flows, p, "P"), root.v_hat - 1, root.v_hat + 1)
    assert root.objective <= rp.cashflow_l2root_objective(tree, flows, ref, "P") + 1e-9


def test_duplicate_instruments_named(rng):
    tree = uniform_tree(2, 2, rng)
    f = random_flows(rng, tree, m=1)
    x_f = np.column_stack([f.x_f[:, 0], rng.normal(size=tree.n_nodes), f.x_f[:, 0]])
    with pytest.raises(DegeneracyError) as err:
        rp.cashflow_match(tree, CashflowSet(f.x_o, x_f))
    assert err.value.details["dependent_instruments"] == [[0, 2]]
    assert err.value.exit_code == 3


def test_terminal_value_self_match(rng):
    tree = uniform_tree(2, 3, rng)
    x_o = random_flows(rng, tree).x_o
    res = rp.terminal_value_match(tree, CashflowSet(x_o, x_o[:, None]), "Q")
    assert res.v_hat[0] == pytest.approx(1.0, abs=1e-12)


def test_terminal_value_zcb_is_degenerate(rng):
    tree = uniform_tree(3, 2, rng)
    with pytest.raises(DegeneracyError):
        rp.terminal_value_match(tree, zcb_flows(tree, random_flows(rng, tree).x_o), "P")


@given(st.integers(0, 10**6), st.sampled_from(["P", "Q"]))
def test_terminal_value_matches_lstsq(seed, measure):
    rng = np.random.default_rng(seed)
    tree = uniform_tree(int(rng.integers(2, 4)), 3, rng)
    flows = random_flows(rng, tree, m=2, integer=False)
    np.testing.assert_allclose(
        rp.terminal_value_match(tree, flows, measure).v_hat, terminal_value_lstsq(tree, flows, measure), atol=1e-10
    )


def test_psi_two_leaf_without_instruments():
    tree = ScenarioTree([-1, 0, 0], [1, 0.5, 0.5], [1, 1, 1])
    flows = CashflowSet([np.nan, 0.0, 2.0], np.zeros((3, 0)))
    assert rp.psi_objective(tree, flows, RiskMeasureSpec.var(0.4), []) == 1.0


def test_psi_is_pathwise_max(rng):
    tree = uniform_tree(3, 2, rng)
    flows = random_flows(rng, tree, m=1)
    from liabval.valuation import backward_valuation

    c = backward_valuation(tree, flows.residual([0.3]), ES).c
    manual = 0.0
    for leaf in tree.leaves:
        path = tree.ancestors[leaf, : tree.horizon]
        manual += tree.path_q[leaf] * max(c[i] for i in path)
    assert rp.psi_objective(tree, flows, ES, [0.3]) == pytest.approx(manual, abs=1e-14)


def test_psi_batch_matches_single(rng):
    tree = uniform_tree(2, 3, rng)
    flows = random_flows(rng, tree, m=2)
    V = rng.normal(size=(5, 2))
    np.testing.assert_allclose(rp.psi_batch(tree, flows, ES, V), [rp.psi_objective(tree, flows, ES, v) for v in V])


@given(st.integers(0, 10**6), st.sampled_from([ES, VAR]))
def test_psi_nonnegative_and_homogeneous(seed, spec):
    rng = np.random.default_rng(seed)
    tree = random_tree(rng)
    flows = random_flows(rng, tree, m=2)
    w = rng.normal(size=3)
    base = rp.psi_tilde(tree, flows, spec, w)
    assert base >= 0
    for lam in (0.0, 0.5, 2.0, 10.0, 100.0):
        assert rp.psi_tilde(tree, flows, spec, lam * w) == pytest.approx(lam * base, rel=1e-10, abs=1e-12)


@given(st.integers(0, 10**6))
def test_deterministic_instrument_shift_leaves_psi(seed):
    rng = np.random.default_rng(seed)
    tree = random_tree(rng)
    flows = random_flows(rng, tree, m=2, integer=False)
    b = rng.normal(size=tree.horizon + 1)[tree.time]
    shifted = CashflowSet(flows.x_o, flows.x_f + b[:, None])
    v = rng.normal(size=2)
    assert rp.psi_objective(tree, shifted, ES, v) == pytest.approx(rp.psi_objective(tree, flows, ES, v), abs=1e-10)


def test_spanning_instruments_all_criteria(rng):
    tree = uniform_tree(2, 3, rng)
    weights = np.array([0.7, -1.3])
    flows = spanned(rng, tree, weights)
    for crit in ("cashflow_l2", "cashflow_l2root", "terminal_value"):
        res = rp.replicate(tree, flows, ES, crit, "Q")
        np.testing.assert_allclose(flows.residual(res.v_hat)[1:], 0.0, atol=1e-8)
    fit = rp.minimize_psi(tree, flows, ES)
    np.testing.assert_allclose(fit.v_hat, weights, atol=1e-10)
    assert fit.objective == 0.0
    np.testing.assert_allclose(flows.residual(fit.v_hat)[1:], 0.0, atol=1e-10)


def test_risk_free_instrument_is_reported(rng):
    tree = uniform_tree(2, 3, rng)
    flows, col = with_risk_free_instrument(rng, tree, random_flows(rng, tree, m=1))
    report = rp.check_wellposed(tree, flows, ES)
    assert not report.ok
    axis = np.zeros(flows.m + 1)
    axis[col + 1] = 1.0
    assert any(np.allclose(np.abs(d), axis) for d in report.degenerate_directions)
    with pytest.raises(DegeneracyError):
        rp.minimize_psi(tree, flows, ES)


def test_no_instruments_random_liability_is_wellposed(rng):
    tree = uniform_tree(2, 2, rng)
    flows = CashflowSet(random_flows(rng, tree).x_o, np.zeros((tree.n_nodes, 0)))
    assert rp.check_wellposed(tree, flows, VAR).ok


def moment_matched_tree(A, B, lam):
    """Each period branches over the sign patterns of an n-vector shock (mean 0, covariance I)."""
    T, n = A.shape
    signs = np.array(np.meshgrid(*[[-1.0, 1.0]] * n, indexing="ij")).reshape(n, -1).T
    parent, prob, dens, shocks = [-1], [1.0], [1.0], [np.zeros((0, n))]
    frontier = [0]
    for t in range(T):
        tilt = np.exp(signs @ lam[t])
        tilt /= tilt.mean()
        nxt = []
        for node in frontier:
            for k, e in enumerate(signs):
                parent.append(node)
                prob.append(1.0 / len(signs))
                dens.append(dens[node] * tilt[k])
                shocks.append(np.vstack([shocks[node], e]))
                nxt.append(len(parent) - 1)
        frontier = nxt
    tree = ScenarioTree(parent, prob, dens)
    G = np.full((tree.n_nodes, n), np.nan)
    for i in range(1, tree.n_nodes):
        t = len(shocks[i])
        G[i] = A[t - 1] + sum(B[t - 1, s] @ shocks[i][s] for s in range(t))
    return tree, CashflowSet(G[:, 0], G[:, 1:])


def test_gaussian_moment_matched_tree_is_wellposed():
    from liabval.generators import random_gaussian_model

    rng = np.random.default_rng(8)
    model = random_gaussian_model(rng, 2, 2, m=1)
    tree, flows = moment_matched_tree(model.A, model.B, model.lam)
    assert rp.check_wellposed(tree, flows, ES).ok


def test_minimize_psi_matches_grid(rng):
    tree = uniform_tree(2, 3, rng)
    flows = random_flows(rng, tree, m=1, integer=False)
    fit = rp.minimize_psi(tree, flows, ES, seed=3)
    grid = np.arange(-20, 20 + 1e-9, 1e-3)
    vals = rp.psi_batch(tree, flows, ES, grid[:, None])
    assert abs(fit.v_hat[0] - grid[int(np.argmin(vals))]) <= 2e-3
    assert fit.objective <= vals.min() + 1e-6
    assert fit.objective <= fit.probe_min + 1e-12


def test_coercive_growth(rng):
    tree = uniform_tree(2, 3, rng)
    flows = random_flows(rng, tree, m=2, integer=False)
    w = rng.normal(size=3)
    w /= np.linalg.norm(w)
    base = rp.psi_tilde(tree, flows, ES, w)
    assert base > 0
    for R in (1.0, 10.0, 100.0):
        assert rp.psi_tilde(tree, flows, ES, R * w) == pytest.approx(R * base, rel=1e-10)


def test_replication_result_dict(rng):
    tree = uniform_tree(2, 2, rng)
    res = rp.cashflow_match(tree, random_flows(rng, tree, m=1))
    d = res.to_dict()
    assert set(d) == {"criterion", "measure", "v_hat", "objective", "degeneracy_report", "ties"}
    with pytest.raises(ValueError):
        rp.replicate(tree, random_flows(rng, tree, m=1), ES, "nope")
