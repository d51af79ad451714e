"""Oracle suites: each compares a fast engine path with an independent route."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gaussian as gm
from . import generators as gen
from . import replication as rp
from . import valuation as va
from .risk import RiskMeasureSpec
from .tree import CashflowSet, ScenarioTree

DEFAULT_SPECS = (
    RiskMeasureSpec.var(0.3),
    RiskMeasureSpec.es(0.25),
    RiskMeasureSpec.mixture([(0.5, 0.4), (0.9, 0.6)]),
)


@dataclass
class SuiteResult:
    name: str
    passed: bool
    max_deviation: float
    cases: int
    tolerance: float
    note: str = ""

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "max_deviation": self.max_deviation,
            "cases": self.cases,
            "tolerance": self.tolerance,
            "note": self.note,
        }


def _rel(a: float, b: float) -> float:
    return abs(a - b) / max(1.0, abs(a), abs(b))


def enumeration_deviation(
    tree: ScenarioTree, x: np.ndarray, spec: RiskMeasureSpec, max_decision_nodes: int = va.MAX_DECISION_NODES
) -> float:
    """Largest relative gap between the recursion and brute-force stopping, over all nodes.

    Covers the sup/inf values, the payoff of the recursion's own default
    time, and checks that no enumerated rule beats it.
    """
    res = va.backward_valuation(tree, x, spec)
    worst = 0.0
    for i in range(tree.n_nodes):
        if tree.time[i] >= tree.horizon:
            continue
        enum = va.enumerate_optimal_stopping(tree, i, res.r, x, max_decision_nodes)
        tau = va.optimal_default_time(res, i)
        own = va.stopping_value(tree, i, res.r, x, tau, "owner")
        ph = va.stopping_value(tree, i, res.r, x, tau, "policyholder")
        worst = max(
            worst,
            _rel(enum.sup_owner, res.c[i]),
            _rel(enum.inf_policyholder, res.v[i]),
            _rel(own, res.c[i]),
            _rel(ph, res.v[i]),
            max(0.0, enum.sup_owner - own) / max(1.0, abs(own)),
        )
    return worst


def enumeration_suite(seed: int = 0, n_trees: int = 200, tol: float = 1e-10, extra=()) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in range(n_trees):
        tree = gen.random_tree(rng)
        flows = gen.random_flows(rng, tree)
        worst = max(worst, enumeration_deviation(tree, flows.x_o, DEFAULT_SPECS[k % len(DEFAULT_SPECS)]))
    for tree, x, spec in extra:
        worst = max(worst, enumeration_deviation(tree, x, spec))
    return SuiteResult("enumeration", worst <= tol, worst, n_trees + len(extra), tol)


def block_diagonal_marginals(model: gm.GaussianModel, g: np.ndarray) -> list[va.NormalMarginal]:
    out = []
    for t in range(model.T):
        load = model.B[t, t].T @ g
        out.append(
            va.NormalMarginal(
                float(g @ model.A[t]), float(np.linalg.norm(load)), float(load @ model.lam[t])
            )
        )
    return out


def gaussian_iid_deviation(model: gm.GaussianModel, g: np.ndarray, spec: RiskMeasureSpec) -> float:
    val = gm.gaussian_valuation(model, g, spec)
    iid = va.iid_closed_form(block_diagonal_marginals(model, g), spec)
    worst = 0.0
    for t in range(model.T + 1):
        worst = max(
            worst,
            _rel(val.value(t), iid.v[t]),
            _rel(val.C[t], iid.c[t]),
            _rel(val.requirement(t), iid.r[t]),
        )
    return worst


def gaussian_iid_suite(seed: int = 0, n_models: int = 50, tol: float = 1e-10) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in range(n_models):
        n = int(rng.integers(1, 4))
        T = int(rng.integers(1, 5))
        model = gen.random_gaussian_model(rng, n, T, block_diagonal=True)
        g = rng.normal(size=n)
        worst = max(worst, gaussian_iid_deviation(model, g, DEFAULT_SPECS[k % 2]))
    return SuiteResult("gaussian_iid", worst <= tol, worst, n_models, tol)


def terminal_value_lstsq(tree: ScenarioTree, flows: CashflowSet, measure: str) -> np.ndarray:
    """Weighted least squares on path sums via ``numpy.linalg.lstsq``."""
    leaves = tree.leaves
    w = (tree.path_prob if measure == "P" else tree.path_q)[leaves]
    anc = tree.ancestors[leaves, 1:]
    s_o = flows.x_o[anc].sum(axis=1)
    s_f = flows.x_f[anc].sum(axis=1)
    sw = np.sqrt(w)
    sol, *_ = np.linalg.lstsq(s_f * sw[:, None], s_o * sw, rcond=None)
    return sol


def zcb_flows(tree: ScenarioTree, x_o: np.ndarray) -> CashflowSet:
    """Instrument ``k`` pays one unit at time ``k`` on every node."""
    x_f = (tree.time[:, None] == np.arange(1, tree.horizon + 1)[None, :]).astype(float)
    x_f[0] = np.nan
    return CashflowSet(x_o, x_f)


def replication_suite(seed: int = 0, n_trees: int = 50, tol: float = 1e-10) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_trees):
        tree = gen.uniform_tree(int(rng.integers(2, 4)), 3, rng)
        flows = gen.random_flows(rng, tree, m=2, integer=False)
        for measure in ("P", "Q"):
            v = rp.terminal_value_match(tree, flows, measure).v_hat
            ref = terminal_value_lstsq(tree, flows, measure)
            worst = max(worst, float(np.max(np.abs(v - ref) / np.maximum(1.0, np.abs(ref)))))
        zcb = zcb_flows(tree, flows.x_o)
        v = rp.cashflow_match(tree, zcb, "P", "l2").v_hat
        best_est = np.array([tree.path_prob[layer] @ flows.x_o[layer] for layer in tree.layers[1:]])
        worst = max(worst, float(np.max(np.abs(v - best_est))))
    return SuiteResult("replication", worst <= tol, worst, n_trees, tol)


def monte_carlo_suite(seed: int = 0, n_models: int = 20, n_paths: int = 1_000_000, z_max: float = 3.0) -> SuiteResult:
    """General Gaussian models against simulated default-and-payoff paths."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in range(n_models):
        n = int(rng.integers(1, 4))
        T = int(rng.integers(1, 4))
        model = gen.random_gaussian_model(rng, n, T)
        val = gm.gaussian_valuation(model, rng.normal(size=n), DEFAULT_SPECS[k % 2])
        est = gm.simulate_recursion(val, n_paths, seed=seed * 1000 + k)
        worst = max(worst, abs(val.V0 - est.mean) / est.stderr if est.stderr > 0 else 0.0)
    return SuiteResult("monte_carlo", worst <= z_max, worst, n_models, z_max, "deviation in standard errors")
