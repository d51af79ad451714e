"""Backward valuation of a residual liability cash flow on a scenario tree.

At every non-leaf node, with ``Y = X_{t+1} + V_{t+1}`` on the children::

    R_t = rho_t(-Y)
    C_t = E_t^Q[(R_t - Y)_+]
    V_t = R_t - C_t

``C`` is the value of owning the reference undertaking (with its option to
default), ``V`` the residual liability value.  The optimal default time
started at ``t`` is the first ``s > t`` with ``R_{s-1} - X_s - V_s < 0``.

Stopping times are represented pathwise as ``{leaf position: label}`` with
labels in ``{t+1, ..., T+1}``; ``T+1`` means the run-off completes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DataError, GuardError, MeasurabilityError
from .risk import RiskMeasureSpec, norm_pdf, rho_values
from .tree import ScenarioTree, price_all

ABS_TOL = 1e-12
REL_TOL = 1e-10
MAX_DECISION_NODES = 24
MAX_RULES = 5_000_000


def _check_flows(tree: ScenarioTree, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[0] != tree.n_nodes:
        raise DataError(f"flow array has {x.shape[0]} entries, tree has {tree.n_nodes} nodes")
    later = x[1:]
    if not np.all(np.isfinite(later)):
        raise DataError("residual flow missing at some node with t >= 1")
    return x


def recursion(tree: ScenarioTree, x: np.ndarray, spec: RiskMeasureSpec):
    """Run the recursion on ``x`` of shape ``(n_nodes,)`` or ``(n_nodes, batch)``.

    Returns ``(v, c, r, default_flag)`` with the same trailing shape.
    """
    x = _check_flows(tree, x)
    shape = x.shape
    v = np.zeros(shape)
    c = np.zeros(shape)
    r = np.zeros(shape)
    flag = np.zeros(shape, dtype=bool)
    for t in range(tree.horizon - 1, -1, -1):
        for i in tree.layers[t]:
            ch = tree.children[i]
            y = x[ch] + v[ch]
            req = rho_values(y, tree.prob[ch], spec)
            gap = req - y
            own = tree.q_branch[ch] @ np.maximum(gap, 0.0)
            r[i] = req
            c[i] = own
            v[i] = req - own
            flag[ch] = gap < 0.0
    return v, c, r, flag


@dataclass
class ValuationResult:
    """Node-wise output of :func:`backward_valuation`.

    ``default_flag[s]`` is True when the owner defaults on arriving at node
    ``s`` (``R_parent - X_s - V_s < 0``); it is False at the root.
    """

    tree: ScenarioTree
    x: np.ndarray
    spec: RiskMeasureSpec
    v: np.ndarray
    c: np.ndarray
    r: np.ndarray
    default_flag: np.ndarray
    l: np.ndarray | None = None
    eta: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    @property
    def V0(self) -> float:
        return float(self.v[0])

    @property
    def C0(self) -> float:
        return float(self.c[0])

    @property
    def R0(self) -> float:
        return float(self.r[0])

    def tau_star(self, node=0) -> dict[int, int]:
        return optimal_default_time(self, node)


def backward_valuation(tree: ScenarioTree, x, spec: RiskMeasureSpec) -> ValuationResult:
    """Solve for ``V``, ``C`` and ``R`` at every node, leaves to root."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise DataError("backward_valuation takes one residual flow; use recursion() for batches")
    v, c, r, flag = recursion(tree, x, spec)
    return ValuationResult(tree, x, spec, v, c, r, flag)


def optimal_default_time(result: ValuationResult, node=0) -> dict[int, int]:
    """First default along each path below ``node``; ``T+1`` if none.

    A node at the horizon has no decision left and yields an empty map.
    """
    tree = result.tree
    node = tree.node(node)
    t = int(tree.time[node])
    T = tree.horizon
    if t >= T:
        return {}
    tau = {}
    for leaf in tree.leaves_under(node):
        label = T + 1
        for s in range(t + 1, T + 1):
            if result.default_flag[tree.ancestors[leaf, s]]:
                label = s
                break
        tau[int(leaf)] = label
    return tau


def check_adapted(tree: ScenarioTree, node: int, tau: dict[int, int]) -> None:
    """Raise :class:`MeasurabilityError` unless ``tau`` is a stopping time from ``node``."""
    t = int(tree.time[node])
    T = tree.horizon
    leaves = tree.leaves_under(node)
    if set(int(k) for k in tau) != set(int(k) for k in leaves):
        raise MeasurabilityError("stopping rule must assign a label to every leaf below the node")
    for leaf in leaves:
        if not t + 1 <= tau[int(leaf)] <= T + 1:
            raise MeasurabilityError(
                f"label {tau[int(leaf)]} at leaf {tree.node_ids[leaf]} outside {{{t + 1},...,{T + 1}}}"
            )
    for s in range(t + 1, T + 1):
        anc = tree.ancestors[leaves, s]
        stop_now = np.array([tau[int(l)] == s for l in leaves])
        for a in np.unique(anc):
            block = stop_now[anc == a]
            if block.any() and not block.all():
                raise MeasurabilityError(
                    f"event {{tau = {s}}} splits the histories through node {tree.node_ids[a]}",
                    {"node": tree.node_ids[a], "time": s},
                )


def stopping_value(
    tree: ScenarioTree,
    node,
    R: np.ndarray,
    X: np.ndarray,
    tau: dict[int, int],
    objective: str = "owner",
) -> float:
    """Q-value at ``node`` of the cash flow stopped at ``tau``.

    ``objective="owner"``: sum of ``R_{s-1} - R_s - X_s`` for ``t < s < tau``.
    ``objective="policyholder"``: sum of ``X_s`` for ``t < s < tau`` plus ``R_{tau-1}``.
    """
    if objective not in ("owner", "policyholder"):
        raise ValueError(f"objective must be 'owner' or 'policyholder', got {objective!r}")
    node = tree.node(node)
    t = int(tree.time[node])
    if t >= tree.horizon:
        return 0.0 if objective == "owner" else float(R[node])
    check_adapted(tree, node, tau)
    R = np.asarray(R, dtype=float)
    X = np.asarray(X, dtype=float)
    leaves = tree.leaves_under(node)
    w = tree.node_weights(node, leaves, "Q")
    pay = np.empty(len(leaves))
    for j, leaf in enumerate(leaves):
        path = tree.ancestors[leaf]
        stop = tau[int(leaf)]
        total = 0.0
        for s in range(t + 1, stop):
            a, b = path[s - 1], path[s]
            r_b = 0.0 if s == tree.horizon else R[b]
            if objective == "owner":
                total += R[a] - r_b - X[b]
            else:
                total += X[b]
        if objective == "policyholder":
            last = path[stop - 1]
            total += 0.0 if stop - 1 == tree.horizon else R[last]
        pay[j] = total
    return float(w @ pay)


@dataclass
class EnumerationResult:
    sup_owner: float
    inf_policyholder: float
    tau: dict[int, int]
    n_rules: int


def count_stopping_rules(tree: ScenarioTree, node: int) -> int:
    """Number of distinct adapted default rules started at ``node``."""
    total = 1
    for c in tree.children[node]:
        sub = 1 if len(tree.children[c]) == 0 else count_stopping_rules(tree, c)
        total *= 1 + sub
    return total


def enumerate_optimal_stopping(
    tree: ScenarioTree,
    node,
    R: np.ndarray,
    X: np.ndarray,
    max_decision_nodes: int = MAX_DECISION_NODES,
) -> EnumerationResult:
    """Exhaustive search over every adapted default time in ``S_{t+1, T+1}``.

    Each rule is a stop/continue choice at every reachable node below
    ``node``; rule values are built as outer sums over sibling subtrees so all
    rules are evaluated without materialising them one by one.  Among
    owner-optimal rules the largest default time (highest ``E^Q[tau]``) is
    returned.
    """
    node = tree.node(node)
    t = int(tree.time[node])
    T = tree.horizon
    R = np.asarray(R, dtype=float)
    X = np.asarray(X, dtype=float)
    if t >= T:
        return EnumerationResult(0.0, float(R[node]) if t < T else 0.0, {}, 1)
    n_dec = len(tree.subtree_nodes(node))
    if n_dec > max_decision_nodes:
        raise GuardError(
            f"{n_dec} decision nodes below {tree.node_ids[node]} exceed the guard of "
            f"{max_decision_nodes}; use backward_valuation instead",
            {"decision_nodes": n_dec, "guard": max_decision_nodes},
        )
    n_rules = count_stopping_rules(tree, node)
    if n_rules > MAX_RULES:
        raise GuardError(
            f"{n_rules} stopping rules below {tree.node_ids[node]}; use backward_valuation instead",
            {"rules": n_rules, "guard": MAX_RULES},
        )

    tables: dict[int, tuple] = {}

    def r_at(i):
        return 0.0 if tree.time[i] == T else R[i]

    def build(i):
        # arrays over rules started at i: owner value, policyholder value, E^Q[tau]
        own = np.zeros(1)
        ph = np.zeros(1)
        etau = np.zeros(1)
        dims = []
        for c in tree.children[i]:
            q = tree.q_branch[c]
            if len(tree.children[c]) == 0:
                c_own = np.array([0.0, r_at(i) - X[c]])
                c_ph = np.array([r_at(i), X[c]])
                c_tau = np.array([tree.time[c], T + 1], dtype=float)
            else:
                s_own, s_ph, s_tau = build(c)
                c_own = np.concatenate([[0.0], r_at(i) - r_at(c) - X[c] + s_own])
                c_ph = np.concatenate([[r_at(i)], X[c] + s_ph])
                c_tau = np.concatenate([[float(tree.time[c])], s_tau])
            own = (own[:, None] + q * c_own[None, :]).ravel()
            ph = (ph[:, None] + q * c_ph[None, :]).ravel()
            etau = (etau[:, None] + q * c_tau[None, :]).ravel()
            dims.append(len(c_own))
        tables[i] = tuple(dims)
        return own, ph, etau

    own, ph, etau = build(node)
    best = own.max()
    tol = ABS_TOL * max(1.0, abs(best))
    cand = np.flatnonzero(own >= best - tol)
    pick = int(cand[np.argmax(etau[cand])])

    tau: dict[int, int] = {}

    def decode(i, idx):
        opts = np.unravel_index(idx, tables[i]) if tables[i] else ()
        for c, k in zip(tree.children[i], opts):
            if k == 0:
                for leaf in tree.leaves_under(c):
                    tau[int(leaf)] = int(tree.time[c])
            elif len(tree.children[c]) == 0:
                tau[int(c)] = T + 1
            else:
                decode(c, int(k) - 1)

    decode(node, pick)
    return EnumerationResult(float(best), float(ph.min()), tau, n_rules)


def liability_value(tree: ScenarioTree, x_r: np.ndarray, result: ValuationResult) -> np.ndarray:
    """``L_t = E_t^Q[sum_{s>t} X^r_s] + V_t`` at every node."""
    x_r = _check_flows(tree, x_r)
    L = price_all(tree, x_r) + result.v
    result.l = L
    return L


def cost_of_capital_rates(tree: ScenarioTree, result: ValuationResult) -> np.ndarray:
    """Excess return rates ``eta_t`` making ``V_t = R_t - E^P[(R-Y)_+]/(1+eta_t)``.

    ``nan`` marks nodes where the rate is undefined (leaves and ``C_t = 0``).
    """
    eta = np.full(tree.n_nodes, np.nan)
    for t in range(tree.horizon):
        for i in tree.layers[t]:
            if not result.c[i] > 0.0:
                continue
            ch = tree.children[i]
            gap = np.maximum(result.r[i] - result.x[ch] - result.v[ch], 0.0)
            eta[i] = float(tree.prob[ch] @ gap) / result.c[i] - 1.0
    result.eta = eta
    return eta


def phi(tree: ScenarioTree, node, y_children: np.ndarray, spec: RiskMeasureSpec) -> float:
    """One-step map ``Y -> rho(-Y) - E^Q[(rho(-Y) - Y)_+]`` at ``node``."""
    node = tree.node(node)
    ch = tree.children[node]
    y = np.asarray(y_children, dtype=float)[ch]
    req = rho_values(y, tree.prob[ch], spec)
    return float(req - tree.q_branch[ch] @ np.maximum(req - y, 0.0))


def compose_phi(tree: ScenarioTree, leaf_values: np.ndarray, spec: RiskMeasureSpec, t: int = 0) -> np.ndarray:
    """Apply ``phi_t o ... o phi_{T-1}`` to a variable given on the leaves.

    Returns a node array filled on layers ``t..T`` (leaf layer = input).
    """
    out = np.full(tree.n_nodes, np.nan)
    leaves = tree.leaves
    out[leaves] = np.asarray(leaf_values, dtype=float)[leaves]
    for s in range(tree.horizon - 1, t - 1, -1):
        for i in tree.layers[s]:
            out[i] = phi(tree, i, out, spec)
    return out


def pathwise_sum(tree: ScenarioTree, x: np.ndarray, start: int = 1) -> np.ndarray:
    """Node array whose leaf entries hold ``sum_{s >= start} x_s`` along the path."""
    x = np.asarray(x, dtype=float)
    out = np.full(tree.n_nodes, np.nan)
    leaves = tree.leaves
    anc = tree.ancestors[leaves, start:]
    out[leaves] = x[anc].sum(axis=1) if anc.shape[1] else 0.0
    return out


def submartingale_gaps(tree: ScenarioTree, result: ValuationResult, measure: str = "Q") -> np.ndarray:
    """``E_t[X_{t+1} + V_{t+1}] - V_t`` at non-leaf nodes (``nan`` at leaves).

    Under Q these are the increments of the cumulative residual value
    process and are never negative.
    """
    gaps = np.full(tree.n_nodes, np.nan)
    for t in range(tree.horizon):
        for i in tree.layers[t]:
            ch = tree.children[i]
            gaps[i] = float(tree.branch_probs(i, measure) @ (result.x[ch] + result.v[ch])) - result.v[i]
    return gaps


def lipschitz_bound(tree: ScenarioTree, x_o: np.ndarray, x_f: np.ndarray) -> float:
    """Constant ``E^P[B_1]`` bounding ``|V_0(X^v) - V_0(X^w)| / ||v - w||_1``.

    ``K = 1 / (smallest branch probability)`` is an L1-Lipschitz constant of
    every spectral risk measure on the tree; ``B`` is rolled back with
    ``B_s = (||Z_s||_inf + E_s^P[B_{s+1}]) (2K + D_s / D_{s-1})``.
    """
    x_f = np.asarray(x_f, dtype=float).reshape(tree.n_nodes, -1)
    z = np.column_stack([np.asarray(x_o, dtype=float), x_f])
    zinf = np.abs(z).max(axis=1)
    k = 1.0 / tree.prob[1:].min()
    B = np.zeros(tree.n_nodes)
    for s in range(tree.horizon, 0, -1):
        for i in tree.layers[s]:
            ch = tree.children[i]
            nxt = float(tree.prob[ch] @ B[ch]) if len(ch) else 0.0
            B[i] = (zinf[i] + nxt) * (2 * k + tree.density[i] / tree.density[tree.parent[i]])
    ch = tree.children[0]
    return float(tree.prob[ch] @ B[ch])


# --- independent cash flows ------------------------------------------------


@dataclass(frozen=True)
class DiscreteMarginal:
    """One period's flow law: atoms with P- and Q-weights."""

    values: tuple[float, ...]
    p: tuple[float, ...]
    q: tuple[float, ...] | None = None

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        p = tuple(float(v) for v in self.p)
        q = p if self.q is None else tuple(float(v) for v in self.q)
        if not (len(vals) == len(p) == len(q)) or not vals:
            raise DataError("atom values, P-weights and Q-weights must have equal, non-zero length")
        if abs(sum(p) - 1) > 1e-12 or abs(sum(q) - 1) > 1e-12:
            raise DataError("atom weights must sum to one")
        if min(p) <= 0 or min(q) <= 0:
            raise DataError("atom weights must be positive (P and Q equivalent)")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)

    def requirement(self, spec: RiskMeasureSpec) -> float:
        return float(rho_values(np.array(self.values), np.array(self.p), spec))

    def q_shortfall(self, level: float) -> float:
        return float(np.dot(self.q, np.maximum(level - np.array(self.values), 0.0)))

    def q_mean(self) -> float:
        return float(np.dot(self.q, self.values))


@dataclass(frozen=True)
class NormalMarginal:
    """Gaussian period flow: ``N(mean, sd^2)`` under P, mean shifted by ``q_shift`` under Q."""

    mean: float
    sd: float
    q_shift: float = 0.0

    def requirement(self, spec: RiskMeasureSpec) -> float:
        from .risk import r0

        return self.mean + self.sd * r0(spec)

    def q_shortfall(self, level: float) -> float:
        from .gaussian import positive_part_gaussian

        return positive_part_gaussian(level - self.mean - self.q_shift, self.sd)

    def q_mean(self) -> float:
        return self.mean + self.q_shift


@dataclass
class IIDValuation:
    v: np.ndarray  # t = 0..T
    c: np.ndarray  # t = 0..T, C_T = 0
    r: np.ndarray  # t = 0..T, R_T = 0


def iid_closed_form(marginals: Sequence, spec: RiskMeasureSpec) -> IIDValuation:
    """Deterministic ``V, C, R`` for period flows independent of the past.

    Each period contributes ``rho(-X_s) - E^Q[(rho(-X_s) - X_s)_+]`` to the
    values of all earlier times.
    """
    T = len(marginals)
    v = np.zeros(T + 1)
    c = np.zeros(T + 1)
    r = np.zeros(T + 1)
    for t in range(T - 1, -1, -1):
        law = marginals[t]
        req = law.requirement(spec)
        c[t] = law.q_shortfall(req)
        v[t] = v[t + 1] + req - c[t]
        r[t] = req + v[t + 1]
    return IIDValuation(v, c, r)


def product_tree(marginals: Sequence[DiscreteMarginal]) -> tuple[ScenarioTree, np.ndarray]:
    """Tree in which period ``t`` branches over the atoms of ``marginals[t-1]``.

    The density multiplies ``q/p`` along the path, so the flows are
    independent across periods under both measures.
    """
    parent = [-1]
    prob = [1.0]
    dens = [1.0]
    flow = [math.nan]
    frontier = [0]
    for law in marginals:
        nxt = []
        for node in frontier:
            for val, p, q in zip(law.values, law.p, law.q):
                parent.append(node)
                prob.append(p)
                dens.append(dens[node] * q / p)
                flow.append(val)
                nxt.append(len(parent) - 1)
        frontier = nxt
    tree = ScenarioTree(parent, prob, dens)
    # construction order is already breadth-first
    return tree, np.array(flow)


def mean_abs_deviation_ok(a, b, rel: float = REL_TOL, abs_tol: float = ABS_TOL) -> bool:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return bool(np.all(np.abs(a - b) <= abs_tol + rel * np.maximum(np.abs(a), np.abs(b))))


__all__ = [
    "ValuationResult",
    "backward_valuation",
    "recursion",
    "optimal_default_time",
    "stopping_value",
    "enumerate_optimal_stopping",
    "liability_value",
    "cost_of_capital_rates",
    "phi",
    "compose_phi",
    "iid_closed_form",
    "DiscreteMarginal",
    "NormalMarginal",
    "product_tree",
    "norm_pdf",
]
