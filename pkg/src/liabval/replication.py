"""Choosing static replicating portfolios on a scenario tree.

Four criteria are offered: two cash-flow matching forms, terminal-value
matching, and minimisation of ``psi(v) = E^Q[max_t C_t^v]`` where ``C^v`` is
the owner value of the residual ``X^o - v^T X^f``.  The last one needs the
residual to carry risk in every direction; :func:`check_wellposed` probes
for directions along which it does not.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .errors import ConvergenceWarning, DataError, DegeneracyError
from .gaussian import sobol_points
from .risk import RiskMeasureSpec, rho_values
from .tree import CashflowSet, ScenarioTree
from .valuation import recursion

COND_LIMIT = 1e12
TIE_TOL = 1e-9
WELLPOSED_TOL = 1e-10
CRITERIA = ("cashflow_l2root", "cashflow_l2", "terminal_value", "min_expected_max_c")


@dataclass
class ReplicationResult:
    criterion: str
    measure: str
    v_hat: np.ndarray
    objective: float
    degeneracy_report: dict | None = None
    ties: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "criterion": self.criterion,
            "measure": self.measure,
            "v_hat": [float(x) for x in self.v_hat],
            "objective": float(self.objective),
            "degeneracy_report": self.degeneracy_report,
            "ties": [[float(x) for x in t] for t in self.ties],
        }


def _weights(tree: ScenarioTree, measure: str) -> np.ndarray:
    if measure == "P":
        return np.asarray(tree.path_prob)
    if measure == "Q":
        return np.asarray(tree.path_q)
    raise ValueError(f"measure must be 'P' or 'Q', got {measure!r}")


def _dependent_instruments(M: np.ndarray) -> list[list[int]]:
    """Instrument groups spanning the numerical null space of ``M``."""
    _, sv, vt = np.linalg.svd(M)
    small = sv <= sv.max() / COND_LIMIT if sv.max() > 0 else np.ones_like(sv, dtype=bool)
    if not small.any():
        small[-1] = True
    return [[int(k) for k in np.flatnonzero(np.abs(vec) > 1e-8)] for vec in vt[small]]


def _solve_gram(M: np.ndarray, b: np.ndarray, what: str) -> np.ndarray:
    if M.size == 0:
        return np.zeros(0)
    cond = np.linalg.cond(M)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        groups = _dependent_instruments(M)
        raise DegeneracyError(
            f"{what} matrix is singular (condition number {cond:.3g}); dependent instruments {groups}",
            {"condition_number": float(cond) if np.isfinite(cond) else None, "dependent_instruments": groups},
        )
    return np.linalg.solve(M, b)


def _later(tree: ScenarioTree) -> np.ndarray:
    return np.flatnonzero(tree.time > 0)


def cashflow_l2_objective(tree: ScenarioTree, flows: CashflowSet, v, measure: str = "P") -> float:
    """``sum_t E[(X^o_t - v^T X^f_t)^2]``."""
    w = _weights(tree, measure)
    idx = _later(tree)
    res = flows.x_o[idx] - flows.x_f[idx] @ np.asarray(v, dtype=float)
    return float(w[idx] @ np.square(res))


def cashflow_l2root_objective(tree: ScenarioTree, flows: CashflowSet, v, measure: str = "P") -> float:
    """``sum_t E[(X^o_t - v^T X^f_t)^2]^{1/2}``."""
    w = _weights(tree, measure)
    res = flows.x_o - flows.x_f @ np.asarray(v, dtype=float)
    return float(sum(np.sqrt(w[layer] @ np.square(res[layer])) for layer in tree.layers[1:]))


def cashflow_match(
    tree: ScenarioTree, flows: CashflowSet, measure: str = "P", form: str = "l2"
) -> ReplicationResult:
    """Match period flows in mean square (``form="l2"``) or sum of per-period norms (``"l2root"``)."""
    flows.check(tree)
    w = _weights(tree, measure)
    idx = _later(tree)
    xf = flows.x_f[idx]
    M = (xf * w[idx, None]).T @ xf
    b = (xf * w[idx, None]).T @ flows.x_o[idx]
    v = _solve_gram(M, b, "normal-equations")
    if form == "l2":
        return ReplicationResult("cashflow_l2", measure, v, cashflow_l2_objective(tree, flows, v, measure))
    if form != "l2root":
        raise ValueError(f"form must be 'l2' or 'l2root', got {form!r}")

    def f(x):
        return cashflow_l2root_objective(tree, flows, x, measure)

    best = v
    best_f = f(v)
    if flows.m and best_f > 0:
        res = minimize(f, v, method="Nelder-Mead", options={"xatol": 1e-10, "fatol": 1e-13, "maxiter": 20000})
        if res.fun < best_f:
            best, best_f = np.asarray(res.x), float(res.fun)
    return ReplicationResult("cashflow_l2root", measure, best, best_f)


def _summed(tree: ScenarioTree, flows: CashflowSet):
    leaves = tree.leaves
    anc = tree.ancestors[leaves, 1:]
    s_o = flows.x_o[anc].sum(axis=1)
    s_f = flows.x_f[anc].sum(axis=1)
    return s_o, s_f


def terminal_value_match(tree: ScenarioTree, flows: CashflowSet, measure: str = "P") -> ReplicationResult:
    """Least squares on path-summed flows: ``v = E[S_f S_f^T]^{-1} E[S_f S_o]``."""
    flows.check(tree)
    leaves = tree.leaves
    w = _weights(tree, measure)[leaves]
    s_o, s_f = _summed(tree, flows)
    gram = (s_f * w[:, None]).T @ s_f
    mom = (s_f * w[:, None]).T @ s_o
    v = _solve_gram(gram, mom, "terminal-value Gram")
    obj = float(w @ np.square(s_o - s_f @ v))
    return ReplicationResult("terminal_value", measure, v, obj)


def _pathwise_max_c(tree: ScenarioTree, c: np.ndarray) -> np.ndarray:
    leaves = tree.leaves
    anc = tree.ancestors[leaves, : tree.horizon]
    return c[anc].max(axis=1)


def psi_batch(tree: ScenarioTree, flows: CashflowSet, spec: RiskMeasureSpec, V) -> np.ndarray:
    """``psi`` at every row of ``V`` (shape ``(k, m)``) in one vectorised sweep."""
    V = np.atleast_2d(np.asarray(V, dtype=float))
    if V.shape[1] != flows.m:
        raise DataError(f"weights have {V.shape[1]} columns, expected {flows.m}")
    x = flows.x_o[:, None] - flows.x_f @ V.T
    _, c, _, _ = recursion(tree, x, spec)
    return tree.path_q[tree.leaves] @ _pathwise_max_c(tree, c)


def psi_objective(tree: ScenarioTree, flows: CashflowSet, spec: RiskMeasureSpec, v) -> float:
    """``E_0^Q[max_{0<=t<T} C_t^v]`` with the max taken along each path."""
    v = np.asarray(v, dtype=float).reshape(flows.m)
    _, c, _, _ = recursion(tree, flows.residual(v), spec)
    return float(tree.path_q[tree.leaves] @ _pathwise_max_c(tree, c))


def psi_tilde(tree: ScenarioTree, flows: CashflowSet, spec: RiskMeasureSpec, w) -> float:
    """``psi`` on the lifted flow ``w^T Z_t`` with ``Z_t = (X^o_t, -X^f_t)``."""
    _, c, _, _ = recursion(tree, flows.lifted(w), spec)
    return float(tree.path_q[tree.leaves] @ _pathwise_max_c(tree, c))


@dataclass
class WellposedReport:
    ok: bool
    degenerate_directions: list
    n_probes: int
    psi_tilde_at_degenerate: list

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "degenerate_directions": [[float(x) for x in d] for d in self.degenerate_directions],
            "psi_tilde_at_degenerate": [float(x) for x in self.psi_tilde_at_degenerate],
            "n_probes": self.n_probes,
        }


def _nested_rho(tree: ScenarioTree, leaf_values: np.ndarray, spec: RiskMeasureSpec, stop: int) -> np.ndarray:
    """Apply ``Y -> rho(-Y)`` from the leaves back to layer ``stop``."""
    out = np.zeros(tree.n_nodes)
    out[tree.leaves] = leaf_values
    for s in range(tree.horizon - 1, stop - 1, -1):
        for i in tree.layers[s]:
            ch = tree.children[i]
            out[i] = rho_values(out[ch], tree.prob[ch], spec)
    return out


def direction_is_degenerate(
    tree: ScenarioTree, flows: CashflowSet, spec: RiskMeasureSpec, w, tol: float = WELLPOSED_TOL
) -> bool:
    """True when the nested-risk increment of ``w^T(Z_{t+1} + ... + Z_T)`` vanishes for every ``t``."""
    z = flows.lifted(w)
    T = tree.horizon
    leaves = tree.leaves
    anc = tree.ancestors[leaves]
    scale = max(1.0, float(np.nanmax(np.abs(z[1:]))) if tree.n_nodes > 1 else 1.0)
    for t in range(T):
        tail = z[anc[:, t + 1 :]].sum(axis=1)
        nested = _nested_rho(tree, tail, spec, t)
        nxt = tree.layers[t + 1]
        diff = nested[tree.parent[nxt]] - nested[nxt]
        if np.any(np.abs(diff) > tol * scale):
            return False
    return True


def probe_directions(tree: ScenarioTree, flows: CashflowSet, n_random: int = 16, seed: int = 0) -> np.ndarray:
    """Axis directions, random unit vectors and the null space of ``Cov^P(sum_t Z_t)``."""
    d = flows.m + 1
    rng = np.random.default_rng(seed)
    dirs = [np.eye(d)[k] for k in range(d)] + [-np.eye(d)[k] for k in range(d)]
    for _ in range(n_random):
        u = rng.standard_normal(d)
        dirs.append(u / np.linalg.norm(u))
    s_o, s_f = _summed(tree, flows)
    z = np.column_stack([s_o, -s_f])
    p = tree.path_prob[tree.leaves]
    mean = p @ z
    cov = ((z - mean) * p[:, None]).T @ (z - mean)
    evals, evecs = np.linalg.eigh(cov)
    small = evals <= 1e-12 * max(1.0, float(evals.max()))
    for vec in evecs[:, small].T:
        dirs.extend([vec, -vec])
    return np.array(dirs)


def check_wellposed(
    tree: ScenarioTree, flows: CashflowSet, spec: RiskMeasureSpec, n_random: int = 16, seed: int = 0
) -> WellposedReport:
    """Probe lifted directions ``w`` for which the residual is risk-free in the nested sense."""
    flows.check(tree)
    dirs = probe_directions(tree, flows, n_random, seed)
    bad = []
    for w in dirs:
        if any(np.allclose(w, b, atol=1e-12) for b in bad):
            continue
        if direction_is_degenerate(tree, flows, spec, w):
            bad.append(w + 0.0)
    psis = [psi_tilde(tree, flows, spec, w) for w in bad]
    return WellposedReport(not bad, bad, len(dirs), psis)


@dataclass
class PsiFit:
    v_hat: np.ndarray
    objective: float
    ties: list
    probe_min: float
    report: WellposedReport

    def as_result(self) -> ReplicationResult:
        return ReplicationResult(
            "min_expected_max_c", "Q", self.v_hat, self.objective, self.report.to_dict(), self.ties
        )


def _coercive_radius(tree, flows, spec, centre, level, seed) -> float:
    """Radius of a box around ``centre`` containing ``{v : psi(v) <= level}``.

    Uses ``psi(v) ~ |v| psi_tilde(0, -v/|v|)`` far out; the slope is
    estimated on quasi-random unit directions.
    """
    m = flows.m
    u = 2.0 * sobol_points(m, 64, seed + 7) - 1.0
    u = np.vstack([u, np.eye(m), -np.eye(m)])
    u = u / np.linalg.norm(u, axis=1, keepdims=True)
    slopes = np.array([psi_tilde(tree, flows, spec, np.concatenate([[0.0], -d])) for d in u])
    slope = float(slopes.min())
    span = float(np.abs(centre).max()) if m else 0.0
    if slope <= 0:
        return max(1.0, 2.0 * span)
    return float(min(max(1.0, 2.0 * level / slope + span), 1e3))


def _exact_hedge(tree, flows, spec, report: WellposedReport):
    """Weights with ``psi = 0`` read off a degenerate direction that involves the liability.

    Returns ``None`` when some degenerate direction is a pure instrument
    combination: the minimiser is then not unique and the problem is refused.
    """
    lead = [d for d in report.degenerate_directions if abs(d[0]) > 1e-12]
    if len(lead) < len(report.degenerate_directions):
        return None
    for d in lead:
        v = np.asarray(d[1:]) / d[0]
        if psi_objective(tree, flows, spec, v) <= 1e-12:
            return v
    return None


def minimize_psi(
    tree: ScenarioTree,
    flows: CashflowSet,
    spec: RiskMeasureSpec,
    seed: int = 0,
    threads: int = 1,
    n_probes: int = 1000,
    n_restarts: int = 4,
) -> PsiFit:
    """Minimise ``psi`` with restarted Nelder-Mead, certified against Sobol probes.

    Refuses with :class:`DegeneracyError` when a degenerate lifted direction
    is found, since the minimum then need not be attained or unique.  The
    exception is a direction through the liability along which ``psi``
    vanishes: that is a perfect hedge and is returned as is.
    """
    flows.check(tree)
    report = check_wellposed(tree, flows, spec, seed=seed)
    m = flows.m
    if not report.ok:
        exact = _exact_hedge(tree, flows, spec, report)
        if exact is None:
            raise DegeneracyError("replication problem has a risk-free direction", report.to_dict())
        return PsiFit(exact, 0.0, [], 0.0, report)
    if m == 0:
        val = psi_objective(tree, flows, spec, np.zeros(0))
        return PsiFit(np.zeros(0), val, [], val, report)

    def f(v):
        return psi_objective(tree, flows, spec, v)

    seeds = [np.zeros(m)]
    try:
        seeds.insert(0, terminal_value_match(tree, flows, "Q").v_hat)
    except DegeneracyError:
        pass
    level = min(f(s) for s in seeds)
    radius = _coercive_radius(tree, flows, spec, seeds[0], level, seed)
    starts = seeds + list(seeds[0] + 0.5 * radius * (2.0 * sobol_points(m, n_restarts, seed) - 1.0))

    def run(x0):
        best_x, best_f = np.asarray(x0, dtype=float), f(x0)
        scale = 0.25 * radius
        for _ in range(6):
            simplex = np.vstack([best_x, best_x + scale * np.eye(m)])
            res = minimize(
                f,
                best_x,
                method="Nelder-Mead",
                options={"xatol": 1e-10, "fatol": 1e-13, "initial_simplex": simplex, "maxiter": 4000 * m},
            )
            if res.fun < best_f - 1e-14:
                best_x, best_f = np.asarray(res.x, dtype=float), float(res.fun)
            elif scale < 1e-6:
                break
            scale *= 0.1
        return best_x, best_f

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, starts))
    else:
        results = [run(x0) for x0 in starts]
    best_x, best_f = min(results, key=lambda r: r[1])

    probe_min = np.inf
    for round_ in range(3):
        probes = best_x + radius * (2.0 * sobol_points(m, n_probes, seed + 11 + round_) - 1.0)
        vals = psi_batch(tree, flows, spec, probes)
        j = int(np.argmin(vals))
        probe_min = min(probe_min, float(vals[j]))
        if vals[j] >= best_f:
            break
        x, fx = run(probes[j])
        best_x, best_f = (x, fx) if fx <= vals[j] else (probes[j], float(vals[j]))
        results.append((best_x, best_f))
    else:
        warnings.warn("quasi-random probes kept beating the optimizer", ConvergenceWarning, stacklevel=2)

    ties = []
    for x, fx in results:
        if abs(fx - best_f) <= TIE_TOL and np.linalg.norm(x - best_x) > 1e-6:
            if all(np.linalg.norm(x - t) > 1e-6 for t in ties):
                ties.append(x)
    return PsiFit(best_x, float(best_f), ties, probe_min, report)


def replicate(
    tree: ScenarioTree,
    flows: CashflowSet,
    spec: RiskMeasureSpec,
    criterion: str,
    measure: str = "Q",
    seed: int = 0,
    threads: int = 1,
) -> ReplicationResult:
    """Dispatch on the configured criterion."""
    if criterion == "cashflow_l2":
        return cashflow_match(tree, flows, measure, "l2")
    if criterion == "cashflow_l2root":
        return cashflow_match(tree, flows, measure, "l2root")
    if criterion == "terminal_value":
        return terminal_value_match(tree, flows, measure)
    if criterion == "min_expected_max_c":
        return minimize_psi(tree, flows, spec, seed=seed, threads=threads).as_result()
    raise ValueError(f"unknown criterion {criterion!r}; expected one of {CRITERIA}")
