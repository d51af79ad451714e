"""Finite scenario trees carrying a real-world measure P and a pricing measure Q.

The filtration is the tree itself: a quantity is time-t measurable exactly when
it is a function of the time-t node.  Q is not stored as separate branch
probabilities; it is carried by a positive P-martingale density ``D`` and the
Q-branch probability of a child is ``p_child * D_child / D_parent``.

Node values are plain ``numpy`` arrays indexed by node position.  Cash flows
live on nodes at times 1..T; the root entry of a flow array is ``nan``.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError, StructuralError, TreeValidationError

PROB_TOL = 1e-12
MARTINGALE_TOL = 1e-12

MEASURES = ("P", "Q")


def _check_measure(measure: str) -> str:
    if measure not in MEASURES:
        raise ValueError(f"measure must be 'P' or 'Q', got {measure!r}")
    return measure


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


class ScenarioTree:
    """Immutable layered tree with branch probabilities and density values.

    Parameters
    ----------
    parent : sequence of int
        Parent position of every node, ``-1`` for the root.
    prob : sequence of float
        P-probability of reaching the node from its parent (ignored at the root).
    density : sequence of float
        Value of the density process ``D_t`` at the node.
    node_ids : sequence of str, optional
        External labels; defaults to ``"n<i>"``.

    Nodes are reordered breadth-first (siblings keep their input order), so
    every time layer is a contiguous block and parents precede children.
    """

    def __init__(self, parent, prob, density, node_ids: Sequence[str] | None = None):
        parent = np.asarray(parent, dtype=int)
        prob = np.asarray(prob, dtype=float)
        density = np.asarray(density, dtype=float)
        n = len(parent)
        if n == 0:
            raise StructuralError("empty tree")
        if prob.shape != (n,) or density.shape != (n,):
            raise StructuralError("parent, prob and density must have equal length")
        if node_ids is None:
            node_ids = [f"n{i}" for i in range(n)]
        node_ids = [str(x) for x in node_ids]
        if len(node_ids) != n or len(set(node_ids)) != n:
            raise StructuralError("node ids must be unique, one per node")

        roots = np.flatnonzero(parent == -1)
        if len(roots) != 1:
            raise StructuralError(
                f"expected exactly one root, found {len(roots)}",
                {"roots": [node_ids[i] for i in roots]},
            )
        bad = np.flatnonzero((parent < -1) | (parent >= n))
        if len(bad):
            raise StructuralError(
                "orphan nodes reference a missing parent",
                {"nodes": [node_ids[i] for i in bad]},
            )

        kids: list[list[int]] = [[] for _ in range(n)]
        for i, p in enumerate(parent):
            if p >= 0:
                kids[p].append(i)

        order: list[int] = []
        depth = np.full(n, -1)
        root = int(roots[0])
        depth[root] = 0
        queue = deque([root])
        while queue:
            i = queue.popleft()
            order.append(i)
            for c in kids[i]:
                if depth[c] >= 0:
                    raise StructuralError("cycle detected", {"node": node_ids[c]})
                depth[c] = depth[i] + 1
                queue.append(c)
        if len(order) != n:
            missing = sorted(set(range(n)) - set(order))
            raise StructuralError(
                "nodes unreachable from the root (cycle or orphan)",
                {"nodes": [node_ids[i] for i in missing]},
            )

        # breadth-first order already makes layers contiguous
        pos = np.empty(n, dtype=int)
        pos[order] = np.arange(n)

        self.node_ids: tuple[str, ...] = tuple(node_ids[i] for i in order)
        self.parent = _frozen(np.array([-1 if parent[i] < 0 else pos[parent[i]] for i in order]))
        self.time = _frozen(depth[order].copy())
        self.prob = _frozen(prob[order].copy())
        self.density = _frozen(density[order].copy())
        self.children: tuple[np.ndarray, ...] = tuple(
            _frozen(np.array(sorted(pos[c] for c in kids[i]), dtype=int)) for i in order
        )
        self.horizon = int(self.time.max())
        T = self.horizon
        leaves = [i for i in range(n) if len(self.children[i]) == 0]
        uneven = [self.node_ids[i] for i in leaves if self.time[i] != T]
        if uneven:
            raise StructuralError("all leaves must sit at the horizon T", {"nodes": uneven})
        self.layers: tuple[np.ndarray, ...] = tuple(
            _frozen(np.flatnonzero(self.time == t)) for t in range(T + 1)
        )
        self.index = {nid: i for i, nid in enumerate(self.node_ids)}

        anc = np.full((n, T + 1), -1, dtype=int)
        for i in range(n):
            j = i
            while j >= 0:
                anc[i, self.time[j]] = j
                j = self.parent[j]
        self.ancestors = _frozen(anc)

        path_p = np.ones(n)
        q_branch = np.ones(n)
        path_q = np.ones(n)
        with np.errstate(divide="ignore", invalid="ignore"):
            for i in range(1, n):
                p = self.parent[i]
                path_p[i] = path_p[p] * self.prob[i]
                q_branch[i] = self.prob[i] * self.density[i] / self.density[p]
                path_q[i] = path_q[p] * q_branch[i]
        self.path_prob = _frozen(path_p)
        self.q_branch = _frozen(q_branch)
        self.path_q = _frozen(path_q)

    @property
    def n_nodes(self) -> int:
        return len(self.parent)

    @property
    def leaves(self) -> np.ndarray:
        return self.layers[self.horizon]

    def node(self, ref) -> int:
        """Resolve a node position from an int position or a string id."""
        if isinstance(ref, (int, np.integer)):
            if not 0 <= ref < self.n_nodes:
                raise IndexError(f"node position {ref} out of range")
            return int(ref)
        try:
            return self.index[str(ref)]
        except KeyError:
            raise KeyError(f"unknown node id {ref!r}") from None

    def branch_probs(self, node: int, measure: str = "P") -> np.ndarray:
        ch = self.children[node]
        return self.prob[ch] if _check_measure(measure) == "P" else self.q_branch[ch]

    def descendants_at(self, node: int, u: int) -> np.ndarray:
        t = self.time[node]
        layer = self.layers[u]
        return layer[self.ancestors[layer, t] == node]

    def subtree_nodes(self, node: int) -> np.ndarray:
        """Strict descendants of ``node`` in breadth-first order."""
        t = self.time[node]
        mask = (self.time > t) & (self.ancestors[:, t] == node)
        return np.flatnonzero(mask)

    def leaves_under(self, node: int) -> np.ndarray:
        return self.descendants_at(node, self.horizon)

    def node_weights(self, node: int, targets: np.ndarray, measure: str) -> np.ndarray:
        """Conditional probabilities of ``targets`` (descendants) given ``node``."""
        w = self.path_prob[targets] / self.path_prob[node]
        if _check_measure(measure) == "Q":
            w = w * self.density[targets] / self.density[node]
        return w

    def __repr__(self) -> str:
        return f"ScenarioTree(T={self.horizon}, nodes={self.n_nodes}, leaves={len(self.leaves)})"


@dataclass(frozen=True)
class Violation:
    node: str
    kind: str
    message: str


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "violations": [vars(v) for v in self.violations],
        }


def validate_tree(tree: ScenarioTree) -> ValidationReport:
    """Check the probability, martingale and positivity invariants.

    Structural problems (cycles, orphans) are already rejected when the tree
    is built, so this only reports measure-level violations.
    """
    report = ValidationReport()
    add = report.violations.append
    ids = tree.node_ids
    if abs(tree.density[0] - 1.0) > MARTINGALE_TOL:
        add(Violation(ids[0], "root_density", f"D_0 = {tree.density[0]!r}, expected 1"))
    for i in range(tree.n_nodes):
        if not np.isfinite(tree.density[i]) or tree.density[i] <= 0:
            add(Violation(ids[i], "density_positive", f"D = {float(tree.density[i])!r} is not positive"))
    for i in range(tree.n_nodes):
        ch = tree.children[i]
        if len(ch) == 0:
            continue
        p = tree.prob[ch]
        nonpos = [ids[c] for c in ch if not tree.prob[c] > 0]
        if nonpos:
            add(Violation(ids[i], "branch_probability", f"non-positive branch probability at {nonpos}"))
        s = float(np.sum(p))
        if abs(s - 1.0) > PROB_TOL:
            add(Violation(ids[i], "probability_sum", f"children probabilities sum to {float(s)!r}"))
        m = float(np.dot(p, tree.density[ch]))
        if abs(m - tree.density[i]) > MARTINGALE_TOL:
            add(
                Violation(
                    ids[i],
                    "martingale",
                    f"E^P[D_child] = {float(m)!r} differs from D = {float(tree.density[i])!r}",
                )
            )
    return report


def ensure_valid(tree: ScenarioTree) -> ScenarioTree:
    report = validate_tree(tree)
    if not report.ok:
        raise TreeValidationError(
            f"tree failed validation ({len(report.violations)} violations)", report.to_dict()
        )
    return tree


def conditional_expectation(
    tree: ScenarioTree, node, values: np.ndarray, u: int, measure: str = "Q"
) -> float:
    """E_t[Z | node] for Z given on the time-``u`` nodes.

    Under Q this is ``(1/D_t) E_t^P[D_u Z]``, evaluated by weighting the
    P-path probabilities with the density ratio.
    """
    node = tree.node(node)
    t = int(tree.time[node])
    if not t < u <= tree.horizon:
        raise ValueError(f"target time u={u} must satisfy {t} < u <= {tree.horizon}")
    values = np.asarray(values, dtype=float)
    targets = tree.descendants_at(node, u)
    z = values[targets]
    if not np.all(np.isfinite(z)):
        missing = [tree.node_ids[i] for i in targets[~np.isfinite(z)]]
        raise DataError("missing values on descendants", {"nodes": missing})
    return float(np.dot(tree.node_weights(node, targets, measure), z))


def expectation_via_branches(
    tree: ScenarioTree, node, values: np.ndarray, u: int, measure: str = "Q"
) -> float:
    """Same quantity as :func:`conditional_expectation`, rolled back one layer at a time.

    Uses the branch probabilities (Q-branches derived from the density) and
    never touches path probabilities, so the two routes check each other.
    """
    node = tree.node(node)
    t = int(tree.time[node])
    if not t < u <= tree.horizon:
        raise ValueError(f"target time u={u} must satisfy {t} < u <= {tree.horizon}")
    acc = np.array(values, dtype=float)
    for s in range(u - 1, t - 1, -1):
        for i in tree.layers[s]:
            ch = tree.children[i]
            acc[i] = float(np.dot(tree.branch_probs(i, measure), acc[ch]))
    return float(acc[node])


def price_all(tree: ScenarioTree, flows: np.ndarray) -> np.ndarray:
    """Q-value at every node of the flows strictly after that node's time."""
    flows = np.asarray(flows, dtype=float)
    out = np.zeros(tree.n_nodes)
    for t in range(tree.horizon - 1, -1, -1):
        for i in tree.layers[t]:
            ch = tree.children[i]
            out[i] = float(np.dot(tree.q_branch[ch], flows[ch] + out[ch]))
    return out


def price_cashflow(tree: ScenarioTree, flows: np.ndarray, node=0) -> float:
    """Market price at ``node`` of the flows paid after the node's time."""
    node = tree.node(node)
    flows = np.asarray(flows, dtype=float)
    t = int(tree.time[node])
    sub = tree.subtree_nodes(node)
    if not np.all(np.isfinite(flows[sub])):
        raise DataError("flow missing on a descendant node")
    return float(
        sum(conditional_expectation(tree, node, flows, u, "Q") for u in range(t + 1, tree.horizon + 1))
    )


@dataclass(frozen=True)
class CashflowSet:
    """Liability flow ``x_o`` and instrument flows ``x_f`` (``n_nodes x m``)."""

    x_o: np.ndarray
    x_f: np.ndarray

    def __post_init__(self):
        x_o = np.asarray(self.x_o, dtype=float)
        x_f = np.asarray(self.x_f, dtype=float)
        if x_f.ndim == 1:
            x_f = x_f.reshape(len(x_o), -1)
        object.__setattr__(self, "x_o", _frozen(x_o.copy()))
        object.__setattr__(self, "x_f", _frozen(x_f.copy()))

    @property
    def m(self) -> int:
        return self.x_f.shape[1]

    def check(self, tree: ScenarioTree) -> "CashflowSet":
        n = tree.n_nodes
        if self.x_o.shape != (n,) or self.x_f.shape[0] != n:
            raise DataError(f"flows sized for {self.x_o.shape[0]} nodes, tree has {n}")
        later = tree.time > 0
        bad = ~np.isfinite(self.x_o[later])
        if self.m:
            bad |= ~np.all(np.isfinite(self.x_f[later]), axis=1)
        if bad.any():
            ids = [tree.node_ids[i] for i in np.flatnonzero(later)[bad]]
            raise DataError("flows missing at nodes with t >= 1", {"nodes": ids})
        return self

    def replicating(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float).reshape(self.m)
        out = self.x_f @ v if self.m else np.zeros_like(self.x_o)
        out = np.array(out, dtype=float)
        out[0] = np.nan
        return out

    def residual(self, v) -> np.ndarray:
        """X = X^o - v^T X^f (``nan`` at the root)."""
        out = self.x_o - np.nan_to_num(self.replicating(v))
        out[0] = np.nan
        return out

    def lifted(self, w) -> np.ndarray:
        """w^T Z_t with Z_t = (X^o_t, -X^f_t)."""
        w = np.asarray(w, dtype=float).reshape(self.m + 1)
        out = w[0] * self.x_o - (self.x_f @ w[1:] if self.m else 0.0)
        out = np.array(out, dtype=float)
        out[0] = np.nan
        return out


def flow_array(tree: ScenarioTree, values_by_node: dict) -> np.ndarray:
    out = np.full(tree.n_nodes, np.nan)
    for k, v in values_by_node.items():
        out[tree.node(k)] = v
    return out


def _renormalize(parent: list[int], prob: list[float]) -> list[float]:
    groups: dict[int, list[int]] = {}
    for i, p in enumerate(parent):
        if p >= 0:
            groups.setdefault(p, []).append(i)
    prob = list(prob)
    for kids in groups.values():
        s = sum(prob[i] for i in kids)
        if s > 0 and abs(s - 1.0) <= PROB_TOL:
            for i in kids:
                prob[i] /= s
    return prob


def load_tree_csv(
    path: str | Path,
    discount_factors: Sequence[float] | None = None,
) -> tuple[ScenarioTree, CashflowSet]:
    """Read a tree and its flows from the node-per-row CSV format.

    Columns: ``node_id, parent_id, time, branch_prob, density, x_o, x_f_1..x_f_m``.
    If ``discount_factors`` (one per period, ``1/N_t``) is given the flows are
    taken as undiscounted and scaled at load time.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: missing header row")
        cols = [c.strip() for c in reader.fieldnames]
        required = ["node_id", "parent_id", "time", "branch_prob", "density", "x_o"]
        missing = [c for c in required if c not in cols]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        f_cols = sorted(
            (c for c in cols if c.startswith("x_f_")), key=lambda c: int(c.rsplit("_", 1)[1])
        )
        rows = [{k.strip(): (v or "").strip() for k, v in row.items()} for row in reader]

    ids = [r["node_id"] for r in rows]
    pos = {nid: i for i, nid in enumerate(ids)}
    if len(pos) != len(ids):
        raise StructuralError(f"{path}: duplicate node ids")
    parent, prob, dens, times = [], [], [], []
    x_o = np.full(len(rows), np.nan)
    x_f = np.full((len(rows), len(f_cols)), np.nan)

    def num(row, col):
        s = row.get(col, "")
        if s == "":
            return np.nan
        try:
            return float(s)
        except ValueError:
            raise DataError(f"{path}: bad number {s!r} in column {col} of node {row['node_id']}") from None

    for i, r in enumerate(rows):
        pid = r["parent_id"]
        if pid == "":
            parent.append(-1)
        elif pid in pos:
            parent.append(pos[pid])
        else:
            raise StructuralError(f"{path}: node {r['node_id']} has unknown parent {pid!r}")
        p = num(r, "branch_prob")
        prob.append(1.0 if (pid == "" and np.isnan(p)) else p)
        dens.append(num(r, "density"))
        t_raw = num(r, "time")
        if not np.isfinite(t_raw) or t_raw != int(t_raw):
            raise DataError(f"{path}: time of node {r['node_id']} must be an integer")
        times.append(int(t_raw))
        if pid != "":
            x_o[i] = num(r, "x_o")
            for k, c in enumerate(f_cols):
                x_f[i, k] = num(r, c)
        elif r.get("x_o", "") != "" or any(r.get(c, "") != "" for c in f_cols):
            raise DataError(f"{path}: root row must have empty flow columns")

    prob = _renormalize(parent, prob)
    tree = ScenarioTree(parent, prob, dens, ids)
    # map back into the tree's breadth-first order
    perm = np.array([pos[nid] for nid in tree.node_ids])
    wrong = [tree.node_ids[i] for i in range(tree.n_nodes) if times[perm[i]] != tree.time[i]]
    if wrong:
        raise DataError(f"{path}: time column disagrees with tree depth", {"nodes": wrong})
    x_o, x_f = x_o[perm], x_f[perm]
    if discount_factors is not None:
        df = np.asarray(discount_factors, dtype=float)
        if df.shape != (tree.horizon,):
            raise DataError(f"need {tree.horizon} discount factors, got {df.size}")
        scale = np.concatenate([[np.nan], df])[tree.time]
        x_o = x_o * scale
        x_f = x_f * scale[:, None]
    ensure_valid(tree)
    flows = CashflowSet(x_o, x_f).check(tree)
    return tree, flows


def write_tree_csv(path: str | Path, tree: ScenarioTree, flows: CashflowSet) -> None:
    path = Path(path)
    header = ["node_id", "parent_id", "time", "branch_prob", "density", "x_o"]
    header += [f"x_f_{k + 1}" for k in range(flows.m)]
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(tree.n_nodes):
            root = tree.parent[i] < 0
            row = [
                tree.node_ids[i],
                "" if root else tree.node_ids[tree.parent[i]],
                int(tree.time[i]),
                "" if root else repr(float(tree.prob[i])),
                repr(float(tree.density[i])),
            ]
            if root:
                row += [""] * (1 + flows.m)
            else:
                row += [repr(float(flows.x_o[i]))] + [repr(float(x)) for x in flows.x_f[i]]
            w.writerow(row)
