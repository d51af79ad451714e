"""Seeded random trees, flows and Gaussian models for oracle suites."""

from __future__ import annotations

import numpy as np

from .gaussian import GaussianModel
from .tree import CashflowSet, ScenarioTree


def random_tree(
    rng: np.random.Generator,
    max_horizon: int = 4,
    max_branching: int = 3,
    max_decision_nodes: int | None = 24,
    min_horizon: int = 1,
) -> ScenarioTree:
    """Tree with random branching and a random density normalised to a P-martingale.

    Draws are repeated until the number of non-root nodes fits
    ``max_decision_nodes`` (``None`` disables the cap).
    """
    while True:
        T = int(rng.integers(min_horizon, max_horizon + 1))
        parent, prob, dens = [-1], [1.0], [1.0]
        frontier = [0]
        for _ in range(T):
            nxt = []
            for node in frontier:
                k = int(rng.integers(1, max_branching + 1))
                p = rng.dirichlet(np.ones(k)) if k > 1 else np.ones(1)
                p = np.maximum(p, 0.02)
                p /= p.sum()
                ratio = rng.uniform(0.3, 1.7, size=k)
                ratio /= p @ ratio
                for j in range(k):
                    parent.append(node)
                    prob.append(float(p[j]))
                    dens.append(dens[node] * float(ratio[j]))
                    nxt.append(len(parent) - 1)
            frontier = nxt
        if max_decision_nodes is None or len(parent) - 1 <= max_decision_nodes:
            return ScenarioTree(parent, prob, dens)


def uniform_tree(horizon: int, branching: int, rng: np.random.Generator | None = None) -> ScenarioTree:
    """Full tree with equal branching; equal probabilities and D = 1 unless ``rng`` is given."""
    parent, prob, dens = [-1], [1.0], [1.0]
    frontier = [0]
    for _ in range(horizon):
        nxt = []
        for node in frontier:
            if rng is None:
                p = np.full(branching, 1.0 / branching)
                ratio = np.ones(branching)
            else:
                p = np.maximum(rng.dirichlet(np.ones(branching)), 0.02)
                p /= p.sum()
                ratio = rng.uniform(0.5, 1.5, size=branching)
                ratio /= p @ ratio
            for j in range(branching):
                parent.append(node)
                prob.append(float(p[j]))
                dens.append(dens[node] * float(ratio[j]))
                nxt.append(len(parent) - 1)
        frontier = nxt
    return ScenarioTree(parent, prob, dens)


def random_flows(rng: np.random.Generator, tree: ScenarioTree, m: int = 0, integer: bool | None = None) -> CashflowSet:
    """Liability and instrument flows; integer-valued draws provoke ties in quantiles."""
    if integer is None:
        integer = bool(rng.integers(0, 2))
    shape = (tree.n_nodes, m + 1)
    z = rng.integers(-3, 4, size=shape).astype(float) if integer else rng.normal(size=shape)
    z[0] = np.nan
    return CashflowSet(z[:, 0], z[:, 1:])


def with_risk_free_instrument(
    rng: np.random.Generator, tree: ScenarioTree, flows: CashflowSet
) -> tuple[CashflowSet, int]:
    """Append an instrument whose flows depend on time only; returns its column."""
    amounts = rng.uniform(0.5, 2.0, size=tree.horizon + 1)
    col = amounts[tree.time]
    col[0] = np.nan
    x_f = np.column_stack([flows.x_f, col]) if flows.m else col[:, None]
    return CashflowSet(flows.x_o, x_f), x_f.shape[1] - 1


def random_gaussian_model(
    rng: np.random.Generator,
    n: int,
    T: int,
    m: int = 0,
    block_diagonal: bool = False,
    lam_scale: float = 0.3,
) -> GaussianModel:
    A = rng.normal(size=(T, n))
    B = np.zeros((T, T, n, n))
    for t in range(T):
        B[t, t] = np.eye(n) + 0.4 * rng.normal(size=(n, n))
        while abs(np.linalg.det(B[t, t])) < 0.1:
            B[t, t] = np.eye(n) + 0.4 * rng.normal(size=(n, n))
        if not block_diagonal:
            for s in range(t):
                B[t, s] = 0.5 * rng.normal(size=(n, n))
    lam = lam_scale * rng.normal(size=(T, n))
    return GaussianModel(A, B, lam, m)
