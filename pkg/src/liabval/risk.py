"""Spectral conditional risk measures evaluated exactly on tree nodes.

Orientation: every function here returns ``rho_t(-Y)`` for a liability-side
variable ``Y`` given on the children of a node, i.e. a mixture of lower
quantiles of ``Y`` under the conditional P-distribution

    rho_t(-Y) = int_0^1 F_Y^{-1}(v) dM(v),   F^{-1}(v) = min{y : F(y) >= v}.

The capital requirement of the valuation recursion is ``R_t = rho_t(-(X + V))``.
Quantile functions of discrete laws are step functions, so Expected
Shortfall is integrated exactly rather than estimated from samples.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
from scipy import special

from .errors import StructuralError
from .tree import ScenarioTree

WEIGHT_TOL = 1e-12
# slack on the cumulative-probability test; keeps 0.1+0.2 >= 0.3 honest
CUM_TOL = 1e-12

KINDS = ("var", "es", "mixture")


@dataclass(frozen=True)
class RiskMeasureSpec:
    """Mixing distribution ``M`` on (0, 1).

    ``kind="var"``: point mass at ``1 - u``; ``kind="es"``: density ``1/u`` on
    ``(1 - u, 1)``; ``kind="mixture"``: atoms ``(level, weight)``.
    """

    kind: str
    u: float | None = None
    atoms: tuple[tuple[float, float], ...] = field(default=())

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown risk measure kind {self.kind!r}")
        if self.kind in ("var", "es"):
            if self.u is None or not 0.0 < float(self.u) < 1.0:
                raise ValueError(f"{self.kind} needs u in (0, 1), got {self.u!r}")
            object.__setattr__(self, "u", float(self.u))
            object.__setattr__(self, "atoms", ())
        else:
            atoms = tuple((float(q), float(w)) for q, w in self.atoms)
            if not atoms:
                raise ValueError("mixture needs at least one atom")
            for q, w in atoms:
                if not 0.0 < q < 1.0:
                    raise ValueError(f"mixture level {q!r} outside (0, 1)")
                if not w > 0.0:
                    raise ValueError(f"mixture weight {w!r} must be positive")
            total = sum(w for _, w in atoms)
            if abs(total - 1.0) > WEIGHT_TOL:
                raise ValueError(f"mixture weights sum to {total!r}, expected 1")
            object.__setattr__(self, "atoms", atoms)
            object.__setattr__(self, "u", None)

    @classmethod
    def var(cls, u: float) -> "RiskMeasureSpec":
        return cls("var", u=u)

    @classmethod
    def point_mass(cls, level: float) -> "RiskMeasureSpec":
        return cls("var", u=1.0 - level)

    @classmethod
    def es(cls, u: float) -> "RiskMeasureSpec":
        return cls("es", u=u)

    @classmethod
    def mixture(cls, atoms: Iterable[tuple[float, float]]) -> "RiskMeasureSpec":
        return cls("mixture", atoms=tuple(atoms))

    @classmethod
    def from_dict(cls, d: dict) -> "RiskMeasureSpec":
        kind = d.get("kind")
        if kind == "mixture":
            return cls.mixture(tuple(a) for a in d.get("atoms", ()))
        return cls(kind, u=d.get("u"))

    def to_dict(self) -> dict:
        if self.kind == "mixture":
            return {"kind": "mixture", "atoms": [list(a) for a in self.atoms]}
        return {"kind": self.kind, "u": self.u}

    def quantile_atoms(self) -> tuple[tuple[float, float], ...]:
        """Point-mass part of ``M`` as (level, weight); empty for ES."""
        if self.kind == "var":
            return ((1.0 - self.u, 1.0),)
        if self.kind == "mixture":
            return self.atoms
        return ()


def _sort_children(values, probs):
    y = np.asarray(values, dtype=float)
    squeeze = y.ndim == 1
    if squeeze:
        y = y[:, None]
    if y.shape[0] == 0:
        raise ValueError("node has no children")
    order = np.argsort(y, axis=0, kind="stable")
    ys = np.take_along_axis(y, order, axis=0)
    ps = np.asarray(probs, dtype=float)[order]
    cum = np.cumsum(ps, axis=0)
    cum[-1] = 1.0
    return ys, ps, cum, squeeze


def _out(x, squeeze):
    return float(x[0]) if squeeze else x


def quantile_of(values, probs, q: float):
    """Lower quantile ``min{y : P(Y <= y) >= q}`` of a discrete law.

    ``values`` may be ``(k,)`` or ``(k, batch)``; probabilities are ``(k,)``.
    """
    if not 0.0 < q < 1.0:
        raise ValueError(f"quantile level must lie in (0, 1), got {q!r}")
    ys, _, cum, squeeze = _sort_children(values, probs)
    idx = np.argmax(cum >= q - CUM_TOL, axis=0)
    return _out(ys[idx, np.arange(ys.shape[1])], squeeze)


def upper_tail_mean(values, probs, u: float):
    """``(1/u) * int_{1-u}^1 F^{-1}(v) dv`` integrated over the quantile steps."""
    if not 0.0 < u < 1.0:
        raise ValueError(f"tail size must lie in (0, 1), got {u!r}")
    ys, _, cum, squeeze = _sort_children(values, probs)
    prev = np.vstack([np.zeros((1, cum.shape[1])), cum[:-1]])
    a = 1.0 - u
    overlap = np.clip(cum - np.maximum(prev, a), 0.0, None)
    return _out(np.sum(ys * overlap, axis=0) / u, squeeze)


def rho_values(values, probs, spec: RiskMeasureSpec):
    """``rho(-Y)`` for ``Y`` with the given child values and P-branch probabilities."""
    if spec.kind == "es":
        return upper_tail_mean(values, probs, spec.u)
    total = 0.0
    for q, w in spec.quantile_atoms():
        total = total + w * quantile_of(values, probs, q)
    return total


def conditional_quantile(tree: ScenarioTree, node, values, q: float) -> float:
    """P-conditional lower quantile at ``node`` of values given on its children."""
    node = tree.node(node)
    ch = tree.children[node]
    if len(ch) == 0:
        raise ValueError("leaf node has no conditional distribution")
    return quantile_of(np.asarray(values, dtype=float)[ch], tree.prob[ch], q)


def rho(tree: ScenarioTree, node, values, spec: RiskMeasureSpec) -> float:
    """``rho_t(-Y)`` at ``node`` where ``values`` holds ``Y`` on the children."""
    node = tree.node(node)
    ch = tree.children[node]
    if len(ch) == 0:
        raise StructuralError(f"node {tree.node_ids[node]} has no children")
    return rho_values(np.asarray(values, dtype=float)[ch], tree.prob[ch], spec)


def norm_cdf(x):
    return special.ndtr(x)


def norm_pdf(x):
    return np.exp(-0.5 * np.square(x)) / np.sqrt(2.0 * np.pi)


def norm_ppf(p):
    return special.ndtri(p)


def r0(spec: RiskMeasureSpec) -> float:
    """``int Phi^{-1} dM``: the standard-normal value of the risk measure."""
    if spec.kind == "es":
        return float(norm_pdf(norm_ppf(1.0 - spec.u)) / spec.u)
    return float(sum(w * norm_ppf(q) for q, w in spec.quantile_atoms()))
