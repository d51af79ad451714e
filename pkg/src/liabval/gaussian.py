"""Closed-form valuation when all flows are linear in Gaussian shocks.

The state vector is ``G_t = A_t + sum_{s<=t} B_{t,s} eps_s`` with independent
standard normal ``eps_s`` under P.  Under Q, ``eps_s`` has mean ``lambda_s``.
A residual flow is ``X_t = g_t^T G_t``.

Arrays are indexed from zero: ``A[t-1]``, ``B[t-1, s-1]`` and ``lam[t-1]``
hold the objects for periods ``t, s = 1..T``.
"""

from __future__ import annotations

import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import minimize
from scipy.stats import qmc

from .errors import ConvergenceWarning, DataError, ModelError
from .risk import RiskMeasureSpec, norm_cdf, norm_pdf, r0

DET_TOL = 1e-10
TIE_TOL = 1e-9
XATOL = 1e-9
FATOL = 1e-12
N_RESTARTS = 8
N_PROBES = 1000


@dataclass(frozen=True)
class GaussianModel:
    """Drifts ``A`` (T, n), loadings ``B`` (T, T, n, n) and Girsanov vectors ``lam`` (T, n).

    ``m`` is the number of replication instruments: component 0 is the
    liability flow, components ``1..m`` are instruments, the rest is side
    information.
    """

    A: np.ndarray
    B: np.ndarray
    lam: np.ndarray
    m: int = 0

    def __post_init__(self):
        A = np.array(self.A, dtype=float)
        B = np.array(self.B, dtype=float)
        lam = np.array(self.lam, dtype=float)
        if A.ndim != 2:
            raise ModelError("A must be a T x n array")
        T, n = A.shape
        if B.shape != (T, T, n, n):
            raise ModelError(f"B must have shape {(T, T, n, n)}, got {B.shape}")
        if lam.shape != (T, n):
            raise ModelError(f"lambda must have shape {(T, n)}, got {lam.shape}")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B)) and np.all(np.isfinite(lam))):
            raise ModelError("model arrays must be finite")
        if not 0 <= self.m < n:
            raise ModelError(f"instrument count m={self.m} must satisfy 0 <= m < n={n}")
        for t in range(T):
            if np.any(B[t, t + 1 :] != 0.0):
                raise ModelError(f"loading B[{t + 1}, s] must vanish for s > {t + 1}")
            diag = B[t, t]
            scale = np.abs(diag).max(axis=1)
            if np.any(scale == 0.0) or abs(np.linalg.det(diag / scale[:, None])) <= DET_TOL:
                raise ModelError(f"B[{t + 1},{t + 1}] is singular")
        for name, arr in (("A", A), ("B", B), ("lam", lam)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def T(self) -> int:
        return self.A.shape[0]

    @property
    def n(self) -> int:
        return self.A.shape[1]

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianModel":
        try:
            n, T = int(d["n"]), int(d["T"])
            m = int(d.get("m", 0))
            A = np.asarray(d["A"], dtype=float).reshape(T, n)
            lam = np.asarray(d.get("lambda", np.zeros((T, n))), dtype=float).reshape(T, n)
            B = np.zeros((T, T, n, n))
            for entry in d.get("B", []):
                t, s = int(entry["t"]), int(entry["s"])
                if not 1 <= s <= t <= T:
                    raise ModelError(f"loading index (t={t}, s={s}) outside 1 <= s <= t <= {T}")
                B[t - 1, s - 1] = np.asarray(entry["matrix"], dtype=float).reshape(n, n)
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelError(f"malformed Gaussian model: {exc}") from None
        return cls(A, B, lam, m)

    def to_dict(self) -> dict:
        T = self.T
        blocks = [
            {"t": t + 1, "s": s + 1, "matrix": self.B[t, s].tolist()}
            for t in range(T)
            for s in range(t + 1)
            if np.any(self.B[t, s])
        ]
        return {
            "n": self.n,
            "T": T,
            "m": self.m,
            "A": self.A.tolist(),
            "B": blocks,
            "lambda": self.lam.tolist(),
        }


def load_model(path) -> GaussianModel:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ModelError(f"{path}: not valid JSON ({exc})") from None
    return GaussianModel.from_dict(data)


def _exposures(model: GaussianModel, g) -> np.ndarray:
    g = np.asarray(g, dtype=float)
    if g.shape == (model.n,):
        g = np.broadcast_to(g, (model.T, model.n))
    if g.shape != (model.T, model.n):
        raise DataError(f"exposure must have shape ({model.n},) or ({model.T}, {model.n}), got {g.shape}")
    return g


def measure_shift(model: GaussianModel, u: int, v: int) -> np.ndarray:
    """``E_u^Q[G_v] - E_u^P[G_v] = sum_{s=u+1}^{v} B_{v,s} lambda_s``."""
    if not 0 <= u < v <= model.T:
        raise ValueError(f"need 0 <= u < v <= T, got u={u}, v={v}")
    return sum((model.B[v - 1, s - 1] @ model.lam[s - 1] for s in range(u + 1, v + 1)), np.zeros(model.n))


def positive_part_gaussian(a, sigma):
    """``E[(a - sigma e)_+]`` for standard normal ``e``.

    Vectorised over matching shapes; the ``sigma = 0`` limit is ``max(a, 0)``.
    """
    a = np.asarray(a, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma < 0):
        raise ValueError("sigma must be non-negative")
    a, sigma = np.broadcast_arrays(a, sigma)
    shape = a.shape
    a = a.ravel()
    sigma = sigma.ravel()
    out = np.maximum(a, 0.0)
    pos = sigma > 0
    if np.any(pos):
        z = a[pos] / sigma[pos]
        out[pos] = a[pos] * norm_cdf(z) + sigma[pos] * norm_pdf(z)
    out = out.reshape(shape)
    return float(out) if out.ndim == 0 else out


def _loadings(model: GaussianModel, g: np.ndarray) -> np.ndarray:
    """``w[s-1] = sum_{j>=s} B_{j,s}^T g_j``: exposure of the total future flow to ``eps_s``."""
    T = model.T
    w = np.zeros((T, model.n))
    for s in range(T):
        for j in range(s, T):
            w[s] += model.B[j, s].T @ g[j]
    return w


def sigma_schedule(model: GaussianModel, g) -> np.ndarray:
    """``sigma_s``, the conditional standard deviation resolved at period ``s``."""
    g = _exposures(model, g)
    return np.linalg.norm(_loadings(model, g), axis=1)


def _kappa(model: GaussianModel, g: np.ndarray) -> np.ndarray:
    return np.einsum("sn,sn->s", _loadings(model, g), model.lam)


@dataclass
class GaussianValuation:
    """Deterministic parts of the value sequences, indexed ``t = 0..T``.

    ``V_t = sum_{s>t} E_t^Q[X_s] + KQ[t] = sum_{s>t} E_t^P[X_s] + KP[t]``;
    ``C`` and ``eta`` are deterministic, ``eta[t]`` is ``nan`` when ``C[t] = 0``.
    """

    model: GaussianModel
    g: np.ndarray
    spec: RiskMeasureSpec
    r0: float
    sigma: np.ndarray  # sigma[s-1] for s = 1..T
    kappa: np.ndarray
    C: np.ndarray
    KQ: np.ndarray
    KP: np.ndarray
    eta: np.ndarray

    def flow_mean(self, t: int, s: int, eps_history=None, measure: str = "P") -> float:
        """``E_t[X_s]`` given shocks ``eps_1..eps_t`` (rows of ``eps_history``)."""
        model = self.model
        if not 0 <= t < s <= model.T:
            raise ValueError(f"need 0 <= t < s <= T, got t={t}, s={s}")
        eps = np.zeros((t, model.n)) if eps_history is None else np.asarray(eps_history, dtype=float)
        mean = model.A[s - 1] + sum((model.B[s - 1, u] @ eps[u] for u in range(t)), np.zeros(model.n))
        if measure == "Q":
            mean = mean + measure_shift(model, t, s)
        elif measure != "P":
            raise ValueError(f"measure must be 'P' or 'Q', got {measure!r}")
        return float(self.g[s - 1] @ mean)

    def future_mean(self, t: int, eps_history=None, measure: str = "P") -> float:
        return sum(self.flow_mean(t, s, eps_history, measure) for s in range(t + 1, self.model.T + 1))

    def value(self, t: int, eps_history=None, measure: str = "Q") -> float:
        """``V_t`` on the history ``eps_history``, via the chosen decomposition."""
        if t == self.model.T:
            return 0.0
        k = self.KQ[t] if measure == "Q" else self.KP[t]
        return self.future_mean(t, eps_history, measure) + float(k)

    def requirement(self, t: int, eps_history=None) -> float:
        if t == self.model.T:
            return 0.0
        return self.value(t, eps_history) + float(self.C[t])

    @property
    def V0(self) -> float:
        return self.value(0)

    @property
    def C0(self) -> float:
        return float(self.C[0])

    @property
    def R0(self) -> float:
        return self.requirement(0)


def gaussian_valuation(model: GaussianModel, g, spec: RiskMeasureSpec) -> GaussianValuation:
    """Value sequences for ``X_t = g_t^T G_t``; ``g`` is ``(n,)`` or ``(T, n)``."""
    g = _exposures(model, g)
    T = model.T
    rr = r0(spec)
    sig = sigma_schedule(model, g)
    kap = _kappa(model, g)
    a = sig * rr
    owner = np.atleast_1d(positive_part_gaussian(a - kap, sig))
    unshifted = np.atleast_1d(positive_part_gaussian(a, sig))
    C = np.zeros(T + 1)
    KQ = np.zeros(T + 1)
    KP = np.zeros(T + 1)
    eta = np.full(T + 1, np.nan)
    for t in range(T - 1, -1, -1):
        C[t] = owner[t]
        KP[t] = KP[t + 1] + a[t] - owner[t]
        KQ[t] = KQ[t + 1] + a[t] - kap[t] - owner[t]
        if owner[t] > 0:
            eta[t] = unshifted[t] / owner[t] - 1.0
    if not (np.all(np.isfinite(C)) and np.all(np.isfinite(KQ))):
        raise ModelError("non-finite valuation output")
    return GaussianValuation(model, g, spec, rr, sig, kap, C, KQ, KP, eta)


# --- optimal static replication --------------------------------------------


def _exposure_from_v(model: GaussianModel, v) -> np.ndarray:
    g = np.zeros(model.n)
    g[0] = 1.0
    g[1 : model.m + 1] = -np.asarray(v, dtype=float)
    return g


def replication_objective(model: GaussianModel, spec: RiskMeasureSpec, v) -> float:
    """``sum_t C_t`` for the residual ``X^o - v^T X^f`` held to run-off."""
    g = np.broadcast_to(_exposure_from_v(model, v), (model.T, model.n))
    w = _loadings(model, g)
    sig = np.linalg.norm(w, axis=1)
    kap = np.einsum("sn,sn->s", w, model.lam)
    val = float(np.sum(positive_part_gaussian(sig * r0(spec) - kap, sig)))
    if not np.isfinite(val):
        raise ModelError("objective is not finite", {"v": np.asarray(v, dtype=float).tolist()})
    return val


@dataclass
class ReplicationFit:
    g_hat: np.ndarray
    v_hat: np.ndarray
    objective: float
    L0: float
    KQ0: float
    ties: list
    probe_min: float

    def to_dict(self) -> dict:
        return {
            "g_hat": self.g_hat.tolist(),
            "v_hat": self.v_hat.tolist(),
            "objective": self.objective,
            "L0": self.L0,
            "KQ0": self.KQ0,
            "ties": [t.tolist() for t in self.ties],
            "probe_min": self.probe_min,
        }


def sobol_points(d: int, n: int, seed: int) -> np.ndarray:
    """First ``n`` points of a scrambled Sobol sequence in ``[0, 1)^d``."""
    k = max(0, int(np.ceil(np.log2(max(n, 1)))))
    return qmc.Sobol(d=d, scramble=True, seed=seed).random_base2(k)[:n]


def _nelder_mead(fun, x0, scale):
    d = len(x0)
    simplex = np.vstack([x0, x0 + scale * np.eye(d)])
    res = minimize(
        fun,
        x0,
        method="Nelder-Mead",
        options={"xatol": XATOL, "fatol": FATOL, "initial_simplex": simplex, "maxiter": 20000 * d, "maxfev": 40000 * d},
    )
    return np.asarray(res.x, dtype=float), float(res.fun), bool(res.success)


def _hedge_seed(model: GaussianModel) -> np.ndarray:
    """Least-squares hedge of the total-flow loadings: a cheap warm start."""
    m = model.m
    g_o = np.zeros(model.n)
    g_o[0] = 1.0
    target = _loadings(model, np.broadcast_to(g_o, (model.T, model.n))).ravel()
    cols = []
    for k in range(1, m + 1):
        e = np.zeros(model.n)
        e[k] = 1.0
        cols.append(_loadings(model, np.broadcast_to(e, (model.T, model.n))).ravel())
    M = np.column_stack(cols)
    sol, *_ = np.linalg.lstsq(M, target, rcond=None)
    return sol


def optimal_replication_g(
    model: GaussianModel,
    spec: RiskMeasureSpec,
    seed: int = 0,
    threads: int = 1,
    n_restarts: int = N_RESTARTS,
    n_probes: int = N_PROBES,
) -> ReplicationFit:
    """Static instrument weights minimising the total cost of capital.

    Restarted Nelder-Mead from quasi-random simplexes; the result is then
    compared with ``n_probes`` Sobol points around it and re-polished from
    any probe that does better.
    """
    m = model.m
    if m < 1:
        raise ModelError("optimal replication needs at least one instrument (m >= 1)")

    def f(v):
        return replication_objective(model, spec, v)

    base = _hedge_seed(model)
    radius = max(1.0, 2.0 * float(np.abs(base).max()))
    starts = [base, np.zeros(m)] + list(base + radius * (2.0 * sobol_points(m, n_restarts, seed) - 1.0))

    def run(x0):
        x, fx, ok = _nelder_mead(f, x0, 0.1 * radius)
        # restart from the end point; cheap insurance against simplex collapse
        x2, fx2, ok2 = _nelder_mead(f, x, 0.01 * radius)
        return (x2, fx2, ok or ok2) if fx2 <= fx else (x, fx, ok)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, starts))
    else:
        results = [run(x0) for x0 in starts]

    best_x, best_f, _ = min(results, key=lambda r: r[1])
    if not any(ok for _, _, ok in results):
        warnings.warn("Nelder-Mead did not converge from any start", ConvergenceWarning, stacklevel=2)

    span = max(1.0, float(np.abs(best_x).max()))
    probes = best_x + span * (2.0 * sobol_points(m, n_probes, seed + 1) - 1.0)
    probe_vals = np.array([f(p) for p in probes])
    j = int(np.argmin(probe_vals))
    if probe_vals[j] < best_f:
        x, fx, _ = _nelder_mead(f, probes[j], 0.01 * span)
        best_x, best_f = (x, fx) if fx < probe_vals[j] else (probes[j], float(probe_vals[j]))
        if best_f > probe_vals.min():
            warnings.warn("probe point beat the optimizer", ConvergenceWarning, stacklevel=2)

    ties = []
    for x, fx, _ in results:
        if abs(fx - best_f) <= TIE_TOL and np.linalg.norm(x - best_x) > 1e-6:
            if all(np.linalg.norm(x - t) > 1e-6 for t in ties):
                ties.append(x)

    g_hat = _exposure_from_v(model, best_x)
    val = gaussian_valuation(model, g_hat, spec)
    g_o = np.zeros(model.n)
    g_o[0] = 1.0
    liab = gaussian_valuation(model, g_o, spec)
    L0 = liab.future_mean(0, measure="Q") + float(val.KQ[0])
    return ReplicationFit(g_hat, best_x, float(best_f), L0, float(val.KQ[0]), ties, float(probe_vals.min()))


# --- simulation -------------------------------------------------------------


@dataclass
class MonteCarloEstimate:
    mean: float
    stderr: float
    n_paths: int


def simulate_recursion(
    val: GaussianValuation,
    n_paths: int = 1_000_000,
    seed: int = 0,
    chunk: int = 250_000,
    control_variate: bool = True,
) -> MonteCarloEstimate:
    """Monte Carlo of the default-and-payoff procedure along simulated paths.

    Shocks are drawn under Q.  On each path the owner defaults at the first
    ``s`` with ``R_{s-1} - X_s - V_s < 0``; the policyholders then collect the
    flows paid before default plus ``R_{tau-1}``.  The sample mean estimates
    ``V_0``.

    With ``control_variate`` the total flow ``sum_s X_s``, whose Q-mean is
    known exactly, is subtracted path by path; what remains is non-zero only
    on paths that default.
    """
    model = val.model
    T, n = model.T, model.n
    rng = np.random.default_rng(seed)
    total = 0.0
    total_sq = 0.0
    done = 0
    g = val.g
    # precompute linear maps: X_s = g_s^T A_s + sum_u c[s,u]^T eps_u
    coef = np.zeros((T, T, n))
    for s in range(T):
        for u in range(s + 1):
            coef[s, u] = model.B[s, u].T @ g[s]
    drift = np.einsum("tn,tn->t", g, model.A)
    while done < n_paths:
        k = min(chunk, n_paths - done)
        eps = rng.standard_normal((k, T, n)) + model.lam[None]
        x = drift[None, :] + np.einsum("sun,kun->ks", coef, eps)
        # P-conditional means of the remaining flows after each period
        v = np.zeros((k, T + 1))
        for t in range(T):
            rest = np.zeros(k)
            for s in range(t + 1, T):
                rest += drift[s] + np.einsum("un,kun->k", coef[s, : t + 1], eps[:, : t + 1])
            v[:, t + 1] = rest + val.KP[t + 1]
        v[:, 0] = val.future_mean(0, measure="P") + val.KP[0]
        req = v[:, :T] + val.C[None, :T]
        payoff = np.zeros(k)
        alive = np.ones(k, dtype=bool)
        for s in range(1, T + 1):
            default = alive & (req[:, s - 1] - x[:, s - 1] - v[:, s] < 0)
            payoff[default] += req[default, s - 1]
            alive &= ~default
            payoff[alive] += x[alive, s - 1]
        if control_variate:
            payoff -= x.sum(axis=1)
        total += payoff.sum()
        total_sq += np.square(payoff).sum()
        done += k
    mean = total / n_paths
    var = max(total_sq / n_paths - mean**2, 0.0) * n_paths / max(n_paths - 1, 1)
    if control_variate:
        mean += val.future_mean(0, measure="Q")
    return MonteCarloEstimate(float(mean), float(np.sqrt(var / n_paths)), n_paths)


def positive_part_mc(a: float, sigma: float, n: int = 10_000_000, seed: int = 0) -> MonteCarloEstimate:
    """Sampled ``E[(a - sigma e)_+]`` using ``a - sigma e`` as control variate.

    ``(a - sigma e)_+ = (a - sigma e) + (sigma e - a)_+`` and the first term
    has known mean ``a``, so only the small tail term is sampled.
    """
    rng = np.random.default_rng(seed)
    tail = np.maximum(sigma * rng.standard_normal(n) - a, 0.0)
    return MonteCarloEstimate(a + float(tail.mean()), float(tail.std(ddof=1) / np.sqrt(n)), n)


__all__ = [
    "GaussianModel",
    "GaussianValuation",
    "load_model",
    "measure_shift",
    "positive_part_gaussian",
    "sigma_schedule",
    "gaussian_valuation",
    "replication_objective",
    "optimal_replication_g",
    "simulate_recursion",
    "positive_part_mc",
]
