"""Engine dispatch for ``liabval run`` and ``liabval verify``."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import gaussian as gm
from . import replication as rp
from . import valuation as va
from . import verify as vf
from .config import RunConfig
from .errors import ConfigError, DataError, GuardError
from .risk import quantile_of
from .tree import load_tree_csv, price_all

FAN_LEVELS = (0.05, 0.25, 0.5, 0.75, 0.95)


@dataclass
class RunOutput:
    report: dict
    plot_header: list
    plot_rows: list = field(default_factory=list)


def _header(cfg: RunConfig, tolerances: dict) -> dict:
    return {
        "config_sha256": cfg.config_hash,
        "engine": cfg.engine,
        "risk_measure": cfg.risk_measure.to_dict(),
        "seed": cfg.seed,
        "tolerances": tolerances,
    }


def _fixed_weights(rep: dict, m: int) -> np.ndarray:
    v = np.asarray(rep["weights"], dtype=float).reshape(-1)
    if v.shape != (m,):
        raise ConfigError(f"replication.weights has {v.size} entries, expected {m}")
    return v


# --- tree -------------------------------------------------------------------


def run_tree(cfg: RunConfig, tolerances: dict, threads: int = 1) -> RunOutput:
    tree, flows = load_tree_csv(cfg.input_path("tree"), cfg.discounting)
    spec = cfg.risk_measure
    rep = cfg.replication
    v = np.zeros(flows.m)
    rep_block = None
    if rep is not None:
        if "weights" in rep:
            v = _fixed_weights(rep, flows.m)
            rep_block = {"criterion": "fixed", "v_hat": v}
        else:
            crit = rep["criterion"]
            if crit == "gaussian_optimal":
                raise ConfigError("criterion 'gaussian_optimal' needs the gaussian engine")
            res = rp.replicate(tree, flows, spec, crit, rep.get("measure", "Q"), cfg.seed, threads)
            v = res.v_hat
            rep_block = res.to_dict()

    x = flows.residual(v)
    x_r = np.nan_to_num(flows.replicating(v))
    res = va.backward_valuation(tree, x, spec)
    L = va.liability_value(tree, x_r, res)
    eta = va.cost_of_capital_rates(tree, res)
    gaps = va.submartingale_gaps(tree, res, "Q")
    price_x = float(price_all(tree, x)[0])
    price_r = float(price_all(tree, x_r)[0])

    nodes = {}
    for i in range(tree.n_nodes):
        tau = va.optimal_default_time(res, i)
        nodes[tree.node_ids[i]] = {
            "t": int(tree.time[i]),
            "v": res.v[i],
            "c": res.c[i],
            "r": res.r[i],
            "l": L[i],
            "eta": eta[i],
            "default_flag": bool(res.default_flag[i]),
            "tau_star": {tree.node_ids[k]: lab for k, lab in sorted(tau.items())} if tau else None,
        }
    inner = gaps[np.isfinite(gaps)]
    diagnostics = {
        "submartingale": {
            "min_increment": float(inner.min()) if inner.size else 0.0,
            "ok": bool(inner.size == 0 or inner.min() >= -va.ABS_TOL),
        },
        "eta_table": [
            {"node": tree.node_ids[i], "t": int(tree.time[i]), "eta": eta[i]}
            for i in range(tree.n_nodes)
            if tree.time[i] < tree.horizon
        ],
        "option_to_default_value": price_x - res.V0,
        "lipschitz_bound": va.lipschitz_bound(tree, flows.x_o, flows.x_f),
    }
    verification = {}
    if cfg.verification.get("enumeration"):
        limit = int(cfg.verification.get("max_decision_nodes", va.MAX_DECISION_NODES))
        dev = vf.enumeration_deviation(tree, x, spec, limit)
        verification["enumeration"] = {"max_deviation": dev, "passed": dev <= va.REL_TOL}

    report = _header(cfg, tolerances)
    report.update(
        {
            "root": {
                "V0": res.V0,
                "C0": res.C0,
                "R0": res.R0,
                "L0": float(L[0]),
                "market_price_replication": price_r,
                "option_to_default_value": price_x - res.V0,
            },
            "horizon": tree.horizon,
            "nodes": nodes,
            "replication": rep_block,
            "diagnostics": diagnostics,
            "verification": verification,
        }
    )
    rows = []
    weights = tree.path_prob
    for name, arr in (("V", res.v), ("C", res.c), ("R", res.r), ("L", L)):
        for t, layer in enumerate(tree.layers):
            vals = arr[layer]
            rows.append([name, t] + [quantile_of(vals, weights[layer], q) for q in FAN_LEVELS])
    header = ["series", "t"] + [f"p{int(round(100 * q)):02d}" for q in FAN_LEVELS]
    return RunOutput(report, header, rows)


# --- gaussian ---------------------------------------------------------------


def _unit(n: int) -> np.ndarray:
    e = np.zeros(n)
    e[0] = 1.0
    return e


def run_gaussian(cfg: RunConfig, tolerances: dict, threads: int = 1) -> RunOutput:
    model = gm.load_model(cfg.input_path("model"))
    spec = cfg.risk_measure
    rep = cfg.replication
    rep_block = None
    if rep is not None and "weights" not in rep:
        if rep["criterion"] not in ("gaussian_optimal", "min_expected_max_c"):
            raise ConfigError(f"criterion {rep['criterion']!r} is not available for the gaussian engine")
        fit = gm.optimal_replication_g(model, spec, seed=cfg.seed, threads=threads)
        g = fit.g_hat
        rep_block = {"criterion": "gaussian_optimal", **fit.to_dict()}
    elif rep is not None:
        v = _fixed_weights(rep, model.m)
        g = _unit(model.n)
        g[1 : model.m + 1] = -v
        rep_block = {"criterion": "fixed", "v_hat": v}
    else:
        g = np.asarray(cfg.inputs.get("exposure", _unit(model.n)), dtype=float)
    val = gm.gaussian_valuation(model, g, spec)
    liab = gm.gaussian_valuation(model, _unit(model.n), spec)
    price_o = liab.future_mean(0, measure="Q")
    price_x = val.future_mean(0, measure="Q") if model.T else 0.0
    V0 = val.V0
    T = model.T

    periods = []
    rows = []
    for t in range(T + 1):
        # E_0^P[V_t]: time-t conditional means average back to time-0 means
        v_mean = sum(val.flow_mean(0, s, measure="P") for s in range(t + 1, T + 1)) + val.KP[t] if t < T else 0.0
        r_mean = v_mean + val.C[t] if t < T else 0.0
        periods.append(
            {
                "t": t,
                "c": val.C[t],
                "KQ": val.KQ[t],
                "KP": val.KP[t],
                "eta": val.eta[t],
                "sigma_next": val.sigma[t] if t < T else None,
                "kappa_next": val.kappa[t] if t < T else None,
                "v_mean_P": v_mean,
                "r_mean_P": r_mean,
            }
        )
        rows.append([t, v_mean, val.C[t], r_mean, val.KQ[t], val.KP[t], val.eta[t]])

    verification = {}
    if cfg.verification.get("monte_carlo"):
        n_paths = int(cfg.verification.get("mc_paths", 1_000_000))
        est = gm.simulate_recursion(val, n_paths, seed=cfg.seed)
        verification["monte_carlo"] = {
            "mean": est.mean,
            "stderr": est.stderr,
            "n_paths": est.n_paths,
            "deviation": V0 - est.mean,
            "z": (V0 - est.mean) / est.stderr if est.stderr > 0 else 0.0,
        }

    report = _header(cfg, tolerances)
    report.update(
        {
            "root": {
                "V0": V0,
                "C0": val.C0,
                "R0": val.R0,
                "L0": price_o - price_x + V0,
                "market_price_replication": price_o - price_x,
                "option_to_default_value": price_x - V0,
            },
            "horizon": T,
            "exposure": val.g,
            "r0": val.r0,
            "periods": periods,
            "replication": rep_block,
            "diagnostics": {
                "eta_table": [{"t": t, "eta": val.eta[t]} for t in range(T)],
                "option_to_default_value": price_x - V0,
            },
            "verification": verification,
        }
    )
    return RunOutput(report, ["t", "V_mean_P", "C", "R_mean_P", "KQ", "KP", "eta"], rows)


# --- iid --------------------------------------------------------------------


def _marginal(d: dict):
    kind = d.get("type", "discrete")
    if kind == "discrete":
        return va.DiscreteMarginal(d["values"], d["p"], d.get("q"))
    if kind == "normal":
        if float(d["sd"]) < 0:
            raise DataError("normal marginal needs sd >= 0")
        return va.NormalMarginal(float(d["mean"]), float(d["sd"]), float(d.get("q_shift", 0.0)))
    raise DataError(f"unknown marginal type {kind!r}")


def run_iid(cfg: RunConfig, tolerances: dict, threads: int = 1) -> RunOutput:
    raw = cfg.inputs.get("marginals")
    if raw is None:
        raw = json.loads(cfg.input_path("marginals_file").read_text())
    if not isinstance(raw, list) or not raw:
        raise ConfigError("inputs.marginals must be a non-empty list")
    try:
        laws = [_marginal(d) for d in raw]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed marginal: {exc}") from None
    res = va.iid_closed_form(laws, cfg.risk_measure)
    T = len(laws)
    price_x = sum(law.q_mean() for law in laws)
    report = _header(cfg, tolerances)
    report.update(
        {
            "root": {
                "V0": res.v[0],
                "C0": res.c[0],
                "R0": res.r[0],
                "L0": res.v[0],
                "market_price_replication": 0.0,
                "option_to_default_value": price_x - res.v[0],
            },
            "horizon": T,
            "periods": [{"t": t, "v": res.v[t], "c": res.c[t], "r": res.r[t]} for t in range(T + 1)],
            "replication": None,
            "diagnostics": {"option_to_default_value": price_x - res.v[0]},
            "verification": {},
        }
    )
    rows = [[t, res.v[t], res.c[t], res.r[t]] for t in range(T + 1)]
    return RunOutput(report, ["t", "V", "C", "R"], rows)


ENGINES = {"tree": run_tree, "gaussian": run_gaussian, "iid": run_iid}


def run(cfg: RunConfig, tolerances: dict, threads: int = 1) -> RunOutput:
    return ENGINES[cfg.engine](cfg, tolerances, threads)


def run_verification(cfg: RunConfig, tolerances: dict) -> dict:
    """Oracle suites named in ``verification.suites`` plus checks on the configured input."""
    opts = cfg.verification
    suites = opts.get("suites", ["enumeration", "gaussian_iid", "replication"])
    seed = cfg.seed
    results = {}
    extra = []
    if cfg.engine == "tree":
        tree, flows = load_tree_csv(cfg.input_path("tree"), cfg.discounting)
        extra.append((tree, flows.x_o, cfg.risk_measure))
    elif cfg.engine == "gaussian":
        gm.load_model(cfg.input_path("model"))
    for name in suites:
        if name == "enumeration":
            limit = int(opts.get("max_decision_nodes", va.MAX_DECISION_NODES))
            for tree, _, _ in extra:
                n_dec = len(tree.subtree_nodes(0))
                if n_dec > limit:
                    raise GuardError(
                        f"input tree has {n_dec} decision nodes, guard is {limit}",
                        {"decision_nodes": n_dec, "guard": limit},
                    )
            res = vf.enumeration_suite(seed, int(opts.get("n_trees", 200)), extra=extra)
        elif name == "gaussian_iid":
            res = vf.gaussian_iid_suite(seed, int(opts.get("n_models", 50)))
        elif name == "replication":
            res = vf.replication_suite(seed, int(opts.get("n_trees", 50)))
        else:
            res = vf.monte_carlo_suite(seed, int(opts.get("n_models", 20)), int(opts.get("mc_paths", 1_000_000)))
        results[name] = res.to_dict()
    report = _header(cfg, tolerances)
    report["suites"] = results
    report["passed"] = all(r["passed"] for r in results.values())
    return report
