"""Run configuration: a JSON document resolved relative to its own location."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .replication import CRITERIA
from .risk import RiskMeasureSpec

ENGINES = ("tree", "gaussian", "iid")
GAUSSIAN_CRITERIA = ("gaussian_optimal",)
SUITES = ("enumeration", "gaussian_iid", "replication", "monte_carlo")


@dataclass(frozen=True)
class RunConfig:
    engine: str
    inputs: dict
    risk_measure: RiskMeasureSpec
    base_dir: Path
    config_hash: str
    replication: dict | None = None
    discounting: list | None = None
    output_dir: Path = Path("liabval-out")
    seed: int = 0
    verification: dict = field(default_factory=dict)

    def input_path(self, key: str) -> Path:
        raw = self.inputs.get(key)
        if raw is None:
            raise ConfigError(f"engine {self.engine!r} needs inputs.{key}")
        path = (self.base_dir / raw).resolve()
        if not path.exists():
            raise ConfigError(f"input file not found: {raw}", {"path": str(path)})
        return path


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


def load_config(path, output_dir=None, seed=None) -> RunConfig:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    _require(isinstance(data, dict), "config must be a JSON object")

    engine = data.get("engine")
    _require(engine in ENGINES, f"engine must be one of {ENGINES}, got {engine!r}")
    inputs = data.get("inputs", {})
    _require(isinstance(inputs, dict), "inputs must be an object")
    try:
        spec = RiskMeasureSpec.from_dict(data.get("risk_measure", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid risk_measure: {exc}") from None

    rep = data.get("replication")
    if rep is not None:
        _require(isinstance(rep, dict), "replication must be an object")
        crit = rep.get("criterion")
        if "weights" not in rep:
            allowed = CRITERIA + GAUSSIAN_CRITERIA
            _require(crit in allowed, f"replication.criterion must be one of {allowed}, got {crit!r}")
        _require(rep.get("measure", "Q") in ("P", "Q"), "replication.measure must be 'P' or 'Q'")

    disc = data.get("discounting")
    if disc is not None:
        factors = disc.get("factors") if isinstance(disc, dict) else disc
        _require(isinstance(factors, list), "discounting.factors must be a list")
        disc = [float(x) for x in factors]

    base = path.resolve().parent
    out = Path(output_dir) if output_dir is not None else base / data.get("output_dir", "liabval-out")
    run_seed = int(seed if seed is not None else data.get("seed", 0))
    verification = data.get("verification", {}) or {}
    _require(isinstance(verification, dict), "verification must be an object")
    for suite in verification.get("suites", []):
        _require(suite in SUITES, f"unknown verification suite {suite!r}; expected one of {SUITES}")

    return RunConfig(
        engine=engine,
        inputs=inputs,
        risk_measure=spec,
        base_dir=base,
        config_hash=hashlib.sha256(raw).hexdigest(),
        replication=rep,
        discounting=disc,
        output_dir=out,
        seed=run_seed,
        verification=verification,
    )
