"""Market-consistent valuation of insurance liabilities with an owner's option to default."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    ConfigError,
    ConvergenceWarning,
    DataError,
    DegeneracyError,
    GuardError,
    LiabvalError,
    MeasurabilityError,
    ModelError,
    StructuralError,
    TreeValidationError,
)
from .risk import RiskMeasureSpec  # noqa: E402
from .tree import CashflowSet, ScenarioTree, load_tree_csv  # noqa: E402
from .valuation import backward_valuation, enumerate_optimal_stopping, optimal_default_time  # noqa: E402
from .gaussian import GaussianModel, gaussian_valuation, optimal_replication_g  # noqa: E402
from .replication import (  # noqa: E402
    cashflow_match,
    check_wellposed,
    minimize_psi,
    psi_objective,
    terminal_value_match,
)

__all__ = [
    "CashflowSet",
    "ConfigError",
    "ConvergenceWarning",
    "DataError",
    "DegeneracyError",
    "GaussianModel",
    "GuardError",
    "LiabvalError",
    "MeasurabilityError",
    "ModelError",
    "RiskMeasureSpec",
    "ScenarioTree",
    "StructuralError",
    "TreeValidationError",
    "backward_valuation",
    "cashflow_match",
    "check_wellposed",
    "enumerate_optimal_stopping",
    "gaussian_valuation",
    "load_tree_csv",
    "minimize_psi",
    "optimal_default_time",
    "optimal_replication_g",
    "psi_objective",
    "terminal_value_match",
]
