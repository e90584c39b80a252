"""Rule-ensemble estimation of heterogeneous treatment effects across multiple arms."""
__version__ = "0.1.0"

from ._accel import backend
from .data import Condition, Dataset, RuleTerm, Schema, load_dataset, write_dataset
from .errors import ConfigError, DataError, NumericalError, RuleHTEError
from .model import (FittedModel, base_importance, count_terms, load_model, pairwise_hte, predict_hte,
                    predict_outcome, save_model, variable_importance)
from .pipeline import RunConfig, fit_model
from .propensity import GpsModel, fit_gps
from .simbench import ScenarioSpec, generate, run_benchmark
from .transform import transform_outcomes

__all__ = [
    "Condition", "ConfigError", "DataError", "Dataset", "FittedModel", "GpsModel", "NumericalError",
    "RuleHTEError", "RuleTerm", "RunConfig", "ScenarioSpec", "Schema", "backend", "base_importance",
    "count_terms", "fit_gps", "fit_model", "generate", "load_dataset", "load_model", "pairwise_hte",
    "predict_hte", "predict_outcome", "run_benchmark", "save_model", "transform_outcomes",
    "variable_importance", "write_dataset",
]
