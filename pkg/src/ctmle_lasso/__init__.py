"""Collaborative TMLE with a lasso propensity score, its baselines and an hdPS screen."""

from .data import Dataset, DataError, load_dataset, make_folds, save_dataset, scale_outcome
from .lasso import PS_BOUNDS, cv_deviance, lasso_logistic_path, predict_ps
from .estimators import AteEstimate, OutcomeFit, fit_outcome_mainterm
from .tmle import fluctuate, tmle
from .ctmle import ctmle0, ctmle1
from .roster import ESTIMATORS, estimate_roster

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "DataError",
    "load_dataset",
    "save_dataset",
    "make_folds",
    "scale_outcome",
    "PS_BOUNDS",
    "lasso_logistic_path",
    "cv_deviance",
    "predict_ps",
    "AteEstimate",
    "OutcomeFit",
    "fit_outcome_mainterm",
    "fluctuate",
    "tmle",
    "ctmle1",
    "ctmle0",
    "ESTIMATORS",
    "estimate_roster",
]
