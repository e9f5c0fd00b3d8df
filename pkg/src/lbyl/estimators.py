"""scikit-learn style wrappers.

The pruning and restoration estimators take a :class:`NetworkModel` where
scikit-learn would take a feature matrix; ``fit`` computes the plan and
coefficients from weights alone and ``transform`` returns a new model.
:class:`CompensationRegressor` exposes the per-filter regression on plain
arrays.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .harness import make_plan
from .network import NetworkModel
from .pruning import PruningPlan, apply_pruning
from .restoration import Hyperparams, ScaledBasis, restore, solve_coefficients


def _check_model(model) -> NetworkModel:
    if not isinstance(model, NetworkModel):
        raise TypeError(f"expected a NetworkModel, got {type(model).__name__}")
    return model


def _plan_for(est, model) -> PruningPlan:
    if est.plan is not None:
        plan = est.plan if isinstance(est.plan, PruningPlan) else PruningPlan.from_dict(est.plan)
        plan.validate(model)
        return plan
    return make_plan(model, est.scheme, est.criterion, est.ratio)


class FilterPruner(TransformerMixin, BaseEstimator):
    """Select filters to drop; ``transform`` removes them without compensation."""

    def __init__(self, criterion="l2", ratio=0.1, scheme="layerwise"):
        self.criterion = criterion
        self.ratio = ratio
        self.scheme = scheme

    def fit(self, model, y=None):
        model = _check_model(model)
        self.plan_ = make_plan(model, self.scheme, self.criterion, self.ratio)
        self.n_pruned_ = {idx: len(p) for idx, p in self.plan_.layers.items()}
        return self

    def transform(self, model):
        check_is_fitted(self, "plan_")
        return apply_pruning(_check_model(model), self.plan_)


class _RestorerBase(TransformerMixin, BaseEstimator):
    method = "lbyl"

    def _hyper(self) -> Hyperparams:
        return Hyperparams()

    def _nm_args(self):
        return 0.85, 0.1

    def fit(self, model, y=None):
        model = _check_model(model)
        self.plan_ = _plan_for(self, model)
        result = restore(model, self.plan_, self.method, self._hyper(), *self._nm_args())
        self.delivery_matrices_ = result.deliveries
        self.coefficients_ = result.coefficients
        self.restored_model_ = result.model
        return self

    def transform(self, model):
        check_is_fitted(self, "delivery_matrices_")
        result = restore(_check_model(model), self.plan_, self.method, self._hyper(), *self._nm_args())
        return result.model


class LBYLRestorer(_RestorerBase):
    """Closed-form many-to-one compensation.

    Parameters
    ----------
    lambda1, lambda2 : float
        Weights of the BN offset term and of the ridge penalty.
    plan : PruningPlan or dict, optional
        Fixed plan; when omitted one is built from ``criterion``, ``ratio``
        and ``scheme`` at fit time.
    """

    method = "lbyl"

    def __init__(self, lambda1=1e-5, lambda2=1e-3, plan=None, criterion="l2", ratio=0.1, scheme="layerwise"):
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.plan = plan
        self.criterion = criterion
        self.ratio = ratio
        self.scheme = scheme

    def _hyper(self) -> Hyperparams:
        return Hyperparams(self.lambda1, self.lambda2)


class NMRestorer(_RestorerBase):
    """One-to-one baseline: each pruned filter goes to its most similar survivor."""

    method = "nm"

    def __init__(self, lambda_mix=0.85, threshold=0.1, plan=None, criterion="l2", ratio=0.1, scheme="layerwise"):
        self.lambda_mix = lambda_mix
        self.threshold = threshold
        self.plan = plan
        self.criterion = criterion
        self.ratio = ratio
        self.scheme = scheme

    def _nm_args(self):
        return self.lambda_mix, self.threshold


class CompensationRegressor(RegressorMixin, BaseEstimator):
    """Ridge regression with an optional rank-one offset penalty.

    Minimises ``||y - X s||^2 + lambda1 * (c * (s.p - offset))^2 + lambda2 * ||s||^2``,
    where ``p``, ``offset`` and ``c`` default to zero, zero and one.
    """

    def __init__(self, lambda1=1e-5, lambda2=1e-3):
        self.lambda1 = lambda1
        self.lambda2 = lambda2

    def fit(self, X, y, p=None, offset=0.0, scale=1.0):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        p = np.zeros(X.shape[1]) if p is None else np.asarray(p, dtype=np.float64)
        if p.shape != (X.shape[1],):
            raise ValueError(f"p must have {X.shape[1]} entries, got shape {p.shape}")
        if scale == 0:
            raise ValueError("scale must be non-zero")
        # target_offset = mu - beta / scale, so mu = offset with beta = 0
        basis = ScaledBasis(X, y, p, gamma_j=float(scale), sigma_j=1.0, mu_j=float(offset), beta_j=0.0)
        self.coef_ = solve_coefficients(basis, Hyperparams(self.lambda1, self.lambda2))
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X @ self.coef_
