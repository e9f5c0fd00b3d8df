import numpy as np
import pytest
from numpy.testing import assert_allclose
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.linear_model import Ridge

from lbyl.container import serialize
from lbyl.estimators import CompensationRegressor, FilterPruner, LBYLRestorer, NMRestorer
from lbyl.network import generate_synthetic
from lbyl.pruning import PruningPlan, apply_pruning, plan_layerwise
from lbyl.restoration import Hyperparams, restore
from oracles import descent_minimiser


class TestParams:
    @pytest.mark.parametrize("est", [FilterPruner(ratio=0.4), LBYLRestorer(lambda2=0.5), NMRestorer(threshold=0.2),
                                     CompensationRegressor(lambda1=3.0)])
    def test_clone_round_trip(self, est):
        again = clone(est)
        assert again.get_params() == est.get_params()
        assert again is not est

    def test_set_params(self):
        est = LBYLRestorer().set_params(lambda1=7e-5, lambda2=0.05)
        assert (est.lambda1, est.lambda2) == (7e-5, 0.05)


class TestFilterPruner:
    def test_fit_transform(self):
        model = generate_synthetic("vgg-tiny", 0)
        pruner = FilterPruner("l2", 0.25).fit(model)
        assert pruner.plan_ == plan_layerwise(model, "l2", 0.25)
        assert pruner.n_pruned_ == {0: 2, 1: 2, 2: 4, 3: 4}
        assert serialize(pruner.transform(model)) == serialize(apply_pruning(model, pruner.plan_))

    def test_not_fitted(self):
        with pytest.raises(NotFittedError):
            FilterPruner().transform(generate_synthetic("vgg-tiny", 0))

    def test_type_check(self):
        with pytest.raises(TypeError):
            FilterPruner().fit(np.zeros((3, 3)))


class TestRestorers:
    def test_lbyl_matches_function(self):
        model = generate_synthetic("vgg-tiny", 1)
        est = LBYLRestorer(7e-5, 0.05, ratio=0.3).fit(model)
        want = restore(model, plan_layerwise(model, "l2", 0.3), "lbyl", Hyperparams(7e-5, 0.05))
        assert serialize(est.restored_model_) == serialize(want.model)
        assert serialize(est.transform(model)) == serialize(want.model)
        assert set(est.delivery_matrices_) == {0, 1, 2, 3}

    def test_fixed_plan(self):
        model = generate_synthetic("vgg-tiny", 1)
        est = NMRestorer(plan={"criterion": "l1", "ratio": 0.5, "layers": {"2": [1, 4]}}).fit(model)
        assert est.plan_.layers == {2: (1, 4)}
        want = restore(model, PruningPlan({2: (1, 4)}, "l1"), "nm")
        assert serialize(est.transform(model)) == serialize(want.model)

    def test_not_fitted(self):
        with pytest.raises(NotFittedError):
            LBYLRestorer().transform(generate_synthetic("vgg-tiny", 0))


class TestCompensationRegressor:
    def test_matches_ridge(self):
        rng = np.random.default_rng(0)
        x, y = rng.normal(size=(40, 6)), rng.normal(size=40)
        ours = CompensationRegressor(lambda1=0.0, lambda2=0.7).fit(x, y)
        ridge = Ridge(alpha=0.7, fit_intercept=False, solver="cholesky").fit(x, y)
        assert_allclose(ours.coef_, ridge.coef_, rtol=1e-10)
        assert_allclose(ours.predict(x), ridge.predict(x), rtol=1e-10)

    def test_offset_term(self):
        rng = np.random.default_rng(1)
        x, y, p = rng.normal(size=(20, 4)), rng.normal(size=20), rng.normal(size=4)
        est = CompensationRegressor(lambda1=2.0, lambda2=0.1).fit(x, y, p=p, offset=0.3, scale=1.5)
        # offset penalty written as (scale * (s.p - offset))^2 with beta = 0, mu = offset
        want = descent_minimiser(x, y, p, 1.5, 0.3, 2.0, 0.1)
        assert_allclose(est.coef_, want, rtol=1e-7)

    def test_score(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(30, 3))
        y = x @ [1.0, -2.0, 0.5]
        assert CompensationRegressor(0.0, 1e-10).fit(x, y).score(x, y) > 1 - 1e-12

    def test_validation(self):
        with pytest.raises(NotFittedError):
            CompensationRegressor().predict(np.zeros((1, 2)))
        est = CompensationRegressor().fit(np.eye(3), np.ones(3))
        with pytest.raises(ValueError):
            est.predict(np.zeros((1, 2)))
        with pytest.raises(ValueError):
            CompensationRegressor().fit(np.eye(3), np.ones(3), p=np.ones(2))
        with pytest.raises(ValueError):
            CompensationRegressor().fit(np.eye(3), np.ones(3), scale=0)
