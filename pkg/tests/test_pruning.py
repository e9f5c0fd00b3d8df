import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from lbyl.container import serialize
from lbyl.errors import AllPruned, DegenerateLayer, IllegalResidualPrune, PlanShapeMismatch
from lbyl.network import CONV, FC, FLATTEN, RES_BEGIN, RES_END, Layer, NetworkModel, forward, generate_synthetic
from lbyl.pruning import (
    Criterion,
    PruningPlan,
    apply_pruning,
    build_pruning_matrix,
    find_consumer,
    plan_layerwise,
    plan_neurons,
    plan_resnet,
    pruned_count,
    score_filters,
    select_pruned,
)


class TestCriterion:
    def test_parse(self):
        assert Criterion.parse("L2-GM") == Criterion("l2gm")
        assert Criterion.parse("random:7") == Criterion("random", 7)
        assert str(Criterion("random", 7)) == "random:7"

    def test_random_needs_seed(self):
        with pytest.raises(ValueError):
            Criterion.parse("random")

    def test_unknown(self):
        with pytest.raises(ValueError):
            Criterion.parse("taylor")


class TestScoreFilters:
    def test_l1(self):
        f = np.array([0.5, 1.0, -2.0]).reshape(3, 1, 1, 1)
        assert_array_equal(score_filters(f, "l1"), [0.5, 1.0, 2.0])

    def test_l2(self):
        f = np.array([[3.0, 4.0], [0.0, 1.0]])
        assert_array_equal(score_filters(f, "l2"), [5.0, 1.0])

    def test_l2gm_identical(self):
        f = np.ones((4, 2, 3, 3))
        s = score_filters(f, "l2gm")
        assert np.all(s == s[0])

    def test_l2gm_pairwise_oracle(self):
        f = np.random.default_rng(0).normal(size=(5, 2, 3, 3))
        want = [sum(float(np.sqrt(np.sum((f[i] - f[k]) ** 2))) for k in range(5) if k != i) for i in range(5)]
        assert_allclose(score_filters(f, "l2gm"), want, rtol=1e-12)

    def test_random_reproducible(self):
        f = np.zeros((6, 1, 1, 1))
        a = score_filters(f, "random:3", salt=1)
        assert_array_equal(a, score_filters(f, "random:3", salt=1))
        assert sorted(a) == list(range(6))

    def test_degenerate(self):
        with pytest.raises(DegenerateLayer):
            score_filters(np.zeros((1, 2, 3, 3)), "l1")

    @settings(max_examples=30, deadline=None)
    @given(st.sampled_from(["l1", "l2", "l2gm"]), st.integers(2, 7), st.integers(0, 2**31 - 1))
    def test_permutation_equivariant(self, crit, m, seed):
        rng = np.random.default_rng(seed)
        f = rng.normal(size=(m, 2, 2, 2))
        perm = rng.permutation(m)
        assert_allclose(score_filters(f[perm], crit), score_filters(f, crit)[perm], rtol=1e-12)


class TestSelectPruned:
    def test_basic(self):
        assert select_pruned([0.5, 1.0, 2.0], 1 / 3) == (0,)

    def test_zero_ratio(self):
        assert select_pruned([0.5, 1.0, 2.0], 0.0) == ()

    def test_tie_break(self):
        assert select_pruned([1, 1, 2, 3], 0.5) == (0, 1)
        assert select_pruned([2, 1, 1, 3], 0.25) == (1,)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(2, 40), st.floats(0, 0.99))
    def test_count_is_floor(self, m, ratio):
        got = select_pruned(np.arange(m, dtype=float), ratio)
        assert len(got) == min(int(np.floor(ratio * m + 1e-9)), m - 1)

    def test_representation_slack(self):
        # 0.3 * 10 evaluates to 2.9999999999999996
        assert pruned_count(10, 0.3) == 3

    def test_bad_ratio(self):
        with pytest.raises(ValueError):
            pruned_count(4, 1.0)


class TestPruningMatrix:
    def test_worked_example_layout(self):
        s = build_pruning_matrix(6, {3, 5})
        assert s.shape == (6, 4)
        assert [int(np.flatnonzero(s[:, k])[0]) for k in range(4)] == [0, 1, 2, 4]
        assert_array_equal(s[[3, 5]], 0.0)

    def test_empty_is_identity(self):
        assert_array_equal(build_pruning_matrix(4, ()), np.eye(4))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 12), st.data())
    def test_orthonormal_columns(self, m, data):
        pruned = data.draw(st.sets(st.integers(0, m - 1), max_size=m - 1))
        s = build_pruning_matrix(m, pruned)
        t = m - len(pruned)
        assert s.sum() == t
        assert_array_equal(s.T @ s, np.eye(t))
        assert set(s.sum(axis=1)) <= {0.0, 1.0}

    def test_all_pruned(self):
        with pytest.raises(AllPruned):
            build_pruning_matrix(3, {0, 1, 2})


class TestPlan:
    def test_json_shape(self):
        plan = plan_layerwise(generate_synthetic("vgg-tiny", 0), "l2", 0.25)
        data = json.loads(plan.to_json())
        assert data["criterion"] == "l2"
        assert data["ratio"] == 0.25
        assert set(data["layers"]) == {"0", "1", "2", "3"}
        assert PruningPlan.from_json(plan.to_json()) == plan

    def test_from_spec_json_without_ratios(self):
        plan = PruningPlan.from_dict({"criterion": "l1", "ratio": 0.5, "layers": {"1": [3, 0]}})
        assert plan.layers == {1: (0, 3)}
        assert plan.ratios == {1: 0.5}

    def test_layerwise_counts(self):
        model = generate_synthetic("vgg-tiny", 0)
        plan = plan_layerwise(model, "l2", 0.25)
        for idx, pruned in plan.layers.items():
            assert len(pruned) == model.layers[idx].weight.shape[0] // 4

    def test_resnet_skips_block_final(self):
        model = generate_synthetic("resnet-tiny", 0)
        plan = plan_resnet(model, "l2", 0.5)
        assert sorted(plan.layers) == [2, 6]
        for idx in plan.layers:
            assert model.layers[idx + 1].kind == CONV

    def test_neuron_plan(self):
        model = generate_synthetic("mlp-tiny", 0)
        assert sorted(plan_neurons(model, "l2", 0.5).layers) == [1, 2]

    def test_deterministic(self):
        model = generate_synthetic("vgg-tiny", 2)
        assert plan_layerwise(model, "l2gm", 0.3) == plan_layerwise(model, "l2gm", 0.3)

    def test_validate(self):
        model = generate_synthetic("vgg-tiny", 0)
        with pytest.raises(PlanShapeMismatch):
            PruningPlan({9: (0,)}).validate(model)
        with pytest.raises(PlanShapeMismatch):
            PruningPlan({4: (0,)}).validate(model)
        with pytest.raises(PlanShapeMismatch):
            PruningPlan({0: (8,)}).validate(model)
        with pytest.raises(AllPruned):
            PruningPlan({0: tuple(range(8))}).validate(model)
        with pytest.raises(PlanShapeMismatch):
            PruningPlan({5: (0,)}).validate(model)


class TestConsumer:
    def test_through_flatten(self):
        model = generate_synthetic("vgg-tiny", 0)
        assert find_consumer(model, 3) == (5, (8, 8))
        assert find_consumer(model, 0) == (1, None)

    def test_residual_refused(self):
        model = generate_synthetic("resnet-tiny", 0)
        with pytest.raises(IllegalResidualPrune):
            find_consumer(model, 3)
        with pytest.raises(IllegalResidualPrune):
            apply_pruning(model, PruningPlan({0: (0,)}))


class TestApplyPruning:
    def test_empty_plan(self):
        model = generate_synthetic("vgg-tiny", 0)
        assert serialize(apply_pruning(model, PruningPlan({}))) == serialize(model)

    def test_structural(self):
        model = generate_synthetic("vgg-tiny", 0, scale=1)
        w = model.layers[0].weight[:4]
        small = NetworkModel([model.layers[0].replace(weight=w, bn=model.layers[0].bn.subset(range(4)))]
                             + [model.layers[1].replace(weight=model.layers[1].weight[:, :4])] + list(model.layers[2:]),
                             model.input_shape)
        pruned = apply_pruning(small, PruningPlan({0: (1,)}))
        assert pruned.layers[0].weight.shape[0] == 3
        assert pruned.layers[1].weight.shape[1] == 3
        assert_array_equal(pruned.layers[0].bn.gamma, small.layers[0].bn.gamma[[0, 2, 3]])
        forward(pruned, np.zeros(model.input_shape))

    def test_zero_mask_oracle(self):
        rng = np.random.default_rng(0)
        w0, w1 = rng.normal(size=(5, 2, 3, 3)), rng.normal(size=(3, 5, 3, 3))
        fc = rng.normal(size=(4, 3 * 16))
        model = NetworkModel(
            [Layer(CONV, w0, padding=1), Layer(CONV, w1, padding=1), Layer(FLATTEN), Layer(FC, fc)], (2, 4, 4)
        )
        plan = PruningPlan({0: (1, 3), 1: (0,)})
        masked0 = w0.copy()
        masked0[[1, 3]] = 0
        masked1 = w1.copy()
        masked1[[0]] = 0
        oracle = NetworkModel(
            [Layer(CONV, masked0, padding=1), Layer(CONV, masked1, padding=1), Layer(FLATTEN), Layer(FC, fc)],
            (2, 4, 4),
        )
        x = rng.normal(size=(3, 2, 4, 4))
        assert_allclose(forward(apply_pruning(model, plan), x)[0], forward(oracle, x)[0], rtol=1e-12, atol=1e-12)

    def test_untouched_layers_byte_identical(self):
        model = generate_synthetic("vgg-tiny", 1)
        pruned = apply_pruning(model, PruningPlan({1: (0, 2)}))
        for idx in (0, 3, 5):
            assert pruned.layers[idx].weight.tobytes() == model.layers[idx].weight.tobytes()

    def test_input_not_mutated(self):
        model = generate_synthetic("vgg-tiny", 1)
        before = serialize(model)
        apply_pruning(model, plan_layerwise(model, "l1", 0.5))
        assert serialize(model) == before

    def test_fc_consumer_spatial(self):
        model = generate_synthetic("vgg-tiny", 0)
        pruned = apply_pruning(model, PruningPlan({3: (2, 7)}))
        fc_old, fc_new = model.layers[5].weight, pruned.layers[5].weight
        kept = [i for i in range(16) if i not in (2, 7)]
        assert_array_equal(fc_new, fc_old.reshape(10, 16, 64)[:, kept].reshape(10, -1))

    def test_residual_block_shapes_hold(self):
        model = generate_synthetic("resnet-tiny", 0)
        pruned = apply_pruning(model, plan_resnet(model, "l2", 0.5))
        out, _ = forward(pruned, np.zeros((2,) + model.input_shape))
        assert out.shape == (2, 10)
        assert [i for i, layer in enumerate(pruned.layers) if layer.kind in (RES_BEGIN, RES_END)] == [1, 4, 5, 8]
