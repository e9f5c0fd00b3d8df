import csv
import io
import json

import numpy as np
import pytest
from numpy.testing import assert_allclose

from lbyl.errors import EmptyDelivery, MissingTap, ShapeMismatch
from lbyl.metrics import (
    RestorationReport,
    accuracy,
    activation_error,
    ae_bound,
    bn_error,
    build_report,
    emit_report,
    residual_error,
    scale_stats,
    ware,
)
from lbyl.network import CONV, FC, BatchNormParams, Layer, NetworkModel, TapRecord, forward, generate_synthetic
from lbyl.pruning import PruningPlan, plan_layerwise
from lbyl.restoration import Hyperparams, build_scaled_basis, restore, solve_coefficients
from oracles import naive_conv, random_bn


def _one_layer(rng, m=5, n=2, relu=False):
    w = rng.normal(size=(m, n, 3, 3))
    bn = BatchNormParams(*random_bn(rng, m))
    layer = Layer(CONV, w, bn=bn, activation="relu" if relu else "none", padding=1)
    return NetworkModel([layer], (n, 5, 5)), w, bn


class TestResidualError:
    def test_exact_span(self):
        rng = np.random.default_rng(0)
        w = rng.normal(size=(3, 2, 3, 3))
        w[2] = 0.5 * w[0] + 3 * w[1]
        basis = build_scaled_basis(w, BatchNormParams.identity(3), 2, (0, 1))
        assert residual_error(basis, solve_coefficients(basis, Hyperparams(0, 0))) < 1e-9

    def test_zero_coefficients(self):
        w = np.random.default_rng(1).normal(size=(3, 2, 3, 3))
        basis = build_scaled_basis(w, BatchNormParams(*random_bn(np.random.default_rng(2), 3)), 0, (1, 2))
        assert residual_error(basis, np.zeros(2)) == pytest.approx(np.linalg.norm(w[0]))

    def test_tensor_oracle(self):
        rng = np.random.default_rng(3)
        w = rng.normal(size=(4, 2, 3, 3))
        g, b, mu, sig = random_bn(rng, 4)
        basis = build_scaled_basis(w, BatchNormParams(g, b, mu, sig), 1, (0, 2, 3))
        s = rng.normal(size=3)
        e = w[1].copy()
        for sk, k in zip(s, (0, 2, 3)):
            e -= sk * (sig[1] * g[k] / (g[1] * sig[k])) * w[k]
        assert_allclose(residual_error(basis, s), np.sqrt(np.sum(e * e)), rtol=1e-12)

    def test_dims(self):
        basis = build_scaled_basis(np.ones((3, 4)), None, 0, (1, 2))
        with pytest.raises(ShapeMismatch):
            residual_error(basis, np.zeros(3))


class TestBnError:
    def test_identity_bn(self):
        w = np.random.default_rng(0).normal(size=(3, 4))
        basis = build_scaled_basis(w, BatchNormParams.identity(3), 0, (1, 2))
        assert bn_error(basis, np.array([3.0, -1.0])) == 0.0

    def test_zero_coefficients(self):
        bn = BatchNormParams([1.0, 1.0], [0.7, 0.0], [0.2, 0.0], [1.0, 1.0])
        basis = build_scaled_basis(np.ones((2, 3)), bn, 0, (1,))
        assert bn_error(basis, np.zeros(1)) == pytest.approx(abs(0.7 - 0.2))

    def test_activation_difference_identity(self):
        rng = np.random.default_rng(1)
        model, w, bn = _one_layer(rng)
        x = rng.normal(size=(2, 5, 5))
        _, taps = forward(model, x, capture=[0])
        j, kept = 1, (0, 2, 3, 4)
        basis = build_scaled_basis(w, bn, j, kept)
        s = rng.normal(size=4)
        direct = taps.n[0][0, j] - np.tensordot(s, taps.n[0][0, list(kept)], axes=1)
        e = (basis.y - basis.x @ s).reshape(w.shape[1:])
        b_signed = basis.bn_scale * (s @ basis.p - basis.target_offset)
        formula = basis.bn_scale * naive_conv(x, e[None], 1, 1)[0] + b_signed
        assert_allclose(np.abs(direct).sum(), np.abs(formula).sum(), rtol=1e-9)
        assert bn_error(basis, s) == pytest.approx(abs(b_signed))


class TestAeBound:
    def _taps(self, n):
        taps = TapRecord()
        taps.n[0] = n
        taps.a[0] = np.maximum(n, 0)
        return taps

    def test_zero_when_target_positive(self):
        n = np.abs(np.random.default_rng(0).normal(size=(2, 3, 2, 2)))
        assert ae_bound(np.zeros(2), self._taps(n), 0, 0, (1, 2)) == 0.0

    def test_negative_part(self):
        n = np.random.default_rng(1).normal(size=(1, 3, 2, 2))
        want = np.maximum(-n[0, 0], 0).sum()
        assert ae_bound(np.zeros(2), self._taps(n), 0, 0, (1, 2)) == pytest.approx(want)

    def test_bound_holds(self):
        rng = np.random.default_rng(2)
        model, _, _ = _one_layer(rng, relu=True)
        for _ in range(30):
            _, taps = forward(model, rng.normal(size=(1, 2, 5, 5)), capture=[0])
            s = rng.normal(size=3)
            r = activation_error(s, taps, 0, 4, (0, 1, 2))
            assert r[0] <= ae_bound(s, taps, 0, 4, (0, 1, 2))

    def test_missing_tap(self):
        with pytest.raises(MissingTap):
            ae_bound(np.zeros(1), TapRecord(), 0, 0, (1,))


class TestWare:
    def _taps(self, a):
        t = TapRecord()
        t.a[0] = a
        return t

    def test_identical(self):
        a = np.random.default_rng(0).normal(size=(4, 3, 2, 2))
        assert ware(self._taps(a), self._taps(a.copy()), 0) == 0.0

    def test_zero_restored(self):
        a = np.random.default_rng(1).normal(size=(4, 3, 2, 2))
        assert ware(self._taps(a), self._taps(np.zeros_like(a)), 0) == pytest.approx(1.0)

    def test_scale_invariant(self):
        rng = np.random.default_rng(2)
        a, b = rng.normal(size=(2, 4, 3))
        assert_allclose(ware(self._taps(3.7 * a), self._taps(3.7 * b), 0), ware(self._taps(a), self._taps(b), 0), rtol=1e-12)

    def test_loop_definition(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(2, 5, 2, 3))
        want = np.mean([np.abs(a[i] - b[i]).sum() / (np.abs(a[i]).sum() + 1e-12) for i in range(5)])
        assert ware(self._taps(a), self._taps(b), 0) == pytest.approx(want, rel=1e-12)

    def test_kept_channels(self):
        a = np.random.default_rng(4).normal(size=(2, 4, 2, 2))
        assert ware(self._taps(a), self._taps(a[:, [0, 3]]), 0, kept=(0, 3)) == 0.0
        with pytest.raises(ShapeMismatch):
            ware(self._taps(a), self._taps(a[:, [0, 3]]), 0)

    def test_lbyl_below_prune_on_vgg(self):
        model = generate_synthetic("vgg-tiny", 0)
        plan = plan_layerwise(model, "l2", 0.3)
        x = np.random.default_rng(0).normal(size=(16,) + model.input_shape)
        _, t0 = forward(model, x, capture=[5])
        _, t1 = forward(restore(model, plan, "lbyl").model, x, capture=[5])
        _, t2 = forward(restore(model, plan, "none").model, x, capture=[5])
        assert ware(t0, t1, 5) <= ware(t0, t2, 5)


class TestAccuracy:
    def _constant(self):
        fc = np.zeros((3, 4))
        return NetworkModel([Layer(FC, fc, bias=np.array([1.0, 0.0, 0.0]))], (4,))

    def test_constant_logits(self):
        x = np.random.default_rng(0).normal(size=(6, 4))
        assert accuracy(self._constant(), x, np.zeros(6, dtype=int)) == 1.0
        assert accuracy(self._constant(), x, np.ones(6, dtype=int)) == 0.0

    def test_ties_lowest_index(self):
        model = NetworkModel([Layer(FC, np.zeros((3, 2)))], (2,))
        assert accuracy(model, np.ones((2, 2)), np.array([0, 0])) == 1.0

    def test_loop_oracle(self):
        model = generate_synthetic("mlp-tiny", 0)
        rng = np.random.default_rng(1)
        x, y = rng.normal(size=(20, 1, 8, 8)), rng.integers(0, 10, 20)
        hits = sum(int(np.argmax(forward(model, x[i])[0]) == y[i]) for i in range(20))
        assert accuracy(model, x, y) == hits / 20

    def test_own_labels(self):
        model = generate_synthetic("vgg-tiny", 0)
        x = np.random.default_rng(2).normal(size=(8, 3, 8, 8))
        labels = np.argmax(forward(model, x)[0], axis=1)
        assert accuracy(model, x, labels) == 1.0

    def test_shape(self):
        with pytest.raises(ShapeMismatch):
            accuracy(self._constant(), np.zeros((2, 5)), np.zeros(2))


class TestScaleStats:
    def test_single_row(self):
        d = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
        assert scale_stats({0: d}, PruningPlan({0: (2,)})) == {"mean": 0.5, "max": 1.0, "min": 0.0}

    def test_zero_rows(self):
        d = np.vstack([np.eye(2), np.zeros((1, 2))])
        assert scale_stats({0: d}, PruningPlan({0: (2,)})) == {"mean": 0.0, "max": 0.0, "min": 0.0}

    def test_loop_oracle(self):
        rng = np.random.default_rng(0)
        deliveries = {0: rng.normal(size=(5, 3)), 2: rng.normal(size=(4, 2))}
        plan = PruningPlan({0: (1, 4), 2: (0, 3)})
        vals = [abs(v) for idx, rows in plan.layers.items() for r in rows for v in deliveries[idx][r]]
        got = scale_stats(deliveries, plan)
        assert got == {"mean": pytest.approx(sum(vals) / len(vals)), "max": max(vals), "min": min(vals)}

    def test_empty(self):
        with pytest.raises(EmptyDelivery):
            scale_stats({}, PruningPlan({}))


class TestReport:
    def _report(self, inputs=True):
        model = generate_synthetic("vgg-tiny", 0)
        plan = plan_layerwise(model, "l2", 0.25)
        rng = np.random.default_rng(0)
        x, y = rng.normal(size=(8,) + model.input_shape), rng.integers(0, 10, 8)
        result = restore(model, plan, "lbyl")
        return build_report(result, Hyperparams(), x if inputs else None, y if inputs else None)

    def test_fields(self):
        report = self._report()
        assert report.method == "lbyl"
        assert [rec.layer for rec in report.layers] == [0, 1, 2, 3]
        assert set(report.ware) == {"0", "1", "2", "3", "5"}
        assert set(report.accuracy) == {"original", "restored"}
        assert len(report.deliveries["0"]) == 8
        for rec in report.layers:
            assert all(v >= 0 and np.isfinite(v) for v in rec.re + rec.be + rec.loss + rec.ae_bound)
            assert rec.re_sum == pytest.approx(sum(rec.re))

    def test_no_ware_without_data(self):
        report = self._report(inputs=False)
        assert report.ware is None and report.accuracy is None
        assert report.layers[0].ae_bound is None

    def test_json_round_trip(self):
        report = self._report()
        again = RestorationReport.from_dict(json.loads(emit_report(report, "json")))
        assert again == report

    def test_csv_rows(self):
        report = self._report()
        rows = list(csv.DictReader(io.StringIO(emit_report(report, "csv").decode())))
        assert list(rows[0]) == ["layer", "metric", "value", "method", "criterion", "ratio"]
        per_layer = [r for r in rows if r["layer"] != "all"]
        assert len(per_layer) == 4 * 4 + len(report.ware)
        assert {r["metric"] for r in rows if r["layer"] == "all"} == {
            "accuracy_original", "accuracy_restored", "scale_mean", "scale_max", "scale_min"
        }

    def test_empty_plan(self):
        model = generate_synthetic("vgg-tiny", 0)
        report = build_report(restore(model, PruningPlan({}), "lbyl"))
        assert report.layers == []
        assert emit_report(report, "csv").decode().strip() == "layer,metric,value,method,criterion,ratio"
        json.loads(emit_report(report, "json"))

    def test_deterministic(self):
        assert emit_report(self._report(), "json") == emit_report(self._report(), "json")

    def test_unknown_format(self):
        with pytest.raises(ValueError):
            emit_report(self._report(False), "xml")
