"""Restoration quality metrics and report emission.

RE and BE are data-free and computed from weights alone. The activation-error
bound, WARE and accuracy need probe inputs; they only measure a restored
model and never feed back into restoration.

WARE at a layer is the sample mean of ``||A - A_hat||_1 / (||A||_1 + 1e-12)``,
comparing the original activations (restricted to the preserved channels when
the layer itself was pruned) with the restored model's activations.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import EmptyDelivery, MissingTap, ShapeMismatch
from .network import CONV, FC, RES_END, NetworkModel, TapRecord, forward
from .pruning import PruningPlan
from .restoration import Hyperparams, RestorationResult, ScaledBasis, reconstruction_loss

__all__ = [
    "LayerErrorRecord",
    "RestorationReport",
    "WARE_EPS",
    "accuracy",
    "activation_error",
    "ae_bound",
    "bn_error",
    "build_report",
    "emit_report",
    "residual_error",
    "scale_stats",
    "ware",
    "ware_profile",
]

WARE_EPS = 1e-12
_WARE_KINDS = (CONV, FC, RES_END)


def _check_dims(basis: ScaledBasis, s) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    if s.shape != (basis.x.shape[1],):
        raise ShapeMismatch(f"coefficients have shape {s.shape}, basis has {basis.x.shape[1]} columns")
    return s


def residual_error(basis: ScaledBasis, s) -> float:
    """L2 norm of ``y - X s`` (the residual filter after compensation)."""
    s = _check_dims(basis, s)
    return float(np.linalg.norm(basis.y - basis.x @ s))


def bn_error(basis: ScaledBasis, s) -> float:
    """``|(gamma_j / sigma_j) * (s.p - mu_j + (sigma_j / gamma_j) * beta_j)|``."""
    s = _check_dims(basis, s)
    return float(abs(basis.bn_scale * (s @ basis.p - basis.target_offset)))


def _bn_taps(taps: TapRecord, layer: int) -> np.ndarray:
    if layer not in taps.n:
        raise MissingTap(f"no activations captured for layer {layer}")
    return taps.n[layer]


def activation_error(s, taps: TapRecord, layer: int, pruned_j: int, kept) -> np.ndarray:
    """Per-sample ``||R||_1`` with ``R = sum_k s_k min(0, N_k) - min(0, N_j)``.

    ``s`` runs over ``kept``; taps must come from the unpruned model.
    """
    n = _bn_taps(taps, layer)
    s = np.asarray(s, dtype=np.float64)
    kept = list(kept)
    neg = np.minimum(n, 0.0)
    r = np.tensordot(neg[:, kept], s, axes=([1], [0])) - neg[:, pruned_j]
    return np.abs(r).reshape(r.shape[0], -1).sum(axis=1)


def ae_bound(s, probe_taps: TapRecord, layer: int, pruned_j: int, kept) -> float:
    """Sample mean of ``sum_k |s_k| * ||N_k||_1 + sum max(0, -N_j)``."""
    n = _bn_taps(probe_taps, layer)
    s = np.asarray(s, dtype=np.float64)
    kept = list(kept)
    if s.shape != (len(kept),):
        raise ShapeMismatch("coefficient vector must have one entry per kept filter")
    norms = np.abs(n[:, kept]).reshape(n.shape[0], len(kept), -1).sum(axis=2)
    c = np.maximum(-n[:, pruned_j], 0.0).reshape(n.shape[0], -1).sum(axis=1)
    return float(np.mean(norms @ np.abs(s) + c))


def ware(original_taps: TapRecord, restored_taps: TapRecord, layer: int, kept=None) -> float:
    """Mean relative L1 discrepancy of a layer's activations.

    ``kept`` restricts the original activations to the preserved channels of
    a pruned layer.
    """
    if layer not in original_taps or layer not in restored_taps:
        raise MissingTap(f"no activations captured for layer {layer}")
    a = original_taps.a[layer]
    if kept is not None:
        a = a[:, list(kept)]
    b = restored_taps.a[layer]
    if a.shape != b.shape:
        raise ShapeMismatch(f"layer {layer}: original {a.shape} vs restored {b.shape}")
    a = a.reshape(a.shape[0], -1)
    b = b.reshape(b.shape[0], -1)
    rel = np.abs(a - b).sum(axis=1) / (np.abs(a).sum(axis=1) + WARE_EPS)
    return float(rel.mean())


def ware_profile(original: NetworkModel, restored: NetworkModel, plan: PruningPlan, inputs) -> dict[int, float]:
    """WARE at every conv / fc / residual-sum layer."""
    _, t0 = forward(original, inputs, capture=None)
    _, t1 = forward(restored, inputs, capture=None)
    out = {}
    for i, layer in enumerate(original.layers):
        if layer.kind in _WARE_KINDS:
            kept = plan.kept(i, layer.weight.shape[0]) if plan.pruned(i) else None
            out[i] = ware(t0, t1, i, kept)
    return out


def accuracy(model: NetworkModel, inputs, labels) -> float:
    """Top-1 accuracy; ties go to the lowest class index."""
    inputs = np.asarray(inputs, dtype=np.float64)
    labels = np.asarray(labels)
    if inputs.shape[1:] != model.input_shape or labels.shape != (inputs.shape[0],):
        raise ShapeMismatch("dataset does not match the model input shape")
    if labels.size == 0:
        return 0.0
    logits, _ = forward(model, inputs)
    pred = np.argmax(logits.reshape(logits.shape[0], -1), axis=1)
    return float(np.mean(pred == labels))


def scale_stats(deliveries: dict, plan: PruningPlan) -> dict[str, float]:
    """Mean / max / min of ``|coefficient|`` over every pruned row."""
    values = [np.abs(deliveries[idx][list(pruned)]).ravel() for idx, pruned in plan.layers.items() if pruned]
    if not values:
        raise EmptyDelivery("no pruned rows to summarise")
    allv = np.concatenate(values)
    return {"mean": float(allv.mean()), "max": float(allv.max()), "min": float(allv.min())}


@dataclass
class LayerErrorRecord:
    layer: int
    filters: list[int]
    re: list[float]
    be: list[float]
    loss: list[float]
    ae_bound: list[float] | None = None
    re_sum: float = 0.0
    be_sum: float = 0.0
    loss_sum: float = 0.0
    ae_bound_sum: float | None = None


@dataclass
class RestorationReport:
    model_id: str
    method: str
    plan: dict
    hyperparams: dict
    layers: list[LayerErrorRecord] = field(default_factory=list)
    ware: dict[str, float] | None = None
    scale_stats: dict[str, float] | None = None
    accuracy: dict[str, float] | None = None
    deliveries: dict[str, list] | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RestorationReport":
        data = dict(data)
        data["layers"] = [LayerErrorRecord(**rec) for rec in data.get("layers", [])]
        return cls(**data)

    @property
    def final_ware(self) -> float | None:
        if not self.ware:
            return None
        return self.ware[max(self.ware, key=int)]


def _model_id(model: NetworkModel) -> str:
    meta = model.metadata
    if "arch" in meta:
        return f"{meta['arch']}/seed={meta.get('seed', '?')}/scale={meta.get('scale', '1')}"
    return meta.get("name", "model")


def build_report(
    result: RestorationResult,
    hp: Hyperparams = Hyperparams(),
    inputs=None,
    labels=None,
    extra: dict | None = None,
) -> RestorationReport:
    """Collect per-layer RE / BE / loss, and probe-based metrics when ``inputs`` is given."""
    original, plan = result.original, result.plan
    hyper = {"lambda1": hp.lambda1, "lambda2": hp.lambda2}
    hyper.update(extra or {})
    report = RestorationReport(_model_id(original), result.method, plan.to_dict(), hyper)
    taps = None
    if inputs is not None:
        _, taps = forward(original, inputs, capture=list(result.bases))
    for idx, bases in result.bases.items():
        coeffs = result.coefficients[idx]
        filters = sorted(bases)
        re = [residual_error(bases[j], coeffs[j]) for j in filters]
        be = [bn_error(bases[j], coeffs[j]) for j in filters]
        loss = [reconstruction_loss(bases[j], coeffs[j], hp) for j in filters]
        rec = LayerErrorRecord(idx, filters, re, be, loss, re_sum=sum(re), be_sum=sum(be), loss_sum=sum(loss))
        if taps is not None:
            rec.ae_bound = [
                ae_bound(bases[j].expand(coeffs[j]), taps, idx, j, bases[j].kept) for j in filters
            ]
            rec.ae_bound_sum = sum(rec.ae_bound)
        report.layers.append(rec)
    report.deliveries = {str(idx): d.tolist() for idx, d in result.deliveries.items()}
    if any(plan.layers.values()):
        report.scale_stats = scale_stats(result.deliveries, plan)
    if inputs is not None:
        report.ware = {str(k): v for k, v in ware_profile(original, result.model, plan, inputs).items()}
        if labels is not None:
            report.accuracy = {
                "original": accuracy(original, inputs, labels),
                "restored": accuracy(result.model, inputs, labels),
            }
    return report


CSV_COLUMNS = ("layer", "metric", "value", "method", "criterion", "ratio")


def _csv_rows(report: RestorationReport):
    ratios = report.plan.get("ratios", {})

    def ratio_of(layer):
        value = ratios.get(str(layer), report.plan.get("ratio"))
        return "" if value is None else value

    for rec in report.layers:
        yield rec.layer, "re", rec.re_sum, ratio_of(rec.layer)
        yield rec.layer, "be", rec.be_sum, ratio_of(rec.layer)
        yield rec.layer, "loss", rec.loss_sum, ratio_of(rec.layer)
        if rec.ae_bound_sum is not None:
            yield rec.layer, "ae_bound", rec.ae_bound_sum, ratio_of(rec.layer)
    for layer, value in (report.ware or {}).items():
        yield layer, "ware", value, ratio_of(layer)
    for name, value in (report.accuracy or {}).items():
        yield "all", f"accuracy_{name}", value, ""
    for name, value in (report.scale_stats or {}).items():
        yield "all", f"scale_{name}", value, ""


def emit_report(report: RestorationReport, fmt: str = "json") -> bytes:
    """Serialise a report as JSON (mirrors the dataclass) or long-format CSV."""
    if fmt == "json":
        return (json.dumps(report.to_dict(), indent=2) + "\n").encode("utf-8")
    if fmt != "csv":
        raise ValueError(f"unknown report format {fmt!r}")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    criterion = report.plan.get("criterion", "")
    for layer, metric, value, ratio in _csv_rows(report):
        writer.writerow([layer, metric, repr(float(value)), report.method, criterion, ratio])
    return buf.getvalue().encode("utf-8")
