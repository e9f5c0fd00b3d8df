"""Experiment orchestration: pipelines, method comparison, global pruning and
hyperparameter sweeps.

Restoration is data-free. Probe data only feeds the metrics, so every model
produced here is independent of whether probes were supplied.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .container import atomic_write, load_dataset, load_model, save_dataset, save_model
from .errors import ConfigError
from .metrics import RestorationReport, build_report, emit_report, ware_profile
from .network import NetworkModel, generate_synthetic
from .pruning import (
    Criterion,
    PruningPlan,
    plan_layerwise,
    plan_neurons,
    plan_resnet,
    pruned_count,
    score_filters,
    select_pruned,
)
from .restoration import (
    METHODS,
    Hyperparams,
    nm_coefficients,
    reconstruction_loss,
    restore,
    solve_coefficients,
)

__all__ = [
    "BatchSummary",
    "Comparison",
    "ExperimentConfig",
    "GlobalPruneConfig",
    "PruneStep",
    "SCHEMES",
    "compare_batch",
    "generate_probe_data",
    "global_adaptive_prune",
    "global_prune_path",
    "make_plan",
    "max_workers",
    "run_compare",
    "run_pipeline",
    "sweep_lambdas",
    "write_report",
]

SCHEMES = {"layerwise": plan_layerwise, "resnet": plan_resnet, "neuron": plan_neurons}
DEFAULT_PROBES = 16
LOSS_TOL = 1e-12


def max_workers() -> int:
    """Worker cap from ``LBYL_THREADS`` (default 1, i.e. serial)."""
    raw = os.environ.get("LBYL_THREADS", "1")
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"LBYL_THREADS must be an integer, got {raw!r}") from None
    return max(1, value)


def _map(fn, items):
    items = list(items)
    workers = min(max_workers(), len(items))
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def generate_probe_data(count: int, seed: int, shape, num_classes: int = 10, path=None):
    """Seeded ``N(0, 1)`` inputs with uniform labels; optionally written as LBNZ."""
    if int(count) < 1:
        raise ConfigError("probe count must be >= 1")
    rng = np.random.default_rng(seed)
    inputs = rng.normal(size=(int(count),) + tuple(int(v) for v in shape))
    labels = rng.integers(0, num_classes, size=int(count))
    if path is not None:
        save_dataset(inputs, labels, path)
    return inputs, labels


@dataclass
class ExperimentConfig:
    """One prune -> restore -> evaluate run.

    The model comes from ``model_path`` or from ``arch``/``seed``/``scale``;
    probes come from ``data_path`` or are generated from ``probe_count`` and
    ``probe_seed``. ``plan_path`` overrides ``criterion``/``ratio``/``scheme``.
    ``report_path`` names a stem: ``.json`` and ``.csv`` reports are written
    next to each other.
    """

    model_path: str | None = None
    arch: str | None = None
    seed: int = 0
    scale: int = 1
    criterion: str = "l2"
    ratio: float = 0.1
    scheme: str = "layerwise"
    plan_path: str | None = None
    method: str = "lbyl"
    hp: Hyperparams = field(default_factory=Hyperparams)
    nm_lambda: float = 0.85
    nm_threshold: float = 0.1
    data_path: str | None = None
    probe_count: int | None = None
    probe_seed: int = 0
    report_path: str | None = None
    model_out: str | None = None

    def validate(self, needs_data: bool = False) -> None:
        if (self.model_path is None) == (self.arch is None):
            raise ConfigError("give exactly one model source: a model path or a synthetic arch")
        if self.data_path is not None and self.probe_count is not None:
            raise ConfigError("give at most one probe source: a data path or a probe count")
        if needs_data and self.data_path is None and self.probe_count is None:
            raise ConfigError("this run needs probe data")
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}; choose from {', '.join(SCHEMES)}")
        if self.probe_count is not None and self.probe_count < 1:
            raise ConfigError("probe count must be >= 1")

    def load_model(self) -> NetworkModel:
        if self.model_path is not None:
            return load_model(self.model_path)
        return generate_synthetic(self.arch, self.seed, self.scale)

    def load_probes(self, model: NetworkModel):
        if self.data_path is not None:
            return load_dataset(self.data_path)
        if self.probe_count is not None:
            return generate_probe_data(self.probe_count, self.probe_seed, model.input_shape)
        return None, None

    def load_plan(self, model: NetworkModel) -> PruningPlan:
        if self.plan_path is not None:
            return PruningPlan.from_json(Path(self.plan_path).read_text())
        return make_plan(model, self.scheme, self.criterion, self.ratio)


def make_plan(model: NetworkModel, scheme: str, criterion, ratio: float) -> PruningPlan:
    if scheme not in SCHEMES:
        raise ConfigError(f"unknown scheme {scheme!r}; choose from {', '.join(SCHEMES)}")
    return SCHEMES[scheme](model, criterion, ratio)


def write_report(report: RestorationReport, stem) -> tuple[Path, Path]:
    stem = Path(stem)
    if stem.suffix in (".json", ".csv"):
        stem = stem.with_suffix("")
    paths = stem.with_suffix(".json"), stem.with_suffix(".csv")
    atomic_write(paths[0], emit_report(report, "json"))
    atomic_write(paths[1], emit_report(report, "csv"))
    return paths


def run_pipeline(cfg: ExperimentConfig) -> RestorationReport:
    """Prune, restore and evaluate; writes the reports and restored model if asked."""
    cfg.validate()
    model = cfg.load_model()
    plan = cfg.load_plan(model)
    result = restore(model, plan, cfg.method, cfg.hp, cfg.nm_lambda, cfg.nm_threshold)
    inputs, labels = cfg.load_probes(model)
    report = build_report(result, cfg.hp, inputs, labels)
    if cfg.model_out is not None:
        save_model(result.model, cfg.model_out)
    if cfg.report_path is not None:
        write_report(report, cfg.report_path)
    return report


@dataclass
class Comparison:
    """Long-format rows ``(layer, metric, method, value)`` plus the loss check.

    ``loss_ordering`` maps ``(layer, filter)`` to whether the closed-form
    loss is no larger than the one-to-one loss on the same problem.
    """

    methods: list[str]
    rows: list[tuple] = field(default_factory=list)
    loss_ordering: dict[tuple[int, int], bool] = field(default_factory=dict)
    reports: dict[str, RestorationReport] = field(default_factory=dict)

    @property
    def loss_ordering_holds(self) -> bool:
        return all(self.loss_ordering.values())

    def column(self, method: str) -> dict[tuple, float]:
        return {(layer, metric): value for layer, metric, m, value in self.rows if m == method}

    def to_csv(self) -> str:
        lines = ["layer,metric,method,value"]
        lines += [f"{layer},{metric},{method},{value!r}" for layer, metric, method, value in self.rows]
        return "\n".join(lines) + "\n"


def _report_rows(report: RestorationReport, label: str):
    for rec in report.layers:
        for metric in ("re", "be", "loss", "ae_bound"):
            value = getattr(rec, f"{metric}_sum")
            if value is not None:
                yield rec.layer, metric, label, float(value)
    for layer, value in (report.ware or {}).items():
        yield int(layer), "ware", label, float(value)


def run_compare(cfg: ExperimentConfig, methods=("lbyl", "nm", "none")) -> Comparison:
    """Run the same model and plan through each method.

    The loss ordering is checked on the closed-form run's regression problems,
    so both coefficient vectors are scored against identical filters.
    """
    methods = list(methods)
    if len(methods) < 2:
        raise ConfigError("compare needs at least two methods")
    for method in methods:
        if method not in METHODS:
            raise ConfigError(f"unknown method {method!r}")
    cfg.validate()
    model = cfg.load_model()
    plan = cfg.load_plan(model)
    inputs, labels = cfg.load_probes(model)

    def one(method):
        result = restore(model, plan, method, cfg.hp, cfg.nm_lambda, cfg.nm_threshold)
        return result, build_report(result, cfg.hp, inputs, labels)

    runs = _map(one, methods)
    out = Comparison(methods)
    for method, (result, report) in zip(methods, runs):
        out.reports.setdefault(method, report)
        out.rows.extend(_report_rows(report, method))
    reference = runs[methods.index("lbyl")][0] if "lbyl" in methods else restore(model, plan, "lbyl", cfg.hp)
    for idx, bases in reference.bases.items():
        for j, basis in bases.items():
            ours = reconstruction_loss(basis, solve_coefficients(basis, cfg.hp), cfg.hp)
            nm = reconstruction_loss(basis, nm_coefficients(basis, cfg.nm_lambda, cfg.nm_threshold), cfg.hp)
            out.loss_ordering[(idx, j)] = ours <= nm * (1.0 + LOSS_TOL) + LOSS_TOL
    if cfg.report_path is not None:
        atomic_write(Path(cfg.report_path).with_suffix(".csv"), out.to_csv())
    return out


@dataclass
class BatchSummary:
    """Final-layer WARE per seed and method for a batch of synthetic models."""

    seeds: list[int]
    final_ware: dict[str, list[float]]

    def mean(self, method: str) -> float:
        return float(np.mean(self.final_ware[method]))

    def win_rate(self, method: str = "lbyl", baseline: str = "none") -> float:
        a = np.asarray(self.final_ware[method])
        b = np.asarray(self.final_ware[baseline])
        return float(np.mean(a < b))


def compare_batch(
    arch: str = "vgg-tiny",
    seeds=range(50),
    criterion="l2",
    ratio: float = 0.3,
    probes: int = DEFAULT_PROBES,
    hp: Hyperparams = Hyperparams(),
    methods=("lbyl", "nm", "none"),
    scheme: str = "layerwise",
) -> BatchSummary:
    """Seeded model batch; probe seed equals the model seed."""
    seeds = [int(s) for s in seeds]

    def one(seed):
        model = generate_synthetic(arch, seed)
        plan = make_plan(model, scheme, criterion, ratio)
        inputs, _ = generate_probe_data(probes, seed, model.input_shape)
        row = {}
        for method in methods:
            result = restore(model, plan, method, hp)
            profile = ware_profile(model, result.model, plan, inputs)
            row[method] = profile[max(profile)]
        return row

    rows = _map(one, seeds)
    return BatchSummary(seeds, {m: [row[m] for row in rows] for m in methods})


@dataclass(frozen=True)
class GlobalPruneConfig:
    """WARE-thresholded per-layer ratio search.

    Ratios move in multiples of ``step`` and never exceed ``max_ratio``.
    """

    ware_threshold: float
    step: float = 0.1
    max_ratio: float = 0.9
    probe_count: int = DEFAULT_PROBES
    probe_seed: int = 0
    scheme: str = "layerwise"

    def validate(self) -> None:
        if not self.ware_threshold >= 0:
            raise ConfigError("WARE threshold must be non-negative")
        if not 0 < self.step <= self.max_ratio:
            raise ConfigError("need 0 < step <= max_ratio")
        if not self.max_ratio < 1:
            raise ConfigError("max_ratio must be below 1")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}")


def _step_plan(model, criterion, steps, step, cap) -> PruningPlan:
    pruned, ratios = {}, {}
    for idx, k in steps.items():
        ratio = min(k * step, cap)
        scores = score_filters(model.layers[idx].weight, criterion, salt=idx)
        pruned[idx] = select_pruned(scores, ratio)
        ratios[idx] = ratio
    return PruningPlan(pruned, str(criterion), ratios)


@dataclass
class PruneStep:
    """One accepted increment of the global search."""

    layer: int
    plan: PruningPlan
    max_ware: float


def global_prune_path(
    model: NetworkModel,
    criterion="l2",
    cfg: GlobalPruneConfig = GlobalPruneConfig(0.3),
    hp: Hyperparams = Hyperparams(),
    inputs=None,
    stop_above: float | None = None,
) -> list[PruneStep]:
    """Threshold-independent sequence of nested plans.

    From the current plan, every layer below its cap is tentatively advanced
    to its next ratio that removes at least one more filter. Each candidate is
    restored with the closed-form method and scored by its largest WARE over
    all conv / fc / residual layers; the lowest score wins, ties going to the
    earlier layer. The path ends when every layer is capped, or as soon as
    the best candidate scores above ``stop_above``.
    """
    cfg.validate()
    criterion = Criterion.parse(criterion)
    if inputs is None:
        inputs, _ = generate_probe_data(cfg.probe_count, cfg.probe_seed, model.input_shape)
    max_steps = int(np.floor(cfg.max_ratio / cfg.step + 1e-9))
    steps = {idx: 0 for idx in make_plan(model, cfg.scheme, criterion, 0.0).layers}
    counts = {idx: 0 for idx in steps}
    path = []
    while True:
        best = None
        for idx in steps:
            m = model.layers[idx].weight.shape[0]
            k = steps[idx] + 1
            while k <= max_steps and pruned_count(m, min(k * cfg.step, cfg.max_ratio)) <= counts[idx]:
                k += 1
            if k > max_steps:
                continue
            trial = _step_plan(model, criterion, {**steps, idx: k}, cfg.step, cfg.max_ratio)
            result = restore(model, trial, "lbyl", hp)
            score = max(ware_profile(model, result.model, trial, inputs).values())
            if best is None or score < best[0]:
                best = (score, idx, k, trial)
        if best is None:
            return path
        score, idx, k, trial = best
        if stop_above is not None and score > stop_above:
            return path
        steps[idx] = k
        counts[idx] = len(trial.pruned(idx))
        path.append(PruneStep(idx, trial, float(score)))


def global_adaptive_prune(
    model: NetworkModel,
    criterion="l2",
    cfg: GlobalPruneConfig = GlobalPruneConfig(0.3),
    hp: Hyperparams = Hyperparams(),
    inputs=None,
    labels=None,
    path: list[PruneStep] | None = None,
):
    """Grow per-layer ratios while every measured WARE stays within the threshold.

    Walks :func:`global_prune_path` and keeps the last plan before the first
    increment whose WARE exceeds ``cfg.ware_threshold``. Every kept state
    passed the check, so the returned report satisfies it, and since the path
    does not depend on the threshold a higher threshold never prunes fewer
    filters in any layer. A precomputed ``path`` (built with the same model,
    probes and settings) can be shared across thresholds.

    Returns ``(restored_model, plan, report)``.
    """
    cfg.validate()
    criterion = Criterion.parse(criterion)
    if inputs is None:
        inputs, labels = generate_probe_data(cfg.probe_count, cfg.probe_seed, model.input_shape)
    if path is None:
        path = global_prune_path(model, criterion, cfg, hp, inputs, stop_above=cfg.ware_threshold)
    plan = _step_plan(model, criterion, {i: 0 for i in make_plan(model, cfg.scheme, criterion, 0.0).layers},
                      cfg.step, cfg.max_ratio)
    for state in path:
        if state.max_ware > cfg.ware_threshold:
            break
        plan = state.plan
    result = restore(model, plan, "lbyl", hp)
    extra = {"ware_threshold": cfg.ware_threshold, "step": cfg.step, "max_ratio": cfg.max_ratio}
    report = build_report(result, hp, inputs, labels, extra)
    return result.model, plan, report


def sweep_lambdas(cfg: ExperimentConfig, grid) -> tuple[tuple[float, float], list[dict]]:
    """Evaluate each ``(lambda1, lambda2)`` pair; rank by final-layer WARE.

    Ties keep grid order. Returns the best pair and the ranked table.
    """
    grid = [(float(a), float(b)) for a, b in grid]
    if not grid:
        raise ConfigError("the lambda grid is empty")
    cfg.validate(needs_data=True)
    model = cfg.load_model()
    plan = cfg.load_plan(model)
    inputs, _ = cfg.load_probes(model)

    def one(pair):
        hp = Hyperparams(*pair)
        result = restore(model, plan, "lbyl", hp)
        profile = ware_profile(model, result.model, plan, inputs)
        return {"lambda1": pair[0], "lambda2": pair[1], "final_ware": profile[max(profile)],
                "ware": {str(k): v for k, v in profile.items()}}

    rows = _map(one, grid)
    for pos, row in enumerate(rows):
        row["grid_index"] = pos
    ranked = sorted(rows, key=lambda r: (r["final_ware"], r["grid_index"]))
    best = ranked[0]
    return (best["lambda1"], best["lambda2"]), ranked
