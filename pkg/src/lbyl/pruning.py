"""Data-independent filter scoring, pruned-set selection and structural pruning."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AllPruned,
    DegenerateLayer,
    IllegalResidualPrune,
    PlanShapeMismatch,
    ShapeMismatch,
)
from .network import AVGPOOL, CONV, FC, FLATTEN, MAXPOOL, RES_BEGIN, RES_END, NetworkModel
from .tensor import mode1_product, mode2_product

__all__ = [
    "CRITERIA",
    "Criterion",
    "PruningPlan",
    "apply_pruning",
    "build_pruning_matrix",
    "find_consumer",
    "fold_consumer",
    "fold_into_fc",
    "plan_layerwise",
    "plan_neurons",
    "plan_resnet",
    "prunable_layers",
    "pruned_count",
    "reduce_layer",
    "score_filters",
    "select_pruned",
]

CRITERIA = ("l1", "l2", "l2gm", "random")
_PASS_THROUGH = (MAXPOOL, AVGPOOL, FLATTEN)


@dataclass(frozen=True)
class Criterion:
    """Filter importance criterion. ``random`` needs an explicit ``seed``."""

    kind: str = "l2"
    seed: int | None = None

    def __post_init__(self):
        if self.kind not in CRITERIA:
            raise ValueError(f"unknown criterion {self.kind!r}; choose from {', '.join(CRITERIA)}")
        if self.kind == "random" and self.seed is None:
            raise ValueError("the random criterion needs an explicit seed")

    @classmethod
    def parse(cls, text: "str | Criterion") -> "Criterion":
        """Parse ``l1``, ``l2``, ``l2gm`` or ``random:<seed>``."""
        if isinstance(text, Criterion):
            return text
        kind, _, seed = str(text).strip().lower().replace("-", "").partition(":")
        return cls(kind, int(seed) if seed else None)

    def __str__(self) -> str:
        return f"random:{self.seed}" if self.kind == "random" else self.kind


def score_filters(filters, criterion="l2", salt: int | None = None) -> np.ndarray:
    """Score each filter along axis 0; lower scores are pruned first.

    ``salt`` (usually the layer index) decorrelates the random criterion
    across layers while keeping it reproducible.
    """
    criterion = Criterion.parse(criterion)
    flat = np.asarray(filters, dtype=np.float64)
    flat = flat.reshape(flat.shape[0], -1)
    m = flat.shape[0]
    if m < 2:
        raise DegenerateLayer(f"need at least 2 filters to score, got {m}")
    if criterion.kind == "l1":
        return np.abs(flat).sum(axis=1)
    if criterion.kind == "l2":
        return np.sqrt((flat * flat).sum(axis=1))
    if criterion.kind == "l2gm":
        diff = flat[:, None, :] - flat[None, :, :]
        return np.sqrt((diff * diff).sum(axis=2)).sum(axis=1)
    seed = [criterion.seed] if salt is None else [criterion.seed, salt]
    return np.random.default_rng(seed).permutation(m).astype(np.float64)


def pruned_count(m: int, ratio: float) -> int:
    """``floor(ratio * m)``, capped so at least one filter survives."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"pruning ratio must lie in [0, 1), got {ratio}")
    # the small slack absorbs representation error such as 0.3 * 10 = 2.9999...
    return min(int(math.floor(ratio * m + 1e-9)), m - 1)


def select_pruned(scores, ratio: float) -> tuple[int, ...]:
    scores = np.asarray(scores, dtype=np.float64)
    count = pruned_count(scores.shape[0], ratio)
    order = np.argsort(scores, kind="stable")
    return tuple(sorted(int(i) for i in order[:count]))


def build_pruning_matrix(m: int, pruned) -> np.ndarray:
    """``(m, t)`` selector whose column ``k`` is one-hot at the ``k``-th survivor."""
    pruned = set(int(i) for i in pruned)
    if any(i < 0 or i >= m for i in pruned):
        raise PlanShapeMismatch(f"pruned indices {sorted(pruned)} out of range for {m} filters")
    kept = [i for i in range(m) if i not in pruned]
    if not kept:
        raise AllPruned(f"cannot prune all {m} filters")
    s = np.zeros((m, len(kept)))
    s[kept, np.arange(len(kept))] = 1.0
    return s


@dataclass
class PruningPlan:
    """Per-layer pruned filter indices plus the criterion/ratios that chose them."""

    layers: dict[int, tuple[int, ...]] = field(default_factory=dict)
    criterion: str = "l2"
    ratios: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        self.layers = {int(k): tuple(sorted(int(i) for i in v)) for k, v in sorted(self.layers.items())}
        self.ratios = {int(k): float(v) for k, v in sorted(self.ratios.items())}

    @property
    def ratio(self) -> float | None:
        values = set(self.ratios.values())
        return values.pop() if len(values) == 1 else None

    def pruned(self, layer: int) -> tuple[int, ...]:
        return self.layers.get(layer, ())

    def kept(self, layer: int, m: int) -> tuple[int, ...]:
        gone = set(self.pruned(layer))
        return tuple(i for i in range(m) if i not in gone)

    def is_empty(self) -> bool:
        return not any(self.layers.values())

    def to_dict(self) -> dict:
        return {
            "criterion": self.criterion,
            "layers": {str(k): list(v) for k, v in self.layers.items()},
            "ratio": self.ratio,
            "ratios": {str(k): v for k, v in self.ratios.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, data: dict) -> "PruningPlan":
        layers = {int(k): v for k, v in data.get("layers", {}).items()}
        ratios = {int(k): v for k, v in data.get("ratios", {}).items()}
        if not ratios and data.get("ratio") is not None:
            ratios = {k: float(data["ratio"]) for k in layers}
        return cls(layers, str(data.get("criterion", "")), ratios)

    @classmethod
    def from_json(cls, text: str) -> "PruningPlan":
        return cls.from_dict(json.loads(text))

    def validate(self, model: NetworkModel) -> None:
        for idx, pruned in self.layers.items():
            if not 0 <= idx < len(model.layers):
                raise PlanShapeMismatch(f"plan refers to layer {idx}, model has {len(model.layers)} layers")
            layer = model.layers[idx]
            if not layer.has_filters:
                raise PlanShapeMismatch(f"layer {idx} ({layer.kind}) has no filters to prune")
            m = layer.weight.shape[0]
            if any(i < 0 or i >= m for i in pruned):
                raise PlanShapeMismatch(f"layer {idx}: pruned indices out of range for {m} filters")
            if len(pruned) >= m:
                raise AllPruned(f"layer {idx}: plan removes all {m} filters")
            if pruned:
                find_consumer(model, idx)


def find_consumer(model: NetworkModel, index: int) -> tuple[int, tuple[int, int] | None]:
    """Locate the layer that reads layer ``index``'s output channels.

    Pooling and flatten layers are traversed. Returns ``(consumer, spatial)``
    where ``spatial`` is the ``(w, h)`` extent at the flatten point when the
    consumer is an fc layer fed by feature maps, else ``None``.
    """
    spatial = None
    for j in range(index + 1, len(model.layers)):
        layer = model.layers[j]
        if layer.kind in _PASS_THROUGH:
            if layer.kind == FLATTEN:
                shape = model.input_shape_of(j)
                spatial = tuple(shape[1:]) if len(shape) == 3 else None
            continue
        if layer.kind in (RES_BEGIN, RES_END):
            raise IllegalResidualPrune(
                f"layer {index}: output feeds a residual connection at layer {j}; "
                "pruning it would change the block's output width"
            )
        if layer.kind in (CONV, FC):
            return j, spatial
    raise PlanShapeMismatch(f"layer {index} is the network output and cannot be pruned")


def prunable_layers(model: NetworkModel, kinds=(CONV,)) -> list[int]:
    out = []
    for i, layer in enumerate(model.layers):
        if layer.kind in kinds and layer.weight.shape[0] >= 2:
            try:
                find_consumer(model, i)
            except PlanShapeMismatch:
                continue
            out.append(i)
    return out


def _plan(model, indices, criterion, ratio) -> PruningPlan:
    criterion = Criterion.parse(criterion)
    layers, ratios = {}, {}
    for i in indices:
        scores = score_filters(model.layers[i].weight, criterion, salt=i)
        layers[i] = select_pruned(scores, ratio)
        ratios[i] = float(ratio)
    return PruningPlan(layers, str(criterion), ratios)


def plan_layerwise(model: NetworkModel, criterion="l2", ratio: float = 0.1) -> PruningPlan:
    """Prune ``floor(ratio * m)`` filters from every conv layer."""
    indices = [i for i, layer in enumerate(model.layers) if layer.kind == CONV]
    return _plan(model, indices, criterion, ratio)


def plan_resnet(model: NetworkModel, criterion="l2", ratio: float = 0.1) -> PruningPlan:
    """Prune only conv layers inside residual blocks whose output stays in the block."""
    depth, inside = 0, set()
    for i, layer in enumerate(model.layers):
        if layer.kind == RES_BEGIN:
            depth += 1
        elif layer.kind == RES_END:
            depth -= 1
        elif depth and layer.kind == CONV:
            inside.add(i)
    indices = [i for i in prunable_layers(model, (CONV,)) if i in inside]
    return _plan(model, indices, criterion, ratio)


def plan_neurons(model: NetworkModel, criterion="l2", ratio: float = 0.1) -> PruningPlan:
    """Prune neurons of every hidden fc layer (the output layer is kept)."""
    return _plan(model, prunable_layers(model, (FC,)), criterion, ratio)


# ---------------------------------------------------------------------------
# structural edits shared by pruning and restoration
# ---------------------------------------------------------------------------


def fold_into_fc(delivery, spatial, fc_weights) -> np.ndarray:
    """Redistribute fc input columns through a channel delivery matrix.

    ``fc_weights`` is ``(out, m*w*h)`` over a channel-major flatten. Column
    block of kept channel ``k`` becomes ``sum_i delivery[i, k] * block_i``,
    position by position. Returns ``(out, t*w*h)``.
    """
    delivery = np.asarray(delivery, dtype=np.float64)
    fc_weights = np.asarray(fc_weights, dtype=np.float64)
    m, t = delivery.shape
    w, h = spatial
    if fc_weights.ndim != 2 or fc_weights.shape[1] != m * w * h:
        raise ShapeMismatch(f"fc weights {fc_weights.shape} do not match {m} channels of {w}x{h}")
    blocks = fc_weights.reshape(fc_weights.shape[0], m, w * h)
    return mode2_product(blocks, delivery.T).reshape(fc_weights.shape[0], t * w * h)


def reduce_layer(layer, selector):
    """Keep the filters selected by the ``(m, t)`` one-hot ``selector``."""
    kept = np.flatnonzero(selector.sum(axis=1))
    changes = {"weight": mode1_product(layer.weight, selector.T)}
    if layer.bn is not None:
        changes["bn"] = layer.bn.subset(kept)
    if layer.bias is not None:
        changes["bias"] = layer.bias[kept]
    return layer.replace(**changes)


def fold_consumer(layer, delivery, spatial):
    """Rewrite a consumer's input side through an ``(m, t)`` delivery matrix."""
    if layer.kind == CONV:
        return layer.replace(weight=mode2_product(layer.weight, delivery.T))
    if spatial is not None:
        return layer.replace(weight=fold_into_fc(delivery, spatial, layer.weight))
    return layer.replace(weight=mode2_product(layer.weight, delivery.T))


def apply_pruning(model: NetworkModel, plan: PruningPlan) -> NetworkModel:
    """Remove planned filters and the matching input channels of their consumers."""
    plan.validate(model)
    layers = list(model.layers)
    for idx, pruned in plan.layers.items():
        if not pruned:
            continue
        consumer, spatial = find_consumer(model, idx)
        selector = build_pruning_matrix(layers[idx].weight.shape[0], pruned)
        layers[idx] = reduce_layer(layers[idx], selector)
        layers[consumer] = fold_consumer(layers[consumer], selector, spatial)
    return model.with_layers(layers)
