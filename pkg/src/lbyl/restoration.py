"""Data-free restoration of pruned filters.

Each pruned filter ``j`` of a layer is approximated by a linear combination of
the preserved filters of the same layer. The coefficients ``s`` minimise

    ||y - X s||^2 + lambda1 * BE(s)^2 + lambda2 * ||s||^2

where the columns of ``X`` are the preserved filters rescaled by their batch
norm statistics relative to filter ``j``, ``y`` is filter ``j`` and
``BE(s) = (gamma_j / sigma_j) * (s.p - mu_j + (sigma_j / gamma_j) * beta_j)``
is the constant offset the compensation leaves after batch norm. The problem
is a ridge regression with one extra rank-one penalty, solved in closed form
through a Cholesky factorisation. The coefficients populate the pruned rows
of a delivery matrix, which is folded into the consumer layer's input
channels so the consumer sees ``A_j ~ sum_k s_k A_k`` in place of the removed
channel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateTarget, NotPositiveDefinite, PlanShapeMismatch, ShapeMismatch
from .network import FC, NetworkModel
from .pruning import (
    PruningPlan,
    build_pruning_matrix,
    find_consumer,
    fold_consumer,
    fold_into_fc,
    reduce_layer,
)
from .tensor import spd_solve

__all__ = [
    "DEGENERATE_EPS",
    "Hyperparams",
    "RestorationResult",
    "ScaledBasis",
    "build_delivery_matrix",
    "build_scaled_basis",
    "fold_into_fc",
    "loss_gradient",
    "nm_coefficients",
    "reconstruction_loss",
    "restore",
    "restore_fc_neuron",
    "restore_lbyl",
    "restore_nm",
    "solve_coefficients",
]

DEGENERATE_EPS = 1e-6


@dataclass(frozen=True)
class Hyperparams:
    """``lambda1`` weights the BN offset term, ``lambda2`` the ridge penalty."""

    lambda1: float = 1e-5
    lambda2: float = 1e-3

    def __post_init__(self):
        if not (self.lambda1 >= 0 and self.lambda2 >= 0):
            raise ValueError("lambda1 and lambda2 must be non-negative")


@dataclass(frozen=True, eq=False)
class ScaledBasis:
    """Regression problem for one pruned filter.

    ``columns`` lists the original indices of the preserved filters that form
    the columns of ``x`` (ascending); ``kept`` is every preserved filter, and
    filters in ``excluded`` were dropped for degenerate BN statistics (their
    coefficient is fixed at zero). ``fallback`` marks a target whose own BN
    scale was degenerate, in which case the problem was built without BN.
    """

    x: np.ndarray
    y: np.ndarray
    p: np.ndarray
    gamma_j: float = 1.0
    sigma_j: float = 1.0
    mu_j: float = 0.0
    beta_j: float = 0.0
    target: int = -1
    columns: tuple = ()
    kept: tuple = ()
    excluded: tuple = ()
    fallback: bool = False

    @property
    def bn_scale(self) -> float:
        return self.gamma_j / self.sigma_j

    @property
    def target_offset(self) -> float:
        """``mu_j - (sigma_j / gamma_j) * beta_j``: the value ``s.p`` must match."""
        return self.mu_j - self.beta_j / self.bn_scale

    def expand(self, s) -> np.ndarray:
        """Scatter basis coefficients onto all preserved filters (zeros elsewhere)."""
        s = np.asarray(s, dtype=np.float64)
        out = np.zeros(len(self.kept))
        pos = {f: i for i, f in enumerate(self.kept)}
        for col, value in zip(self.columns, s):
            out[pos[col]] = value
        return out


def build_scaled_basis(weight, bn, pruned_j: int, kept, eps: float = DEGENERATE_EPS) -> ScaledBasis:
    """Assemble ``X``, ``y`` and ``p`` for pruned filter ``pruned_j``.

    ``weight`` holds the layer's filters along axis 0 and ``bn`` its batch norm
    (or ``None``). Raises :class:`DegenerateTarget` when the target's own
    ``sigma`` or ``|gamma|`` is below ``eps``.
    """
    weight = np.asarray(weight, dtype=np.float64)
    flat = weight.reshape(weight.shape[0], -1)
    kept = tuple(int(i) for i in kept)
    j = int(pruned_j)
    if j in kept:
        raise ValueError(f"filter {j} cannot be both pruned and kept")
    if not kept:
        raise ValueError("need at least one preserved filter")
    if bn is None:
        return ScaledBasis(
            flat[list(kept)].T.copy(), flat[j].copy(), np.zeros(len(kept)),
            target=j, columns=kept, kept=kept,
        )
    gamma, beta, mu, sigma = bn.gamma, bn.beta, bn.mu, bn.sigma
    if sigma[j] < eps or abs(gamma[j]) < eps:
        raise DegenerateTarget(f"filter {j}: BN scale too small (gamma={gamma[j]:.3g}, sigma={sigma[j]:.3g})")
    columns = tuple(i for i in kept if sigma[i] >= eps and abs(gamma[i]) >= eps)
    excluded = tuple(i for i in kept if i not in columns)
    idx = list(columns)
    ratio = (sigma[j] * gamma[idx]) / (gamma[j] * sigma[idx])
    x = flat[idx].T * ratio[None, :]
    p = ratio * (mu[idx] - sigma[idx] / gamma[idx] * beta[idx])
    return ScaledBasis(
        x, flat[j].copy(), p,
        float(gamma[j]), float(sigma[j]), float(mu[j]), float(beta[j]),
        target=j, columns=columns, kept=kept, excluded=excluded,
    )


def _basis_for(layer, j: int, kept) -> ScaledBasis:
    """Scaled basis, falling back to the BN-free problem for a degenerate target."""
    try:
        return build_scaled_basis(layer.weight, layer.bn, j, kept)
    except DegenerateTarget:
        basis = build_scaled_basis(layer.weight, None, j, kept)
        return ScaledBasis(
            basis.x, basis.y, basis.p, target=j, columns=basis.columns, kept=basis.kept, fallback=True
        )


def _normal_equations(basis: ScaledBasis, hp: Hyperparams):
    c = basis.bn_scale
    x, p = basis.x, basis.p
    a = x.T @ x + hp.lambda1 * c * c * np.outer(p, p) + hp.lambda2 * np.eye(x.shape[1])
    b = x.T @ basis.y + hp.lambda1 * c * (basis.mu_j * c - basis.beta_j) * p
    return 0.5 * (a + a.T), b


def solve_coefficients(basis: ScaledBasis, hp: Hyperparams = Hyperparams()) -> np.ndarray:
    """Closed-form minimiser of :func:`reconstruction_loss` over the basis columns."""
    if basis.x.shape[1] == 0:
        return np.zeros(0)
    if basis.fallback:
        hp = Hyperparams(0.0, hp.lambda2)
    a, b = _normal_equations(basis, hp)
    try:
        return spd_solve(a, b)
    except NotPositiveDefinite as exc:
        raise NotPositiveDefinite(
            f"filter {basis.target}: normal equations are singular ({exc}); "
            "the preserved filters are linearly dependent, set lambda2 > 0"
        ) from None


def reconstruction_loss(basis: ScaledBasis, s, hp: Hyperparams = Hyperparams()) -> float:
    """Data-free loss ``||E||^2 + lambda1 * BE^2 + lambda2 * ||s||^2``."""
    s = np.asarray(s, dtype=np.float64)
    if basis.fallback:
        hp = Hyperparams(0.0, hp.lambda2)
    r = basis.y - basis.x @ s
    be = basis.bn_scale * (s @ basis.p - basis.target_offset)
    return float(r @ r + hp.lambda1 * be * be + hp.lambda2 * (s @ s))


def loss_gradient(basis: ScaledBasis, s, hp: Hyperparams = Hyperparams()) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    if basis.fallback:
        hp = Hyperparams(0.0, hp.lambda2)
    c = basis.bn_scale
    r = basis.x @ s - basis.y
    be = c * (s @ basis.p - basis.target_offset)
    return 2.0 * (basis.x.T @ r) + 2.0 * hp.lambda1 * c * be * basis.p + 2.0 * hp.lambda2 * s


def nm_coefficients(basis: ScaledBasis, lambda_mix: float = 0.85, threshold: float = 0.1) -> np.ndarray:
    """One-to-one compensation: a single coefficient on the most similar filter.

    Candidates are ranked by ``lambda_mix * (1 - cos) + (1 - lambda_mix) *
    |p_k - target_offset|``. The winner receives the 1-D least-squares
    coefficient, unless its cosine similarity is below ``threshold``, in
    which case the pruned filter is dropped without compensation.
    """
    t = basis.x.shape[1]
    s = np.zeros(t)
    if t == 0:
        return s
    y_norm = np.linalg.norm(basis.y)
    x_norm = np.linalg.norm(basis.x, axis=0)
    denom = x_norm * y_norm
    dots = basis.x.T @ basis.y
    cos = np.divide(dots, denom, out=np.zeros(t), where=denom > 0)
    score = lambda_mix * (1.0 - cos) + (1.0 - lambda_mix) * np.abs(basis.p - basis.target_offset)
    best = int(np.argmin(score))
    if cos[best] < threshold or x_norm[best] == 0:
        return s
    s[best] = dots[best] / (x_norm[best] ** 2)
    return s


def build_delivery_matrix(m: int, kept, coeffs) -> np.ndarray:
    """``(m, t)`` matrix: one-hot rows for kept filters, coefficient rows for pruned ones."""
    kept = tuple(int(i) for i in kept)
    delivery = build_pruning_matrix(m, [i for i in range(m) if i not in kept])
    for j, row in coeffs.items():
        row = np.asarray(row, dtype=np.float64)
        if int(j) in kept or not 0 <= int(j) < m:
            raise ShapeMismatch(f"coefficient row {j} is not a pruned filter")
        if row.shape != (len(kept),):
            raise ShapeMismatch(f"coefficient row {j} has shape {row.shape}, expected ({len(kept)},)")
        if not np.all(np.isfinite(row)):
            raise ValueError(f"coefficient row {j} is not finite")
        delivery[int(j)] = row
    return delivery


@dataclass
class RestorationResult:
    original: NetworkModel
    model: NetworkModel
    plan: PruningPlan
    method: str
    deliveries: dict[int, np.ndarray] = field(default_factory=dict)
    bases: dict[int, dict[int, ScaledBasis]] = field(default_factory=dict)
    coefficients: dict[int, dict[int, np.ndarray]] = field(default_factory=dict)


METHODS = ("lbyl", "nm", "none")


def restore(
    model: NetworkModel,
    plan: PruningPlan,
    method: str = "lbyl",
    hp: Hyperparams = Hyperparams(),
    nm_lambda: float = 0.85,
    nm_threshold: float = 0.1,
) -> RestorationResult:
    """Prune ``model`` according to ``plan`` and compensate with ``method``.

    Layers are processed in order on a working copy, so the coefficients of a
    later layer are fitted to its filters after earlier folds rewrote their
    input channels. ``method="none"`` reproduces plain pruning.
    """
    if method not in METHODS:
        raise ValueError(f"unknown restoration method {method!r}")
    plan.validate(model)
    layers = list(model.layers)
    result = RestorationResult(model, model, plan, method)
    for idx, pruned in plan.layers.items():
        if not pruned:
            continue
        consumer, spatial = find_consumer(model, idx)
        layer = layers[idx]
        m = layer.weight.shape[0]
        kept = plan.kept(idx, m)
        bases, coeffs, rows = {}, {}, {}
        for j in pruned:
            basis = _basis_for(layer, j, kept)
            if method == "lbyl":
                try:
                    s = solve_coefficients(basis, hp)
                except NotPositiveDefinite as exc:
                    raise NotPositiveDefinite(f"layer {idx}: {exc}") from None
            elif method == "nm":
                s = nm_coefficients(basis, nm_lambda, nm_threshold)
            else:
                s = np.zeros(basis.x.shape[1])
            bases[j], coeffs[j], rows[j] = basis, s, basis.expand(s)
        delivery = build_delivery_matrix(m, kept, rows)
        layers[idx] = reduce_layer(layer, build_pruning_matrix(m, pruned))
        layers[consumer] = fold_consumer(layers[consumer], delivery, spatial)
        result.deliveries[idx] = delivery
        result.bases[idx] = bases
        result.coefficients[idx] = coeffs
    result.model = model.with_layers(layers)
    return result


def restore_lbyl(model, plan, hp: Hyperparams = Hyperparams()):
    """Returns ``(restored_model, {layer: delivery_matrix})``."""
    result = restore(model, plan, "lbyl", hp)
    return result.model, result.deliveries


def restore_nm(model, plan, lambda_mix: float = 0.85, threshold_t: float = 0.1):
    """One-to-one baseline. Returns ``(restored_model, {layer: delivery_matrix})``."""
    result = restore(model, plan, "nm", nm_lambda=lambda_mix, nm_threshold=threshold_t)
    return result.model, result.deliveries


def restore_fc_neuron(model, plan, lam: float = 0.1) -> NetworkModel:
    """Neuron variant for BN-free fc stacks: ridge regression over kept incoming rows.

    Biases are not compensated.
    """
    for idx, pruned in plan.layers.items():
        layer = model.layers[idx]
        if pruned and (layer.kind != FC or layer.bn is not None):
            raise PlanShapeMismatch(f"layer {idx}: neuron restoration needs an fc layer without BN")
    return restore(model, plan, "lbyl", Hyperparams(0.0, lam)).model
