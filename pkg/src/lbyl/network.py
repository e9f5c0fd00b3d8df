"""Network representation, forward inference with activation taps, and
deterministic synthetic model generators."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .errors import InvalidBN, ShapeMismatch, UnknownArch
from .tensor import conv2d, conv_output_size, linear

__all__ = [
    "ARCHITECTURES",
    "BatchNormParams",
    "Layer",
    "NetworkModel",
    "TapRecord",
    "batch_norm_apply",
    "forward",
    "generate_synthetic",
]

CONV = "conv"
FC = "fc"
MAXPOOL = "maxpool"
AVGPOOL = "avgpool"
FLATTEN = "flatten"
RES_BEGIN = "res_begin"
RES_END = "res_end"
KINDS = (CONV, FC, MAXPOOL, AVGPOOL, FLATTEN, RES_BEGIN, RES_END)
ACTIVATIONS = ("relu", "none")


def _frozen(arr, name: str) -> np.ndarray:
    out = np.array(arr, dtype=np.float64, copy=True)
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{name} contains NaN or Inf")
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class BatchNormParams:
    """Inference-mode batch norm: ``gamma * (z - mu) / sigma + beta`` per channel.

    ``sigma`` is a standard deviation with any stabilising epsilon already
    folded in; use :meth:`from_running_stats` to convert ``(var, eps)``.
    """

    gamma: np.ndarray
    beta: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        for name in ("gamma", "beta", "mu", "sigma"):
            object.__setattr__(self, name, _frozen(getattr(self, name), name))
        m = self.gamma.shape
        if len(m) != 1 or any(getattr(self, n).shape != m for n in ("beta", "mu", "sigma")):
            raise InvalidBN("gamma, beta, mu and sigma must be 1-D arrays of equal length")
        if np.any(self.sigma <= 0):
            raise InvalidBN("sigma must be strictly positive")

    @classmethod
    def from_running_stats(cls, gamma, beta, mean, var, eps=1e-5) -> "BatchNormParams":
        return cls(gamma, beta, mean, np.sqrt(np.asarray(var, dtype=np.float64) + eps))

    @classmethod
    def identity(cls, m: int) -> "BatchNormParams":
        return cls(np.ones(m), np.zeros(m), np.zeros(m), np.ones(m))

    def __len__(self) -> int:
        return self.gamma.shape[0]

    def subset(self, index) -> "BatchNormParams":
        index = np.asarray(index, dtype=np.intp)
        return BatchNormParams(self.gamma[index], self.beta[index], self.mu[index], self.sigma[index])


def batch_norm_apply(z, bn: BatchNormParams, axis: int = 0) -> np.ndarray:
    """Apply ``bn`` along the channel ``axis`` of ``z``."""
    z = np.asarray(z, dtype=np.float64)
    if np.any(bn.sigma <= 0):
        raise InvalidBN("sigma must be strictly positive")
    if z.shape[axis] != len(bn):
        raise ShapeMismatch(f"BN has {len(bn)} channels, input has {z.shape[axis]}")
    shape = [1] * z.ndim
    shape[axis] = -1
    gamma, beta, mu, sigma = (v.reshape(shape) for v in (bn.gamma, bn.beta, bn.mu, bn.sigma))
    return gamma * (z - mu) / sigma + beta


@dataclass(frozen=True, eq=False)
class Layer:
    """One layer of a :class:`NetworkModel`.

    ``weight`` is ``(m, n, k, k)`` for conv, ``(out, in)`` for fc, and for
    ``res_end`` an optional ``(m, n, 1, 1)`` projection applied to the skip
    branch. ``kernel``/``stride`` configure pooling; ``stride``/``padding``
    configure convolution. A ``stride`` of 0 selects the default: the pooling
    kernel size for pooling layers, 1 otherwise.
    """

    kind: str
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None
    bn: BatchNormParams | None = None
    activation: str = "none"
    stride: int = 0
    padding: int = 0
    kernel: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight is not None:
            object.__setattr__(self, "weight", _frozen(self.weight, "weight"))
        if self.bias is not None:
            object.__setattr__(self, "bias", _frozen(self.bias, "bias"))
        if self.kind == CONV and (self.weight is None or self.weight.ndim != 4):
            raise ShapeMismatch("conv layers need a 4-D weight")
        if self.kind == CONV and self.weight.shape[2] != self.weight.shape[3]:
            raise ShapeMismatch("conv kernels must be square")
        if self.kind == FC and (self.weight is None or self.weight.ndim != 2):
            raise ShapeMismatch("fc layers need a 2-D weight")
        if self.kind == RES_END and self.weight is not None and self.weight.shape[2:] != (1, 1):
            raise ShapeMismatch("residual projections must be 1x1 convolutions")
        if self.bias is not None and (self.kind != FC or self.bias.shape != (self.weight.shape[0],)):
            raise ShapeMismatch("bias is only supported on fc layers, one entry per output")
        if self.bn is not None:
            out = self.out_channels
            if out is None or len(self.bn) != out:
                raise ShapeMismatch(f"BN has {len(self.bn)} channels, layer produces {out}")
        if self.kind in (MAXPOOL, AVGPOOL) and self.kernel < 1:
            raise ValueError("pooling layers need kernel >= 1")
        if self.stride < 0 or self.padding < 0:
            raise ValueError("stride and padding must be non-negative")
        if self.stride == 0:
            # unset: pooling windows tile, everything else steps by one
            object.__setattr__(self, "stride", self.kernel if self.kind in (MAXPOOL, AVGPOOL) else 1)

    @property
    def has_filters(self) -> bool:
        return self.kind in (CONV, FC)

    @property
    def out_channels(self) -> int | None:
        if self.kind in (CONV, FC) or (self.kind == RES_END and self.weight is not None):
            return self.weight.shape[0]
        return None

    def replace(self, **changes) -> "Layer":
        return dataclasses.replace(self, **changes)


@dataclass
class TapRecord:
    """Per-layer captured activations for a batch of samples.

    ``z`` is the pre-BN output (conv/fc result or residual sum), ``n`` is the
    post-BN pre-activation value and ``a`` the post-activation output. Every
    array carries a leading sample axis.
    """

    z: dict[int, np.ndarray] = field(default_factory=dict)
    n: dict[int, np.ndarray] = field(default_factory=dict)
    a: dict[int, np.ndarray] = field(default_factory=dict)

    def __contains__(self, layer: int) -> bool:
        return layer in self.a

    @property
    def layers(self) -> list[int]:
        return sorted(self.a)


class NetworkModel:
    """An ordered, shape-validated stack of :class:`Layer` objects.

    Instances are treated as immutable: pruning and restoration build new
    models instead of editing layers in place.
    """

    def __init__(self, layers: Iterable[Layer], input_shape, metadata: Mapping[str, str] | None = None):
        self.layers: tuple[Layer, ...] = tuple(layers)
        self.input_shape: tuple[int, ...] = tuple(int(v) for v in input_shape)
        self.metadata: dict[str, str] = {str(k): str(v) for k, v in (metadata or {}).items()}
        self.shapes = self._infer_shapes()

    def __len__(self) -> int:
        return len(self.layers)

    def __repr__(self) -> str:
        kinds = ", ".join(layer.kind for layer in self.layers)
        return f"NetworkModel(input_shape={self.input_shape}, layers=[{kinds}])"

    def with_layers(self, layers) -> "NetworkModel":
        return NetworkModel(layers, self.input_shape, self.metadata)

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.shapes[-1] if self.shapes else self.input_shape

    def input_shape_of(self, index: int) -> tuple[int, ...]:
        return self.input_shape if index == 0 else self.shapes[index - 1]

    def residual_pairs(self) -> dict[int, int]:
        """Map each ``res_begin`` index to its matching ``res_end``."""
        stack, pairs = [], {}
        for i, layer in enumerate(self.layers):
            if layer.kind == RES_BEGIN:
                stack.append(i)
            elif layer.kind == RES_END:
                if not stack:
                    raise ShapeMismatch(f"layer {i}: residual end without a matching begin")
                pairs[stack.pop()] = i
        if stack:
            raise ShapeMismatch(f"layer {stack[-1]}: residual begin is never closed")
        return pairs

    def _infer_shapes(self) -> list[tuple[int, ...]]:
        self.residual_pairs()
        shape = self.input_shape
        skips: list[tuple[int, ...]] = []
        shapes = []
        for i, layer in enumerate(self.layers):
            try:
                shape = _layer_shape(layer, shape, skips)
            except ShapeMismatch as exc:
                raise ShapeMismatch(f"layer {i} ({layer.kind}): {exc}") from None
            shapes.append(shape)
        return shapes


def _layer_shape(layer: Layer, shape, skips) -> tuple[int, ...]:
    if layer.kind == CONV:
        if len(shape) != 3:
            raise ShapeMismatch(f"conv needs a (c, w, h) input, got {shape}")
        m, n, k, _ = layer.weight.shape
        if n != shape[0]:
            raise ShapeMismatch(f"expects {n} input channels, receives {shape[0]}")
        return (
            m,
            conv_output_size(shape[1], k, layer.stride, layer.padding),
            conv_output_size(shape[2], k, layer.stride, layer.padding),
        )
    if layer.kind == FC:
        if len(shape) != 1 or layer.weight.shape[1] != shape[0]:
            raise ShapeMismatch(f"expects a flat input of {layer.weight.shape[1]}, receives {shape}")
        return (layer.weight.shape[0],)
    if layer.kind in (MAXPOOL, AVGPOOL):
        if len(shape) != 3:
            raise ShapeMismatch(f"pooling needs a (c, w, h) input, got {shape}")
        stride = layer.stride
        return (
            shape[0],
            conv_output_size(shape[1], layer.kernel, stride, 0),
            conv_output_size(shape[2], layer.kernel, stride, 0),
        )
    if layer.kind == FLATTEN:
        return (int(np.prod(shape)),)
    if layer.kind == RES_BEGIN:
        skips.append(shape)
        return shape
    # RES_END
    skip = skips.pop()
    if layer.weight is not None:
        if layer.weight.shape[1] != skip[0]:
            raise ShapeMismatch("residual projection input channels do not match the skip branch")
        skip = (layer.weight.shape[0],) + tuple(skip[1:])
    if tuple(skip) != tuple(shape):
        raise ShapeMismatch(f"residual branches disagree: {skip} vs {shape}")
    return shape


def _pool(x: np.ndarray, kind: str, kernel: int, stride: int) -> np.ndarray:
    n, c, w, h = x.shape
    ow = conv_output_size(w, kernel, stride, 0)
    oh = conv_output_size(h, kernel, stride, 0)
    windows = np.lib.stride_tricks.sliding_window_view(x, (kernel, kernel), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride][:, :, :ow, :oh]
    if kind == MAXPOOL:
        return windows.max(axis=(-2, -1))
    return windows.mean(axis=(-2, -1))


def _activate(x: np.ndarray, activation: str) -> np.ndarray:
    return np.maximum(x, 0.0) if activation == "relu" else x


def forward(model: NetworkModel, x, capture: Iterable[int] | None = ()):
    """Run ``model`` on one sample ``(c, w, h)`` or a batch ``(N, c, w, h)``.

    Returns ``(output, taps)``. ``capture`` selects the layer indices whose
    activations are recorded; pass ``None`` to capture every layer. Taps
    always carry a leading sample axis.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.shape == model.input_shape
    if single:
        x = x[None]
    if x.shape[1:] != model.input_shape:
        raise ShapeMismatch(f"input shape {x.shape[1:]} does not match model input {model.input_shape}")
    wanted = set(range(len(model.layers))) if capture is None else set(capture)
    taps = TapRecord()
    skips: list[np.ndarray] = []
    for i, layer in enumerate(model.layers):
        kind = layer.kind
        if kind == CONV:
            z = conv2d(x, layer.weight, layer.stride, layer.padding)
        elif kind == FC:
            z = linear(x, layer.weight, layer.bias)
        elif kind in (MAXPOOL, AVGPOOL):
            z = _pool(x, kind, layer.kernel, layer.stride)
        elif kind == FLATTEN:
            z = x.reshape(x.shape[0], -1)
        elif kind == RES_BEGIN:
            skips.append(x)
            z = x
        else:
            skip = skips.pop()
            if layer.weight is not None:
                skip = conv2d(skip, layer.weight)
            z = x + skip
        pre = batch_norm_apply(z, layer.bn, axis=1) if layer.bn is not None else z
        x = _activate(pre, layer.activation)
        if i in wanted:
            taps.z[i], taps.n[i], taps.a[i] = z, pre, x
    return (x[0] if single else x), taps


# ---------------------------------------------------------------------------
# synthetic models
# ---------------------------------------------------------------------------

ARCHITECTURES = ("vgg-tiny", "resnet-tiny", "mlp-tiny")
REDUNDANCY = 0.8
GROUP = 4


def _redundant_normal(rng, shape, std, redundancy, group):
    """Rows ``rho * prototype + sqrt(1 - rho^2) * noise``.

    Rows share one of ``ceil(rows / group)`` Gaussian prototypes, so every
    entry is still marginally ``N(0, std^2)`` while rows within a cluster are
    correlated with coefficient ``rho^2``.
    """
    rows = shape[0]
    noise = rng.normal(0.0, std, size=shape)
    if redundancy <= 0.0:
        return noise
    n_proto = max(1, -(-rows // group))
    protos = rng.normal(0.0, std, size=(n_proto,) + tuple(shape[1:]))
    assign = rng.integers(0, n_proto, size=rows)
    return redundancy * protos[assign] + np.sqrt(1.0 - redundancy**2) * noise


def _conv_weight(rng, m, n, k, redundancy=0.0, group=GROUP):
    return _redundant_normal(rng, (m, n, k, k), np.sqrt(2.0 / (n * k * k)), redundancy, group)


def _fc_weight(rng, out, fan_in, redundancy=0.0, group=GROUP):
    return _redundant_normal(rng, (out, fan_in), np.sqrt(2.0 / fan_in), redundancy, group)


def _random_bn(rng, m) -> BatchNormParams:
    gamma = rng.uniform(0.5, 1.5, size=m)
    beta = rng.normal(0.0, 0.1, size=m)
    mu = rng.normal(0.0, 0.1, size=m)
    sigma = rng.uniform(0.5, 1.5, size=m)
    return BatchNormParams(gamma, beta, mu, sigma)


def _conv_bn(rng, m, n, redundancy, activation="relu") -> Layer:
    weight = _conv_weight(rng, m, n, 3, redundancy)
    return Layer(CONV, weight, bn=_random_bn(rng, m), activation=activation, padding=1)


def generate_synthetic(
    arch: str, seed: int = 0, scale: int = 1, num_classes: int = 10, redundancy: float = REDUNDANCY
) -> NetworkModel:
    """Build a deterministic desk-scale model.

    * ``vgg-tiny``: four 3x3 conv+BN+ReLU layers, flatten, one fc layer.
    * ``resnet-tiny``: stem conv, two basic residual blocks, global average
      pooling, flatten, fc.
    * ``mlp-tiny``: flatten followed by three fc layers (ReLU on hidden ones).

    Weights are drawn from ``N(0, 2 / fan_in)``; BN parameters from
    ``gamma ~ U(0.5, 1.5)``, ``beta ~ N(0, 0.1)``, ``mu ~ N(0, 0.1)`` and
    ``sigma ~ U(0.5, 1.5)``.
    """
    if int(scale) < 1:
        raise ValueError("scale must be >= 1")
    if not 0.0 <= redundancy < 1.0:
        raise ValueError("redundancy must lie in [0, 1)")
    scale = int(scale)
    rng = np.random.default_rng(seed)
    meta = {"arch": arch, "seed": str(seed), "scale": str(scale), "redundancy": repr(float(redundancy))}
    if arch == "vgg-tiny":
        shape = (3, 8, 8)
        widths = [8 * scale, 8 * scale, 16 * scale, 16 * scale]
        layers, n = [], shape[0]
        for m in widths:
            layers.append(_conv_bn(rng, m, n, redundancy))
            n = m
        layers.append(Layer(FLATTEN))
        fan_in = n * shape[1] * shape[2]
        layers.append(Layer(FC, _fc_weight(rng, num_classes, fan_in), bias=np.zeros(num_classes)))
        return NetworkModel(layers, shape, meta)
    if arch == "resnet-tiny":
        shape = (3, 8, 8)
        width = 8 * scale
        layers = [_conv_bn(rng, width, shape[0], redundancy)]
        for _ in range(2):
            layers += [
                Layer(RES_BEGIN),
                _conv_bn(rng, width, width, redundancy),
                _conv_bn(rng, width, width, redundancy, activation="none"),
                Layer(RES_END, activation="relu"),
            ]
        layers += [
            Layer(AVGPOOL, kernel=shape[1], stride=shape[1]),
            Layer(FLATTEN),
            Layer(FC, _fc_weight(rng, num_classes, width), bias=np.zeros(num_classes)),
        ]
        return NetworkModel(layers, shape, meta)
    if arch == "mlp-tiny":
        shape = (1, 8, 8)
        sizes = [64, 30 * scale, 10 * scale, num_classes]
        layers = [Layer(FLATTEN)]
        for idx, (fan_in, out) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = idx == len(sizes) - 2
            layers.append(
                Layer(
                    FC,
                    _fc_weight(rng, out, fan_in, 0.0 if last else redundancy),
                    bias=np.zeros(out),
                    activation="none" if last else "relu",
                )
            )
        return NetworkModel(layers, shape, meta)
    raise UnknownArch(f"unknown architecture {arch!r}; choose from {', '.join(ARCHITECTURES)}")
