"""Dense numerical kernels: convolution, n-mode products, norms, SPD solve.

Tensors are plain ``float64`` numpy arrays. Feature maps are ``(c, w, h)`` or
batched ``(N, c, w, h)``; filter banks are ``(m, n, k, k)``. The convolution
and mode products accumulate in a fixed, documented order (one input slice at
a time, in index order) so results are reproducible bit for bit and match a
scalar loop that sums in the same order.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from .errors import AsymmetricInput, GeometryError, NotPositiveDefinite, ShapeMismatch

__all__ = [
    "as_f64",
    "conv2d",
    "conv_output_size",
    "linear",
    "mode1_product",
    "mode2_product",
    "spd_solve",
    "tensor_norm",
]


def as_f64(x, name: str = "array") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")
    return arr


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    if stride < 1 or padding < 0:
        raise GeometryError(f"invalid stride={stride} / padding={padding}")
    span = size + 2 * padding - k
    if span < 0 or span % stride:
        raise GeometryError(
            f"input size {size} with kernel {k}, stride {stride}, padding {padding} "
            "does not tile exactly"
        )
    return span // stride + 1


def conv2d(x, filters, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Bias-free 2-D cross-correlation with zero padding.

    ``x`` is ``(n, w, h)`` or ``(N, n, w, h)``; ``filters`` is ``(m, n, k1, k2)``.
    Returns ``(m, w', h')`` (or ``(N, m, w', h')``).
    """
    x = np.asarray(x, dtype=np.float64)
    filters = np.asarray(filters, dtype=np.float64)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    if x.ndim != 4 or filters.ndim != 4:
        raise ShapeMismatch(f"conv2d expects (n,w,h) input and 4-D filters, got {x.shape}, {filters.shape}")
    _, n, w, h = x.shape
    m, fn, k1, k2 = filters.shape
    if fn != n:
        raise ShapeMismatch(f"filters expect {fn} input channels, input has {n}")
    ow = conv_output_size(w, k1, stride, padding)
    oh = conv_output_size(h, k2, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((x.shape[0], m, ow, oh))
    wspan = stride * (ow - 1) + 1
    hspan = stride * (oh - 1) + 1
    # accumulation order: channel, kernel row, kernel column
    for c in range(n):
        for a in range(k1):
            for b in range(k2):
                patch = x[:, c, a : a + wspan : stride, b : b + hspan : stride]
                out += filters[None, :, c, a, b, None, None] * patch[:, None]
    return out[0] if squeeze else out


def linear(x, weight, bias=None) -> np.ndarray:
    """Fully-connected layer ``x @ weight.T + bias`` for ``(in,)`` or ``(N, in)`` input."""
    x = np.asarray(x, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    if x.shape[-1] != weight.shape[1]:
        raise ShapeMismatch(f"fc layer expects {weight.shape[1]} inputs, got {x.shape[-1]}")
    out = x @ weight.T
    if bias is not None:
        out = out + bias
    return out


def _check_selector(st: np.ndarray, axis_len: int, mode: int) -> np.ndarray:
    st = np.asarray(st, dtype=np.float64)
    if st.ndim != 2 or st.shape[1] != axis_len:
        raise ShapeMismatch(
            f"mode-{mode} product needs a (t, {axis_len}) matrix, got shape {st.shape}"
        )
    return st


def mode1_product(filters, st) -> np.ndarray:
    """Contract the filter axis: ``out[a] = sum_i st[a, i] * filters[i]``."""
    filters = np.asarray(filters, dtype=np.float64)
    if filters.ndim < 2:
        raise ShapeMismatch("mode-1 product needs at least a 2-D tensor")
    st = _check_selector(st, filters.shape[0], 1)
    out = np.zeros((st.shape[0],) + filters.shape[1:])
    tail = (slice(None),) + (None,) * (filters.ndim - 1)
    for i in range(filters.shape[0]):
        out += st[:, i][tail] * filters[i][None]
    return out


def mode2_product(filters, st) -> np.ndarray:
    """Contract the input-channel axis: ``out[:, a] = sum_i st[a, i] * filters[:, i]``."""
    filters = np.asarray(filters, dtype=np.float64)
    if filters.ndim < 2:
        raise ShapeMismatch("mode-2 product needs at least a 2-D tensor")
    st = _check_selector(st, filters.shape[1], 2)
    out = np.zeros((filters.shape[0], st.shape[0]) + filters.shape[2:])
    coef_index = (None, slice(None)) + (None,) * (filters.ndim - 2)
    for i in range(filters.shape[1]):
        out += st[:, i][coef_index] * filters[:, i][:, None]
    return out


def tensor_norm(x, order: str | int = "L2") -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    key = str(order).upper().lstrip("L")
    if key == "1":
        return float(np.sum(np.abs(x)))
    if key == "2":
        return float(np.sqrt(np.sum(x * x)))
    raise ValueError(f"unsupported norm order {order!r}")


# Relative pivot floor: a pivot below this fraction of the largest diagonal
# entry is treated as zero (rank deficiency hidden by rounding).
_PIVOT_RTOL = 1e-13


def spd_solve(a, b) -> np.ndarray:
    """Solve ``a x = b`` for symmetric positive-definite ``a`` via Cholesky.

    Raises :class:`AsymmetricInput` if ``a`` is not symmetric to 1e-12 relative
    and :class:`NotPositiveDefinite` on a non-positive (or numerically
    vanishing) pivot.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
        raise ShapeMismatch(f"spd_solve needs a non-empty square matrix, got {a.shape}")
    if b.shape != (a.shape[0],):
        raise ShapeMismatch(f"right-hand side has shape {b.shape}, expected ({a.shape[0]},)")
    scale = np.max(np.abs(a))
    if np.max(np.abs(a - a.T)) > 1e-12 * max(scale, 1e-300):
        raise AsymmetricInput("matrix is not symmetric")
    diag_max = float(np.max(np.diag(a)))
    if not diag_max > 0:
        raise NotPositiveDefinite("matrix has no positive diagonal entry")
    try:
        chol = scipy.linalg.cholesky(a, lower=True, check_finite=True)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    if np.min(np.diag(chol)) ** 2 <= _PIVOT_RTOL * diag_max:
        raise NotPositiveDefinite("Cholesky pivot vanished (matrix is numerically singular)")
    return scipy.linalg.cho_solve((chol, True), b)
