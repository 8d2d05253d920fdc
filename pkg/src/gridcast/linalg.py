"""Small dense kernels shared by the rest of the package.

Matrices and vectors are plain ``float64`` numpy arrays. A measurement
tensor of logical shape ``(2K, 2K, M)`` is stored slice-major, i.e. as an
array of shape ``(M, 2K, 2K)`` whose ``j``-th entry is the ``j``-th slice.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

ACTIVATIONS = ("sigmoid", "tanh", "relu", "identity")


class ShapeError(ValueError):
    """Raised on any dimension mismatch. Nothing is broadcast implicitly."""


def as_real(a, name: str = "array") -> np.ndarray:
    """Return ``a`` as a finite float64 array."""
    arr = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def check_shape(arr: np.ndarray, shape: tuple, name: str) -> None:
    if arr.shape != tuple(shape):
        raise ShapeError(f"{name} has shape {arr.shape}, expected {tuple(shape)}")


def mode_product_quadratic(H, x) -> np.ndarray:
    """Evaluate ``H x_1 x x_2 x``: entry ``j`` is ``x^T H_j x``.

    ``H`` is slice-major with shape ``(M, n, n)`` and ``x`` has length ``n``.
    """
    H = np.asarray(H, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if H.ndim != 3 or x.ndim != 1:
        raise ShapeError(f"expected a 3-way tensor and a vector, got ndim {H.ndim} and {x.ndim}")
    if H.shape[1] != H.shape[2] or H.shape[1] != x.shape[0]:
        raise ShapeError(
            f"tensor slices are {H.shape[1]}x{H.shape[2]} but state has dim {x.shape[0]}"
        )
    return np.einsum("jab,a,b->j", H, x, x)


def activation(kind: str, v) -> tuple[np.ndarray, np.ndarray]:
    """Apply a pointwise nonlinearity; return ``(f(v), f'(v))``.

    The relu derivative at exactly zero is taken to be zero.
    """
    v = np.asarray(v, dtype=np.float64)
    if kind == "sigmoid":
        s = expit(v)
        return s, s * (1.0 - s)
    if kind == "tanh":
        t = np.tanh(v)
        return t, 1.0 - t * t
    if kind == "relu":
        mask = v > 0
        return np.where(mask, v, 0.0), mask.astype(np.float64)
    if kind == "identity":
        return v.copy(), np.ones_like(v)
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def glorot_uniform(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, size=(rows, cols))
