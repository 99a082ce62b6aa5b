"""Dense double-precision kernels and the finite-difference gradient oracle.

Everything here is a pure function of its inputs.  All matrices are 2-D
float64 numpy arrays in row-major order; reductions run in ascending index
order so repeated runs are bitwise identical.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Union

import numpy as np

from .errors import DimMismatch, ZeroNormRow

Matrix = np.ndarray

NORM_EPS = 1e-12


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce to a 2-D float64 array, rejecting non-finite entries."""
    m = np.asarray(x, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        raise DimMismatch(f"{name}: expected a 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name}: contains non-finite entries")
    return m


@dataclass
class GradPair:
    """A scalar value plus gradients keyed by input name.

    Each gradient has the same shape as the input it differentiates;
    scalar inputs (e.g. a temperature) carry a plain float.
    """

    value: float
    grads: Dict[str, Union[np.ndarray, float]]

    def grad(self, name: str):
        return self.grads[name]


def row_norms(m: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(m * m, axis=1))


def row_normalize(m: Matrix) -> Matrix:
    """Scale every row to unit L2 norm; raises ZeroNormRow on degenerate rows."""
    m = as_matrix(m)
    norms = row_norms(m)
    bad = np.flatnonzero(norms <= NORM_EPS)
    if bad.size:
        raise ZeroNormRow(int(bad[0]))
    return m / norms[:, None]


def cosine_sim(a: Matrix, b: Matrix) -> Matrix:
    """Pairwise cosine similarity of unit-row matrices, i.e. a @ b.T.

    Callers are responsible for normalizing rows first (see row_normalize).
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[1]:
        raise DimMismatch(
            f"embedding dims differ: {a.shape[1]} vs {b.shape[1]}"
        )
    return a @ b.T


def softmax_rows(logits: Matrix) -> Matrix:
    """Row-wise softmax, stabilized by subtracting each row's max."""
    z = as_matrix(logits, "logits")
    z = z - np.max(z, axis=1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=1, keepdims=True)


def finite_diff_grad(
    f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-4
) -> np.ndarray:
    """Central-difference gradient estimate of a scalar function, per entry.

    The oracle against which every analytic gradient in the loss layer is
    checked; it deliberately shares no code with those gradients.
    """
    if not (1e-6 <= eps <= 1e-2):
        raise ValueError(f"eps must lie in [1e-6, 1e-2], got {eps}")
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Frobenius-norm relative difference used by the gradient checks."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), 1e-12)
    return float(np.linalg.norm(a - b)) / denom
