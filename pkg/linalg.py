"""
Dense-matrix primitives shared by the similarity and loss modules.
Gram matrices, Frobenius norms and inner products, column centering, vec.

Matrices are 2-D float64 numpy arrays, row-major. Constructors reject
empty or non-finite input so downstream math never sees NaN.
"""

import logging

import numpy as np

from errors import DegenerateInputError, DimensionError, NonFiniteInputError

logger = logging.getLogger(__name__)

# Norms below this are treated as zero before any division
DEGENERATE_EPS = 1e-30


def as_matrix(x, name: str = 'matrix') -> np.ndarray:
    """Validate and convert x to a 2-D finite float64 array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DimensionError(f"{name} must be non-empty, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteInputError(f"{name} contains NaN or Inf")
    return arr


def as_vector(x, name: str = 'vector') -> np.ndarray:
    """Validate and convert x to a 1-D finite float64 array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] < 1:
        raise DimensionError(f"{name} must be a non-empty 1-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteInputError(f"{name} contains NaN or Inf")
    return arr


def gram(x) -> np.ndarray:
    """Return the Gram matrix X Xᵀ (rows × rows)."""
    x = as_matrix(x)
    return x @ x.T


def center_columns(x) -> np.ndarray:
    """Subtract each column's mean, so every column sums to zero."""
    x = as_matrix(x)
    return x - x.mean(axis=0, keepdims=True)


def vec(x) -> np.ndarray:
    """Row-major flattening of a matrix."""
    return as_matrix(x).reshape(-1)


def unvec(v, rows: int, cols: int) -> np.ndarray:
    """Inverse of vec."""
    v = as_vector(v)
    if v.shape[0] != rows * cols:
        raise DimensionError(f"cannot reshape length {v.shape[0]} into {rows}x{cols}")
    return v.reshape(rows, cols)


def frobenius_inner(x, y) -> float:
    """Σᵢⱼ XᵢⱼYᵢⱼ, summed in vec order."""
    x = as_matrix(x, 'X')
    y = as_matrix(y, 'Y')
    if x.shape != y.shape:
        raise DimensionError(f"shape mismatch: {x.shape} vs {y.shape}")
    return float(np.dot(x.reshape(-1), y.reshape(-1)))


def frobenius_norm(x) -> float:
    v = vec(x)
    return float(np.sqrt(np.dot(v, v)))


def cosine(a, b) -> float:
    """Cosine similarity of two vectors, clipped to [-1, 1]."""
    a = as_vector(a, 'a')
    b = as_vector(b, 'b')
    if a.shape != b.shape:
        raise DimensionError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    norm_a = float(np.sqrt(np.dot(a, a)))
    norm_b = float(np.sqrt(np.dot(b, b)))
    if norm_a <= DEGENERATE_EPS or norm_b <= DEGENERATE_EPS:
        raise DegenerateInputError(f"near-zero norm in cosine ({norm_a:.3e}, {norm_b:.3e})")
    value = float(np.dot(a, b)) / (norm_a * norm_b)
    return min(1.0, max(-1.0, value))


def random_orthogonal(n: int, rng: np.random.Generator) -> np.ndarray:
    """Random n×n orthogonal matrix from the QR of a Gaussian matrix."""
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    # sign fix so the distribution is uniform over O(n)
    return q * np.sign(np.diag(r))
