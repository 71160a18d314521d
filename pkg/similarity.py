"""
Linear CKA similarity, its Gram-cosine form, the MMD decomposition and
bound, and the analytic gradient of CKA with respect to one input.

S_CKA(X, Y) = ‖YᵀX‖²_F / (‖XᵀX‖_F ‖YᵀY‖_F), optionally after column
centering both inputs (CkaConfig.center, default on).
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

import linalg
from errors import ConfigError, DegenerateInputError, DimensionError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CkaConfig:
    center: bool = True
    eps: float = linalg.DEGENERATE_EPS

    def __post_init__(self):
        if not self.eps > 0:
            raise ConfigError(f"eps must be positive, got {self.eps}")


DEFAULT_CONFIG = CkaConfig()


@dataclass(frozen=True)
class MmdDecomposition:
    """
    CKA split into the pairwise Gram-difference term and its Jensen bound.
    Exact algebra: mmd_form = 2 - pairwise_term = 2·cka, and
    mmd_form <= jensen_bound.
    """
    cka: float
    pairwise_term: float
    jensen_bound: float

    @property
    def mmd_form(self) -> float:
        return 2.0 - self.pairwise_term


def _prepare(x, y, cfg: CkaConfig) -> Tuple[np.ndarray, np.ndarray]:
    x = linalg.as_matrix(x, 'X')
    y = linalg.as_matrix(y, 'Y')
    if x.shape[0] != y.shape[0]:
        raise DimensionError(f"row count mismatch: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 2:
        raise DimensionError(f"CKA needs at least 2 rows, got {x.shape[0]}")
    if cfg.center:
        x = linalg.center_columns(x)
        y = linalg.center_columns(y)
    return x, y


def _cka_terms(x: np.ndarray, y: np.ndarray, cfg: CkaConfig) -> Tuple[float, float, float]:
    """Numerator ‖YᵀX‖²_F and the two Gram norms, in the cheaper space."""
    n = x.shape[0]
    if n <= max(x.shape[1], y.shape[1]):
        gx = x @ x.T
        gy = y @ y.T
        numerator = float(np.dot(gx.reshape(-1), gy.reshape(-1)))
        norm_x = linalg.frobenius_norm(gx)
        norm_y = linalg.frobenius_norm(gy)
    else:
        numerator = linalg.frobenius_norm(y.T @ x) ** 2
        norm_x = linalg.frobenius_norm(x.T @ x)
        norm_y = linalg.frobenius_norm(y.T @ y)
    if norm_x <= cfg.eps or norm_y <= cfg.eps:
        raise DegenerateInputError(
            f"near-zero Gram norm (X: {norm_x:.3e}, Y: {norm_y:.3e}, eps {cfg.eps:.1e})")
    return numerator, norm_x, norm_y


def cka(x, y, cfg: CkaConfig = DEFAULT_CONFIG) -> float:
    """CKA similarity in [0, 1]; symmetric in its arguments."""
    x, y = _prepare(x, y, cfg)
    numerator, norm_x, norm_y = _cka_terms(x, y, cfg)
    return numerator / (norm_x * norm_y)


def cka_via_gram_cosine(x, y, cfg: CkaConfig = DEFAULT_CONFIG) -> float:
    """CKA computed as the cosine between vec(XXᵀ) and vec(YYᵀ)."""
    x, y = _prepare(x, y, cfg)
    gx = linalg.vec(linalg.gram(x))
    gy = linalg.vec(linalg.gram(y))
    if np.sqrt(np.dot(gx, gx)) <= cfg.eps or np.sqrt(np.dot(gy, gy)) <= cfg.eps:
        raise DegenerateInputError("near-zero Gram norm")
    return linalg.cosine(gx, gy)


def mmd_decomposition(x, y, cfg: CkaConfig = DEFAULT_CONFIG) -> MmdDecomposition:
    """
    Normalize rows by sqrt(‖XXᵀ‖_F) (and likewise for Y), then return the
    pairwise term Σᵢⱼ(⟨x̃ᵢ,x̃ⱼ⟩ - ⟨ỹᵢ,ỹⱼ⟩)² and the Jensen bound
    2 - (Σᵢⱼ⟨x̃ᵢ,x̃ⱼ⟩ - Σᵢⱼ⟨ỹᵢ,ỹⱼ⟩)² / N², both as exact sums.
    """
    x, y = _prepare(x, y, cfg)
    n = x.shape[0]
    gx = x @ x.T
    gy = y @ y.T
    norm_x = linalg.frobenius_norm(gx)
    norm_y = linalg.frobenius_norm(gy)
    if norm_x <= cfg.eps or norm_y <= cfg.eps:
        raise DegenerateInputError(f"near-zero Gram norm (X: {norm_x:.3e}, Y: {norm_y:.3e})")
    x_tilde = x / np.sqrt(norm_x)
    y_tilde = y / np.sqrt(norm_y)
    inner_x = x_tilde @ x_tilde.T
    inner_y = y_tilde @ y_tilde.T
    diff = inner_x - inner_y
    pairwise_term = float(np.sum(diff * diff))
    total_diff = float(np.sum(inner_x)) - float(np.sum(inner_y))
    jensen_bound = 2.0 - total_diff * total_diff / (n * n)
    similarity = float(np.dot(gx.reshape(-1), gy.reshape(-1))) / (norm_x * norm_y)
    return MmdDecomposition(cka=similarity, pairwise_term=pairwise_term, jensen_bound=jensen_bound)


def cka_gradient(x, y, cfg: CkaConfig = DEFAULT_CONFIG) -> np.ndarray:
    """
    ∂S_CKA/∂X with Y held fixed. Quotient rule over A = ‖YᵀX‖²_F and
    B = ‖XᵀX‖_F; pulled back through the centering map when cfg.center.
    """
    xc, yc = _prepare(x, y, cfg)
    numerator, norm_x, norm_y = _cka_terms(xc, yc, cfg)
    grad_numerator = 2.0 * (yc @ (yc.T @ xc))
    grad_norm_x = 2.0 * (xc @ (xc.T @ xc)) / norm_x
    grad = grad_numerator / (norm_x * norm_y) - numerator * grad_norm_x / (norm_x ** 2 * norm_y)
    if cfg.center:
        # centering is a symmetric projection, so its adjoint is itself
        grad = grad - grad.mean(axis=0, keepdims=True)
    return grad


def cka_loss(x, y, cfg: CkaConfig = DEFAULT_CONFIG) -> Tuple[float, np.ndarray]:
    """1 - cka(X, Y) and its gradient with respect to X."""
    value = 1.0 - cka(x, y, cfg)
    return value, -cka_gradient(x, y, cfg)


def layer_cka_matrix(layers_a: List, layers_b: List, cfg: CkaConfig = DEFAULT_CONFIG,
                     workers: int = 1) -> np.ndarray:
    """Entry (i, j) = cka(A[i], B[j]); evaluated in a thread pool when workers > 1."""
    if not layers_a or not layers_b:
        raise DimensionError("layer lists must be non-empty")

    def entry(pair):
        i, j = pair
        try:
            return cka(layers_a[i], layers_b[j], cfg)
        except (DimensionError, DegenerateInputError) as e:
            raise type(e)(f"layer pair ({i}, {j}): {e}") from e

    pairs = [(i, j) for i in range(len(layers_a)) for j in range(len(layers_b))]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            values = list(executor.map(entry, pairs))
    else:
        values = [entry(pair) for pair in pairs]

    logger.info(f"Computed {len(layers_a)}x{len(layers_b)} layer CKA matrix")
    return np.array(values, dtype=np.float64).reshape(len(layers_a), len(layers_b))
