"""
Distillation losses. Each returns a LossReport holding the loss value,
its gradient with respect to the student input, and named components.

CKA-derived losses use the convention loss = 1 - S_CKA, so they are
bounded, nonnegative and zero when student and teacher align.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np

import linalg
import similarity
from errors import ConfigError, DegenerateInputError, DimensionError, NonFiniteInputError, PatchError
from similarity import CkaConfig

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PatchConfig:
    p_h: int = 2
    p_w: int = 2

    def __post_init__(self):
        if self.p_h < 1 or self.p_w < 1:
            raise ConfigError(f"patch size must be >= 1, got ({self.p_h}, {self.p_w})")


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 5.0
    beta: float = 5.0
    gamma: float = 10.0
    tau: float = 4.0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ConfigError(f"loss weights must be >= 0, got {self}")
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")


@dataclass
class LossReport:
    value: float
    grad: Optional[np.ndarray]
    components: Dict[str, float] = field(default_factory=dict)
    extra_grads: Dict[str, np.ndarray] = field(default_factory=dict)
    skipped: List[int] = field(default_factory=list)


class AverageDim(Enum):
    """Which axis of the patched feature map PCKA averages over."""
    CHANNEL = 'channel'
    BATCH = 'batch'
    SPATIAL = 'spatial'


def as_feature_map(f, name: str = 'feature map') -> np.ndarray:
    """Validate a (b, c, h, w) feature map."""
    arr = np.asarray(f, dtype=np.float64)
    if arr.ndim != 4 or min(arr.shape) < 1:
        raise DimensionError(f"{name} must be 4-D (b, c, h, w) with all dims >= 1, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteInputError(f"{name} contains NaN or Inf")
    return arr


def as_logits(z, name: str = 'logits') -> np.ndarray:
    arr = linalg.as_matrix(z, name)
    if arr.shape[0] < 2 or arr.shape[1] < 2:
        raise DimensionError(f"{name} needs n >= 2 samples and p >= 2 classes, got shape {arr.shape}")
    return arr


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))


def cross_entropy_loss(z, labels) -> LossReport:
    """Mean softmax cross-entropy against integer labels."""
    z = linalg.as_matrix(z, 'logits')
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (z.shape[0],):
        raise DimensionError(f"expected {z.shape[0]} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= z.shape[1]:
        raise DimensionError(f"labels out of range for {z.shape[1]} classes")
    n = z.shape[0]
    log_p = _log_softmax(z)
    value = float(-np.mean(log_p[np.arange(n), labels]))
    grad = np.exp(log_p)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return LossReport(value=value, grad=grad, components={'ce': value})


def kd_kl_loss(z_s, z_t, tau: float = 4.0) -> LossReport:
    """
    Vanilla KD: τ² · mean over samples of KL(softmax(z_t/τ) ‖ softmax(z_s/τ)).
    """
    z_s = as_logits(z_s, 'student logits')
    z_t = as_logits(z_t, 'teacher logits')
    if z_s.shape != z_t.shape:
        raise DimensionError(f"logit shape mismatch: {z_s.shape} vs {z_t.shape}")
    if not tau > 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    n = z_s.shape[0]
    log_ps = _log_softmax(z_s / tau)
    log_pt = _log_softmax(z_t / tau)
    p_t = np.exp(log_pt)
    kl = np.sum(p_t * (log_pt - log_ps), axis=1)
    value = float(tau * tau * np.mean(kl))
    grad = tau * (np.exp(log_ps) - p_t) / n
    return LossReport(value=value, grad=grad, components={'kd': value})


def fcka_loss(f_s, f_t, cfg: CkaConfig = similarity.DEFAULT_CONFIG) -> LossReport:
    """Feature CKA on maps flattened to (b, c·h·w); channel and spatial dims may differ."""
    f_s = as_feature_map(f_s, 'student features')
    f_t = as_feature_map(f_t, 'teacher features')
    if f_s.shape[0] != f_t.shape[0]:
        raise DimensionError(f"batch mismatch: {f_s.shape[0]} vs {f_t.shape[0]}")
    b = f_s.shape[0]
    value, grad = similarity.cka_loss(f_s.reshape(b, -1), f_t.reshape(b, -1), cfg)
    return LossReport(value=value, grad=grad.reshape(f_s.shape), components={'fcka': value})


def intra_lcka_loss(z_s, z_t, cfg: CkaConfig = similarity.DEFAULT_CONFIG) -> LossReport:
    """CKA between sample Grams of the logits (N×N); class counts may differ."""
    z_s = as_logits(z_s, 'student logits')
    z_t = as_logits(z_t, 'teacher logits')
    if z_s.shape[0] != z_t.shape[0]:
        raise DimensionError(f"sample count mismatch: {z_s.shape[0]} vs {z_t.shape[0]}")
    value, grad = similarity.cka_loss(z_s, z_t, cfg)
    return LossReport(value=value, grad=grad, components={'intra': value})


def inter_lcka_loss(z_s, z_t, cfg: CkaConfig = similarity.DEFAULT_CONFIG) -> LossReport:
    """CKA between class Grams of the transposed logits (P×P)."""
    z_s = as_logits(z_s, 'student logits')
    z_t = as_logits(z_t, 'teacher logits')
    if z_s.shape != z_t.shape:
        raise DimensionError(f"logit shape mismatch: {z_s.shape} vs {z_t.shape}")
    value, grad = similarity.cka_loss(z_s.T, z_t.T, cfg)
    return LossReport(value=value, grad=grad.T, components={'inter': value})


def rcka_total(ce: float, fcka: LossReport, intra: LossReport, inter: LossReport,
               w: LossWeights = LossWeights()) -> LossReport:
    """
    L = ce + α·fcka + β·(intra + inter).
    grad holds the weighted logit gradient (intra + inter); the weighted
    feature gradient is in extra_grads['features']. The CE gradient is the
    caller's to add.
    """
    value = ce + w.alpha * fcka.value + w.beta * (intra.value + inter.value)
    components = {
        'ce': ce,
        'fcka': fcka.value,
        'intra': intra.value,
        'inter': inter.value,
        'total': value,
    }
    grad = None
    if intra.grad is not None and inter.grad is not None:
        grad = w.beta * (intra.grad + inter.grad)
    extra = {}
    if fcka.grad is not None:
        extra['features'] = w.alpha * fcka.grad
    return LossReport(value=value, grad=grad, components=components, extra_grads=extra)


def _check_divisible(shape: Tuple[int, ...], pc: PatchConfig):
    _, _, h, w = shape
    if h % pc.p_h or w % pc.p_w:
        raise PatchError(f"spatial dims ({h}, {w}) not divisible by patch size ({pc.p_h}, {pc.p_w})")


def _split_patches(f: np.ndarray, pc: PatchConfig) -> np.ndarray:
    """(B, C, H, W) -> (B, C, N_PH, P_H, N_PW, P_W)."""
    b, c, h, w = f.shape
    return f.reshape(b, c, h // pc.p_h, pc.p_h, w // pc.p_w, pc.p_w)


# axis orders over (B, C, N_PH, P_H, N_PW, P_W) and how they collapse to (groups, rows, cols)
_GROUP_AXES = {
    AverageDim.CHANNEL: (1, 2, 4, 0, 3, 5),   # (C, N_PH·N_PW, B·P_H·P_W)
    AverageDim.BATCH: (0, 2, 4, 1, 3, 5),     # (B, N_PH·N_PW, C·P_H·P_W)
    AverageDim.SPATIAL: (2, 4, 0, 1, 3, 5),   # (N_PH·N_PW, B, C·P_H·P_W)
}


def _grouped_shape(six_d: Tuple[int, ...], average: AverageDim) -> Tuple[int, int, int]:
    axes = _GROUP_AXES[average]
    dims = [six_d[a] for a in axes]
    if average is AverageDim.SPATIAL:
        return dims[0] * dims[1], dims[2], dims[3] * dims[4] * dims[5]
    return dims[0], dims[1] * dims[2], dims[3] * dims[4] * dims[5]


def _to_groups(f: np.ndarray, pc: PatchConfig, average: AverageDim) -> np.ndarray:
    six_d = _split_patches(f, pc)
    return six_d.transpose(_GROUP_AXES[average]).reshape(_grouped_shape(six_d.shape, average))


def _from_groups(groups: np.ndarray, shape: Tuple[int, ...], pc: PatchConfig, average: AverageDim) -> np.ndarray:
    b, c, h, w = shape
    six_d_shape = (b, c, h // pc.p_h, pc.p_h, w // pc.p_w, pc.p_w)
    axes = _GROUP_AXES[average]
    permuted = groups.reshape([six_d_shape[a] for a in axes])
    return permuted.transpose(np.argsort(axes)).reshape(shape)


def patchify(f, pc: PatchConfig) -> np.ndarray:
    """
    Cut a (B, C, H, W) map into the (C, N_PH·N_PW, B·P_H·P_W) layout.
    For channel k and patch q = r·N_PW + s the row concatenates, over batch
    elements in order, the row-major values of f[b, k, rP_H:(r+1)P_H, sP_W:(s+1)P_W].
    """
    f = as_feature_map(f)
    _check_divisible(f.shape, pc)
    return _to_groups(f, pc, AverageDim.CHANNEL)


def unpatchify(p, shape: Tuple[int, int, int, int], pc: PatchConfig) -> np.ndarray:
    """Inverse of patchify for a map of the given (B, C, H, W) shape."""
    p = np.asarray(p, dtype=np.float64)
    _check_divisible(shape, pc)
    expected = _grouped_shape(
        (shape[0], shape[1], shape[2] // pc.p_h, pc.p_h, shape[3] // pc.p_w, pc.p_w), AverageDim.CHANNEL)
    if p.shape != expected:
        raise DimensionError(f"patch tensor shape {p.shape} does not match {expected} for map {shape}")
    return _from_groups(p, shape, pc, AverageDim.CHANNEL)


def _grouped_loss(f_s, f_t, pc: PatchConfig, gamma: float, average: AverageDim, workers: int,
                  group_fn, name: str) -> LossReport:
    """
    γ · mean over patch groups of group_fn(student group, teacher group).
    group_fn returns (value, grad wrt the student group) or raises
    DegenerateInputError, in which case the group is skipped.
    """
    f_s = as_feature_map(f_s, 'student features')
    f_t = as_feature_map(f_t, 'teacher features')
    if f_s.shape != f_t.shape:
        raise DimensionError(f"{name.upper()} needs matching maps, got {f_s.shape} vs {f_t.shape}")
    if gamma < 0:
        raise ConfigError(f"gamma must be >= 0, got {gamma}")
    _check_divisible(f_s.shape, pc)

    groups_s = _to_groups(f_s, pc, average)
    groups_t = _to_groups(f_t, pc, average)
    if groups_s.shape[1] < 2:
        raise DimensionError(
            f"{average.value} averaging needs at least 2 rows per group, got {groups_s.shape[1]}")

    def group_loss(k):
        try:
            return group_fn(groups_s[k], groups_t[k])
        except DegenerateInputError:
            return None

    indices = range(groups_s.shape[0])
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            results = list(executor.map(group_loss, indices))
    else:
        results = [group_loss(k) for k in indices]

    skipped = [k for k, r in enumerate(results) if r is None]
    valid = [k for k, r in enumerate(results) if r is not None]
    if not valid:
        raise DegenerateInputError(f"all {len(results)} {average.value} groups are degenerate")
    if skipped:
        logger.warning(f"{name.upper()} skipped {len(skipped)} degenerate {average.value} group(s): {skipped}")

    scale = gamma / len(valid)
    total = 0.0
    grad_groups = np.zeros_like(groups_s)
    for k in valid:
        value_k, grad_k = results[k]
        total += value_k
        grad_groups[k] = scale * grad_k
    value = scale * total
    grad = _from_groups(grad_groups, f_s.shape, pc, average)
    return LossReport(value=value, grad=grad, components={name: value}, skipped=skipped)


def pcka_loss(f_s, f_t, pc: PatchConfig = PatchConfig(), gamma: float = 10.0,
              cfg: CkaConfig = similarity.DEFAULT_CONFIG,
              average: AverageDim = AverageDim.CHANNEL, workers: int = 1) -> LossReport:
    """
    Patch-based CKA: γ · mean over groups of (1 - cka(teacher group, student group)).
    With the default channel averaging each group is one channel's
    (N_PH·N_PW × B·P_H·P_W) slice. Degenerate groups are skipped and listed
    in LossReport.skipped.
    """
    return _grouped_loss(f_s, f_t, pc, gamma, average, workers,
                         lambda s, t: similarity.cka_loss(s, t, cfg), 'pcka')


def _mean_normalized_gram(x: np.ndarray, eps: float) -> Tuple[float, np.ndarray]:
    """Σᵢⱼ(XXᵀ)ᵢⱼ / ‖XXᵀ‖_F and its gradient with respect to X."""
    g = x @ x.T
    norm = linalg.frobenius_norm(g)
    if norm <= eps:
        raise DegenerateInputError(f"near-zero Gram norm ({norm:.3e}, eps {eps:.1e})")
    col_sums = x.sum(axis=0)
    total = float(np.dot(col_sums, col_sums))
    grad_total = 2.0 * np.broadcast_to(col_sums, x.shape)
    grad_norm = 2.0 * (g @ x) / norm
    return total / norm, grad_total / norm - total * grad_norm / (norm * norm)


def mmd_loss(x, y, eps: float = linalg.DEGENERATE_EPS) -> Tuple[float, np.ndarray]:
    """
    Linear-kernel MMD between the rows of X/√‖XXᵀ‖_F and Y/√‖YYᵀ‖_F:
    (Σᵢⱼ⟨x̃ᵢ,x̃ⱼ⟩ - Σᵢⱼ⟨ỹᵢ,ỹⱼ⟩)² / N², which equals 2 - jensen_bound of the
    uncentered MMD decomposition. Returns (value, gradient wrt X).

    Inputs are never centered: centering zeroes every row mean and with it
    the distance.
    """
    x = linalg.as_matrix(x, 'X')
    y = linalg.as_matrix(y, 'Y')
    if x.shape[0] != y.shape[0]:
        raise DimensionError(f"row count mismatch: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 2:
        raise DimensionError(f"MMD needs at least 2 rows, got {x.shape[0]}")
    n = x.shape[0]
    mean_x, grad_x = _mean_normalized_gram(x, eps)
    mean_y, _ = _mean_normalized_gram(y, eps)
    diff = mean_x - mean_y
    return diff * diff / (n * n), (2.0 * diff / (n * n)) * grad_x


def patch_mmd_loss(f_s, f_t, pc: PatchConfig = PatchConfig(), gamma: float = 10.0,
                   average: AverageDim = AverageDim.CHANNEL, workers: int = 1) -> LossReport:
    """mmd_loss over the same patch groups as pcka_loss, averaged and scaled by γ."""
    return _grouped_loss(f_s, f_t, pc, gamma, average, workers, mmd_loss, 'pmmd')


def mimic_mse_loss(f_s, f_t, proj) -> LossReport:
    """
    MSE between the channel-projected student map (a 1×1 convolution,
    proj of shape (teacher channels, student channels)) and the teacher map.
    Gradient for proj is in extra_grads['proj'].
    """
    f_s = as_feature_map(f_s, 'student features')
    f_t = as_feature_map(f_t, 'teacher features')
    proj = linalg.as_matrix(proj, 'projection')
    b, c_s, h, w = f_s.shape
    if (f_t.shape[0], f_t.shape[2], f_t.shape[3]) != (b, h, w):
        raise DimensionError(f"batch/spatial mismatch: {f_s.shape} vs {f_t.shape}")
    if proj.shape != (f_t.shape[1], c_s):
        raise DimensionError(f"projection must be {(f_t.shape[1], c_s)}, got {proj.shape}")
    projected = np.einsum('oc,bchw->bohw', proj, f_s)
    diff = projected - f_t
    value = float(np.mean(diff * diff))
    residual = 2.0 * diff / diff.size
    grad = np.einsum('oc,bohw->bchw', proj, residual)
    grad_proj = np.einsum('bohw,bchw->oc', residual, f_s)
    return LossReport(value=value, grad=grad, components={'mimic': value}, extra_grads={'proj': grad_proj})
