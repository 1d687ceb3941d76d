"""Self-training loss terms, the confidence weighting factor, and the weighted total.

Six terms enter the objective: the detector's RPN and ROI losses, soft-label
KL distillation, pooled-feature distillation, prediction entropy, and a
symmetric InfoNCE contrastive term over matched region features.  The total
is scaled by a confidence factor that grows with the dynamic teacher's
prediction entropy and the pseudo-label count (clamped to ``factor_cap``).

Every function accepts either plain ndarrays (returns a constant Tensor) or
graph Tensors (stays differentiable); ``.item()`` gives the float value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor, log_softmax, l2_normalize_rows
from .errors import ConfigurationError, ContractViolationError, NumericError

TERM_NAMES = ("rpn", "roi", "kl_distill", "feature_distill", "entropy", "contrastive")


@dataclass(frozen=True)
class LossWeights:
    """w1..w6 plus the weighting-factor knobs; all invented defaults, meant to be swept."""

    w_rpn: float = 1.0
    w_roi: float = 1.0
    w_kl: float = 0.5
    w_feature: float = 0.5
    w_entropy: float = 0.1
    w_contrastive: float = 0.1
    gamma_e: float = 0.1
    gamma_p: float = 0.01
    factor_cap: float = 4.0
    kl_direction: str = "pseudo_to_student"  # or "student_to_pseudo"
    temperature: float = 0.07

    def __post_init__(self):
        vals = (
            self.w_rpn, self.w_roi, self.w_kl, self.w_feature, self.w_entropy,
            self.w_contrastive, self.gamma_e, self.gamma_p,
        )
        if any(not np.isfinite(v) or v < 0 for v in vals):
            raise ConfigurationError("loss weights and gammas must be finite and non-negative")
        if self.factor_cap < 1.0:
            raise ConfigurationError("factor_cap must be at least 1")
        if self.kl_direction not in ("pseudo_to_student", "student_to_pseudo"):
            raise ConfigurationError(f"unknown kl_direction {self.kl_direction!r}")
        if self.temperature <= 0:
            raise ConfigurationError("temperature must be positive")

    def as_w_tuple(self) -> tuple:
        return (self.w_rpn, self.w_roi, self.w_kl, self.w_feature, self.w_entropy, self.w_contrastive)


@dataclass(frozen=True)
class LossBreakdown:
    """Per-term values, the weighting factor, and the weighted total."""

    rpn: float
    roi: float
    kl_distill: float
    feature_distill: float
    entropy: float
    contrastive: float
    factor: float
    total: float
    total_tensor: Tensor

    def terms(self) -> dict:
        return {
            "rpn": self.rpn,
            "roi": self.roi,
            "kl_distill": self.kl_distill,
            "feature_distill": self.feature_distill,
            "entropy": self.entropy,
            "contrastive": self.contrastive,
        }


def _rows(value, what: str) -> Tensor:
    t = as_tensor(value)
    if t.ndim != 2:
        raise ContractViolationError(f"{what} must be a 2-D row matrix, got shape {t.shape}")
    return t


def _check_normalized(data: np.ndarray, what: str, tol: float = 1e-4) -> None:
    if data.shape[0] == 0:
        return
    sums = data.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > tol):
        raise ContractViolationError(f"{what} rows must sum to 1 within {tol}")
    if np.any(data < -1e-9):
        raise ContractViolationError(f"{what} rows must be non-negative")


def _xlogx_const(p: np.ndarray) -> np.ndarray:
    out = np.zeros_like(p, dtype=np.float64)
    mask = p > 0
    out[mask] = p[mask] * np.log(p[mask])
    return out


def _plogq(p_const: np.ndarray, q: Tensor) -> Tensor:
    # sum of p*log q with the p==0 entries contributing exactly 0 (and no
    # gradient), via a mask that shifts log's argument to 1 there.
    mask = (p_const == 0.0).astype(q.data.dtype)
    return ((q + mask).log() * p_const).sum()


def soft_kl_distill(student_soft, pseudo_soft, direction: str = "pseudo_to_student") -> Tensor:
    """Mean row-wise KL divergence between pseudo and student class distributions.

    Default direction treats the pseudo (teacher) rows as the target:
    mean_i KL(pseudo_i || student_i).  Rows must be aligned by the detector's
    proposal-to-pseudo-label matching and normalized.
    """
    s = _rows(student_soft, "student_soft")
    p = _rows(pseudo_soft, "pseudo_soft")
    if s.shape != p.shape:
        raise ContractViolationError(f"row shapes differ: {s.shape} vs {p.shape}")
    n = s.shape[0]
    if n == 0:
        return Tensor(np.float64(0.0))
    _check_normalized(s.data, "student_soft")
    _check_normalized(p.data, "pseudo_soft")
    if direction == "pseudo_to_student":
        const = float(_xlogx_const(p.data).sum())
        return (const - _plogq(p.data, s)) * (1.0 / n)
    if direction == "student_to_pseudo":
        # KL(student || pseudo); pseudo rows are floored at 1e-12 since one-hot
        # targets would otherwise make this direction infinite.
        q_const = np.clip(np.asarray(p.data, dtype=np.float64), 1e-12, None)
        mask = (s.data == 0.0).astype(s.data.dtype)
        s_logs = ((s + mask).log() * s).sum()
        return (s_logs - (s * np.log(q_const)).sum()) * (1.0 / n)
    raise ConfigurationError(f"unknown direction {direction!r}")


def feature_distill(ft_teacher, ft_student) -> Tensor:
    """Mean squared difference of the per-image pooled feature vectors."""
    t = as_tensor(getattr(ft_teacher, "pooled", ft_teacher))
    s = as_tensor(getattr(ft_student, "pooled", ft_student))
    if t.shape != s.shape:
        raise ContractViolationError(f"embedding dims differ: {t.shape} vs {s.shape}")
    d = s - t
    return (d * d).mean()


def entropy_loss(student_soft) -> Tensor:
    """Mean Shannon entropy (nats) of the student's class-probability rows."""
    s = _rows(student_soft, "student_soft")
    n = s.shape[0]
    if n == 0:
        return Tensor(np.float64(0.0))
    _check_normalized(s.data, "student_soft")
    mask = (s.data == 0.0).astype(s.data.dtype)
    return -((s + mask).log() * s).sum() * (1.0 / n)


def contrastive_loss(teacher_regions, student_regions, temperature: float = 0.07) -> Tensor:
    """Symmetric InfoNCE over cosine similarities of row-aligned region features.

    Row i of the two matrices must describe the same pseudo-labeled region;
    its positive is the counterpart row, negatives are all other rows.  The
    loss is the sum of the two directional mean cross-entropies, so a single
    region (no negatives) contributes 0.
    """
    if temperature <= 0:
        raise ConfigurationError("temperature must be positive")
    t = _rows(teacher_regions, "teacher_regions")
    s = _rows(student_regions, "student_regions")
    if t.shape != s.shape:
        raise ContractViolationError(f"region shapes differ: {t.shape} vs {s.shape}")
    m = t.shape[0]
    if m <= 1:
        return Tensor(np.float64(0.0))
    for mat, what in ((t.data, "teacher_regions"), (s.data, "student_regions")):
        norms = np.sqrt((np.asarray(mat, dtype=np.float64) ** 2).sum(axis=1))
        if np.any(norms <= 0.0):
            raise ContractViolationError(f"{what} contains a zero-norm row")
    zt = l2_normalize_rows(t)
    zs = l2_normalize_rows(s)
    sim = (zt @ zs.T) * (1.0 / temperature)
    diag = (np.arange(m), np.arange(m))
    loss_t2s = -(log_softmax(sim, axis=1)[diag].mean())
    loss_s2t = -(log_softmax(sim.T, axis=1)[diag].mean())
    return loss_t2s + loss_s2t


def weight_factor(dyn_soft: np.ndarray, pseudo_count: int, weights: LossWeights) -> float:
    """Confidence factor (1 + gamma_e * entropy) * (1 + gamma_p * count), clamped to [1, cap].

    ``dyn_soft`` holds the dynamic teacher's raw detection soft labels (the
    algorithm's literal input), not the post-consensus set.
    """
    if pseudo_count < 0:
        raise ContractViolationError("pseudo_count must be non-negative")
    arr = np.asarray(dyn_soft, dtype=np.float64)
    if arr.size:
        arr = arr.reshape(-1, arr.shape[-1])
        ent = float(-_xlogx_const(arr).sum(axis=1).mean())
    else:
        ent = 0.0
    raw = (1.0 + weights.gamma_e * ent) * (1.0 + weights.gamma_p * pseudo_count)
    return float(min(max(raw, 1.0), weights.factor_cap))


def total(
    rpn,
    roi,
    kl_distill,
    feature_distill_term,
    entropy,
    contrastive,
    factor: float,
    weights: LossWeights,
) -> LossBreakdown:
    """Weighted sum of the six terms scaled by the precomputed factor.

    Differentiable with respect to every Tensor-valued part; raises
    ``NumericError`` naming the first non-finite term.
    """
    parts = {
        "rpn": as_tensor(rpn),
        "roi": as_tensor(roi),
        "kl_distill": as_tensor(kl_distill),
        "feature_distill": as_tensor(feature_distill_term),
        "entropy": as_tensor(entropy),
        "contrastive": as_tensor(contrastive),
    }
    for name, t in parts.items():
        if not np.all(np.isfinite(t.data)):
            raise NumericError(f"loss term {name!r} is non-finite")
    if not np.isfinite(factor):
        raise NumericError("weighting factor is non-finite")
    w = weights.as_w_tuple()
    weighted = None
    for wi, t in zip(w, parts.values()):
        term = t * float(wi)
        weighted = term if weighted is None else weighted + term
    total_tensor = weighted * float(factor)
    return LossBreakdown(
        rpn=parts["rpn"].item(),
        roi=parts["roi"].item(),
        kl_distill=parts["kl_distill"].item(),
        feature_distill=parts["feature_distill"].item(),
        entropy=parts["entropy"].item(),
        contrastive=parts["contrastive"].item(),
        factor=float(factor),
        total=total_tensor.item(),
        total_tensor=total_tensor,
    )
