"""Differentiable objectives: cross-entropy, KD, tuplet/intra-class contrast, margin gate."""
import logging
from dataclasses import dataclass
from typing import Sequence, Tuple, Union

import numpy as np

from . import ndgrad as nd
from .errors import ClassIndexError, ContractError, DimensionError
from .ndgrad import Tensor

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
SIMPLEX_TOL = 1e-9

Negatives = Union[Tensor, np.ndarray, Sequence[Union[Tensor, np.ndarray]]]


@dataclass(frozen=True)
class Margin:
    """rho = p[y] - max_{i != y} p[i]."""

    rho: float

    def __post_init__(self):
        if not -1.0 - SIMPLEX_TOL <= self.rho <= 1.0 + SIMPLEX_TOL:
            raise ContractError(f"margin must lie in [-1, 1], got {self.rho}")

    def __float__(self) -> float:
        return self.rho


def check_simplex(p: np.ndarray, name: str = "p") -> None:
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > SIMPLEX_TOL):
        raise ContractError(f"{name} is not a probability vector (min={p.min():.3g}, sums={np.round(p.sum(axis=-1), 12)})")


def one_hot(labels, c: int) -> np.ndarray:
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if np.any(labels < 0) or np.any(labels >= c):
        raise ClassIndexError(f"labels outside 0..{c - 1}: {labels[(labels < 0) | (labels >= c)][:5]}")
    out = np.zeros((labels.size, c))
    out[np.arange(labels.size), labels] = 1.0
    return out


def cross_entropy(target, pred) -> Tensor:
    """-sum(target * log(pred)) with pred clamped at 1e-12.

    Matrix inputs are treated as rows and the mean over rows is returned.
    """
    t, p = nd.as_tensor(target), nd.as_tensor(pred)
    if t.shape != p.shape:
        raise DimensionError("cross_entropy target and prediction differ in shape", [t.shape, p.shape])
    terms = nd.mul(t, nd.log(p, floor=PROB_FLOOR))
    if p.data.ndim == 2:
        return nd.neg(nd.mean(nd.sum_rows(terms)))
    return nd.neg(nd.sum(terms))


def soft_target(y, p_t, alpha: float) -> np.ndarray:
    """q = alpha * y + (1 - alpha) * p_t."""
    return alpha * np.asarray(y, dtype=np.float64) + (1.0 - alpha) * np.asarray(p_t, dtype=np.float64)


def kd_student_loss(y, p_t, p_s, alpha: float) -> Tensor:
    """alpha * CE(y, p_s) + (1 - alpha) * CE(p_t, p_s)."""
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"alpha must lie in [0, 1], got {alpha}")
    y_arr = y.data if isinstance(y, Tensor) else np.asarray(y, dtype=np.float64)
    pt_arr = p_t.data if isinstance(p_t, Tensor) else np.asarray(p_t, dtype=np.float64)
    ps = nd.as_tensor(p_s)
    check_simplex(y_arr, "y")
    check_simplex(pt_arr, "p_t")
    check_simplex(ps.data, "p_s")
    hard = cross_entropy(y_arr, ps)
    soft = cross_entropy(pt_arr, ps)
    return nd.add(nd.scale(hard, alpha), nd.scale(soft, 1.0 - alpha))


def _negative_matrix(negatives: Negatives) -> Tensor:
    if isinstance(negatives, Tensor):
        mat = negatives if negatives.data.ndim == 2 else nd.stack([negatives])
    elif isinstance(negatives, np.ndarray):
        mat = nd.as_tensor(negatives if negatives.ndim == 2 else negatives[None, :])
    else:
        if len(negatives) == 0:
            raise ContractError("tuplet loss needs at least one negative")
        mat = nd.stack(list(negatives))
    if mat.shape[0] == 0:
        raise ContractError("tuplet loss needs at least one negative")
    return mat


def tuplet_loss(anchor, positive, negatives: Negatives) -> Tensor:
    """log(1 + sum_j exp(a.n_j) / exp(a.p)) over raw dot products, no temperature."""
    a, p = nd.as_tensor(anchor), nd.as_tensor(positive)
    negs = _negative_matrix(negatives)
    if a.data.ndim != 1 or a.shape != p.shape or negs.shape[1] != a.shape[0]:
        raise DimensionError("tuplet loss vectors differ in dimension", [a.shape, p.shape, negs.shape])
    neg_sims = nd.matmul(negs, a)
    pos_sim = nd.dot(a, p)
    ratio = nd.mul(nd.sum(nd.exp(neg_sims)), nd.exp(nd.neg(pos_sim)))
    return nd.log(nd.add(ratio, 1.0))


def tuplet_loss_rows(pos_sims: Tensor, neg_sims: Tensor) -> Tensor:
    """Per-anchor tuplet losses from precomputed similarities: (N,) and (N, k) -> (N,)."""
    if pos_sims.data.ndim != 1 or neg_sims.data.ndim != 2 or neg_sims.shape[0] != pos_sims.shape[0]:
        raise DimensionError("tuplet_loss_rows needs (N,) and (N, k) similarities", [pos_sims.shape, neg_sims.shape])
    if neg_sims.shape[1] == 0:
        raise ContractError("tuplet loss needs at least one negative")
    ratio = nd.mul(nd.sum_rows(nd.exp(neg_sims)), nd.exp(nd.neg(pos_sims)))
    return nd.log(nd.add(ratio, 1.0))


def intra_tuplet_loss(anchor, positive, same_class_negatives: Negatives) -> Tensor:
    """Tuplet loss whose negatives share the anchor's class; the caller guarantees that."""
    return tuplet_loss(anchor, positive, same_class_negatives)


def margin_of(p, y: int) -> Margin:
    p = np.asarray(p.data if isinstance(p, Tensor) else p, dtype=np.float64)
    if p.ndim != 1 or p.size < 2:
        raise ContractError(f"margin needs at least two classes, got shape {p.shape}")
    if not 0 <= y < p.size:
        raise ClassIndexError(f"class {y} outside 0..{p.size - 1}")
    return Margin(float(p[y] - np.max(np.delete(p, y))))


def margins(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Vectorized margin_of over rows."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or probs.shape[1] < 2:
        raise ContractError(f"margins need an (N, c>=2) matrix, got {probs.shape}")
    if np.any(labels < 0) or np.any(labels >= probs.shape[1]):
        raise ClassIndexError(f"labels outside 0..{probs.shape[1] - 1}")
    rows = np.arange(len(labels))
    true = probs[rows, labels]
    others = probs.copy()
    others[rows, labels] = -np.inf
    return true - others.max(axis=1)


def gated_intra_loss(anchor, positive, negatives: Negatives, rho: Union[Margin, float], delta: float) -> Tensor:
    """Intra-class loss when rho > delta, otherwise exactly 0 with zero gradient."""
    if delta <= 0:
        raise ContractError(f"delta must be positive, got {delta}")
    rho = float(rho)
    if rho > delta:
        return intra_tuplet_loss(anchor, positive, negatives)
    a, p = nd.as_tensor(anchor), nd.as_tensor(positive)
    negs = _negative_matrix(negatives)
    if a.shape != p.shape or negs.shape[1] != a.shape[0]:
        raise DimensionError("tuplet loss vectors differ in dimension", [a.shape, p.shape, negs.shape])
    return nd.block(a, p, negs)


def teacher_total_loss(ce, intra, lam: float) -> Tensor:
    """CE + lambda * intra. lambda = 0 is the plain cross-entropy control."""
    if lam < 0:
        raise ContractError(f"lambda must be >= 0, got {lam}")
    return nd.add(nd.as_tensor(ce), nd.scale(nd.as_tensor(intra), lam))


def combined_contrastive_loss(anchor, positive, inter_negatives: Negatives, intra_negatives: Negatives,
                              lam: float) -> Tuple[Tensor, Tensor, Tensor]:
    """(L_inter + lambda * L_intra, L_inter, L_intra)."""
    if lam < 0:
        raise ContractError(f"lambda must be >= 0, got {lam}")
    l_inter = tuplet_loss(anchor, positive, inter_negatives)
    l_intra = intra_tuplet_loss(anchor, positive, intra_negatives)
    return nd.add(l_inter, nd.scale(l_intra, lam)), l_inter, l_intra
