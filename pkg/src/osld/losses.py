"""Cosine similarity and the two metric-learning losses with analytic gradients.

Scalar functions work on a single (s_ap, s_an) pair; ``batch_loss`` is the
vectorised path used during training and backpropagates through the cosine
similarity into the raw (unnormalised) embeddings.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DegenerateInputError, EmptyBatchError, ShapeMismatchError

_SIM_TOL = 1e-9


class LossKind(str, enum.Enum):
    TRIPLET = "triplet"
    BINDEV = "bindev"


@dataclass(frozen=True)
class LossParams:
    alpha: float = 3.0
    margin: float = 0.3
    kind: LossKind = LossKind.BINDEV

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not -1.0 < self.margin < 1.0:
            raise ValueError(f"margin must lie in (-1, 1), got {self.margin}")
        object.__setattr__(self, "kind", LossKind(self.kind))


class PairSimilarities(NamedTuple):
    s_ap: float
    s_an: float

    def check(self) -> "PairSimilarities":
        for name, s in zip(self._fields, self):
            if not -1.0 - _SIM_TOL <= s <= 1.0 + _SIM_TOL:
                raise ValueError(f"{name}={s} outside [-1, 1]")
        return self


class BinDevTerms(NamedTuple):
    positive: float
    negative: float
    total: float


def softplus(x):
    """log(1 + e^x) without overflow."""
    x = np.asarray(x, dtype=float)
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return out if out.ndim else float(out)


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return out if out.ndim else float(out)


def _norm(u: np.ndarray, name: str) -> float:
    n = float(np.linalg.norm(u))
    if not n > 0.0 or not math.isfinite(n):
        raise DegenerateInputError(f"{name} has zero (or non-finite) norm")
    return n


def _pair(u, v):
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.ndim != 1 or u.shape != v.shape or u.size == 0:
        raise ShapeMismatchError(f"expected two equal-length vectors, got {u.shape} and {v.shape}")
    return u, v


def cosine_similarity(u, v) -> float:
    u, v = _pair(u, v)
    nu, nv = _norm(u, "u"), _norm(v, "v")
    s = float(np.dot(u, v)) / (nu * nv)
    return min(1.0, max(-1.0, s))


def cosine_similarity_grad(u, v) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of cos(u, v) with respect to u and v."""
    u, v = _pair(u, v)
    nu, nv = _norm(u, "u"), _norm(v, "v")
    uh, vh = u / nu, v / nv
    s = float(np.dot(uh, vh))
    return (vh - s * uh) / nu, (uh - s * vh) / nv


def triplet_loss(sims: PairSimilarities, params: LossParams) -> float:
    s_ap, s_an = sims
    return max(0.0, s_an - s_ap + params.margin)


def triplet_loss_grad(sims: PairSimilarities, params: LossParams) -> tuple[float, float]:
    # Subgradient 0 at the hinge itself.
    s_ap, s_an = sims
    if s_an - s_ap + params.margin > 0.0:
        return -1.0, 1.0
    return 0.0, 0.0


def bindev_loss(sims: PairSimilarities, params: LossParams) -> BinDevTerms:
    s_ap, s_an = sims
    lap = softplus(-params.alpha * (s_ap - params.margin))
    lan = softplus(params.alpha * (s_an - params.margin))
    return BinDevTerms(lap, lan, lap + lan)


def bindev_grad(sims: PairSimilarities, params: LossParams) -> tuple[float, float]:
    s_ap, s_an = sims
    a, m = params.alpha, params.margin
    return -a * sigmoid(-a * (s_ap - m)), a * sigmoid(a * (s_an - m))


def pair_loss(sims: PairSimilarities, params: LossParams) -> float:
    if params.kind is LossKind.TRIPLET:
        return triplet_loss(sims, params)
    return bindev_loss(sims, params).total


def pair_loss_grad(sims: PairSimilarities, params: LossParams) -> tuple[float, float]:
    if params.kind is LossKind.TRIPLET:
        return triplet_loss_grad(sims, params)
    return bindev_grad(sims, params)


def negative_term(s_an, params: LossParams):
    """Loss contribution of an anchor-negative pair (used for hard-negative mining)."""
    if params.kind is LossKind.TRIPLET:
        return np.asarray(s_an, dtype=float)
    return softplus(params.alpha * (np.asarray(s_an, dtype=float) - params.margin))


def row_cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cosine similarity between matching rows of ``a`` and ``b``."""
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if np.any(na == 0) or np.any(nb == 0):
        raise DegenerateInputError("zero-norm embedding in batch")
    s = np.sum((a / na[:, None]) * (b / nb[:, None]), axis=1)
    return np.clip(s, -1.0, 1.0)


def batch_loss(
    embeddings: np.ndarray,
    triplets: Sequence[Sequence[int]] | np.ndarray,
    params: LossParams,
) -> tuple[float, np.ndarray]:
    """Mean per-triplet loss and its gradient w.r.t. every embedding row.

    ``triplets`` holds (anchor, positive, negative) row indices into
    ``embeddings``.  Rows that appear in no triplet get a zero gradient.
    """
    emb = np.asarray(embeddings, dtype=float)
    trip = np.asarray(triplets, dtype=np.intp).reshape(-1, 3)
    if trip.shape[0] == 0:
        raise EmptyBatchError("batch_loss needs at least one triplet")
    if emb.ndim != 2:
        raise ShapeMismatchError(f"embeddings must be 2-D, got shape {emb.shape}")
    if trip.min() < 0 or trip.max() >= emb.shape[0]:
        raise IndexError("triplet index out of range")

    norms = np.linalg.norm(emb, axis=1)
    used = np.unique(trip)
    if np.any(norms[used] == 0) or not np.all(np.isfinite(norms[used])):
        raise DegenerateInputError("zero-norm embedding referenced by a triplet")
    safe = np.where(norms > 0, norms, 1.0)
    unit = emb / safe[:, None]

    ia, ip, ineg = trip.T
    s_ap = np.clip(np.sum(unit[ia] * unit[ip], axis=1), -1.0, 1.0)
    s_an = np.clip(np.sum(unit[ia] * unit[ineg], axis=1), -1.0, 1.0)

    a, m = params.alpha, params.margin
    if params.kind is LossKind.TRIPLET:
        margin = s_an - s_ap + m
        losses = np.maximum(margin, 0.0)
        active = (margin > 0).astype(float)
        d_ap, d_an = -active, active
    else:
        losses = softplus(-a * (s_ap - m)) + softplus(a * (s_an - m))
        d_ap = -a * sigmoid(-a * (s_ap - m))
        d_an = a * sigmoid(a * (s_an - m))

    n = trip.shape[0]
    d_ap = d_ap / n
    d_an = d_an / n

    def dcos(i, j, s):
        # d cos(x_i, x_j) / d x_i
        return (unit[j] - s[:, None] * unit[i]) / safe[i][:, None]

    grad = np.zeros_like(emb)
    np.add.at(grad, ia, d_ap[:, None] * dcos(ia, ip, s_ap) + d_an[:, None] * dcos(ia, ineg, s_an))
    np.add.at(grad, ip, d_ap[:, None] * dcos(ip, ia, s_ap))
    np.add.at(grad, ineg, d_an[:, None] * dcos(ineg, ia, s_an))
    return float(np.mean(losses)), grad
