#!/usr/bin/env python3
"""
Bag-based batch sampling and the confidence-weighted contrastive loss.

For an anchor x_j in bag B_i:

    L_j = -log( P / (P + Q) )
    P = sum over same-bag positives k of  c_j c_k exp(cos(x_j, x_k) / T)
    Q = sum over batch members m with r_m != r_j of  c_j c_m exp(cos(x_j, x_m) / T)

Members of other bags that share the anchor's relation are in neither sum.
NA bags never enter a contrastive batch.
"""

import logging
from typing import List, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

from config import Temperature, make_rng
from data_model import Bag, Instance
from errors import DegenerateRepresentationError, InsufficientBagsError, NumericalError

logger = logging.getLogger(__name__)

STREAM_BATCH = 301


class BatchMember(BaseModel):
    model_config = ConfigDict(frozen=True)

    instance: Instance
    bag_index: int
    relation: str
    confidence: float


class ContrastiveBatch(BaseModel):
    """G bags with pairwise-distinct triplets, flattened into members"""

    model_config = ConfigDict(frozen=True)

    bags: Tuple[Bag, ...]
    members: Tuple[BatchMember, ...]

    @classmethod
    def from_bags(cls, bags: Sequence[Bag]) -> "ContrastiveBatch":
        members = []
        for b, bag in enumerate(bags):
            for inst, c in bag.members:
                members.append(BatchMember(instance=inst, bag_index=b, relation=bag.triplet.relation,
                                           confidence=c))
        return cls(bags=tuple(bags), members=tuple(members))

    def __len__(self):
        return len(self.members)

    @property
    def confidences(self) -> np.ndarray:
        return np.array([m.confidence for m in self.members], dtype=np.float64)

    def with_confidences(self, confidences: Sequence[float]) -> "ContrastiveBatch":
        members = tuple(m.model_copy(update={"confidence": float(c)})
                        for m, c in zip(self.members, confidences))
        return self.model_copy(update={"members": members})


def eligible_bags(bags: Sequence[Bag]) -> List[Bag]:
    """Non-NA bags with at least two members"""
    return [bag for bag in bags if not bag.is_na and bag.size >= 2]


def sample_batch(bags: Sequence[Bag], G: int = 16, bag_size: int = 4, seed: int = 0,
                 step: int = 0) -> ContrastiveBatch:
    """G distinct-triplet bags without replacement, min(bag_size, N_i) members from each"""
    pool = eligible_bags(bags)
    if len(pool) < G:
        raise InsufficientBagsError(len(pool), G)
    rng = make_rng(seed, STREAM_BATCH, step)
    chosen = []
    for b in sorted(rng.choice(len(pool), size=G, replace=False)):
        bag = pool[int(b)]
        take = min(bag_size, bag.size)
        picked = sorted(rng.choice(bag.size, size=take, replace=False))
        chosen.append(Bag(triplet=bag.triplet, members=tuple(bag.members[int(i)] for i in picked)))
    if len({bag.triplet for bag in chosen}) != G:
        raise InsufficientBagsError(len({bag.triplet for bag in pool}), G)
    return ContrastiveBatch.from_bags(chosen)


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise DegenerateRepresentationError("degenerate representation")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def _masks(batch: ContrastiveBatch, include_self: bool) -> Tuple[np.ndarray, np.ndarray]:
    bag_ids = np.array([m.bag_index for m in batch.members])
    relations = np.array([m.relation for m in batch.members], dtype=object)
    positive = bag_ids[:, None] == bag_ids[None, :]
    if not include_self:
        np.fill_diagonal(positive, False)
    negative = relations[:, None] != relations[None, :]
    return positive, negative


def _normalize(reps: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(reps, axis=1)
    if np.any(norms == 0.0):
        raise DegenerateRepresentationError("degenerate representation")
    return reps / norms[:, None], norms


def wcl_loss_anchor(batch: ContrastiveBatch, anchor: int, reps: np.ndarray, T: Temperature = 0.2,
                    include_self: bool = False) -> float:
    """Loss of one anchor (member index); 0 with a warning when every positive weight is 0"""
    if not T > 0:
        raise NumericalError("temperature must be positive")
    reps = np.asarray(reps, dtype=np.float64)
    c = batch.confidences
    positive, negative = _masks(batch, include_self)
    sims = np.array([cosine(reps[anchor], reps[k]) for k in range(len(batch))]) / T
    # shift by the max; the ratio is unchanged
    weights = c[anchor] * c * np.exp(sims - sims.max())
    P = weights[positive[anchor]].sum()
    Q = weights[negative[anchor]].sum()
    if P == 0.0:
        logger.warning(f"⚠️ anchor {anchor} skipped: all positive weights are zero")
        return 0.0
    return float(-np.log(P / (P + Q)))


def wcl_loss_batch(batch: ContrastiveBatch, reps: np.ndarray, T: Temperature = 0.2, include_self: bool = False,
                   outer_anchor_weight: bool = False) -> Tuple[float, np.ndarray]:
    """Mean anchor loss over non-skipped anchors, and its exact gradient w.r.t. reps"""
    if not T > 0:
        raise NumericalError("temperature must be positive")
    reps = np.asarray(reps, dtype=np.float64)
    n = len(batch)
    c = batch.confidences
    positive, negative = _masks(batch, include_self)
    unit, norms = _normalize(reps)
    sims = np.clip(unit @ unit.T, -1.0, 1.0) / T
    shifted = np.exp(sims - sims.max(axis=1, keepdims=True))
    weights = c[:, None] * c[None, :] * shifted
    W_pos = np.where(positive, weights, 0.0)
    W_neg = np.where(negative, weights, 0.0)
    P = W_pos.sum(axis=1)
    Q = W_neg.sum(axis=1)

    valid = P > 0.0
    skipped = int(n - valid.sum())
    if skipped:
        logger.warning(f"⚠️ {skipped} anchor(s) skipped: all positive weights are zero")
    if not valid.any():
        raise NumericalError("no valid anchors")

    safe_P = np.where(valid, P, 1.0)
    per_anchor = np.where(valid, -np.log(safe_P / (safe_P + Q)), 0.0)
    outer = c if outer_anchor_weight else np.ones(n)
    scale = np.where(valid, outer, 0.0) / valid.sum()
    loss = float((scale * per_anchor).sum())

    # d loss / d sims[j, k]
    denom = safe_P + Q
    dsims = (-W_pos / safe_P[:, None] + (W_pos + W_neg) / denom[:, None]) * scale[:, None]
    dcos = dsims / T
    dunit = (dcos + dcos.T) @ unit
    dreps = (dunit - unit * (dunit * unit).sum(axis=1, keepdims=True)) / norms[:, None]
    return loss, dreps
