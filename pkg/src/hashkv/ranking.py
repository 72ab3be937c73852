"""Pairwise ranking objective over estimated vs. exact attention scores.

For each query the exact logits pick a top-k set. Estimated scores at those
positions (``B``) should exceed estimated scores everywhere else (``C``); the
loss is the mean of ``-log sigmoid(beta * (B_i - C_j) - alpha)`` over all
causally valid ``(i, j)`` pairs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptyPairsError, ShapeError


@dataclass(frozen=True)
class RankingLossConfig:
    beta: float = 1.0
    alpha: float = 3.0
    maskout: float = 0.98
    max_top: int | None = None
    max_oth: int | None = None
    query_subsample: int | None = None

    def __post_init__(self):
        if not 0.0 < self.maskout < 1.0:
            raise ValueError(f"maskout must lie in (0, 1), got {self.maskout}")
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        for name in ("max_top", "max_oth", "query_subsample"):
            value = getattr(self, name)
            if value is not None and value < 1:
                raise ValueError(f"{name} must be >= 1 when set, got {value}")

    def top_count(self, n: int) -> int:
        k = math.floor(n * (1.0 - self.maskout))
        if k < 1:
            raise ValueError(
                f"maskout {self.maskout} leaves no top-k entries for {n} keys"
            )
        return k


@dataclass
class PairPartition:
    """Top-k / remainder split for a (possibly subsampled) set of query rows.

    ``top`` and ``oth`` hold key indices, shape ``(rows, kt)`` and
    ``(rows, ko)``. ``top_valid`` / ``oth_valid`` flag causally visible keys;
    pair ``(r, i, j)`` counts only when both are valid.
    """

    rows: np.ndarray
    top: np.ndarray
    oth: np.ndarray
    top_valid: np.ndarray
    oth_valid: np.ndarray

    @property
    def valid_mask(self) -> np.ndarray:
        return self.top_valid[:, :, None] & self.oth_valid[:, None, :]

    @property
    def num_pairs(self) -> int:
        # sum over rows of (#valid top) * (#valid oth)
        return int(np.dot(self.top_valid.sum(1), self.oth_valid.sum(1)))


def _valid_lengths(causal_offsets, q: int, n: int) -> np.ndarray:
    if causal_offsets is None:
        return np.full(q, n, dtype=np.int64)
    lengths = np.asarray(causal_offsets, dtype=np.int64).reshape(-1)
    if lengths.shape != (q,):
        raise ShapeError(f"expected {q} causal offsets, got {lengths.shape[0]}")
    if np.any(lengths < 0) or np.any(lengths > n):
        raise ValueError(f"causal offsets must lie in [0, {n}]")
    return lengths


def partition_topk(true_attn, cfg: RankingLossConfig, causal_offsets=None, seed=None) -> PairPartition:
    """Split key positions of each query into exact top-k and the rest.

    ``causal_offsets[r]`` is the number of keys query ``r`` may see; later
    positions are pushed to the bottom of the order and flagged invalid.
    Random subsampling of rows, top entries and remainder entries draws from
    ``seed`` in that order.
    """
    true_attn = np.asarray(true_attn)
    if true_attn.ndim != 2:
        raise ShapeError(f"true_attn must be (queries, keys), got shape {true_attn.shape}")
    q, n = true_attn.shape
    if n < 2:
        raise ShapeError("need at least two keys to form pairs")
    k = cfg.top_count(n)
    lengths = _valid_lengths(causal_offsets, q, n)
    rng = np.random.default_rng(seed)

    rows = np.arange(q)
    if cfg.query_subsample is not None and cfg.query_subsample < q:
        rows = np.sort(rng.choice(q, size=cfg.query_subsample, replace=False))
    lengths = lengths[rows]

    positions = np.arange(n)
    visible = positions[None, :] < lengths[:, None]
    masked = np.where(visible, true_attn[rows], -np.inf)
    # stable sort keeps lower indices first among ties (and among masked slots)
    order = np.argsort(-masked, axis=1, kind="stable")
    top, oth = order[:, :k], order[:, k:]

    if cfg.max_top is not None and cfg.max_top < k:
        top = top[:, rng.permutation(k)[: cfg.max_top]]
    if cfg.max_oth is not None and cfg.max_oth < n - k:
        oth = oth[:, rng.permutation(n - k)[: cfg.max_oth]]

    return PairPartition(
        rows=rows,
        top=top,
        oth=oth,
        top_valid=top < lengths[:, None],
        oth_valid=oth < lengths[:, None],
    )


def _softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _check_pair(draft_attn, true_attn):
    draft_attn = np.asarray(draft_attn)
    true_attn = np.asarray(true_attn)
    if draft_attn.shape != true_attn.shape:
        raise ShapeError(
            f"draft scores {draft_attn.shape} and exact scores {true_attn.shape} differ in shape"
        )
    return draft_attn, true_attn


def ranking_loss_and_grad(draft_attn, true_attn, cfg: RankingLossConfig, seed=None,
                          causal_offsets=None, with_grad: bool = True):
    """Loss, violation rate and (optionally) the gradient w.r.t. ``draft_attn``.

    The gradient is dense, zero outside sampled valid pairs.
    """
    draft_attn, true_attn = _check_pair(draft_attn, true_attn)
    part = partition_topk(true_attn, cfg, causal_offsets, seed)
    num_pairs = part.num_pairs
    if num_pairs == 0:
        raise EmptyPairsError("no causally valid (top, other) pairs to rank")

    rows = part.rows[:, None]
    B = draft_attn[rows, part.top]
    C = draft_attn[rows, part.oth]
    diff = B[:, :, None] - C[:, None, :]
    valid = part.valid_mask
    logits = cfg.beta * diff - cfg.alpha

    loss = float(np.sum(_softplus(-logits), where=valid, dtype=np.float64) / num_pairs)
    violation = float(np.count_nonzero((diff < 0) & valid) / num_pairs)
    if not with_grad:
        return loss, violation, None

    # d/dlogit of -log sigmoid(logit) is -(1 - sigmoid(logit))
    weight = np.where(valid, -cfg.beta * _sigmoid(-logits) / num_pairs, 0.0)
    grad = np.zeros_like(draft_attn, dtype=np.result_type(draft_attn.dtype, np.float32))
    # indices are unique within a row, so fancy-index accumulation is safe
    grad[rows, part.top] += weight.sum(axis=2)
    grad[rows, part.oth] -= weight.sum(axis=1)
    return loss, violation, grad


def ranking_loss(draft_attn, true_attn, cfg: RankingLossConfig, seed=None,
                 causal_offsets=None) -> tuple[float, float]:
    """Return ``(loss, violation_rate)``."""
    loss, violation, _ = ranking_loss_and_grad(
        draft_attn, true_attn, cfg, seed, causal_offsets, with_grad=False
    )
    return loss, violation


def ranking_loss_grad(draft_attn, true_attn, cfg: RankingLossConfig, seed=None,
                      causal_offsets=None) -> np.ndarray:
    return ranking_loss_and_grad(draft_attn, true_attn, cfg, seed, causal_offsets)[2]


def _valid_entry_mask(shape, causal_offsets) -> np.ndarray:
    q, n = shape
    lengths = _valid_lengths(causal_offsets, q, n)
    return np.arange(n)[None, :] < lengths[:, None]


def reconstruction_loss_and_grad(draft_attn, true_attn, causal_offsets=None):
    """Mean squared error over causally valid entries, with its gradient."""
    draft_attn, true_attn = _check_pair(draft_attn, true_attn)
    valid = _valid_entry_mask(draft_attn.shape, causal_offsets)
    count = int(valid.sum())
    if count == 0:
        raise EmptyPairsError("no causally valid entries to reconstruct")
    err = np.where(valid, draft_attn - true_attn, 0.0)
    loss = float(np.sum(np.square(err), dtype=np.float64) / count)
    return loss, (2.0 / count) * err


def reconstruction_loss(draft_attn, true_attn, causal_offsets=None) -> float:
    return reconstruction_loss_and_grad(draft_attn, true_attn, causal_offsets)[0]
