"""Reference attention, top-k retrieval pipelines and their accuracy metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .bitcodes import nxor_score_matrix, top_k_indices
from .errors import ShapeError
from .hashers import DownProjEstimator, LinearHasher, MlpHasher

MIN_BUDGET = 20


@dataclass
class AttentionInstance:
    """Single-head decode-style attention problem.

    Query ``r`` sees the first ``valid_lengths[r]`` cache rows. When
    ``keep_last`` is set, the last visible row is the query's own token and is
    kept by every sparse selection.
    """

    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray | None = None
    valid_lengths: np.ndarray | None = None
    scale: float | None = None
    keep_last: bool = False

    def __post_init__(self):
        self.Q = np.atleast_2d(np.asarray(self.Q))
        self.K = np.atleast_2d(np.asarray(self.K))
        q, d = self.Q.shape
        n = self.K.shape[0]
        if self.K.shape[1] != d:
            raise ShapeError(f"queries have dim {d} but keys have dim {self.K.shape[1]}")
        if self.V is not None:
            self.V = np.atleast_2d(np.asarray(self.V))
            if self.V.shape[0] != n:
                raise ShapeError(f"{self.V.shape[0]} value rows for {n} keys")
        if self.valid_lengths is None:
            self.valid_lengths = np.full(q, n, dtype=np.int64)
        self.valid_lengths = np.asarray(self.valid_lengths, dtype=np.int64).reshape(-1)
        if self.valid_lengths.shape != (q,):
            raise ShapeError(f"expected {q} valid lengths")
        if np.any(self.valid_lengths < 0) or np.any(self.valid_lengths > n):
            raise ShapeError(f"valid lengths must lie in [0, {n}]")
        if self.scale is None:
            self.scale = 1.0 / math.sqrt(d)
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    @classmethod
    def causal(cls, queries, keys, values=None, scale=None) -> AttentionInstance:
        """Self-attention over a sequence: token ``i`` sees keys ``0..i``."""
        n = np.asarray(keys).shape[0]
        if np.asarray(queries).shape[0] != n:
            raise ShapeError("causal instances need one query per key")
        return cls(queries, keys, values, np.arange(1, n + 1), scale, keep_last=True)

    @property
    def n(self) -> int:
        return self.K.shape[0]

    @property
    def d(self) -> int:
        return self.Q.shape[1]

    def visible_mask(self) -> np.ndarray:
        return np.arange(self.n)[None, :] < self.valid_lengths[:, None]

    def logits(self) -> np.ndarray:
        dtype = np.result_type(self.Q.dtype, self.K.dtype, np.float32)
        return (self.Q.astype(dtype) @ self.K.astype(dtype).T) * dtype.type(self.scale)


@dataclass
class RetrievalResult:
    method: str
    indices: list[np.ndarray]
    budget: int

    def mask(self, n: int) -> np.ndarray:
        out = np.zeros((len(self.indices), n), dtype=bool)
        for r, idx in enumerate(self.indices):
            out[r, idx] = True
        return out


def budget_from_rate(n: int, rate: float, minimum: int = MIN_BUDGET) -> int:
    """Token budget ``max(floor(n * rate), minimum)``, capped at ``n``."""
    if not 0.0 < rate <= 1.0:
        raise ValueError(f"budget rate must lie in (0, 1], got {rate}")
    return min(n, max(math.floor(n * rate), minimum))


def _masked_softmax_output(logits: np.ndarray, mask: np.ndarray, V: np.ndarray) -> np.ndarray:
    if not np.all(mask.any(axis=1)):
        raise ShapeError("every query needs at least one key to attend to")
    masked = np.where(mask, logits, -np.inf)
    masked = masked - masked.max(axis=1, keepdims=True)
    weights = np.exp(masked)
    weights /= weights.sum(axis=1, keepdims=True)
    return weights @ V


def attention_weights(inst: AttentionInstance) -> np.ndarray:
    """Softmax weights over visible keys; zero beyond each causal limit."""
    mask = inst.visible_mask()
    if not np.all(mask.any(axis=1)):
        raise ShapeError("empty KV cache for at least one query")
    masked = np.where(mask, inst.logits(), -np.inf)
    masked = masked - masked.max(axis=1, keepdims=True)
    weights = np.exp(masked)
    return weights / weights.sum(axis=1, keepdims=True)


def full_attention(inst: AttentionInstance) -> np.ndarray:
    """Row-max-stabilised softmax attention over all visible keys."""
    if inst.V is None:
        raise ShapeError("instance has no value rows")
    if inst.n == 0 or not np.all(inst.valid_lengths > 0):
        raise ShapeError("empty KV cache for at least one query")
    return _masked_softmax_output(inst.logits(), inst.visible_mask(), inst.V)


def _topk_rows(scores: np.ndarray, lengths: np.ndarray, k: int) -> list[np.ndarray]:
    out = []
    for row, length in zip(scores, lengths):
        if length == 0:
            out.append(np.empty(0, dtype=np.int64))
        else:
            out.append(top_k_indices(row[:length], min(k, int(length))))
    return out


def oracle_topk(inst: AttentionInstance, k: int) -> RetrievalResult:
    """Top-k visible keys by exact logits; ties go to the lower index."""
    if k < 1:
        raise ValueError(f"budget must be >= 1, got {k}")
    return RetrievalResult("oracle", _topk_rows(inst.logits(), inst.valid_lengths, k), k)


def hash_scores(inst: AttentionInstance, hasher) -> np.ndarray:
    if hasher.d != inst.d:
        raise ShapeError(f"hasher expects dim {hasher.d}, instance has dim {inst.d}")
    index = hasher.codes(inst.K)
    return nxor_score_matrix(hasher.codes(inst.Q), index)


def hash_topk(inst: AttentionInstance, hasher, k: int, method: str | None = None) -> RetrievalResult:
    """Top-k keys by NXOR agreement of hash codes, within each causal range."""
    if k < 1:
        raise ValueError(f"budget must be >= 1, got {k}")
    if method is None:
        method = "mlp" if isinstance(hasher, MlpHasher) else "lsh"
    scores = hash_scores(inst, hasher)
    return RetrievalResult(method, _topk_rows(scores, inst.valid_lengths, k), k)


def downproj_topk(inst: AttentionInstance, est: DownProjEstimator, k: int,
                  method: str = "downproj") -> RetrievalResult:
    if est.d != inst.d:
        raise ShapeError(f"estimator expects dim {est.d}, instance has dim {inst.d}")
    scores = est.project(inst.Q) @ est.project(inst.K).T
    return RetrievalResult(method, _topk_rows(scores, inst.valid_lengths, k), k)


def retrieve(inst: AttentionInstance, k: int, hasher=None, method: str | None = None) -> RetrievalResult:
    if hasher is None:
        return oracle_topk(inst, k)
    if isinstance(hasher, DownProjEstimator):
        return downproj_topk(inst, hasher, k, method or "downproj")
    if isinstance(hasher, (LinearHasher, MlpHasher)):
        return hash_topk(inst, hasher, k, method)
    raise TypeError(f"unsupported estimator {type(hasher).__name__}")


def iou(a, b) -> float:
    """Intersection over union of two index sets; 1.0 when both are empty."""
    a, b = set(np.asarray(a).tolist()), set(np.asarray(b).tolist())
    union = a | b
    if not union:
        return 1.0
    return len(a & b) / len(union)


def per_query_iou(pred: RetrievalResult, truth: RetrievalResult, n: int) -> np.ndarray:
    a, b = pred.mask(n), truth.mask(n)
    inter = (a & b).sum(axis=1)
    union = (a | b).sum(axis=1)
    return np.where(union > 0, inter / np.maximum(union, 1), 1.0)


def sparse_attention(inst: AttentionInstance, result: RetrievalResult) -> np.ndarray:
    """Attention restricted to the retrieved keys (plus the own token)."""
    if inst.V is None:
        raise ShapeError("instance has no value rows")
    if len(result.indices) != inst.Q.shape[0]:
        raise ShapeError("retrieval result does not match the number of queries")
    mask = result.mask(inst.n)
    if np.any(mask & ~inst.visible_mask()):
        raise ShapeError("retrieved index outside the causal range")
    if inst.keep_last:
        rows = np.flatnonzero(inst.valid_lengths > 0)
        mask[rows, inst.valid_lengths[rows] - 1] = True
    if not np.all(mask.any(axis=1)):
        raise ShapeError("empty retrieved subset for at least one query")
    return _masked_softmax_output(inst.logits(), mask, inst.V)


def relative_error(approx: np.ndarray, exact: np.ndarray) -> np.ndarray:
    """Per-row relative L2 error."""
    num = np.linalg.norm(approx - exact, axis=1)
    den = np.linalg.norm(exact, axis=1)
    return num / np.maximum(den, np.finfo(np.float64).tiny)


@dataclass
class MethodRecord:
    method: str
    kind: str
    budget: int
    mean_iou: float
    iou_p10: float
    iou_p50: float
    iou_p90: float
    per_query_iou: np.ndarray = field(repr=False)
    mean_rel_error: float | None = None

    def summary(self) -> dict:
        return {
            "method": self.method,
            "kind": self.kind,
            "budget": self.budget,
            "mean_iou": round(self.mean_iou, 6),
            "iou_p10": round(self.iou_p10, 6),
            "iou_p50": round(self.iou_p50, 6),
            "iou_p90": round(self.iou_p90, 6),
            "mean_rel_error": None if self.mean_rel_error is None else round(self.mean_rel_error, 6),
        }


@dataclass
class EvalReport:
    budget: int
    budget_rate: float
    records: list[MethodRecord]
    metadata: dict = field(default_factory=dict)

    def __getitem__(self, method: str) -> MethodRecord:
        for rec in self.records:
            if rec.method == method:
                return rec
        raise KeyError(method)

    def mean_iou(self) -> dict[str, float]:
        return {rec.method: rec.mean_iou for rec in self.records}


def _kind(hasher) -> str:
    if hasher is None:
        return "oracle"
    if isinstance(hasher, MlpHasher):
        return "mlp"
    if isinstance(hasher, LinearHasher):
        return "lsh"
    return "downproj"


def evaluate(inst: AttentionInstance, methods, budget_rate: float = 0.02,
             hashers: dict | None = None, frozen: bool = False) -> EvalReport:
    """Retrieval IoU against the oracle, and sparse-output error, per method.

    ``hashers`` maps method names to estimators; ``"oracle"`` needs none.
    A ``frozen`` stream is exempt from pruning, so its output error is zero;
    IoU is still reported.
    """
    hashers = hashers or {}
    k = budget_from_rate(inst.n, budget_rate)
    truth = oracle_topk(inst, k)
    exact = full_attention(inst) if inst.V is not None else None

    records = []
    for method in methods:
        if method == "oracle":
            result = truth
            hasher = None
        else:
            if method not in hashers:
                raise KeyError(f"no estimator supplied for method {method!r}")
            hasher = hashers[method]
            result = retrieve(inst, k, hasher, method)
        scores = per_query_iou(result, truth, inst.n)
        err = None
        if exact is not None:
            err = 0.0 if frozen else float(relative_error(sparse_attention(inst, result), exact).mean())
        p10, p50, p90 = np.percentile(scores, [10, 50, 90])
        records.append(MethodRecord(method, _kind(hasher), k, float(scores.mean()), float(p10),
                                    float(p50), float(p90), scores, err))
    return EvalReport(k, budget_rate, records, {"frozen": frozen, "n": inst.n, "queries": inst.Q.shape[0]})
