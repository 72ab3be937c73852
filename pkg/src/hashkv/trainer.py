"""Training hash functions against exact top-k sets.

Gradients are derived by hand: ranking (or reconstruction) loss on draft
scores, draft scores as inner products of soft codes, soft sign, then the
MLP (or linear projection). The same hasher encodes queries and keys, so
both branches accumulate into one set of parameter gradients.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .attention import AttentionInstance, evaluate
from .errors import NumericError, ShapeError
from .hashers import (
    DownProjEstimator,
    LinearHasher,
    MlpHasher,
    silu,
    silu_grad,
    soft_sign,
    soft_sign_grad,
)
from .ranking import RankingLossConfig, ranking_loss_and_grad, reconstruction_loss_and_grad

log = logging.getLogger(__name__)

OBJECTIVES = ("rank", "recon")


@dataclass(frozen=True)
class TrainConfig:
    num_iters: int = 8192
    max_lr: float = 1e-3
    min_lr: float = 0.0
    warmup_iters: int = 81
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-8
    weight_decay: float = 0.1
    grad_clip: float = 1.0
    batch: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.num_iters < 0 or self.batch < 1:
            raise ValueError("num_iters must be >= 0 and batch >= 1")
        if not 0 <= self.warmup_iters <= max(self.num_iters, 0):
            raise ValueError("warmup_iters must lie in [0, num_iters]")
        if self.max_lr < 0 or self.min_lr < 0 or self.min_lr > self.max_lr:
            raise ValueError("need 0 <= min_lr <= max_lr")
        if self.grad_clip <= 0 or self.weight_decay < 0:
            raise ValueError("grad_clip must be positive and weight_decay non-negative")


def lr_at(it: int, cfg: TrainConfig) -> float:
    """Linear warmup from zero, then cosine annealing to ``min_lr``."""
    if it < cfg.warmup_iters:
        return cfg.max_lr * it / cfg.warmup_iters
    span = cfg.num_iters - cfg.warmup_iters
    progress = 1.0 if span <= 0 else min(1.0, (it - cfg.warmup_iters) / span)
    return cfg.min_lr + 0.5 * (cfg.max_lr - cfg.min_lr) * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> AdamState:
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float):
    """Scale gradients so their global L2 norm is at most ``max_norm``."""
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        grads = {k: g * g.dtype.type(scale) for k, g in grads.items()}
    return grads, norm


def _decays(name: str) -> bool:
    # biases are exempt from weight decay
    return not name.startswith("b")


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
               lr: float, cfg: TrainConfig):
    """One AdamW update, in place; returns ``(params, state)``."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}; step rejected")

    state.step += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        if cfg.weight_decay and _decays(name):
            p *= p.dtype.type(1.0 - lr * cfg.weight_decay)
        denom = np.sqrt(v / bc2) + cfg.adam_eps
        p -= p.dtype.type(lr / bc1) * m / denom
    return params, state


# ---------------------------------------------------------------------------
# forward / backward through the estimators


def _encode(hasher, params, X):
    """Soft codes for the rows of ``X`` plus whatever backward needs."""
    if isinstance(hasher, MlpHasher):
        u = X @ params["W1"] + params["b1"]
        a = silu(u)
        z = a @ params["W2"]
        return soft_sign(z, hasher.gamma), (X, u, a, z)
    if isinstance(hasher, LinearHasher):
        z = X @ params["projection"]
        return soft_sign(z, hasher.gamma), (X, z)
    if isinstance(hasher, DownProjEstimator):
        return X @ params["projection"], (X,)
    raise TypeError(f"cannot train {type(hasher).__name__}")


def _encode_backward(hasher, params, cache, d_codes):
    if isinstance(hasher, MlpHasher):
        X, u, a, z = cache
        dz = d_codes * soft_sign_grad(z, hasher.gamma)
        dW2 = a.T @ dz
        du = (dz @ params["W2"].T) * silu_grad(u)
        return {"W1": X.T @ du, "b1": du.sum(axis=0), "W2": dW2}
    if isinstance(hasher, LinearHasher):
        X, z = cache
        dz = d_codes * soft_sign_grad(z, hasher.gamma)
        return {"projection": X.T @ dz}
    (X,) = cache
    return {"projection": X.T @ d_codes}


def loss_and_grads(hasher, queries, keys, loss_cfg: RankingLossConfig, seed=None,
                   objective: str = "rank", rows=None, params=None):
    """End-to-end loss on one causal sequence and its parameter gradients.

    ``rows`` selects which query positions contribute (all when ``None``);
    query ``i`` sees keys ``0..i``. Returns ``(loss, violation_rate, grads)``;
    the violation rate is ``nan`` for the reconstruction objective.
    """
    if objective not in OBJECTIVES:
        raise ValueError(f"objective must be one of {OBJECTIVES}, got {objective!r}")
    params = hasher.params() if params is None else params
    dtype = next(iter(params.values())).dtype
    queries = np.asarray(queries)
    keys = np.asarray(keys)
    if queries.shape[1] != hasher.d or keys.shape[1] != hasher.d:
        raise ShapeError(f"hasher expects dim {hasher.d}, data has dim {queries.shape[1]}")
    n = keys.shape[0]
    rows = np.arange(queries.shape[0]) if rows is None else np.asarray(rows)
    q = queries[rows].astype(dtype, copy=False)
    # all n key columns are kept so the top-k size follows the sequence length
    k = keys.astype(dtype, copy=False)
    offsets = np.minimum(rows + 1, n)

    true_attn = (q @ k.T) * dtype.type(1.0 / math.sqrt(hasher.d))
    codes, cache = _encode(hasher, params, np.concatenate([q, k]))
    cq, ck = codes[: len(q)], codes[len(q):]
    draft = cq @ ck.T

    if objective == "rank":
        cfg = loss_cfg
        if cfg.query_subsample is not None:
            # row selection is the caller's job here
            cfg = RankingLossConfig(cfg.beta, cfg.alpha, cfg.maskout, cfg.max_top, cfg.max_oth)
        loss, violation, d_draft = ranking_loss_and_grad(draft, true_attn, cfg, seed, offsets)
    else:
        loss, d_draft = reconstruction_loss_and_grad(draft, true_attn, offsets)
        violation = float("nan")
    d_draft = d_draft.astype(dtype, copy=False)

    d_codes = np.concatenate([d_draft @ ck, d_draft.T @ cq])
    grads = _encode_backward(hasher, params, cache, d_codes)
    return loss, violation, grads


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(analytic), initial=0.0)),
                float(np.max(np.abs(numeric), initial=0.0)))
    floor = max(1e-3 * scale, 1e-12)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom, initial=0.0))


def finite_diff_check(hasher, sample, loss_cfg: RankingLossConfig, step: float = 1e-5,
                      seed=0, objective: str = "rank", rows=None) -> float:
    """Worst relative error between analytic and central-difference gradients.

    Runs entirely in float64. Each entry's relative error uses the larger of
    the two magnitudes as denominator, floored at 1e-3 of the tensor's
    largest gradient so that entries that are zero in both agree.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    queries, keys = (np.asarray(a, dtype=np.float64) for a in sample)
    params = {k: np.array(v, dtype=np.float64) for k, v in hasher.params().items()}
    if rows is None and loss_cfg.query_subsample is not None:
        rng = np.random.default_rng(seed)
        m = min(loss_cfg.query_subsample, len(queries))
        rows = np.sort(rng.choice(len(queries), size=m, replace=False))

    def loss_at(p):
        return loss_and_grads(hasher, queries, keys, loss_cfg, seed, objective, rows, p)[0]

    _, _, analytic = loss_and_grads(hasher, queries, keys, loss_cfg, seed, objective, rows, params)
    worst = 0.0
    for name, value in params.items():
        numeric = np.zeros_like(value)
        flat, num_flat = value.reshape(-1), numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_at(params)
            flat[i] = orig - step
            down = loss_at(params)
            flat[i] = orig
            num_flat[i] = (up - down) / (2.0 * step)
        worst = max(worst, _relative_error(analytic[name], numeric))
    return worst


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainRecord:
    iter: int
    loss: float
    violation_rate: float
    lr: float


@dataclass
class TrainReport:
    records: list[TrainRecord] = field(default_factory=list)
    wall_clock: float = 0.0
    final_iou: float | None = None
    seed: int = 0
    objective: str = "rank"

    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.records])

    def violation_rates(self) -> np.ndarray:
        return np.array([r.violation_rate for r in self.records])

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(r)) + "\n" for r in self.records)


def _select_rows(n: int, loss_cfg: RankingLossConfig, rng: np.random.Generator):
    if loss_cfg.query_subsample is None or loss_cfg.query_subsample >= n:
        return np.arange(n)
    return np.sort(rng.choice(n, size=loss_cfg.query_subsample, replace=False))


def train_hasher(hasher, source, loss_cfg: RankingLossConfig, cfg: TrainConfig,
                 objective: str = "rank", holdout=None, eval_rate: float | None = None,
                 log_every: int = 0):
    """Optimise ``hasher`` on sequences drawn from ``source``.

    ``source.sample(rng)`` must return one causal ``(queries, keys)``
    sequence. When ``holdout`` (a ``(queries, keys)`` pair) is given, the
    report carries the trained hasher's mean top-k IoU on it at
    ``eval_rate`` (default ``1 - maskout``). Returns ``(hasher, report)``;
    the input hasher is not modified.
    """
    if objective not in OBJECTIVES:
        raise ValueError(f"objective must be one of {OBJECTIVES}, got {objective!r}")
    if source.d != hasher.d:
        raise ShapeError(f"hasher expects dim {hasher.d}, data has dim {source.d}")
    params = {k: np.array(v, copy=True) for k, v in hasher.params().items()}
    state = AdamState.zeros_like(params)
    rng = np.random.default_rng(cfg.seed)
    report = TrainReport(seed=cfg.seed, objective=objective)
    start = time.perf_counter()

    for it in range(cfg.num_iters):
        grads = {k: np.zeros_like(v) for k, v in params.items()}
        loss = violation = 0.0
        for _ in range(cfg.batch):
            queries, keys = source.sample(rng)
            rows = _select_rows(len(queries), loss_cfg, rng)
            pair_seed = int(rng.integers(0, 2**63))
            b_loss, b_viol, b_grads = loss_and_grads(hasher, queries, keys, loss_cfg, pair_seed,
                                                     objective, rows, params)
            loss += b_loss / cfg.batch
            violation += b_viol / cfg.batch
            for k in grads:
                grads[k] += b_grads[k] / cfg.batch

        if not math.isfinite(loss):
            raise NumericError(
                f"loss became {loss} at iteration {it} "
                f"(lr={lr_at(it, cfg):.3g}, grad norm={global_norm(grads):.3g})"
            )
        grads, _ = clip_grad_norm(grads, cfg.grad_clip)
        lr = lr_at(it, cfg)
        adamw_step(params, grads, state, lr, cfg)
        report.records.append(TrainRecord(it, loss, violation, lr))
        if log_every and it % log_every == 0:
            log.info("iter %d loss %.5f violation %.4f lr %.3g", it, loss, violation, lr)

    trained = hasher.with_params(params)
    report.wall_clock = time.perf_counter() - start
    if holdout is not None:
        rate = eval_rate if eval_rate is not None else 1.0 - loss_cfg.maskout
        inst = AttentionInstance.causal(*holdout)
        report.final_iou = evaluate(inst, ["est"], rate, {"est": trained})["est"].mean_iou
    return trained, report
