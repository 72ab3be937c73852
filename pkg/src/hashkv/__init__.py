"""Learned binary hashing for top-k KV cache retrieval."""

from .attention import (
    AttentionInstance,
    EvalReport,
    RetrievalResult,
    budget_from_rate,
    evaluate,
    full_attention,
    hash_topk,
    iou,
    oracle_topk,
    sparse_attention,
)
from .bitcodes import CodeMatrix, HashCode, nxor_scores, pack_bits, top_k_indices, unpack_bits
from .hashers import (
    DownProjEstimator,
    LinearHasher,
    MlpHasher,
    load_hasher,
    qr_rotation_init,
    save_hasher,
)
from .ranking import RankingLossConfig, ranking_loss, reconstruction_loss
from .synthkv import ConeSpec, make_cone_spec, read_dump, sample_cone, write_dump
from .trainer import TrainConfig, TrainReport, train_hasher

__version__ = "0.1.0"
