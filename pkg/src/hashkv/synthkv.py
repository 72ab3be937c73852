"""Synthetic query/key clouds and the SPLQ dump format.

Queries and keys are drawn from two narrow cones around nearly orthogonal
axes. Within a cone the angle to the axis is uniform on
``[0, angular_spread]`` and the tangential direction is isotropic, so every
sample's cosine to its axis is at least ``cos(angular_spread)``. Magnitudes
are Gaussian, clipped to stay positive.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from os import PathLike

import numpy as np

from .errors import FormatError, ShapeError, TruncatedFileError

DUMP_MAGIC = b"SPLQ"
DUMP_VERSION = 1
_DUMP_HEADER = struct.Struct("<4sIIII")

_MIN_NORM_FRACTION = 1e-3


@dataclass(frozen=True)
class ConeSpec:
    dim: int
    query_axis: np.ndarray
    key_axis: np.ndarray
    angular_spread: float = 0.3
    axis_cos: float = 0.0
    norm_mean: float = 16.0
    norm_std: float = 4.0
    seed: int = 0
    # fraction of samples whose magnitude is multiplied by outlier_scale
    outlier_rate: float = 0.0
    outlier_scale: float = 4.0

    def __post_init__(self):
        for name in ("query_axis", "key_axis"):
            axis = np.asarray(getattr(self, name), dtype=np.float64)
            if axis.shape != (self.dim,):
                raise ShapeError(f"{name} must have {self.dim} entries")
            if abs(np.linalg.norm(axis) - 1.0) > 1e-9:
                raise ValueError(f"{name} must be unit norm")
            object.__setattr__(self, name, axis)
        if not 0.0 < self.angular_spread < np.pi / 2:
            raise ValueError("angular_spread must lie in (0, pi/2)")
        if not self.norm_mean > 0:
            raise ValueError("norm_mean must be positive")
        if self.norm_std < 0 or not 0.0 <= self.outlier_rate <= 1.0:
            raise ValueError("norm_std must be >= 0 and outlier_rate in [0, 1]")


def make_cone_spec(dim: int = 128, angular_spread: float = 0.3, axis_cos: float = 0.0,
                   norm_mean: float = 16.0, norm_std: float = 4.0, seed: int = 0,
                   outlier_rate: float = 0.0, outlier_scale: float = 4.0) -> ConeSpec:
    """Build a spec whose two axes have cosine ``axis_cos``, drawn from ``seed``."""
    if not -1.0 <= axis_cos <= 1.0:
        raise ValueError("axis_cos must lie in [-1, 1]")
    rng = np.random.default_rng([seed, 0xC0DE])
    query_axis = rng.standard_normal(dim)
    query_axis /= np.linalg.norm(query_axis)
    if dim == 1:
        key_axis = query_axis.copy() if axis_cos >= 0 else -query_axis
    else:
        other = rng.standard_normal(dim)
        other -= (other @ query_axis) * query_axis
        other /= np.linalg.norm(other)
        key_axis = axis_cos * query_axis + np.sqrt(1.0 - axis_cos**2) * other
        key_axis /= np.linalg.norm(key_axis)
    return ConeSpec(dim, query_axis, key_axis, angular_spread, axis_cos, norm_mean,
                    norm_std, seed, outlier_rate, outlier_scale)


def sample_cone(spec: ConeSpec, count: int, which: str, seed=None) -> np.ndarray:
    """Draw ``count`` float64 samples from the query or key cone."""
    if which not in ("query", "key"):
        raise ValueError(f"which must be 'query' or 'key', got {which!r}")
    axis = spec.query_axis if which == "query" else spec.key_axis
    rng = np.random.default_rng(seed)

    g = rng.standard_normal((count, spec.dim))
    tangent = g - np.outer(g @ axis, axis)
    norms = np.linalg.norm(tangent, axis=1, keepdims=True)
    tangent = np.divide(tangent, norms, out=np.zeros_like(tangent), where=norms > 0)
    theta = rng.uniform(0.0, spec.angular_spread, size=(count, 1))
    directions = np.cos(theta) * axis + np.sin(theta) * tangent

    magnitude = rng.normal(spec.norm_mean, spec.norm_std, size=(count, 1))
    magnitude = np.maximum(magnitude, _MIN_NORM_FRACTION * spec.norm_mean)
    if spec.outlier_rate > 0:
        outliers = rng.random((count, 1)) < spec.outlier_rate
        magnitude = np.where(outliers, magnitude * spec.outlier_scale, magnitude)
    return directions * magnitude


def sample_sequence(spec: ConeSpec, n: int, seed=None) -> tuple[np.ndarray, np.ndarray]:
    """One causal sequence: ``n`` queries and ``n`` keys, float32."""
    rng = np.random.default_rng(seed)
    q_seed, k_seed = rng.integers(0, 2**63, size=2)
    queries = sample_cone(spec, n, "query", q_seed).astype(np.float32)
    keys = sample_cone(spec, n, "key", k_seed).astype(np.float32)
    return queries, keys


def cosine_stats(queries, keys, max_pairs: int = 10_000, seed=0) -> dict[str, float]:
    """Mean intra-cone pairwise cosine and mean cross-cone |cosine|.

    Pairs are drawn at random (with fixed seed) when the full cross product
    would exceed ``max_pairs``.
    """
    rng = np.random.default_rng(seed)
    qn = queries / np.linalg.norm(queries, axis=1, keepdims=True)
    kn = keys / np.linalg.norm(keys, axis=1, keepdims=True)

    def pick(a, b, distinct):
        i = rng.integers(0, len(a), size=max_pairs)
        j = rng.integers(0, len(b), size=max_pairs)
        if distinct:
            keep = i != j
            i, j = i[keep], j[keep]
        return np.einsum("ij,ij->i", a[i], b[j])

    intra = np.concatenate([pick(qn, qn, True), pick(kn, kn, True)])
    cross = pick(qn, kn, False)
    return {
        "intra_cos_mean": float(intra.mean()),
        "cross_abs_cos_mean": float(np.abs(cross).mean()),
    }


@dataclass
class QkDump:
    queries: np.ndarray
    keys: np.ndarray

    @property
    def n_queries(self) -> int:
        return self.queries.shape[0]

    @property
    def n_keys(self) -> int:
        return self.keys.shape[0]

    @property
    def d(self) -> int:
        return self.queries.shape[1]


def write_dump(path: str | PathLike, queries, keys) -> None:
    queries = np.ascontiguousarray(queries, dtype="<f4")
    keys = np.ascontiguousarray(keys, dtype="<f4")
    if queries.ndim != 2 or keys.ndim != 2 or queries.shape[1] != keys.shape[1]:
        raise ShapeError(f"incompatible shapes {queries.shape} and {keys.shape}")
    if not (np.all(np.isfinite(queries)) and np.all(np.isfinite(keys))):
        raise ValueError("dump payload must be finite")
    header = _DUMP_HEADER.pack(DUMP_MAGIC, DUMP_VERSION, queries.shape[0], keys.shape[0],
                               queries.shape[1])
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(queries.tobytes())
        fh.write(keys.tobytes())


def read_dump(path: str | PathLike) -> QkDump:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _DUMP_HEADER.size:
        raise TruncatedFileError("file shorter than the dump header", offset=len(raw))
    magic, version, nq, nk, d = _DUMP_HEADER.unpack_from(raw)
    if magic != DUMP_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {DUMP_MAGIC!r}", offset=0)
    if version != DUMP_VERSION:
        raise FormatError(f"unsupported dump version {version}", offset=4)
    q_bytes, k_bytes = 4 * nq * d, 4 * nk * d
    end = _DUMP_HEADER.size + q_bytes + k_bytes
    if len(raw) < end:
        raise TruncatedFileError(
            f"header advertises {nq} queries and {nk} keys of dim {d} "
            f"({end} bytes) but the file has {len(raw)}",
            offset=len(raw),
        )
    queries = np.frombuffer(raw, "<f4", nq * d, _DUMP_HEADER.size).reshape(nq, d)
    keys = np.frombuffer(raw, "<f4", nk * d, _DUMP_HEADER.size + q_bytes).reshape(nk, d)
    for name, block, start in (("query", queries, _DUMP_HEADER.size),
                               ("key", keys, _DUMP_HEADER.size + q_bytes)):
        bad = np.flatnonzero(~np.isfinite(block.reshape(-1)))
        if bad.size:
            raise FormatError(f"non-finite value in {name} block", offset=start + 4 * int(bad[0]))
    return QkDump(queries.astype(np.float32), keys.astype(np.float32))


class ConeSource:
    """Sequences of tokens drawn from a fixed, seeded bank of cone samples.

    The bank plays the role of a finite calibration set; each draw picks
    ``seq_len`` queries and ``seq_len`` keys from it at random.
    """

    def __init__(self, spec: ConeSpec, seq_len: int = 2048, bank_size: int = 65536, seed=None):
        self.spec = spec
        self.seq_len = seq_len
        bank_seed = spec.seed if seed is None else seed
        self.queries, self.keys = sample_sequence(spec, bank_size, [bank_seed, 0xBA4C])

    @property
    def d(self) -> int:
        return self.spec.dim

    def sample(self, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        qi = rng.integers(0, len(self.queries), size=self.seq_len)
        ki = rng.integers(0, len(self.keys), size=self.seq_len)
        return self.queries[qi], self.keys[ki]


class DumpSource:
    """Random contiguous windows of a dump read as one causal sequence."""

    def __init__(self, dump: QkDump, seq_len: int | None = None):
        if dump.n_queries != dump.n_keys:
            raise ShapeError("training dumps need one query per key (causal sequence)")
        if dump.n_keys < 2:
            raise ShapeError("dump must contain at least two tokens")
        self.dump = dump
        self.seq_len = min(seq_len or dump.n_keys, dump.n_keys)

    @property
    def d(self) -> int:
        return self.dump.d

    def sample(self, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        start = int(rng.integers(0, self.dump.n_keys - self.seq_len + 1))
        stop = start + self.seq_len
        return self.dump.queries[start:stop], self.dump.keys[start:stop]
