"""Bit-packed hash codes, NXOR/popcount similarity and exact top-k search.

Codes are stored as rows of 32-bit words. The pack layout is interleaved:
the ``d`` input columns are split into 32 contiguous chunks of ``d / 32``
columns, and word ``w`` of a row holds column ``c * (d / 32) + w`` of every
chunk ``c`` at bit position ``31 - c`` (chunk 0 is the most significant bit).
Similarity scores never depend on this layout, since query and index codes
share it.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from os import PathLike

import numpy as np

from .errors import FormatError, ShapeError, TruncatedFileError

WORD_BITS = 32
MAX_CODE_BITS = 1 << 15

CODE_MAGIC = b"SPLC"
CODE_VERSION = 1
_CODE_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True)
class HashCode:
    """A single packed code."""

    words: np.ndarray
    length_bits: int

    def __post_init__(self):
        words = np.ascontiguousarray(self.words, dtype=np.uint32).reshape(-1)
        object.__setattr__(self, "words", words)
        if words.size * WORD_BITS != self.length_bits:
            raise ShapeError(f"{words.size} words cannot hold {self.length_bits} bits")


@dataclass(frozen=True)
class CodeMatrix:
    """``n`` packed codes of ``length_bits`` bits, one row per input vector."""

    data: np.ndarray
    length_bits: int

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.uint32)
        if data.ndim != 2:
            raise ShapeError(f"code data must be 2-D, got shape {data.shape}")
        if data.shape[1] * WORD_BITS != self.length_bits:
            raise ShapeError(
                f"rows of {data.shape[1]} words cannot hold {self.length_bits} bits"
            )
        if self.length_bits > MAX_CODE_BITS:
            raise ShapeError(f"code length {self.length_bits} exceeds {MAX_CODE_BITS} bits")
        object.__setattr__(self, "data", data)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def words_per_row(self) -> int:
        return self.data.shape[1]

    def __len__(self) -> int:
        return self.rows

    def row(self, i: int) -> HashCode:
        return HashCode(self.data[i], self.length_bits)

    def __eq__(self, other):
        if not isinstance(other, CodeMatrix):
            return NotImplemented
        return self.length_bits == other.length_bits and np.array_equal(self.data, other.data)

    __hash__ = None


def pack_bits(bits) -> CodeMatrix:
    """Pack an ``(n, d)`` boolean matrix into ``d / 32`` words per row."""
    bits = np.asarray(bits)
    if bits.ndim == 1:
        bits = bits[None, :]
    if bits.ndim != 2:
        raise ShapeError(f"expected an (n, d) bit matrix, got shape {bits.shape}")
    n, d = bits.shape
    if d == 0 or d % WORD_BITS:
        raise ShapeError(f"code length {d} is not a positive multiple of {WORD_BITS}")
    w = d // WORD_BITS
    # (n, chunk, word) -> (n, word, chunk); chunk 0 lands in the MSB
    grouped = (bits != 0).reshape(n, WORD_BITS, w).transpose(0, 2, 1)
    packed = np.packbits(grouped, axis=-1, bitorder="big")
    packed = np.ascontiguousarray(packed).reshape(n, w, 4)
    words = packed.view(">u4").reshape(n, w).astype(np.uint32)
    return CodeMatrix(words, d)


def unpack_bits(codes: CodeMatrix) -> np.ndarray:
    """Inverse of :func:`pack_bits`; returns an ``(n, L)`` boolean matrix."""
    n, w = codes.data.shape
    as_bytes = codes.data.astype(">u4").view(np.uint8).reshape(n, w, 4)
    grouped = np.unpackbits(as_bytes, axis=-1, bitorder="big").reshape(n, w, WORD_BITS)
    return grouped.transpose(0, 2, 1).reshape(n, codes.length_bits).astype(bool)


def _query_words(query, length_bits: int) -> np.ndarray:
    if isinstance(query, HashCode):
        if query.length_bits != length_bits:
            raise ShapeError(
                f"query has {query.length_bits} bits but the index has {length_bits}"
            )
        return query.words
    if isinstance(query, CodeMatrix):
        if query.length_bits != length_bits or query.rows != 1:
            raise ShapeError("query must be a single code of the index length")
        return query.data[0]
    raise TypeError(f"expected HashCode, got {type(query).__name__}")


def nxor_scores(query: HashCode, index: CodeMatrix) -> np.ndarray:
    """Number of agreeing bit positions between ``query`` and every index row.

    ``2 * score - L`` equals the dot product of the two codes read as
    +1/-1 vectors.
    """
    q = _query_words(query, index.length_bits)
    mismatched = np.bitwise_count(np.bitwise_xor(index.data, q)).sum(axis=1, dtype=np.int32)
    return np.int32(index.length_bits) - mismatched


def nxor_score_matrix(queries: CodeMatrix, index: CodeMatrix, block: int = 256) -> np.ndarray:
    """Scores of every query row against every index row, shape ``(q, n)``."""
    if queries.length_bits != index.length_bits:
        raise ShapeError(
            f"query codes have {queries.length_bits} bits but the index has {index.length_bits}"
        )
    out = np.empty((queries.rows, index.rows), dtype=np.int32)
    L = np.int32(index.length_bits)
    for start in range(0, queries.rows, block):
        q = queries.data[start:start + block]
        xor = np.bitwise_xor(q[:, None, :], index.data[None, :, :])
        out[start:start + block] = L - np.bitwise_count(xor).sum(axis=2, dtype=np.int32)
    return out


def top_k_indices(scores, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores, ordered best first.

    Ties are broken toward the lower index, so the result is a deterministic
    function of the scores. Runs in O(n + k log k).
    """
    scores = np.asarray(scores)
    if scores.ndim != 1:
        raise ShapeError(f"scores must be 1-D, got shape {scores.shape}")
    n = scores.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for {n} scores")
    if scores.dtype.kind == "f" and np.isnan(scores).any():
        raise ValueError("scores contain NaN")
    if k == n:
        chosen = np.arange(n)
    else:
        threshold = np.partition(scores, n - k)[n - k]
        above = np.flatnonzero(scores > threshold)
        ties = np.flatnonzero(scores == threshold)[: k - above.size]
        chosen = np.concatenate([above, ties])
    # lexsort: last key is primary
    order = np.lexsort((chosen, -scores[chosen].astype(np.float64)))
    return chosen[order]


def save_codes(path: str | PathLike, codes: CodeMatrix) -> None:
    header = _CODE_HEADER.pack(CODE_MAGIC, CODE_VERSION, codes.rows, codes.length_bits)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(codes.data.astype("<u4").tobytes())


def load_codes(path: str | PathLike) -> CodeMatrix:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _CODE_HEADER.size:
        raise TruncatedFileError("file shorter than the code index header", offset=len(raw))
    magic, version, n, L = _CODE_HEADER.unpack_from(raw)
    if magic != CODE_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {CODE_MAGIC!r}", offset=0)
    if version != CODE_VERSION:
        raise FormatError(f"unsupported code index version {version}", offset=4)
    if L == 0 or L % WORD_BITS:
        raise FormatError(f"code length {L} is not a multiple of {WORD_BITS}", offset=12)
    need = n * (L // WORD_BITS) * 4
    payload = raw[_CODE_HEADER.size:]
    if len(payload) < need:
        raise TruncatedFileError(
            f"header advertises {need} payload bytes, found {len(payload)}",
            offset=_CODE_HEADER.size + len(payload),
        )
    data = np.frombuffer(payload[:need], dtype="<u4").reshape(n, L // WORD_BITS)
    return CodeMatrix(data.astype(np.uint32), L)
