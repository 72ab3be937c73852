"""Hash functions mapping d-dimensional vectors to binary codes.

Three families share one small surface (``d``, ``L``, ``params()``):

* :class:`LinearHasher` -- sign of a projection, initialised to a random
  rotation.
* :class:`MlpHasher` -- sign of a two-layer SiLU network; trained through a
  soft-sign relaxation.
* :class:`DownProjEstimator` -- not a hash: scores keys by inner products in a
  low-dimensional projection. Used as an ablation baseline.

Parameters are stored as float32 by default; pass float64 arrays for
gradient-check paths.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from os import PathLike

import numpy as np

from .bitcodes import CodeMatrix, pack_bits
from .errors import FormatError, NumericError, ShapeError, TruncatedFileError

DEFAULT_GAMMA = 64.0

HASHER_MAGIC = b"SPLH"
HASHER_VERSION = 1
_HASHER_HEADER = struct.Struct("<4sIBIIIf")

KIND_LINEAR, KIND_MLP, KIND_DOWNPROJ = 0, 1, 2


def _as_batch(x, d: int) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != d:
        raise ShapeError(f"expected inputs with {d} columns, got shape {x.shape}")
    return x


def sign_bits(z: np.ndarray) -> np.ndarray:
    # sign(0) maps to bit 1
    return z >= 0


def sigmoid(z):
    # tanh form does not overflow for large |z|
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def silu(z):
    return z * sigmoid(z)


def silu_grad(z):
    s = sigmoid(z)
    return s * (1.0 + z * (1.0 - s))


def soft_sign(z, gamma: float):
    """Smooth surrogate of sign: ``gamma * z / (1 + gamma * |z|)``."""
    if not gamma > 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    z = np.asarray(z)
    return gamma * z / (1.0 + gamma * np.abs(z))


def soft_sign_grad(z, gamma: float):
    z = np.asarray(z)
    return gamma / np.square(1.0 + gamma * np.abs(z))


@dataclass
class LinearHasher:
    """``H(x) = sign(x @ projection)``; ``projection`` is ``d x L``."""

    projection: np.ndarray
    gamma: float = DEFAULT_GAMMA

    kind = KIND_LINEAR
    name = "linear"

    def __post_init__(self):
        self.projection = np.asarray(self.projection)
        if self.projection.ndim != 2:
            raise ShapeError("projection must be a d x L matrix")

    @property
    def d(self) -> int:
        return self.projection.shape[0]

    @property
    def L(self) -> int:
        return self.projection.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        return {"projection": self.projection}

    def with_params(self, params: dict[str, np.ndarray]) -> LinearHasher:
        return LinearHasher(params["projection"], self.gamma)

    def preactivation(self, x) -> np.ndarray:
        x = _as_batch(x, self.d)
        return x.astype(self.projection.dtype, copy=False) @ self.projection

    def hash(self, x) -> np.ndarray:
        return linear_hash(self, x)

    def codes(self, x) -> CodeMatrix:
        return pack_bits(self.hash(x))

    def soft_codes(self, x) -> np.ndarray:
        return soft_sign(self.preactivation(x), self.gamma)


@dataclass
class MlpHasher:
    """``H(x) = sign(SiLU(x @ W1 + b1) @ W2)``.

    ``W1`` is ``d x h``, ``b1`` has ``h`` entries and ``W2`` is ``h x L``.
    ``gamma`` sets the sharpness of the soft sign used during training.
    """

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    gamma: float = DEFAULT_GAMMA

    kind = KIND_MLP
    name = "mlp"

    def __post_init__(self):
        self.W1 = np.asarray(self.W1)
        self.b1 = np.asarray(self.b1)
        self.W2 = np.asarray(self.W2)
        d, h = self.W1.shape
        if self.b1.shape != (h,) or self.W2.ndim != 2 or self.W2.shape[0] != h:
            raise ShapeError(
                f"inconsistent MLP shapes W1={self.W1.shape} b1={self.b1.shape} W2={self.W2.shape}"
            )
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")

    @classmethod
    def init(cls, d: int = 128, h: int = 128, L: int = 128, seed=0,
             gamma: float = DEFAULT_GAMMA, dtype=np.float32) -> MlpHasher:
        """Uniform fan-in initialisation, ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``."""
        rng = np.random.default_rng(seed)
        b_in, b_hid = 1.0 / np.sqrt(d), 1.0 / np.sqrt(h)
        W1 = rng.uniform(-b_in, b_in, size=(d, h))
        b1 = rng.uniform(-b_in, b_in, size=h)
        W2 = rng.uniform(-b_hid, b_hid, size=(h, L))
        return cls(W1.astype(dtype), b1.astype(dtype), W2.astype(dtype), gamma)

    @property
    def d(self) -> int:
        return self.W1.shape[0]

    @property
    def h(self) -> int:
        return self.W1.shape[1]

    @property
    def L(self) -> int:
        return self.W2.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2}

    def with_params(self, params: dict[str, np.ndarray]) -> MlpHasher:
        return MlpHasher(params["W1"], params["b1"], params["W2"], self.gamma)

    def preactivation(self, x) -> np.ndarray:
        return mlp_forward(self, x)

    def hash(self, x) -> np.ndarray:
        return mlp_hash(self, x)

    def codes(self, x) -> CodeMatrix:
        return pack_bits(self.hash(x))

    def soft_codes(self, x) -> np.ndarray:
        return soft_codes(self, x)


@dataclass
class DownProjEstimator:
    """Scores keys by ``(q @ P) . (k @ P)`` with ``P`` of shape ``d x r``."""

    projection: np.ndarray
    gamma: float = field(default=1.0)

    kind = KIND_DOWNPROJ
    name = "downproj"

    def __post_init__(self):
        self.projection = np.asarray(self.projection)
        if self.projection.ndim != 2 or self.projection.shape[1] < 1:
            raise ShapeError("projection must be a d x r matrix with r >= 1")

    @classmethod
    def init(cls, d: int = 128, factor: int = 16, seed=0, dtype=np.float32) -> DownProjEstimator:
        r = max(1, d // factor)
        rotation = qr_rotation_init(d, seed, dtype=np.float64).projection
        return cls(rotation[:, :r].astype(dtype))

    @property
    def d(self) -> int:
        return self.projection.shape[0]

    @property
    def r(self) -> int:
        return self.projection.shape[1]

    L = r

    def params(self) -> dict[str, np.ndarray]:
        return {"projection": self.projection}

    def with_params(self, params: dict[str, np.ndarray]) -> DownProjEstimator:
        return DownProjEstimator(params["projection"], self.gamma)

    def project(self, x) -> np.ndarray:
        x = _as_batch(x, self.d)
        return x.astype(self.projection.dtype, copy=False) @ self.projection


def qr_rotation_init(d: int, seed=0, dtype=np.float32, gamma: float = DEFAULT_GAMMA) -> LinearHasher:
    """Random rotation in SO(d) from the QR decomposition of a Gaussian matrix.

    The first column of Q is negated when ``det(Q) < 0``.
    """
    if d < 1:
        raise ValueError(f"dimension must be >= 1, got {d}")
    rng = np.random.default_rng(seed)
    while True:
        gaussian = rng.standard_normal((d, d))
        q, r = np.linalg.qr(gaussian)
        # rank-deficient draws have a vanishing diagonal entry in R
        if np.min(np.abs(np.diag(r))) > 1e-10:
            break
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return LinearHasher(q.astype(dtype), gamma=gamma)


def linear_hash(hasher: LinearHasher, x) -> np.ndarray:
    return sign_bits(hasher.preactivation(x))


def _check_finite(hasher: MlpHasher, x: np.ndarray) -> None:
    for name, value in hasher.params().items():
        if not np.all(np.isfinite(value)):
            raise NumericError(f"MLP parameter {name} has non-finite entries")
    if not np.all(np.isfinite(x)):
        raise NumericError("inputs contain non-finite values")


def mlp_forward(hasher: MlpHasher, x) -> np.ndarray:
    """Pre-activation outputs ``SiLU(x @ W1 + b1) @ W2``, shape ``(n, L)``."""
    x = _as_batch(x, hasher.d)
    _check_finite(hasher, x)
    x = x.astype(hasher.W1.dtype, copy=False)
    return silu(x @ hasher.W1 + hasher.b1) @ hasher.W2


def mlp_hash(hasher: MlpHasher, x) -> np.ndarray:
    return sign_bits(mlp_forward(hasher, x))


def soft_codes(hasher: MlpHasher, x) -> np.ndarray:
    return soft_sign(mlp_forward(hasher, x), hasher.gamma)


def downproj_scores(est: DownProjEstimator, q, K) -> np.ndarray:
    """Inner products of ``q`` against every row of ``K`` in the reduced space."""
    q = np.asarray(q)
    single = q.ndim == 1
    qp = est.project(q)
    kp = est.project(K)
    scores = qp @ kp.T
    return scores[0] if single else scores


Hasher = LinearHasher | MlpHasher | DownProjEstimator


def save_hasher(path: str | PathLike, hasher: Hasher) -> None:
    """Write an SPLH checkpoint (little-endian, f32 parameter blocks)."""
    if isinstance(hasher, MlpHasher):
        dims = (hasher.d, hasher.h, hasher.L)
    elif isinstance(hasher, LinearHasher):
        dims = (hasher.d, 0, hasher.L)
    elif isinstance(hasher, DownProjEstimator):
        dims = (hasher.d, 0, hasher.r)
    else:
        raise TypeError(f"cannot serialise {type(hasher).__name__}")
    with open(path, "wb") as fh:
        fh.write(_HASHER_HEADER.pack(HASHER_MAGIC, HASHER_VERSION, hasher.kind, *dims,
                                     float(hasher.gamma)))
        for value in hasher.params().values():
            fh.write(np.ascontiguousarray(value, dtype="<f4").tobytes())


def load_hasher(path: str | PathLike) -> Hasher:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HASHER_HEADER.size:
        raise TruncatedFileError("file shorter than the hasher header", offset=len(raw))
    magic, version, kind, d, h, L, gamma = _HASHER_HEADER.unpack_from(raw)
    if magic != HASHER_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {HASHER_MAGIC!r}", offset=0)
    if version != HASHER_VERSION:
        raise FormatError(f"unsupported hasher version {version}", offset=4)
    if kind == KIND_MLP:
        shapes = [(d, h), (h,), (h, L)]
    elif kind in (KIND_LINEAR, KIND_DOWNPROJ):
        shapes = [(d, L)]
    else:
        raise FormatError(f"unknown hasher kind {kind}", offset=8)

    offset = _HASHER_HEADER.size
    blocks = []
    for shape in shapes:
        nbytes = 4 * int(np.prod(shape))
        if offset + nbytes > len(raw):
            raise TruncatedFileError(
                f"parameter block of shape {shape} runs past end of file", offset=len(raw)
            )
        block = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=offset)
        if not np.all(np.isfinite(block)):
            raise FormatError("parameter block contains non-finite values", offset=offset)
        blocks.append(block.reshape(shape).astype(np.float32))
        offset += nbytes

    if kind == KIND_MLP:
        return MlpHasher(*blocks, gamma=gamma)
    if kind == KIND_LINEAR:
        return LinearHasher(blocks[0], gamma=gamma)
    return DownProjEstimator(blocks[0], gamma=gamma)
