"""Small trainable sentence encoder with exact analytic gradients.

Forward path: token embedding lookup -> pooling -> linear projection ->
tanh -> L2 normalization. Everything downstream consumes the unit-norm
output, so the backward pass has to differentiate through the
normalization Jacobian as well: for pre-normalization z with unit output
h = z/||z|| and upstream gradient g,

    dL/dz = (g - (g . h) h) / ||z||.

The tanh keeps pre-normalization vectors bounded, which makes a zero
vector at the normalization step unreachable except for contrived
parameter settings (it is still checked and raised).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum
from typing import BinaryIO, Sequence

import numpy as np

from .errors import (
    CorpusParseError,
    ShapeMismatchError,
    TokenOutOfRangeError,
    ZeroVectorError,
)
from .numerics import ZERO_NORM_EPS

TokenSeq = Sequence[int]

CHECKPOINT_MAGIC = b"DMC1"


class Pooling(str, Enum):
    """How per-token embeddings collapse into one sentence vector."""

    MEAN = "mean"
    MAX = "max"
    FIRST = "first"


@dataclass
class EncoderParams:
    """Trainable tensors of one encoder tower."""

    embedding: np.ndarray  # (vocab_size, d_emb)
    proj_w: np.ndarray     # (d_emb, d_out)
    proj_b: np.ndarray     # (d_out,)

    @property
    def vocab_size(self) -> int:
        return self.embedding.shape[0]

    @property
    def d_emb(self) -> int:
        return self.embedding.shape[1]

    @property
    def d_out(self) -> int:
        return self.proj_w.shape[1]

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (self.embedding, self.proj_w, self.proj_b)

    def shapes(self) -> tuple[tuple[int, ...], ...]:
        return tuple(a.shape for a in self.arrays())

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.embedding.copy(), self.proj_w.copy(), self.proj_b.copy())


@dataclass
class EncoderGrads:
    """Gradients with the same layout as EncoderParams."""

    embedding: np.ndarray
    proj_w: np.ndarray
    proj_b: np.ndarray

    @classmethod
    def zeros_like(cls, params: EncoderParams) -> "EncoderGrads":
        return cls(*(np.zeros_like(a) for a in params.arrays()))

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (self.embedding, self.proj_w, self.proj_b)

    def add_scaled(self, other: "EncoderGrads", scale: float = 1.0) -> None:
        self.embedding += scale * other.embedding
        self.proj_w += scale * other.proj_w
        self.proj_b += scale * other.proj_b


def init_params(vocab_size: int, d_emb: int, d_out: int, rng: np.random.Generator) -> EncoderParams:
    """Random initialization keeping pre-tanh activations order-one."""
    embedding = rng.normal(0.0, 1.0, size=(vocab_size, d_emb))
    proj_w = rng.normal(0.0, 1.0 / np.sqrt(d_emb), size=(d_emb, d_out))
    proj_b = np.zeros(d_out)
    return EncoderParams(embedding, proj_w, proj_b)


def _check_tokens(params: EncoderParams, tokens: TokenSeq, where: str = "") -> None:
    if len(tokens) == 0:
        raise TokenOutOfRangeError(f"{where}empty token sequence")
    for t in tokens:
        if not (0 <= int(t) < params.vocab_size):
            raise TokenOutOfRangeError(
                f"{where}token id {t} outside [0, {params.vocab_size})"
            )


def _pool(rows: np.ndarray, pooling: Pooling) -> np.ndarray:
    if pooling is Pooling.MEAN:
        return rows.mean(axis=0)
    if pooling is Pooling.MAX:
        return rows.max(axis=0)
    return rows[0]


def encode(params: EncoderParams, tokens: TokenSeq, pooling: Pooling | str) -> np.ndarray:
    """Encode one token sequence into a unit-norm vector of dimension d_out."""
    pooling = Pooling(pooling)
    _check_tokens(params, tokens)
    h, _, _, _ = _forward_batch(params, [tokens], pooling)
    return h[0]


def _forward_batch(
    params: EncoderParams, batch: Sequence[TokenSeq], pooling: Pooling
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Shared forward pass returning (H, Z, norms, pooled) for the batch.

    The projection runs row by row so each sentence's result is a pure
    function of its own pooled vector; batched BLAS kernels would otherwise
    produce different last-bit rounding depending on batch size, breaking
    the encode/encode_batch bitwise-equality contract.
    """
    n = len(batch)
    pooled = np.empty((n, params.d_emb))
    for i, tokens in enumerate(batch):
        try:
            _check_tokens(params, tokens)
        except TokenOutOfRangeError as e:
            raise TokenOutOfRangeError(f"batch item {i}: {e}") from e
        pooled[i] = _pool(params.embedding[np.asarray(tokens, dtype=np.intp)], pooling)
    projected = np.empty((n, params.d_out))
    for i in range(n):
        projected[i] = pooled[i] @ params.proj_w
    z = np.tanh(projected + params.proj_b)
    norms = np.linalg.norm(z, axis=1)
    bad = np.nonzero(norms <= ZERO_NORM_EPS)[0]
    if bad.size:
        raise ZeroVectorError(f"batch item {bad[0]}: pre-normalization output is the zero vector")
    return z / norms[:, None], z, norms, pooled


def encode_batch(
    params: EncoderParams, batch: Sequence[TokenSeq], pooling: Pooling | str
) -> np.ndarray:
    """Encode a batch; row i is bit-identical to encode(params, batch[i], pooling)."""
    pooling = Pooling(pooling)
    if len(batch) == 0:
        return np.zeros((0, params.d_out))
    h, _, _, _ = _forward_batch(params, batch, pooling)
    return h


def encode_backward(
    params: EncoderParams,
    batch: Sequence[TokenSeq],
    pooling: Pooling | str,
    upstream: np.ndarray,
) -> EncoderGrads:
    """Gradient of sum_i upstream[i] . h_i with respect to the parameters.

    Exact chain rule through normalization, tanh, the affine projection,
    and pooling. Max pooling routes each dimension's subgradient to the
    earliest token position attaining the maximum.
    """
    pooling = Pooling(pooling)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (len(batch), params.d_out):
        raise ShapeMismatchError(
            f"upstream shape {upstream.shape} != ({len(batch)}, {params.d_out})"
        )
    grads = EncoderGrads.zeros_like(params)
    if len(batch) == 0:
        return grads

    h, z, norms, pooled = _forward_batch(params, batch, pooling)

    # normalization: dz = (g - (g.h) h) / ||z||, rowwise
    gh = np.sum(upstream * h, axis=1, keepdims=True)
    dz = (upstream - gh * h) / norms[:, None]
    da = dz * (1.0 - z * z)  # tanh'(a) = 1 - tanh(a)^2

    grads.proj_w += pooled.T @ da
    grads.proj_b += da.sum(axis=0)
    dpooled = da @ params.proj_w.T

    for i, tokens in enumerate(batch):
        ids = np.asarray(tokens, dtype=np.intp)
        if pooling is Pooling.MEAN:
            np.add.at(grads.embedding, ids, dpooled[i] / len(ids))
        elif pooling is Pooling.MAX:
            rows = params.embedding[ids]
            winners = np.argmax(rows, axis=0)  # first max wins ties
            np.add.at(grads.embedding, (ids[winners], np.arange(params.d_emb)), dpooled[i])
        else:
            grads.embedding[ids[0]] += dpooled[i]
    return grads


# ---------------------------------------------------------------------------
# Checkpoint format: magic "DMC1", then vocab_size, d_emb, d_out as 8-byte
# little-endian unsigned integers, then embedding / proj_w / proj_b as 8-byte
# little-endian doubles in row-major order, encoder A followed by encoder B.
# ---------------------------------------------------------------------------


def _write_tensor(fh: BinaryIO, a: np.ndarray) -> None:
    fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def _read_tensor(fh: BinaryIO, shape: tuple[int, ...], path: str) -> np.ndarray:
    count = int(np.prod(shape))
    raw = fh.read(8 * count)
    if len(raw) != 8 * count:
        raise CorpusParseError(f"{path}: truncated checkpoint tensor")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


def save_checkpoint(path: str, params_a: EncoderParams, params_b: EncoderParams) -> None:
    """Write both encoder towers to one binary checkpoint file."""
    if params_a.shapes() != params_b.shapes():
        raise ShapeMismatchError("encoder towers must share shapes in a checkpoint")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<QQQ", params_a.vocab_size, params_a.d_emb, params_a.d_out))
        for p in (params_a, params_b):
            for a in p.arrays():
                _write_tensor(fh, a)


def load_checkpoint(path: str) -> tuple[EncoderParams, EncoderParams]:
    """Read both encoder towers back from a checkpoint file."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CorpusParseError(f"{path}: bad checkpoint magic {magic!r}")
        header = fh.read(24)
        if len(header) != 24:
            raise CorpusParseError(f"{path}: truncated checkpoint header")
        vocab, d_emb, d_out = struct.unpack("<QQQ", header)
        out = []
        for _ in range(2):
            emb = _read_tensor(fh, (vocab, d_emb), path)
            w = _read_tensor(fh, (d_emb, d_out), path)
            b = _read_tensor(fh, (d_out,), path)
            out.append(EncoderParams(emb, w, b))
        if fh.read(1):
            raise CorpusParseError(f"{path}: trailing bytes after checkpoint payload")
    return out[0], out[1]
