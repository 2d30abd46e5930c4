"""Frozen text encoder, vocabulary table, and the three alignment heads.

The frozen text encoder is a deterministic, seeded transformer block
(sinusoidal positions, one 4-head self-attention layer with residual and
layer normalization, a position-wise FFN, mean pooling, final linear to the
joint dimension, L2 normalization).  Its weights are fixed at construction
and excluded from every optimizer; gradients still flow through it to its
inputs.

Heads map segment embeddings into the joint space:
  direct       segments go straight into the text encoder
  regularized  direct, plus a loss pulling each segment toward its nearest
               vocabulary row
  vq           segments are replaced by their nearest vocabulary row via a
               straight-through estimator (hard forward, soft backward)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import rng as rng_mod
from .autodiff import Tensor
from .errors import ConfigError, DomainError, ShapeError, ValidationError


def sinusoidal_positions(length: int, dim: int, dtype=np.float32) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    pe = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return pe.astype(dtype)


def _layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    centered = ad.add_colvec(x, ad.neg(ad.tmean(x, axis=1)))
    var = ad.tmean(ad.mul(centered, centered), axis=1)
    return ad.scale_colvec(centered, ad.power(ad.add(var, eps), -0.5))


class FrozenTextEncoder:
    """Seeded transformer block mapping a segment sequence to one unit vector.

    Reconstructable from (seed, input_dim, joint_dim) alone; identical seed
    and input always produce identical output.
    """

    def __init__(self, seed: int, input_dim: int, joint_dim: int, heads: int = 4, max_positions: int = 64, normalize_input: bool = False, dtype=np.float32):
        if input_dim % heads != 0:
            raise ConfigError(f"input_dim {input_dim} not divisible by {heads} heads")
        self.seed = seed
        self.input_dim = input_dim
        self.joint_dim = joint_dim
        self.heads = heads
        self.max_positions = max_positions
        self.normalize_input = normalize_input
        self.dtype = dtype
        gen = rng_mod.stream(seed, "frozen_text_encoder")

        def mat(fan_in, fan_out):
            return Tensor((gen.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)).astype(dtype))

        d = input_dim
        ff = 2 * d
        self.wq, self.wk, self.wv, self.wo = mat(d, d), mat(d, d), mat(d, d), mat(d, d)
        self.ff_w1, self.ff_w2 = mat(d, ff), mat(ff, d)
        self.ff_b1 = Tensor(np.zeros(ff, dtype=dtype))
        self.ff_b2 = Tensor(np.zeros(d, dtype=dtype))
        self.out_w = mat(d, joint_dim)
        self.positions = Tensor(sinusoidal_positions(max_positions, d, dtype))

    def weight_digest(self) -> bytes:
        import hashlib

        h = hashlib.sha256()
        for t in (self.wq, self.wk, self.wv, self.wo, self.ff_w1, self.ff_w2, self.ff_b1, self.ff_b2, self.out_w):
            h.update(t.numpy().tobytes())
        return h.digest()

    def _pooled(self, segments: Tensor) -> Tensor:
        M = segments.shape[0]
        if not (1 <= M <= self.max_positions):
            raise ShapeError("frozen_text_encoder", segments.shape, detail=f"segment count must be in [1, {self.max_positions}]")
        if segments.shape[1] != self.input_dim:
            raise ShapeError("frozen_text_encoder", segments.shape, (-1, self.input_dim))
        x = ad.l2_normalize(segments) if self.normalize_input else segments
        x = ad.add(x, ad.narrow(self.positions, 0, 0, M))

        q, k, v = ad.matmul(x, self.wq), ad.matmul(x, self.wk), ad.matmul(x, self.wv)
        hd = self.input_dim // self.heads
        scale = 1.0 / np.sqrt(hd)
        head_outs = []
        for h in range(self.heads):
            qh = ad.narrow(q, 1, h * hd, hd)
            kh = ad.narrow(k, 1, h * hd, hd)
            vh = ad.narrow(v, 1, h * hd, hd)
            scores = ad.mul(ad.matmul(qh, ad.transpose(kh)), Tensor(np.asarray(scale, dtype=x.data.dtype)))
            head_outs.append(ad.matmul(ad.softmax_last(scores), vh))
        attended = ad.matmul(ad.concat(head_outs, axis=1), self.wo)

        h1 = _layer_norm(ad.add(x, attended))
        ffn = ad.add_rowvec(ad.matmul(ad.relu(ad.add_rowvec(ad.matmul(h1, self.ff_w1), self.ff_b1)), self.ff_w2), self.ff_b2)
        return ad.tmean(ad.add(h1, ffn), axis=0)

    def encode(self, segments: Tensor) -> Tensor:
        """Unit-norm joint-space embedding of a segment sequence."""
        return ad.l2_normalize(ad.matvec(ad.transpose(self.out_w), self._pooled(segments)))

    def encode_native(self, segments: Tensor) -> Tensor:
        """Unit-norm pooled representation before the joint projection."""
        return ad.l2_normalize(self._pooled(segments))


class VocabularyTable:
    """Frozen subword embedding matrix, rows L2-normalized on load."""

    def __init__(self, matrix: np.ndarray):
        mat = np.asarray(matrix)
        if mat.ndim != 2 or mat.shape[0] < 2:
            raise ValidationError(f"vocabulary needs at least 2 rows, got shape {mat.shape}")
        norms = np.linalg.norm(mat, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise ValidationError("vocabulary contains a zero row")
        self.matrix = (mat / norms).astype(mat.dtype)
        self.tensor = Tensor(self.matrix)

    @classmethod
    def from_archive(cls, dataset) -> "VocabularyTable":
        if dataset.vocab is None:
            raise ValidationError("archive has no vocab.f32")
        return cls(dataset.vocab)

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def cosine_matrix(segments: Tensor, vocab: VocabularyTable) -> Tensor:
    """C[j, k] = cosine(segment j, vocabulary row k)."""
    if segments.shape[1] != vocab.dim:
        raise ShapeError("cosine_matrix", segments.shape, vocab.matrix.shape)
    norms = np.linalg.norm(segments.numpy(), axis=1)
    if np.any(norms == 0):
        j = int(np.argmax(norms == 0))
        raise DomainError(f"cosine_matrix: zero-norm segment row {j}")
    vocab_t = vocab.tensor if segments.data.dtype == vocab.matrix.dtype else Tensor(vocab.matrix.astype(segments.data.dtype))
    return ad.matmul(ad.l2_normalize(segments), ad.transpose(vocab_t))


def vocab_reg_loss(cosines: Tensor) -> Tensor:
    """-(1/M) sum_j log(max_k C[j,k]): pulls each segment toward its nearest
    vocabulary direction; zero exactly when every segment coincides with one."""
    row_max = cosines.numpy().max(axis=-1)
    if np.any(row_max <= 0):
        j = int(np.argmax(row_max <= 0))
        raise DomainError(f"vocab_reg_loss: segment {j} has non-positive best cosine {row_max[j]:.4g}")
    return ad.neg(ad.tmean(ad.tlog(ad.max_last(cosines))))


def soft_quantize(cosine_row: Tensor, vocab: VocabularyTable, temperature: float) -> Tensor:
    """Vocabulary rows mixed by softmax(cosines / temperature)."""
    if temperature <= 0:
        raise ConfigError(f"quantization temperature must be > 0, got {temperature}")
    weights = ad.softmax_last(ad.mul(cosine_row, Tensor(np.asarray(1.0 / temperature, dtype=cosine_row.data.dtype))))
    vocab_t = vocab.tensor if cosine_row.data.dtype == vocab.matrix.dtype else Tensor(vocab.matrix.astype(cosine_row.data.dtype))
    if cosine_row.data.ndim == 1:
        return ad.matvec(ad.transpose(vocab_t), weights)
    return ad.matmul(weights, vocab_t)


def quantize_straight_through(cosine_row: Tensor, vocab: VocabularyTable, temperature: float) -> Tensor:
    """Forward: exactly the argmax vocabulary row (ties to the smallest
    index).  Backward: the gradient of the soft path."""
    soft = soft_quantize(cosine_row, vocab, temperature)
    idx = np.argmax(cosine_row.numpy(), axis=-1)
    return ad.straight_through(soft, vocab.matrix[idx])


@dataclass
class AlignmentHead:
    """Head configuration: direct, regularized (weight lam), or vq (temperature)."""

    kind: str = "direct"
    lam: float = 0.0
    tau_vq: float = 0.1

    def validate(self) -> None:
        if self.kind not in ("direct", "regularized", "vq"):
            raise ConfigError(f"unknown head kind {self.kind!r}")
        if self.lam < 0:
            raise ConfigError(f"regularization weight must be >= 0, got {self.lam}")
        if self.tau_vq <= 0:
            raise ConfigError(f"vq temperature must be > 0, got {self.tau_vq}")


def head_forward(segments: Tensor, head: AlignmentHead, text_encoder: FrozenTextEncoder, vocab: VocabularyTable | None) -> tuple[Tensor, Tensor | None]:
    """Joint embedding plus the head's extra loss term (None when absent)."""
    if head.kind == "direct":
        return text_encoder.encode(segments), None
    if vocab is None:
        raise ConfigError(f"head {head.kind!r} requires a vocabulary table")
    if head.kind == "regularized":
        # lam == 0 must match the direct head exactly, so skip the reg term
        extra = vocab_reg_loss(cosine_matrix(segments, vocab)) if head.lam > 0 else None
        return text_encoder.encode(segments), extra
    quantized = quantize_straight_through(cosine_matrix(segments, vocab), vocab, head.tau_vq)
    return text_encoder.encode(quantized), None
