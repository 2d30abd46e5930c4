"""Segmental speech encoder.

Pipeline per utterance: a position-wise frame encoder (trained with a
next-frame contrastive loss), a cosine-threshold boundary detector, mean
pooling of each segment's frames via one indicator matmul, and a
convolutional segment encoder producing the segment embedding sequence fed
to the frozen text encoder.

Boundary decisions are non-differentiable and treated as constants within a
training step; gradients flow through pooling and both encoders only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DomainError, ShapeError, ValidationError
from .losses import contrastive_from_logits


@dataclass
class EncoderConfig:
    frame_dim: int
    frame_hidden: int = 1024
    frame_out: int = 0  # 0: same as frame_dim
    conv_filters: int = 1024
    seg_hidden: int = 512
    out_dim: int = 512
    boundary_threshold: float = 0.5
    nfc_negatives: int = 10
    max_segments: int = 64

    def resolved_frame_out(self) -> int:
        return self.frame_out if self.frame_out > 0 else self.frame_dim


def _init_linear(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> tuple[Tensor, Tensor]:
    w = rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
    return (
        Tensor(w.astype(dtype), requires_grad=True),
        Tensor(np.zeros(fan_out, dtype=dtype), requires_grad=True),
    )


class EncoderParams:
    """Trainable weights of the frame encoder and segment encoder."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator, dtype=np.float32):
        self.config = config
        p = config.resolved_frame_out()
        h = config.frame_hidden
        f = config.conv_filters
        s = config.seg_hidden
        self._params: dict[str, Tensor] = {}

        def linear(name, fan_in, fan_out):
            w, b = _init_linear(rng, fan_in, fan_out, dtype)
            self._params[f"{name}.w"] = w
            self._params[f"{name}.b"] = b

        linear("f_enc.l1", config.frame_dim, h)
        linear("f_enc.l2", h, h)
        linear("f_enc.l3", h, p)
        for tap in range(3):
            linear(f"s_enc.conv1.t{tap}", p, f)
        for tap in range(3):
            linear(f"s_enc.conv2.t{tap}", f, f)
        linear("s_enc.ff1", f, s)
        linear("s_enc.ff2", s, config.out_dim)
        # conv taps share one bias per layer; drop the extra tap biases
        for layer in ("conv1", "conv2"):
            for tap in (1, 2):
                del self._params[f"s_enc.{layer}.t{tap}.b"]

    def parameters(self) -> dict[str, Tensor]:
        return self._params

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]


def encode_frames(frames: np.ndarray | Tensor, params: EncoderParams) -> Tensor:
    """Position-wise frame encoder: row t of the output depends only on frame t."""
    x = frames if isinstance(frames, Tensor) else Tensor(np.asarray(frames))
    if x.data.ndim != 2 or x.shape[1] != params.config.frame_dim:
        raise ShapeError("encode_frames", x.shape, (-1, params.config.frame_dim))
    x = ad.relu(ad.add_rowvec(ad.matmul(x, params["f_enc.l1.w"]), params["f_enc.l1.b"]))
    x = ad.relu(ad.add_rowvec(ad.matmul(x, params["f_enc.l2.w"]), params["f_enc.l2.b"]))
    return ad.add_rowvec(ad.matmul(x, params["f_enc.l3.w"]), params["f_enc.l3.b"])


def next_frame_loss(encoded: Tensor, k_negatives: int, rng: np.random.Generator) -> Tensor:
    """Mean contrastive loss of classifying each true next frame among
    k uniformly sampled same-utterance negatives (true next frame excluded)."""
    L = encoded.shape[0]
    if L < k_negatives + 2:
        raise DomainError(f"next_frame_loss: need at least {k_negatives + 2} frames for {k_negatives} negatives, got {L}")
    sims = ad.cosine_rows(encoded, encoded)
    rows = []
    for t in range(L - 1):
        candidates = np.delete(np.arange(L), t + 1)
        negs = rng.choice(candidates, size=k_negatives, replace=False)
        rows.append(np.concatenate(([t * L + t + 1], t * L + negs)))
    idx = np.stack(rows)
    logits = ad.reshape(ad.gather_flat(sims, idx.reshape(-1)), idx.shape)
    return contrastive_from_logits(logits)


def adjacent_similarities(encoded: np.ndarray) -> np.ndarray:
    """Cosine between each frame and its successor; length L-1.

    A zero-norm frame counts as orthogonal to everything (similarity 0), so
    boundary detection never fails on degenerate encodings."""
    norms = np.linalg.norm(encoded, axis=1)
    unit = encoded / np.maximum(norms, np.finfo(encoded.dtype).tiny)[:, None]
    return (unit[:-1] * unit[1:]).sum(axis=1)


def _cap_starts(starts: list[int], sims_by_start: dict[int, float], max_segments: int) -> list[int]:
    if len(starts) <= max_segments:
        return starts
    interior = np.array([s for s in starts if s != 0], dtype=np.int64)
    sims = np.array([sims_by_start[s] for s in interior])
    keep = interior[np.lexsort((interior, sims))[: max_segments - 1]]
    return [0] + sorted(int(s) for s in keep)


def detect_boundaries(encoded: np.ndarray | Tensor, threshold: float, max_segments: int = 64) -> list[int]:
    """Segment starts: index 0 always, plus t+1 wherever cos(z_t, z_{t+1})
    falls below the threshold.  At most `max_segments` segments are kept, by
    retaining the lowest-similarity boundaries (ties: earlier index)."""
    values = encoded.numpy() if isinstance(encoded, Tensor) else np.asarray(encoded)
    L = values.shape[0]
    if L == 1:
        return [0]
    sims = adjacent_similarities(values)
    starts = [0] + [int(t) + 1 for t in np.nonzero(sims < threshold)[0]]
    return _cap_starts(starts, {int(t) + 1: float(sims[t]) for t in range(L - 1)}, max_segments)


def merge_external_boundaries(starts: list[int], external_starts: list[int], num_frames: int, max_segments: int = 64, adjacent_sims: np.ndarray | None = None) -> list[int]:
    """Sorted deduplicated union with start 0 retained and the segment cap
    re-applied.  With adjacent similarities available the cap keeps the
    lowest-similarity boundaries; otherwise it keeps the earliest."""
    for s in external_starts:
        if not (0 <= s < num_frames):
            raise ValidationError(f"external boundary {s} outside [0, {num_frames})")
    merged = sorted(set(starts) | set(external_starts) | {0})
    if len(merged) <= max_segments:
        return merged
    if adjacent_sims is not None:
        return _cap_starts(merged, {s: float(adjacent_sims[s - 1]) for s in merged if s != 0}, max_segments)
    return merged[:max_segments]


def starts_to_slices(starts: list[int], num_frames: int) -> list[tuple[int, int]]:
    """Validated (begin, end) pairs partitioning [0, num_frames)."""
    if not starts or starts[0] != 0:
        raise ValidationError(f"segment starts must begin at 0, got {starts[:1]}")
    for a, b in zip(starts, starts[1:]):
        if b <= a:
            raise ValidationError(f"segment starts must be strictly increasing, got {a} then {b}")
    if starts[-1] >= num_frames:
        raise ValidationError(f"segment start {starts[-1]} >= num_frames {num_frames}")
    ends = list(starts[1:]) + [num_frames]
    return list(zip(starts, ends))


def pooling_matrix(starts: list[int], num_frames: int, dtype=np.float32) -> np.ndarray:
    """Indicator matrix P with P[j, t] = 1/|segment j| for t in segment j;
    P @ frames is the per-segment mean (the vectorized pooling path)."""
    slices = starts_to_slices(starts, num_frames)
    P = np.zeros((len(slices), num_frames), dtype=dtype)
    for j, (a, b) in enumerate(slices):
        P[j, a:b] = 1.0 / (b - a)
    return P


def pool_segments(encoded: Tensor, starts: list[int]) -> Tensor:
    """Mean of each segment's frames, computed as one matmul with the
    pooling indicator (starts are constants in the graph)."""
    P = pooling_matrix(starts, encoded.shape[0], dtype=encoded.data.dtype)
    return ad.matmul(Tensor(P), encoded)


def encode_segments(pooled: Tensor, params: EncoderParams) -> Tensor:
    """Two kernel-3 same-padding conv layers then a two-layer feed-forward."""
    if pooled.data.ndim != 2 or pooled.shape[1] != params.config.resolved_frame_out():
        raise ShapeError("encode_segments", pooled.shape, (-1, params.config.resolved_frame_out()))
    x = ad.conv1d_same(pooled, params["s_enc.conv1.t0.w"], params["s_enc.conv1.t1.w"], params["s_enc.conv1.t2.w"], params["s_enc.conv1.t0.b"])
    x = ad.relu(x)
    x = ad.conv1d_same(x, params["s_enc.conv2.t0.w"], params["s_enc.conv2.t1.w"], params["s_enc.conv2.t2.w"], params["s_enc.conv2.t0.b"])
    x = ad.relu(x)
    x = ad.relu(ad.add_rowvec(ad.matmul(x, params["s_enc.ff1.w"]), params["s_enc.ff1.b"]))
    return ad.add_rowvec(ad.matmul(x, params["s_enc.ff2.w"]), params["s_enc.ff2.b"])


@dataclass
class SegmentSequence:
    """Boundary starts plus pooled and encoded segment representations."""

    starts: list[int]
    pooled: Tensor
    embeddings: Tensor


def encode_utterance(frames: np.ndarray, params: EncoderParams, external_starts: list[int] | None = None) -> SegmentSequence:
    """Full segmental pipeline for one utterance."""
    cfg = params.config
    encoded = encode_frames(frames, params)
    values = encoded.numpy()
    starts = detect_boundaries(values, cfg.boundary_threshold, cfg.max_segments)
    if external_starts is not None:
        starts = merge_external_boundaries(starts, external_starts, values.shape[0], cfg.max_segments, adjacent_similarities(values))
    pooled = pool_segments(encoded, starts)
    return SegmentSequence(starts=starts, pooled=pooled, embeddings=encode_segments(pooled, params))
