"""Evaluation harness: retrieval recall, semantic similarity, boundary F1.

All functions are pure and operate on plain numpy arrays so any embedding
source (trained model, frozen pool, fixture) can be scored.  Ranking ties
break toward the lower candidate index, making every report deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ValidationError

DEFAULT_KS = (1, 5, 10)


def _unit(rows: np.ndarray, what: str) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] == 0:
        raise ValidationError(f"{what}: need a non-empty 2-D embedding matrix, got shape {rows.shape}")
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValidationError(f"{what}: zero-norm embedding at row {int(np.argmax(norms[:, 0] == 0))}")
    return rows / norms


def _top_k_hits(sims: np.ndarray, gold_sets: list[set[int]], k: int) -> float:
    # stable argsort on negated sims: ties resolve to the lower index
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    hits = sum(1 for row, gold in zip(order, gold_sets) if gold.intersection(row.tolist()))
    return hits / sims.shape[0]


@dataclass
class RetrievalReport:
    """Recall@k for both directions plus their arithmetic mean."""

    ks: tuple[int, ...]
    speech_to_image: dict[int, float]
    image_to_speech: dict[int, float]
    mean: dict[int, float]
    num_captions: int
    num_images: int
    config_digest: str = ""

    @classmethod
    def from_directions(cls, ks, speech_to_image, image_to_speech, num_captions=0, num_images=0, config_digest=""):
        mean = {k: (speech_to_image[k] + image_to_speech[k]) / 2.0 for k in ks}
        return cls(
            ks=tuple(ks),
            speech_to_image=dict(speech_to_image),
            image_to_speech=dict(image_to_speech),
            mean=mean,
            num_captions=num_captions,
            num_images=num_images,
            config_digest=config_digest,
        )

    def to_dict(self) -> dict:
        return {
            "report_version": 1,
            "kind": "retrieval",
            "ks": list(self.ks),
            "speech_to_image": {f"r@{k}": self.speech_to_image[k] for k in self.ks},
            "image_to_speech": {f"r@{k}": self.image_to_speech[k] for k in self.ks},
            "mean": {f"r@{k}": self.mean[k] for k in self.ks},
            "counts": {"captions": self.num_captions, "images": self.num_images},
            "config_digest": self.config_digest,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RetrievalReport":
        if d.get("report_version") != 1 or d.get("kind") != "retrieval":
            raise ValidationError(f"not a version-1 retrieval report: {d.get('kind')!r} v{d.get('report_version')!r}")
        ks = tuple(int(k) for k in d["ks"])
        return cls(
            ks=ks,
            speech_to_image={k: float(d["speech_to_image"][f"r@{k}"]) for k in ks},
            image_to_speech={k: float(d["image_to_speech"][f"r@{k}"]) for k in ks},
            mean={k: float(d["mean"][f"r@{k}"]) for k in ks},
            num_captions=int(d["counts"]["captions"]),
            num_images=int(d["counts"]["images"]),
            config_digest=str(d.get("config_digest", "")),
        )


def recall_at_k(caption_embs: np.ndarray, image_embs: np.ndarray, gold_image_of: np.ndarray, ks=DEFAULT_KS, config_digest: str = "") -> RetrievalReport:
    """Bidirectional cosine retrieval.

    speech-to-image: each caption ranks all images, hit iff its gold image is
    in the top k.  image-to-speech: each image ranks all captions, hit iff
    any of its captions is in the top k.  The mean row averages directions.
    """
    captions = _unit(caption_embs, "caption embeddings")
    images = _unit(image_embs, "image embeddings")
    gold = np.asarray(gold_image_of, dtype=np.int64)
    if gold.shape[0] != captions.shape[0]:
        raise ValidationError(f"gold map length {gold.shape[0]} != captions {captions.shape[0]}")
    if gold.min(initial=0) < 0 or (gold.size and gold.max() >= images.shape[0]):
        raise ValidationError("gold map references an image outside the candidate set")
    ks = tuple(sorted(ks))

    sims = captions @ images.T
    s2i = {k: _top_k_hits(sims, [{int(g)} for g in gold], k) for k in ks}

    captions_of: dict[int, set[int]] = {}
    for idx, g in enumerate(gold):
        captions_of.setdefault(int(g), set()).add(idx)
    image_ids = sorted(captions_of)
    sims_images = images[image_ids] @ captions.T
    gold_sets = [captions_of[i] for i in image_ids]
    i2s = {k: _top_k_hits(sims_images, gold_sets, k) for k in ks}

    return RetrievalReport.from_directions(ks, s2i, i2s, num_captions=captions.shape[0], num_images=images.shape[0], config_digest=config_digest)


def semantic_audio_retrieval(query_embs: np.ndarray, candidate_embs: np.ndarray, query_image_of: np.ndarray, candidate_image_of: np.ndarray, ks=DEFAULT_KS) -> dict[int, float]:
    """Recall@k where a hit means the retrieved candidate caption describes
    the same image as the query caption."""
    queries = _unit(query_embs, "query embeddings")
    candidates = _unit(candidate_embs, "candidate embeddings")
    q_img = np.asarray(query_image_of, dtype=np.int64)
    c_img = np.asarray(candidate_image_of, dtype=np.int64)
    missing = set(q_img.tolist()) - set(c_img.tolist())
    if missing:
        raise ValidationError(f"query image(s) {sorted(missing)[:3]} have no candidate caption")
    gold_sets = [set(np.nonzero(c_img == g)[0].tolist()) for g in q_img]
    sims = queries @ candidates.T
    return {k: _top_k_hits(sims, gold_sets, k) for k in sorted(ks)}


def average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values receive the mean of their rank positions."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    ranks[order] = np.arange(1, len(values) + 1)
    uniq, inverse, counts = np.unique(values, return_inverse=True, return_counts=True)
    sums = np.zeros(len(uniq))
    np.add.at(sums, inverse, ranks)
    return sums[inverse] / counts[inverse]


def spearman(xs, ys) -> float:
    """Spearman rank correlation with average-rank tie handling."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1 or len(xs) < 2:
        raise ValidationError(f"spearman: need two equal-length 1-D inputs of length >= 2, got {xs.shape} and {ys.shape}")
    rx = average_ranks(xs)
    ry = average_ranks(ys)
    sx, sy = rx.std(), ry.std()
    if sx == 0.0 or sy == 0.0:
        raise DomainError("spearman: zero rank variance, correlation undefined")
    return float(((rx - rx.mean()) * (ry - ry.mean())).mean() / (sx * sy))


def eval_simi(embedding_of: dict[str, np.ndarray], pairs, scale: float = 100.0) -> float:
    """Spearman correlation (x scale) between human pair scores and the
    cosine of the two utterance representations."""
    cosines = []
    scores = []
    for pair in pairs:
        for uid in (pair.utt_a, pair.utt_b):
            if uid not in embedding_of:
                raise ValidationError(f"eval_simi: no embedding for utterance {uid}")
        a = embedding_of[pair.utt_a]
        b = embedding_of[pair.utt_b]
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0 or nb == 0:
            raise ValidationError(f"eval_simi: zero-norm representation in pair ({pair.utt_a}, {pair.utt_b})")
        cosines.append(float(a @ b / (na * nb)))
        scores.append(pair.score)
    return spearman(cosines, scores) * scale


def boundary_f1(pred_starts, gold_starts, tolerance_frames: int = 1) -> tuple[float, float, float]:
    """Greedy one-to-one boundary matching within +-tolerance; returns
    (precision, recall, F1)."""
    pred = sorted(pred_starts)
    gold = sorted(gold_starts)
    i = j = matches = 0
    while i < len(pred) and j < len(gold):
        if abs(pred[i] - gold[j]) <= tolerance_frames:
            matches += 1
            i += 1
            j += 1
        elif pred[i] < gold[j] - tolerance_frames:
            i += 1
        else:
            j += 1
    precision = matches / len(pred) if pred else 0.0
    recall = matches / len(gold) if gold else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1
