"""Synthetic corpus generator with known ground truth.

Concepts are latent unit vectors.  An image embedding is the L2-normalized
fixed random linear map of its concept-set indicator (the map factors
through the concept latents via a column-orthonormal projection, so image
cosines reproduce latent cosines).  A caption is the concatenation of
per-concept frame templates with duration jitter and additive Gaussian
noise; a ground-truth boundary is recorded at every concept onset.
Similarity pairs score 10 * max(0, cos(latent_a, latent_b)) and reference
dedicated single-concept utterances carrying image_id -1.

A single invocation writes `train/` plus optional `val/` and `test/` sibling
archives that share concept latents, frame templates, and the vocabulary, so
models trained on one split transfer to the others.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng as rng_mod
from .archive import Dataset, Manifest, SimiPair, UtteranceRecord, write_archive
from .errors import ConfigError


@dataclass
class GenConfig:
    num_concepts: int = 50
    concept_dim: int = 16
    frame_dim: int = 64
    image_dim: int = 64
    num_images: int = 100
    val_images: int = 0
    test_images: int = 0
    captions_per_image: int = 5
    concepts_per_caption: tuple[int, int] = (3, 8)
    frames_per_concept: tuple[int, int] = (4, 9)
    noise_sigma: float = 0.05
    simi_pairs: int = 0
    vocab_size: int = 128
    vocab_dim: int = 64
    frame_rate_hz: int = 50

    def validate(self) -> None:
        for name, rng_pair in (("concepts_per_caption", self.concepts_per_caption), ("frames_per_concept", self.frames_per_concept)):
            lo, hi = rng_pair
            if lo < 1 or hi < lo:
                raise ConfigError(f"{name}: empty or invalid range [{lo}, {hi}]")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma: must be >= 0, got {self.noise_sigma}")
        if self.concepts_per_caption[1] > self.num_concepts:
            raise ConfigError(f"concepts_per_caption upper bound {self.concepts_per_caption[1]} exceeds num_concepts {self.num_concepts}")
        for name, v in (("num_concepts", self.num_concepts), ("concept_dim", self.concept_dim), ("frame_dim", self.frame_dim), ("image_dim", self.image_dim), ("num_images", self.num_images), ("captions_per_image", self.captions_per_image), ("frame_rate_hz", self.frame_rate_hz)):
            if v <= 0:
                raise ConfigError(f"{name}: must be positive, got {v}")
        for name, v in (("val_images", self.val_images), ("test_images", self.test_images), ("simi_pairs", self.simi_pairs), ("vocab_size", self.vocab_size)):
            if v < 0:
                raise ConfigError(f"{name}: must be >= 0, got {v}")
        if self.simi_pairs > self.num_concepts * (self.num_concepts - 1) // 2:
            raise ConfigError(f"simi_pairs {self.simi_pairs} exceeds distinct concept pairs")

    def to_dict(self) -> dict:
        return {
            "num_concepts": self.num_concepts,
            "concept_dim": self.concept_dim,
            "frame_dim": self.frame_dim,
            "image_dim": self.image_dim,
            "num_images": self.num_images,
            "val_images": self.val_images,
            "test_images": self.test_images,
            "captions_per_image": self.captions_per_image,
            "concepts_per_caption": list(self.concepts_per_caption),
            "frames_per_concept": list(self.frames_per_concept),
            "noise_sigma": self.noise_sigma,
            "simi_pairs": self.simi_pairs,
            "vocab_size": self.vocab_size,
            "vocab_dim": self.vocab_dim,
            "frame_rate_hz": self.frame_rate_hz,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        known = set(cls().to_dict())
        unknown = d.keys() - known
        if unknown:
            raise ConfigError(f"unknown generator config keys: {sorted(unknown)}")
        kwargs = dict(d)
        for key in ("concepts_per_caption", "frames_per_concept"):
            if key in kwargs:
                lo, hi = kwargs[key]
                kwargs[key] = (int(lo), int(hi))
        return cls(**kwargs)


def _unit_rows(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    mat = rng.standard_normal((n, dim))
    return mat / np.linalg.norm(mat, axis=1, keepdims=True)


def _near_orthogonal_rows(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    """Unit rows, exactly orthogonal whenever n <= dim."""
    if n <= dim:
        q, _ = np.linalg.qr(rng.standard_normal((dim, n)))
        return q.T.copy()
    return _unit_rows(rng, n, dim)


def _orthonormal_columns(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    if cols <= rows:
        q, _ = np.linalg.qr(rng.standard_normal((rows, cols)))
        return q
    return rng.standard_normal((rows, cols)) / np.sqrt(cols)


@dataclass
class _Latents:
    concept_latents: np.ndarray  # num_concepts x concept_dim, unit rows
    templates: np.ndarray  # num_concepts x frame_dim, unit rows
    image_proj: np.ndarray  # image_dim x concept_dim, orthonormal columns
    vocab: np.ndarray | None


def _split_dataset(config: GenConfig, latents: _Latents, n_images: int, prefix: str, structure: np.random.Generator, noise: np.random.Generator, simi_plan: list[tuple[int, int]] | None = None) -> Dataset:
    lo_c, hi_c = config.concepts_per_caption
    lo_f, hi_f = config.frames_per_concept

    images = np.empty((n_images, config.image_dim), dtype=np.float32)
    utterances: list[UtteranceRecord] = []
    frame_chunks: list[np.ndarray] = []
    offset = 0

    for img in range(n_images):
        set_size = int(structure.integers(lo_c, hi_c + 1))
        concepts = structure.choice(config.num_concepts, size=set_size, replace=False)
        latent_sum = latents.concept_latents[concepts].sum(axis=0)
        vec = latents.image_proj @ latent_sum
        images[img] = (vec / np.linalg.norm(vec)).astype(np.float32)
        for cap in range(config.captions_per_image):
            order = structure.permutation(concepts)
            boundaries = []
            rows = []
            pos = 0
            for c in order:
                n_frames = int(structure.integers(lo_f, hi_f + 1))
                boundaries.append(pos)
                rows.append(latents.templates[c] + config.noise_sigma * noise.standard_normal((n_frames, config.frame_dim)))
                pos += n_frames
            chunk = np.concatenate(rows, axis=0).astype(np.float32)
            frame_chunks.append(chunk)
            utterances.append(
                UtteranceRecord(
                    id=f"{prefix}_u{img:05d}_{cap}",
                    image_id=img,
                    offset_frames=offset,
                    num_frames=pos,
                    boundaries_gt=boundaries,
                )
            )
            offset += pos

    simi = None
    if simi_plan is not None:
        simi = []
        rendered: dict[int, str] = {}
        for c1, c2 in simi_plan:
            for c in (c1, c2):
                if c not in rendered:
                    uid = f"simi_c{c:04d}"
                    n_frames = int(structure.integers(lo_f, hi_f + 1))
                    chunk = (latents.templates[c] + config.noise_sigma * noise.standard_normal((n_frames, config.frame_dim))).astype(np.float32)
                    frame_chunks.append(chunk)
                    utterances.append(UtteranceRecord(id=uid, image_id=-1, offset_frames=offset, num_frames=n_frames, boundaries_gt=[0]))
                    offset += n_frames
                    rendered[c] = uid
            score = 10.0 * max(0.0, float(latents.concept_latents[c1] @ latents.concept_latents[c2]))
            simi.append(SimiPair(utt_a=rendered[c1], utt_b=rendered[c2], score=score))

    frames = np.concatenate(frame_chunks, axis=0) if frame_chunks else np.zeros((0, config.frame_dim), dtype=np.float32)
    manifest = Manifest(
        version=1,
        frame_dim=config.frame_dim,
        image_dim=config.image_dim,
        num_images=n_images,
        num_utterances=len(utterances),
        frame_rate_hz=config.frame_rate_hz,
        vocab_dim=config.vocab_dim if latents.vocab is not None else 0,
        vocab_size=config.vocab_size if latents.vocab is not None else 0,
    )
    return Dataset(manifest=manifest, images=images, frames=frames, utterances=utterances, vocab=latents.vocab, simi=simi)


def gen_synthetic(config: GenConfig, seed: int, out_dir: str | Path) -> dict[str, Path]:
    """Generate train/val/test archives under `out_dir`; deterministic in `seed`."""
    config.validate()
    latent_rng = rng_mod.stream(seed, "synth.latents")
    structure = rng_mod.stream(seed, "synth.structure")
    noise = rng_mod.stream(seed, "synth.noise")
    simi_rng = rng_mod.stream(seed, "synth.simi")

    vocab = None
    if config.vocab_size > 0:
        vocab = _unit_rows(latent_rng, config.vocab_size, config.vocab_dim).astype(np.float32)
    latents = _Latents(
        concept_latents=_unit_rows(latent_rng, config.num_concepts, config.concept_dim),
        templates=_near_orthogonal_rows(latent_rng, config.num_concepts, config.frame_dim),
        image_proj=_orthonormal_columns(latent_rng, config.image_dim, config.concept_dim),
        vocab=vocab,
    )

    simi_plan = None
    if config.simi_pairs > 0:
        all_pairs = [(a, b) for a in range(config.num_concepts) for b in range(a + 1, config.num_concepts)]
        chosen = simi_rng.choice(len(all_pairs), size=config.simi_pairs, replace=False)
        simi_plan = [all_pairs[int(i)] for i in chosen]

    out = Path(out_dir)
    paths = {}
    splits: list[tuple[str, int, list | None]] = [("train", config.num_images, None)]
    if config.val_images > 0:
        splits.append(("val", config.val_images, None))
    if config.test_images > 0:
        splits.append(("test", config.test_images, simi_plan))
    else:
        # no test split: similarity probes attach to train
        splits[0] = ("train", config.num_images, simi_plan)
    for name, count, plan in splits:
        dataset = _split_dataset(config, latents, count, name, structure, noise, simi_plan=plan)
        paths[name] = write_archive(dataset, out / name)
    return paths
