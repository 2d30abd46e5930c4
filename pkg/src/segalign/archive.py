"""Bit-exact embedding-archive format for frozen features.

An archive is a directory of raw 32-bit little-endian float files plus JSON
sidecars; all structure lives in the JSON so every offset is computable
without scanning:

    manifest.json    counts and dimensions (version 1)
    images.f32       num_images x image_dim, row-major
    frames.f32       total_frames x frame_dim, row-major
    utterances.json  list of utterance records
    vocab.f32        optional, vocab_size x vocab_dim
    simi.json        optional, list of {utt_a, utt_b, score} pairs

Utterances reference their paired image by index; index -1 marks an
utterance with no paired image (used by similarity probe utterances).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError

MANIFEST_VERSION = 1


@dataclass
class Manifest:
    version: int
    frame_dim: int
    image_dim: int
    num_images: int
    num_utterances: int
    frame_rate_hz: int
    vocab_dim: int = 0
    vocab_size: int = 0

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "frame_dim": self.frame_dim,
            "image_dim": self.image_dim,
            "vocab_dim": self.vocab_dim,
            "num_images": self.num_images,
            "num_utterances": self.num_utterances,
            "vocab_size": self.vocab_size,
            "frame_rate_hz": self.frame_rate_hz,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Manifest":
        required = {"version", "frame_dim", "image_dim", "num_images", "num_utterances", "frame_rate_hz"}
        missing = required - d.keys()
        if missing:
            raise ValidationError(f"manifest missing fields: {sorted(missing)}")
        known = required | {"vocab_dim", "vocab_size"}
        unknown = d.keys() - known
        if unknown:
            raise ValidationError(f"manifest has unknown fields: {sorted(unknown)}")
        return cls(**{k: int(v) for k, v in d.items()})


@dataclass
class UtteranceRecord:
    id: str
    image_id: int
    offset_frames: int
    num_frames: int
    boundaries_gt: list[int] | None = None
    speaker: str | None = None

    def to_dict(self) -> dict:
        d = {
            "id": self.id,
            "image_id": self.image_id,
            "offset_frames": self.offset_frames,
            "num_frames": self.num_frames,
        }
        if self.boundaries_gt is not None:
            d["boundaries_gt"] = list(self.boundaries_gt)
        if self.speaker is not None:
            d["speaker"] = self.speaker
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UtteranceRecord":
        return cls(
            id=str(d["id"]),
            image_id=int(d["image_id"]),
            offset_frames=int(d["offset_frames"]),
            num_frames=int(d["num_frames"]),
            boundaries_gt=[int(b) for b in d["boundaries_gt"]] if "boundaries_gt" in d else None,
            speaker=str(d["speaker"]) if "speaker" in d else None,
        )


@dataclass
class SimiPair:
    utt_a: str
    utt_b: str
    score: float

    def to_dict(self) -> dict:
        return {"utt_a": self.utt_a, "utt_b": self.utt_b, "score": self.score}


@dataclass
class Dataset:
    manifest: Manifest
    images: np.ndarray
    frames: np.ndarray
    utterances: list[UtteranceRecord]
    vocab: np.ndarray | None = None
    simi: list[SimiPair] | None = None

    def utterance_frames(self, rec: UtteranceRecord) -> np.ndarray:
        return self.frames[rec.offset_frames : rec.offset_frames + rec.num_frames]

    def by_id(self) -> dict[str, UtteranceRecord]:
        return {u.id: u for u in self.utterances}


@dataclass
class EmbeddingPool:
    """Frozen embedding table with optional cluster labels for hard mining."""

    matrix: np.ndarray
    cluster_of: np.ndarray | None = None
    normalized: bool = False

    @classmethod
    def from_images(cls, dataset: Dataset, normalize: bool = True) -> "EmbeddingPool":
        mat = dataset.images.astype(np.float32, copy=True)
        if normalize:
            norms = np.linalg.norm(mat, axis=1, keepdims=True)
            if np.any(norms == 0):
                raise ValidationError("cannot normalize image pool: zero-norm row present")
            mat = mat / norms
        return cls(matrix=mat, normalized=normalize)

    def __len__(self) -> int:
        return self.matrix.shape[0]


def _write_f32(path: Path, arr: np.ndarray) -> None:
    path.write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_f32(path: Path, rows: int, cols: int, name: str) -> np.ndarray:
    data = path.read_bytes()
    expected = rows * cols * 4
    if len(data) != expected:
        raise ValidationError(f"{name}: expected {expected} bytes ({rows}x{cols} float32), found {len(data)}")
    return np.frombuffer(data, dtype="<f4").reshape(rows, cols).copy()


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def write_archive(dataset: Dataset, directory: str | Path) -> Path:
    """Write a validated dataset; read_archive(write_archive(d)) is bit-exact."""
    issues = validate_dataset(dataset)
    if issues:
        raise ValidationError("; ".join(issues))
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    _dump_json(out / "manifest.json", dataset.manifest.to_dict())
    _write_f32(out / "images.f32", dataset.images)
    _write_f32(out / "frames.f32", dataset.frames)
    _dump_json(out / "utterances.json", [u.to_dict() for u in dataset.utterances])
    if dataset.vocab is not None:
        _write_f32(out / "vocab.f32", dataset.vocab)
    if dataset.simi is not None:
        _dump_json(out / "simi.json", [p.to_dict() for p in dataset.simi])
    return out


def read_archive(directory: str | Path) -> Dataset:
    """Load and validate an archive directory."""
    root = Path(directory)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise ValidationError(f"no manifest.json in {root}")
    manifest = Manifest.from_dict(json.loads(manifest_path.read_text(encoding="utf-8")))
    if manifest.version != MANIFEST_VERSION:
        raise ValidationError(f"manifest version {manifest.version} unsupported (expected {MANIFEST_VERSION})")

    images = _read_f32(root / "images.f32", manifest.num_images, manifest.image_dim, "images.f32")

    frames_path = root / "frames.f32"
    raw = frames_path.read_bytes()
    row_bytes = manifest.frame_dim * 4
    if len(raw) % row_bytes != 0:
        raise ValidationError(f"frames.f32: size {len(raw)} not divisible by frame row ({row_bytes} bytes)")
    total_frames = len(raw) // row_bytes
    frames = np.frombuffer(raw, dtype="<f4").reshape(total_frames, manifest.frame_dim).copy()

    utterances = [UtteranceRecord.from_dict(d) for d in json.loads((root / "utterances.json").read_text(encoding="utf-8"))]

    vocab = None
    if (root / "vocab.f32").exists():
        vocab = _read_f32(root / "vocab.f32", manifest.vocab_size, manifest.vocab_dim, "vocab.f32")

    simi = None
    if (root / "simi.json").exists():
        simi = [
            SimiPair(utt_a=str(d["utt_a"]), utt_b=str(d["utt_b"]), score=float(d["score"]))
            for d in json.loads((root / "simi.json").read_text(encoding="utf-8"))
        ]

    dataset = Dataset(manifest=manifest, images=images, frames=frames, utterances=utterances, vocab=vocab, simi=simi)
    issues = validate_dataset(dataset)
    if issues:
        raise ValidationError("; ".join(issues))
    return dataset


def validate_dataset(dataset: Dataset) -> list[str]:
    """Hard validation; returns a list of error strings (empty when valid)."""
    m = dataset.manifest
    errors = []
    if m.version != MANIFEST_VERSION:
        errors.append(f"version: {m.version} != {MANIFEST_VERSION}")
    for dim_name, dim, present in (
        ("frame_dim", m.frame_dim, True),
        ("image_dim", m.image_dim, True),
        ("vocab_dim", m.vocab_dim, dataset.vocab is not None),
    ):
        if present and dim <= 0:
            errors.append(f"{dim_name}: must be positive, got {dim}")
    if m.frame_rate_hz <= 0:
        errors.append(f"frame_rate_hz: must be positive, got {m.frame_rate_hz}")
    if dataset.images.shape != (m.num_images, m.image_dim):
        errors.append(f"num_images/image_dim: images array is {dataset.images.shape}, manifest says ({m.num_images}, {m.image_dim})")
    if dataset.frames.ndim != 2 or dataset.frames.shape[1] != m.frame_dim:
        errors.append(f"frame_dim: frames array is {dataset.frames.shape}, manifest says frame_dim={m.frame_dim}")
    if len(dataset.utterances) != m.num_utterances:
        errors.append(f"num_utterances: {len(dataset.utterances)} records, manifest says {m.num_utterances}")
    if dataset.vocab is not None:
        if m.vocab_size <= 0:
            errors.append(f"vocab_size: must be positive when vocab present, got {m.vocab_size}")
        if dataset.vocab.shape != (m.vocab_size, m.vocab_dim):
            errors.append(f"vocab_size/vocab_dim: vocab array is {dataset.vocab.shape}, manifest says ({m.vocab_size}, {m.vocab_dim})")

    total_frames = dataset.frames.shape[0]
    seen_ids = set()
    for u in dataset.utterances:
        if u.id in seen_ids:
            errors.append(f"utterance {u.id}: duplicate id")
        seen_ids.add(u.id)
        if u.num_frames <= 0:
            errors.append(f"utterance {u.id}: num_frames must be positive")
        if u.offset_frames < 0 or u.offset_frames + u.num_frames > total_frames:
            errors.append(f"utterance {u.id}: frame range [{u.offset_frames}, {u.offset_frames + u.num_frames}) outside total {total_frames}")
        if not (u.image_id == -1 or 0 <= u.image_id < m.num_images):
            errors.append(f"utterance {u.id}: image_id {u.image_id} out of range")
        if u.boundaries_gt is not None:
            b = u.boundaries_gt
            if not b or b[0] != 0:
                errors.append(f"utterance {u.id}: boundaries_gt must start at 0")
            if any(b[i] >= b[i + 1] for i in range(len(b) - 1)):
                errors.append(f"utterance {u.id}: boundaries_gt must be strictly increasing")
            if b and b[-1] >= u.num_frames:
                errors.append(f"utterance {u.id}: boundary {b[-1]} >= num_frames {u.num_frames}")

    if dataset.simi is not None:
        for p in dataset.simi:
            for key in (p.utt_a, p.utt_b):
                if key not in seen_ids:
                    errors.append(f"simi pair references unknown utterance {key}")
            if not (0.0 <= p.score <= 10.0):
                errors.append(f"simi pair ({p.utt_a}, {p.utt_b}): score {p.score} outside [0, 10]")
    return errors


def archive_warnings(dataset: Dataset) -> list[str]:
    """Soft findings that do not invalidate an archive."""
    warnings = []
    referenced = {u.image_id for u in dataset.utterances if u.image_id >= 0}
    orphans = sorted(set(range(dataset.manifest.num_images)) - referenced)
    if orphans:
        warnings.append(f"{len(orphans)} image(s) never referenced by any utterance (first: {orphans[0]})")
    for u in dataset.utterances:
        if u.num_frames < 2:
            warnings.append(f"utterance {u.id}: fewer than 2 frames, unusable for next-frame training")
    return warnings
