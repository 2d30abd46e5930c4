"""Run frozen pretrained models over media files and write an archive.

The output directory follows the segalign archive layout exactly:
manifest.json, frames.f32 (per-utterance hidden states of one chosen
transformer layer, concatenated), images.f32 (pooled image-encoder outputs),
utterances.json, and optionally vocab.f32 (a text model's input embedding
table).  Embeddings are written unnormalized; normalization policy belongs
to the consumer's loader.

Only the archive schema couples this package to the consumer; nothing is
imported from it.
"""

from __future__ import annotations

import json
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from transformers import AutoModel

MANIFEST_VERSION = 1

# channel statistics used by CLIP-style vision preprocessing
_IMAGE_MEAN = np.array([0.48145466, 0.4578275, 0.40821073], dtype=np.float32)
_IMAGE_STD = np.array([0.26862954, 0.26130258, 0.27577711], dtype=np.float32)


class ExportError(Exception):
    pass


@dataclass
class ExportJob:
    audio_paths: list[Path]
    image_paths: list[Path]
    pairs: dict[str, int]  # utterance id (audio stem) -> image index
    speech_model: str
    image_model: str
    layer: int = 11
    text_model: str | None = None
    out_dir: Path = Path("export")

    def validate(self) -> None:
        if not self.audio_paths:
            raise ExportError("no audio files listed")
        if not self.image_paths:
            raise ExportError("no image files listed")
        ids = [p.stem for p in self.audio_paths]
        if len(set(ids)) != len(ids):
            raise ExportError("audio file stems must be unique (they become utterance ids)")
        for uid in ids:
            if uid not in self.pairs:
                raise ExportError(f"pairing table has no image for utterance {uid!r}")
        for uid, img in self.pairs.items():
            if not (0 <= img < len(self.image_paths)):
                raise ExportError(f"pairing table maps {uid!r} to image {img}, outside 0..{len(self.image_paths) - 1}")
        if self.layer < 0:
            raise ExportError(f"layer index must be >= 0, got {self.layer}")


@dataclass
class ExportReport:
    out_dir: Path
    num_utterances: int
    num_images: int
    frame_dim: int
    image_dim: int
    frame_rate_hz: int
    vocab_shape: tuple[int, int] | None
    failures: list[str] = field(default_factory=list)


def _read_wav(path: Path) -> tuple[np.ndarray, int]:
    with wave.open(str(path), "rb") as fh:
        if fh.getsampwidth() != 2:
            raise ExportError(f"{path}: only 16-bit PCM wav is supported")
        rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
        data = np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0
        channels = fh.getnchannels()
        if channels > 1:
            data = data.reshape(-1, channels).mean(axis=1)
    return data, rate


def _load_image(path: Path, size: int) -> np.ndarray:
    with Image.open(path) as img:
        rgb = img.convert("RGB").resize((size, size), Image.BICUBIC)
    arr = np.asarray(rgb, dtype=np.float32) / 255.0
    arr = (arr - _IMAGE_MEAN) / _IMAGE_STD
    return arr.transpose(2, 0, 1)


def _frame_rate(speech_model, sample_rate: int) -> int:
    stride = 1
    for s in getattr(speech_model.config, "conv_stride", []):
        stride *= int(s)
    return max(1, round(sample_rate / stride))


def _write_f32(path: Path, arr: np.ndarray) -> None:
    path.write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def run_export(job: ExportJob) -> ExportReport:
    """Extract embeddings for every listed file and write the archive."""
    job.validate()
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)

    speech = AutoModel.from_pretrained(job.speech_model)
    speech.eval()
    vision = AutoModel.from_pretrained(job.image_model)
    vision.eval()
    vision_cfg = getattr(vision.config, "vision_config", vision.config)
    image_size = int(vision_cfg.image_size)

    failures: list[str] = []

    frame_chunks: list[np.ndarray] = []
    utterances = []
    offset = 0
    sample_rate = None
    frame_dim = None
    with torch.no_grad():
        for path in job.audio_paths:
            try:
                waveform, rate = _read_wav(path)
            except (OSError, wave.Error, ExportError) as err:
                failures.append(f"{path}: {err}")
                continue
            if sample_rate is None:
                sample_rate = rate
            elif rate != sample_rate:
                failures.append(f"{path}: sample rate {rate} != {sample_rate} of earlier files")
                continue
            out = speech(torch.from_numpy(waveform)[None, :], output_hidden_states=True)
            hidden = out.hidden_states
            if job.layer >= len(hidden):
                raise ExportError(f"layer {job.layer} invalid: speech model exposes hidden states 0..{len(hidden) - 1}")
            feats = hidden[job.layer][0].numpy().astype(np.float32)
            if frame_dim is None:
                frame_dim = feats.shape[1]
            frame_chunks.append(feats)
            utterances.append(
                {
                    "id": path.stem,
                    "image_id": job.pairs[path.stem],
                    "offset_frames": offset,
                    "num_frames": feats.shape[0],
                }
            )
            offset += feats.shape[0]

        image_rows = []
        image_dim = None
        for path in job.image_paths:
            try:
                pixels = _load_image(path, image_size)
            except (OSError, ValueError) as err:
                failures.append(f"{path}: {err}")
                continue
            out = vision(torch.from_numpy(pixels)[None, :])
            pooled = out.pooler_output if getattr(out, "pooler_output", None) is not None else out.last_hidden_state[:, 0]
            row = pooled[0].numpy().astype(np.float32)
            if image_dim is None:
                image_dim = row.shape[0]
            image_rows.append(row)

        vocab = None
        if job.text_model:
            text = AutoModel.from_pretrained(job.text_model)
            text.eval()
            vocab = text.get_input_embeddings().weight.detach().numpy().astype(np.float32)

    if failures:
        report = ExportReport(job.out_dir, len(utterances), len(image_rows), frame_dim or 0, image_dim or 0, 0, None, failures)
        return report

    frames = np.concatenate(frame_chunks, axis=0)
    images = np.stack(image_rows)
    frame_rate = _frame_rate(speech, sample_rate)

    out = Path(job.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "version": MANIFEST_VERSION,
        "frame_dim": int(frames.shape[1]),
        "image_dim": int(images.shape[1]),
        "vocab_dim": int(vocab.shape[1]) if vocab is not None else 0,
        "num_images": int(images.shape[0]),
        "num_utterances": len(utterances),
        "vocab_size": int(vocab.shape[0]) if vocab is not None else 0,
        "frame_rate_hz": frame_rate,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    _write_f32(out / "frames.f32", frames)
    _write_f32(out / "images.f32", images)
    (out / "utterances.json").write_text(json.dumps(utterances, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    if vocab is not None:
        _write_f32(out / "vocab.f32", vocab)

    return ExportReport(
        out_dir=out,
        num_utterances=len(utterances),
        num_images=int(images.shape[0]),
        frame_dim=int(frames.shape[1]),
        image_dim=int(images.shape[1]),
        frame_rate_hz=frame_rate,
        vocab_shape=tuple(vocab.shape) if vocab is not None else None,
        failures=[],
    )
