"""CLI: export media through frozen models into a segalign archive."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .export import ExportError, ExportJob, run_export


def _read_list(path: str) -> list[Path]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [Path(line.strip()) for line in lines if line.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="segalign-export", description="Write frozen-model embeddings as a segalign archive")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("export", help="run the extraction models and write an archive")
    p.add_argument("--audio-list", required=True, help="text file with one wav path per line (stems become utterance ids)")
    p.add_argument("--image-list", required=True, help="text file with one image path per line (line number = image index)")
    p.add_argument("--pairs", required=True, help="JSON object mapping utterance id to image index")
    p.add_argument("--speech-model", required=True, help="path or identifier of the frame-feature extractor")
    p.add_argument("--layer", type=int, default=11, help="hidden-state level to export (default 11)")
    p.add_argument("--image-model", required=True, help="path or identifier of the image encoder")
    p.add_argument("--text-model", default=None, help="optional text model whose input embeddings become vocab.f32")
    p.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        job = ExportJob(
            audio_paths=_read_list(args.audio_list),
            image_paths=_read_list(args.image_list),
            pairs={str(k): int(v) for k, v in json.loads(Path(args.pairs).read_text(encoding="utf-8")).items()},
            speech_model=args.speech_model,
            image_model=args.image_model,
            layer=args.layer,
            text_model=args.text_model,
            out_dir=Path(args.out),
        )
        report = run_export(job)
    except ExportError as err:
        print(f"export error: {err}", file=sys.stderr)
        return 2
    except (OSError, json.JSONDecodeError) as err:
        print(f"input error: {err}", file=sys.stderr)
        return 2
    if report.failures:
        for failure in report.failures:
            print(f"failed: {failure}", file=sys.stderr)
        return 1
    print(f"archive: {report.out_dir}")
    print(f"utterances: {report.num_utterances}, images: {report.num_images}")
    print(f"frame_dim: {report.frame_dim}, image_dim: {report.image_dim}, frame_rate_hz: {report.frame_rate_hz}")
    if report.vocab_shape:
        print(f"vocab: {report.vocab_shape[0]} x {report.vocab_shape[1]}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
