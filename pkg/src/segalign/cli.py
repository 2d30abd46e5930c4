"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 validation/config error, 3 runtime
failure.  Every run logs its resolved configuration; artifact-producing runs
also write it as JSON next to their outputs.  SEGALIGN_LOG overrides
--log-level when set.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .archive import EmbeddingPool, archive_warnings, read_archive
from .config import TrainConfig
from .encoder import detect_boundaries, encode_frames
from .errors import ConfigError, SegalignError, ValidationError
from .evaluation import eval_simi, recall_at_k
from .report import emit_report, emit_simi_report, emit_training_curves
from .synthetic import GenConfig, gen_synthetic
from .trainer import TrainingAborted, fit, load_checkpoint, model_from_checkpoint
from .twin import fit_audio_only, twin_model_from_checkpoint

log = logging.getLogger("segalign")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """argparse variant whose usage errors exit 1 instead of 2."""

    def error(self, message):
        raise UsageError(message)


def _parse_set(pairs: list[str]) -> dict:
    overrides = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        try:
            overrides[key] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[key] = raw
    return overrides


def _resolve_config(args) -> TrainConfig:
    base = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        text = path.read_text(encoding="utf-8")
        base = json.loads(text) if text.strip() else {}
        if not isinstance(base, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
    overrides = _parse_set(getattr(args, "set", None))
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    base.update(overrides)
    config = TrainConfig.from_dict(base)
    log.info("resolved config: %s", json.dumps(config.to_dict(), sort_keys=True))
    return config


def build_parser() -> Parser:
    parser = Parser(prog="segalign", description="Segmental cross-modal alignment toolkit")
    common = Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="global seed (overrides config)")
    common.add_argument("--log-level", default="info", choices=["debug", "info", "warning", "error"])

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", parents=[common], help="generate a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--images", type=int, default=100)
    p.add_argument("--val-images", type=int, default=0)
    p.add_argument("--test-images", type=int, default=0)
    p.add_argument("--captions", type=int, default=5)
    p.add_argument("--concepts", type=int, default=50)
    p.add_argument("--concept-dim", type=int, default=16)
    p.add_argument("--frame-dim", type=int, default=64)
    p.add_argument("--image-dim", type=int, default=64)
    p.add_argument("--concepts-per-caption", type=int, nargs=2, default=[3, 8], metavar=("LO", "HI"))
    p.add_argument("--frames-per-concept", type=int, nargs=2, default=[4, 9], metavar=("LO", "HI"))
    p.add_argument("--noise-sigma", type=float, default=0.05)
    p.add_argument("--simi-pairs", type=int, default=0)
    p.add_argument("--vocab-size", type=int, default=128)
    p.add_argument("--vocab-dim", type=int, default=64)

    p = sub.add_parser("train", parents=[common], help="train the alignment model")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--val", default=None)
    p.add_argument("--resume", default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("train-audio-only", parents=[common], help="train the twin-branch audio-only model")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--val", default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("eval-retrieval", parents=[common], help="bidirectional retrieval recall")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ks", default="1,5,10")
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("eval-simi", parents=[common], help="semantic similarity (Spearman x100)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--test-data", default=None)
    p.add_argument("--dev-data", default=None)
    p.add_argument("--extraction-point", default="segment_mean", choices=["frame_mean", "segment_mean", "sentence"])
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("segment", parents=[common], help="emit segment starts per utterance")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--theta", type=float, default=0.5)
    p.add_argument("--max-segments", type=int, default=64)

    p = sub.add_parser("embed", parents=[common], help="emit utterance embeddings")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--branch", default=None, choices=["left", "right", "concat"])

    p = sub.add_parser("validate", parents=[common], help="validate an archive directory")
    p.add_argument("--data", required=True)

    p = sub.add_parser("ablate", parents=[common], help="run an ablation protocol")
    p.add_argument("--protocol", required=True, choices=["hard-mining", "reg-weight", "vq", "aux-mlm", "all"])
    p.add_argument("--data", required=True)
    p.add_argument("--test-data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--no-figures", action="store_true")
    return parser


def _cmd_gen_synth(args) -> int:
    seed = args.seed if args.seed is not None else 0
    gen = GenConfig(
        num_concepts=args.concepts,
        concept_dim=args.concept_dim,
        frame_dim=args.frame_dim,
        image_dim=args.image_dim,
        num_images=args.images,
        val_images=args.val_images,
        test_images=args.test_images,
        captions_per_image=args.captions,
        concepts_per_caption=tuple(args.concepts_per_caption),
        frames_per_concept=tuple(args.frames_per_concept),
        noise_sigma=args.noise_sigma,
        simi_pairs=args.simi_pairs,
        vocab_size=args.vocab_size,
        vocab_dim=args.vocab_dim,
    )
    gen.validate()
    log.info("resolved generator config: %s", json.dumps(gen.to_dict(), sort_keys=True))
    paths = gen_synthetic(gen, seed=seed, out_dir=args.out)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(json.dumps({"generator": gen.to_dict(), "seed": seed}, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    for name, path in paths.items():
        print(f"{name}: {path}")
    return 0


def _cmd_train(args) -> int:
    config = _resolve_config(args)
    result = fit(args.data, config, args.out, val_data=args.val, resume_from=args.resume)
    if not args.no_figures:
        emit_training_curves(result.metrics_path, Path(args.out) / "training_curves.png")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"metrics: {result.metrics_path}")
    return 0


def _cmd_train_audio_only(args) -> int:
    config = _resolve_config(args)
    result = fit_audio_only(args.data, config, args.out, val_data=args.val)
    if not args.no_figures:
        emit_training_curves(result.metrics_path, Path(args.out) / "training_curves.png")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"metrics: {result.metrics_path}")
    return 0


def _cmd_eval_retrieval(args) -> int:
    ks = tuple(int(k) for k in args.ks.split(","))
    dataset = read_archive(args.data)
    model = model_from_checkpoint(args.checkpoint, dataset)
    utts = [u for u in dataset.utterances if u.image_id >= 0]
    if not utts:
        raise ValidationError("archive has no image-paired utterances to evaluate")
    embs = np.stack([model.joint_embedding(dataset.utterance_frames(u)) for u in utts])
    gold = np.array([u.image_id for u in utts])
    pool = EmbeddingPool.from_images(dataset, normalize=model.config.normalize_images)
    report = recall_at_k(embs, pool.matrix, gold, ks=ks, config_digest=model.config.digest())
    files = emit_report(report, args.out, figures=not args.no_figures)
    (Path(args.out) / "resolved_config.json").write_text(json.dumps(model.config.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    print(files["txt"].read_text(), end="")
    return 0


def _cmd_eval_simi(args) -> int:
    if not args.test_data and not args.dev_data:
        raise UsageError("eval-simi needs --test-data and/or --dev-data")
    values: dict[str, dict[str, float | None]] = {}
    model = None
    for split, data in (("dev", args.dev_data), ("test", args.test_data)):
        if data is None:
            continue
        dataset = read_archive(data)
        if dataset.simi is None:
            raise ValidationError(f"{data}: archive has no simi.json")
        if model is None:
            model = model_from_checkpoint(args.checkpoint, dataset)
        needed = {uid for pair in dataset.simi for uid in (pair.utt_a, pair.utt_b)}
        by_id = dataset.by_id()
        embeddings = {}
        for uid in sorted(needed):
            if uid not in by_id:
                raise ValidationError(f"simi pair references unknown utterance {uid}")
            embeddings[uid] = model.representation(dataset.utterance_frames(by_id[uid]), args.extraction_point)
        rho = eval_simi(embeddings, dataset.simi)
        values[split] = {"synthetic": rho, "natural": None}
        print(f"{split} synthetic rho x100: {rho:.2f}")
    files = emit_simi_report(values, args.out, figures=not args.no_figures)
    (Path(args.out) / "resolved_config.json").write_text(json.dumps({"extraction_point": args.extraction_point, "checkpoint": str(args.checkpoint)}, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return 0


def _cmd_segment(args) -> int:
    dataset = read_archive(args.data)
    model = model_from_checkpoint(args.checkpoint, dataset) if args.checkpoint else None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        for utt in dataset.utterances:
            frames = dataset.utterance_frames(utt)
            if model is not None:
                from . import autodiff as ad

                with ad.no_grad():
                    values = encode_frames(frames, model.encoder).numpy()
            else:
                values = frames
            starts = detect_boundaries(values, args.theta, args.max_segments)
            fh.write(json.dumps({"id": utt.id, "starts": starts}) + "\n")
    print(f"segments: {out}")
    return 0


def _cmd_embed(args) -> int:
    dataset = read_archive(args.data)
    meta, _ = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if meta.get("mode") == "twin":
        model = twin_model_from_checkpoint(args.checkpoint, dataset)
        branch = args.branch or "right"
        embed = lambda frames: model.extract_features(frames, branch)
    else:
        if args.branch is not None:
            raise ValidationError("--branch applies only to twin-branch checkpoints")
        model = model_from_checkpoint(args.checkpoint, dataset)
        embed = model.joint_embedding
    with open(out, "w", encoding="utf-8") as fh:
        for utt in dataset.utterances:
            vec = embed(dataset.utterance_frames(utt))
            fh.write(json.dumps({"id": utt.id, "embedding": [float(x) for x in vec]}) + "\n")
    print(f"embeddings: {out}")
    return 0


def _cmd_validate(args) -> int:
    dataset = read_archive(args.data)  # raises ValidationError on structural problems
    warnings = archive_warnings(dataset)
    m = dataset.manifest
    print(f"valid archive: {m.num_images} images, {m.num_utterances} utterances, frame_dim {m.frame_dim}, image_dim {m.image_dim}")
    if dataset.vocab is not None:
        print(f"vocabulary: {m.vocab_size} x {m.vocab_dim}")
    if dataset.simi is not None:
        print(f"similarity pairs: {len(dataset.simi)}")
    for w in warnings:
        print(f"warning: {w}")
    print(f"warnings: {len(warnings)}")
    return 0


def _cmd_ablate(args) -> int:
    from .ablations import PROTOCOLS, run_protocol

    config = _resolve_config(args)
    protocols = list(PROTOCOLS) if args.protocol == "all" else [args.protocol]
    for protocol in protocols:
        out = Path(args.out) / protocol.replace("-", "_") if len(protocols) > 1 else Path(args.out)
        reports = run_protocol(protocol, args.data, args.test_data, config, out, figures=not args.no_figures)
        for name, report in reports.items():
            print(f"{protocol}/{name}: mean R@1 {100 * report.mean[1]:.2f}")
    return 0


_COMMANDS = {
    "gen-synth": _cmd_gen_synth,
    "train": _cmd_train,
    "train-audio-only": _cmd_train_audio_only,
    "eval-retrieval": _cmd_eval_retrieval,
    "eval-simi": _cmd_eval_simi,
    "segment": _cmd_segment,
    "embed": _cmd_embed,
    "validate": _cmd_validate,
    "ablate": _cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        level = os.environ.get("SEGALIGN_LOG", getattr(args, "log_level", "info"))
        logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO), format="%(levelname)s %(name)s: %(message)s")
        return _COMMANDS[args.command](args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    except (ConfigError, ValidationError) as err:
        print(f"validation error: {err}", file=sys.stderr)
        return 2
    except TrainingAborted as err:
        print(f"training aborted: {err}", file=sys.stderr)
        return 3
    except SegalignError as err:
        print(f"error: {err}", file=sys.stderr)
        return 3
    except OSError as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
