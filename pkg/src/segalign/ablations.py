"""Ablation protocols: paired or swept runs sharing one seed and corpus.

Each protocol trains its variants with identical data and seed, evaluates
retrieval on the held-out split, and emits one standard report per variant
plus a comparison figure and a TSV summary.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .archive import Dataset, EmbeddingPool
from .config import TrainConfig
from .errors import ConfigError
from .evaluation import RetrievalReport, recall_at_k
from .report import emit_comparison_figure, emit_report
from .trainer import fit, model_from_checkpoint

PROTOCOLS = ("hard-mining", "reg-weight", "vq", "aux-mlm")


def protocol_variants(protocol: str, base: TrainConfig) -> dict[str, TrainConfig]:
    def with_(**kw) -> TrainConfig:
        d = base.to_dict()
        d.update(kw)
        return TrainConfig.from_dict(d)

    if protocol == "hard-mining":
        return {"with": with_(hard_mining=True), "without": with_(hard_mining=False)}
    if protocol == "reg-weight":
        return {f"lam_{lam}": with_(head="regularized", lam=lam) for lam in (0.0, 0.1, 0.5, 1.0)}
    if protocol == "vq":
        return {"no_vq": with_(head="direct"), "vq": with_(head="vq")}
    if protocol == "aux-mlm":
        return {"without": with_(aux_mlm=False), "with": with_(aux_mlm=True)}
    raise ConfigError(f"unknown ablation protocol {protocol!r} (choose from {', '.join(PROTOCOLS)})")


def evaluate_retrieval(checkpoint_path, test_ds: Dataset, normalize_images: bool, config_digest: str = "") -> RetrievalReport:
    model = model_from_checkpoint(checkpoint_path, test_ds)
    utts = [u for u in test_ds.utterances if u.image_id >= 0]
    embs = np.stack([model.joint_embedding(test_ds.utterance_frames(u)) for u in utts])
    gold = np.array([u.image_id for u in utts])
    pool = EmbeddingPool.from_images(test_ds, normalize=normalize_images)
    return recall_at_k(embs, pool.matrix, gold, ks=(1, 5, 10), config_digest=config_digest)


def run_protocol(protocol: str, train_data, test_data, base_config: TrainConfig, out_dir: str | Path, figures: bool = True) -> dict[str, RetrievalReport]:
    from .trainer import _as_dataset

    train_ds = _as_dataset(train_data)
    test_ds = _as_dataset(test_data)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reports: dict[str, RetrievalReport] = {}
    for name, config in protocol_variants(protocol, base_config).items():
        run_dir = out / name
        result = fit(train_ds, config, run_dir)
        report = evaluate_retrieval(result.checkpoint_path, test_ds, config.normalize_images, config.digest())
        emit_report(report, run_dir, name="retrieval", figures=figures)
        reports[name] = report

    summary = {name: report.to_dict() for name, report in reports.items()}
    (out / "summary.json").write_text(json.dumps({"protocol": protocol, "variants": summary}, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    lines = ["variant\t" + "\t".join(f"mean_r@{k}" for k in (1, 5, 10))]
    for name, report in reports.items():
        lines.append(name + "\t" + "\t".join(repr(report.mean[k]) for k in (1, 5, 10)))
    (out / "summary.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    if figures:
        emit_comparison_figure(reports, out / "comparison.png", metric_k=1)
    return reports
