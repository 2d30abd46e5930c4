"""Report emission: machine JSON, aligned text tables, TSV, and figures.

Every writer is byte-deterministic: JSON keys are sorted, floats use repr,
and figures are rendered on the Agg backend with scrubbed metadata so two
emissions of the same report are identical files.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .evaluation import RetrievalReport

_FIG_KW = dict(dpi=110, metadata={"Software": None})


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def emit_report(report: RetrievalReport, out_dir: str | Path, name: str = "retrieval", figures: bool = True) -> dict[str, Path]:
    """Write a retrieval report as JSON + text table + TSV (+ bar figure).

    The text table mirrors the Image / Speech / Mean x R@1/5/10 layout with
    nine numeric columns.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}

    files["json"] = out / f"{name}.json"
    _write_json(files["json"], report.to_dict())

    ks = report.ks
    header_groups = f"{'':<12}" + "".join(f"{label:^{8 * len(ks)}}" for label in ("Image", "Speech", "Mean"))
    header_ks = f"{'':<12}" + "".join(f"{f'R@{k}':>8}" for _ in range(3) for k in ks)
    row = f"{'recall':<12}"
    for direction in (report.speech_to_image, report.image_to_speech, report.mean):
        row += "".join(f"{100 * direction[k]:>8.2f}" for k in ks)
    text = "\n".join([header_groups, header_ks, row]) + "\n"
    files["txt"] = out / f"{name}.txt"
    files["txt"].write_text(text, encoding="utf-8")

    tsv_lines = ["direction\t" + "\t".join(f"r@{k}" for k in ks)]
    for label, direction in (("speech_to_image", report.speech_to_image), ("image_to_speech", report.image_to_speech), ("mean", report.mean)):
        tsv_lines.append(label + "\t" + "\t".join(repr(direction[k]) for k in ks))
    files["tsv"] = out / f"{name}.tsv"
    files["tsv"].write_text("\n".join(tsv_lines) + "\n", encoding="utf-8")

    if figures:
        files["png"] = out / f"{name}.png"
        _recall_figure(report, files["png"])
    return files


def _recall_figure(report: RetrievalReport, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    ks = list(report.ks)
    x = range(len(ks))
    width = 0.27
    for offset, (label, direction) in enumerate(
        (("speech->image", report.speech_to_image), ("image->speech", report.image_to_speech), ("mean", report.mean))
    ):
        ax.bar([i + (offset - 1) * width for i in x], [100 * direction[k] for k in ks], width=width, label=label)
    ax.set_xticks(list(x))
    ax.set_xticklabels([f"R@{k}" for k in ks])
    ax.set_ylabel("recall (%)")
    ax.set_ylim(0, 100)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_FIG_KW)
    plt.close(fig)


def emit_simi_report(values: dict[str, dict[str, float | None]], out_dir: str | Path, name: str = "simi", figures: bool = True) -> dict[str, Path]:
    """Write a semantic-similarity report.

    `values` maps split ("dev"/"test") to {"synthetic": rho_x100 or None,
    "natural": rho_x100 or None}; absent cells render as "--".
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}

    payload = {
        "report_version": 1,
        "kind": "semantic_similarity",
        "splits": {
            split: {kind: values.get(split, {}).get(kind) for kind in ("synthetic", "natural")}
            for split in ("dev", "test")
        },
    }
    files["json"] = out / f"{name}.json"
    _write_json(files["json"], payload)

    def cell(split, kind):
        v = payload["splits"][split][kind]
        return f"{v:>10.2f}" if v is not None else f"{'--':>10}"

    lines = [
        f"{'':<10}{'dev':^20}{'test':^20}",
        f"{'':<10}" + "".join(f"{h:>10}" for h in ("synth", "natural", "synth", "natural")),
        f"{'rho x100':<10}" + cell("dev", "synthetic") + cell("dev", "natural") + cell("test", "synthetic") + cell("test", "natural"),
    ]
    files["txt"] = out / f"{name}.txt"
    files["txt"].write_text("\n".join(lines) + "\n", encoding="utf-8")

    tsv = ["split\tsynthetic\tnatural"]
    for split in ("dev", "test"):
        row = payload["splits"][split]
        tsv.append("\t".join([split] + [repr(row[k]) if row[k] is not None else "" for k in ("synthetic", "natural")]))
    files["tsv"] = out / f"{name}.tsv"
    files["tsv"].write_text("\n".join(tsv) + "\n", encoding="utf-8")

    if figures:
        files["png"] = out / f"{name}.png"
        fig, ax = plt.subplots(figsize=(4.2, 3.0))
        labels, heights = [], []
        for split in ("dev", "test"):
            for kind in ("synthetic", "natural"):
                v = payload["splits"][split][kind]
                if v is not None:
                    labels.append(f"{split}\n{kind}")
                    heights.append(v)
        ax.bar(range(len(heights)), heights, color="tab:purple")
        ax.set_xticks(range(len(labels)))
        ax.set_xticklabels(labels, fontsize=8)
        ax.set_ylabel("Spearman rho x100")
        fig.tight_layout()
        fig.savefig(files["png"], **_FIG_KW)
        plt.close(fig)
    return files


def emit_training_curves(metrics_path: str | Path, out_path: str | Path) -> Path | None:
    """Loss curves from a step-metrics JSONL file."""
    metrics_path = Path(metrics_path)
    if not metrics_path.exists():
        return None
    steps: list[int] = []
    series: dict[str, list[tuple[int, float]]] = {}
    for line in metrics_path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        steps.append(rec["step"])
        for key in ("loss_nfc", "loss_ret", "loss_reg", "loss_aux"):
            if rec.get(key) is not None:
                series.setdefault(key, []).append((rec["step"], rec[key]))
    if not steps:
        return None
    fig, ax = plt.subplots(figsize=(5.6, 3.2))
    for key, points in sorted(series.items()):
        xs, ys = zip(*points)
        ax.plot(xs, ys, label=key.removeprefix("loss_"), linewidth=0.9)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, **_FIG_KW)
    plt.close(fig)
    return out_path


def emit_comparison_figure(rows: dict[str, RetrievalReport], out_path: str | Path, metric_k: int = 1) -> Path:
    """Bar chart comparing the mean R@k of several runs (ablation views)."""
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    labels = list(rows)
    heights = [100 * rows[label].mean[metric_k] for label in labels]
    ax.bar(range(len(labels)), heights, color="tab:blue")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, fontsize=8, rotation=20, ha="right")
    ax.set_ylabel(f"mean R@{metric_k} (%)")
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, **_FIG_KW)
    plt.close(fig)
    return out_path
