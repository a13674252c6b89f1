"""Rendering: CSV summaries and matplotlib figures written next to them.

All plots are static files (PNG); there is no interactive surface. The
``summarize_run`` entry point backs the ``report`` CLI command: it reads a
run directory (manifest, metrics stream, ASR report) and emits a delimited
summary plus the figures.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

plt.rcParams.update({"figure.figsize": (6.0, 3.8), "figure.dpi": 120, "axes.grid": True})


def write_csv(path: str | Path, rows: list[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        path.write_text("")
        return path
    fieldnames = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)
    return path


def _finish(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def save_asr_query_curve(curve: list[dict], path: str | Path) -> Path:
    """ASR against attack-pipeline query count, one line per run."""
    fig, ax = plt.subplots()
    pts = [(c["n_qb"], c["asr"]) for c in curve if c.get("asr") is not None]
    if pts:
        xs, ys = zip(*pts)
        ax.plot(xs, ys, marker="o")
    ax.set_xlabel("queries (stage 1 + stage 2)")
    ax.set_ylabel("attack success rate")
    ax.set_ylim(-0.02, 1.02)
    ax.set_title("ASR vs query budget")
    return _finish(fig, path)


def save_per_class_accuracy(acc: dict[int, float], names: tuple[str, ...], path: str | Path) -> Path:
    """Oracle accuracy of the generated training data, one bar per class."""
    fig, ax = plt.subplots(figsize=(max(6.0, 0.5 * len(names)), 3.8))
    classes = sorted(acc)
    values = [acc[c] for c in classes]
    ax.bar([names[c] for c in classes], values, color="tab:blue")
    finite = [v for v in values if not math.isnan(v)]
    if finite:
        ax.axhline(float(np.mean(finite)), color="tab:red", linestyle="--", label="average")
        ax.legend()
    ax.set_ylabel("accuracy vs intended class")
    ax.set_ylim(0, 1.02)
    ax.tick_params(axis="x", rotation=60)
    return _finish(fig, path)


def save_ablation_bars(rows: list[dict], path: str | Path) -> Path:
    """Median ASR per ablation arm across seeds."""
    fig, ax = plt.subplots()
    arms = sorted({r["arm"] for r in rows})
    medians = [
        float(np.median([r["asr"] for r in rows if r["arm"] == a and r["asr"] is not None]))
        for a in arms
    ]
    ax.bar(arms, medians, color=["tab:gray", "tab:orange", "tab:green"][: len(arms)])
    ax.set_ylabel("median ASR")
    ax.set_ylim(0, 1.02)
    ax.set_title("ablation: data source for substitute training")
    return _finish(fig, path)


def save_asr_vs_codebook(rows: list[dict], path: str | Path) -> Path:
    fig, ax = plt.subplots()
    sizes = [r["codebook_size"] for r in rows]
    asr = [r["asr"] for r in rows]
    ax.plot(sizes, asr, marker="o", label="ASR")
    ax.set_xlabel("codebook size M")
    ax.set_ylabel("attack success rate")
    ax.set_ylim(-0.02, 1.02)
    ax2 = ax.twinx()
    ax2.plot(sizes, [r["n_stage1"] for r in rows], marker="s", color="tab:red", label="stage-1 queries")
    ax2.set_ylabel("stage-1 queries")
    ax2.grid(False)
    lines = ax.get_lines() + ax2.get_lines()
    ax.legend(lines, [ln.get_label() for ln in lines], loc="lower right")
    return _finish(fig, path)


def save_image_grid(pixels: np.ndarray, path: str | Path, ncols: int = 8) -> Path:
    """Tile a (B, C, H, W) array of [0,1] images into one PNG."""
    b = pixels.shape[0]
    ncols = max(1, min(ncols, b))
    nrows = (b + ncols - 1) // ncols
    fig, axes = plt.subplots(nrows, ncols, figsize=(1.2 * ncols, 1.2 * nrows), squeeze=False)
    for i in range(nrows * ncols):
        ax = axes[i // ncols][i % ncols]
        ax.axis("off")
        if i < b:
            ax.imshow(np.clip(pixels[i].transpose(1, 2, 0), 0, 1))
    return _finish(fig, path)


def save_training_curves(metrics: list[dict], path: str | Path) -> Path:
    fig, ax = plt.subplots()
    steps = [m["step"] for m in metrics]
    ax.plot(steps, [m["loss"] for m in metrics], label="loss", color="tab:blue")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax2 = ax.twinx()
    ax2.plot(steps, [m["agreement"] for m in metrics], label="agreement", color="tab:green")
    ax2.set_ylabel("agreement with oracle")
    ax2.set_ylim(0, 1.02)
    ax2.grid(False)
    lines = ax.get_lines() + ax2.get_lines()
    ax.legend(lines, [ln.get_label() for ln in lines], loc="center right")
    return _finish(fig, path)


def read_metrics(run_dir: str | Path) -> list[dict]:
    path = Path(run_dir) / "metrics.jsonl"
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def summarize_run(run_dir: str | Path, out_dir: str | Path | None = None) -> dict:
    """Render a run directory into summary.csv plus figures.

    Works for single runs (run_manifest.json) and preset directories
    (summary.json with rows).
    """
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir else run_dir / "report"
    out_dir.mkdir(parents=True, exist_ok=True)

    preset_summary = run_dir / "summary.json"
    if preset_summary.exists() and not (run_dir / "run_manifest.json").exists():
        summary = json.loads(preset_summary.read_text())
        rows = summary.get("rows", [])
        write_csv(out_dir / "summary.csv", rows)
        if rows and "arm" in rows[0]:
            save_ablation_bars(rows, out_dir / "ablation_asr.png")
        if rows and "codebook_size" in rows[0]:
            save_asr_vs_codebook(rows, out_dir / "asr_vs_codebook.png")
        return {"kind": "preset", "rows": len(rows), "out_dir": str(out_dir)}

    manifest = json.loads((run_dir / "run_manifest.json").read_text())
    metrics = read_metrics(run_dir)
    rows = []
    asr_path = run_dir / "asr_report.json"
    if asr_path.exists():
        report = json.loads(asr_path.read_text())
        for method, entry in report["entries"].items():
            rows.append(
                {
                    "run": manifest["name"],
                    "method": method,
                    "asr": entry["asr"],
                    "n_suc": entry["n_suc"],
                    "n_all": entry["n_all"],
                    "mean_l2": entry["mean_l2"],
                    "mean_linf": entry["mean_linf"],
                    "n_qb": report["ledger"]["n_qb"],
                    "n_eval": report["ledger"]["n_eval"],
                    "agreement": manifest.get("agreement"),
                }
            )
    write_csv(out_dir / "summary.csv", rows)
    if metrics:
        save_training_curves(metrics, out_dir / "training_curves.png")
        curve = [
            {"n_qb": m["n1"] + m["n2"], "asr": m["curve_asr"]}
            for m in metrics
            if m.get("curve_asr") is not None
        ]
        if curve:
            save_asr_query_curve(curve, out_dir / "asr_vs_queries.png")
    return {"kind": "run", "rows": len(rows), "out_dir": str(out_dir), "metrics": len(metrics)}
