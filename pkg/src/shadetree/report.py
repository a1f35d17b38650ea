"""Decomposition report writer: files, delimited traces, and figures.

Layout of a report directory:

    final.shadetree / final.json    recovered tree (DSL + JSON encodings)
    input.png / rerender.png        target and its reconstruction
    metrics.csv                     summary metrics row
    trace.json                      per-node decisions, scores, timings
    whole_tree_trace.csv            per-generation loss of the final refinement
    nodes/<id>.png                  every pool node's image
    figures/overview.png            input vs. reconstruction vs. |difference|
    figures/pool.png                node thumbnails by depth with statuses
    figures/whole_tree_loss.png     refinement loss curve
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .dsl import print_tree
from .image import save_png
from .pipeline import DecompositionReport
from .tree import tree_to_json

__all__ = ["write_report"]


def write_report(report: DecompositionReport, out_dir) -> Path:
    out = Path(out_dir)
    (out / "nodes").mkdir(parents=True, exist_ok=True)
    (out / "figures").mkdir(exist_ok=True)

    (out / "final.shadetree").write_text(print_tree(report.tree) + "\n")
    (out / "final.json").write_text(
        json.dumps(tree_to_json(report.tree), indent=2) + "\n")
    save_png(report.input_image, out / "input.png")
    save_png(report.rerender, out / "rerender.png")

    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["psnr_db", "ssim", "nodes", "stage2_nodes",
                         "seconds", "failed"])
        writer.writerow([f"{report.psnr:.6f}", f"{report.ssim:.6f}",
                         len(report.pool.nodes), len(report.stage2),
                         f"{report.seconds:.3f}", report.failed])

    trace = {
        "summary": report.summary(),
        "nodes": [
            {
                "node_id": t.node_id, "depth": t.depth, "status": t.status,
                "action": t.action, "seconds": round(t.seconds, 4),
                "verdict": t.verdict, "chosen": t.chosen,
                "candidates": t.candidates,
            }
            for t in report.node_traces
        ],
        "stage2": report.stage2,
        "whole_tree": {k: v for k, v in report.whole_tree.items() if k != "history"},
    }
    (out / "trace.json").write_text(json.dumps(trace, indent=2) + "\n")

    with open(out / "whole_tree_trace.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["evals", "best_loss"])
        for evals, loss in report.whole_tree.get("history", []):
            writer.writerow([evals, f"{loss:.8f}"])

    for node_id, record in sorted(report.pool.nodes.items()):
        save_png(record.image, out / "nodes" / f"{node_id:03d}.png")

    _figure_overview(report, out / "figures" / "overview.png")
    _figure_pool(report, out / "figures" / "pool.png")
    _figure_loss(report, out / "figures" / "whole_tree_loss.png")
    return out


def _figure_overview(report: DecompositionReport, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    diff = np.abs(report.input_image.rgb - report.rerender.rgb).mean(axis=2)
    fig, axes = plt.subplots(1, 3, figsize=(10, 3.4))
    axes[0].imshow(report.input_image.rgb)
    axes[0].set_title("input")
    axes[1].imshow(report.rerender.rgb)
    axes[1].set_title(f"re-render  {report.psnr:.1f} dB / {report.ssim:.3f}")
    im = axes[2].imshow(diff, cmap="magma", vmin=0, vmax=max(0.05, diff.max()))
    axes[2].set_title("|difference|")
    fig.colorbar(im, ax=axes[2], fraction=0.046)
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def _figure_pool(report: DecompositionReport, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    records = sorted(report.pool.nodes.values(), key=lambda r: (r.depth, r.node_id))
    depths = sorted({r.depth for r in records})
    per_depth = {d: [r for r in records if r.depth == d] for d in depths}
    cols = max(len(v) for v in per_depth.values())
    fig, axes = plt.subplots(len(depths), cols,
                             figsize=(1.6 * cols, 1.8 * len(depths)), squeeze=False)
    for row, depth in enumerate(depths):
        for col in range(cols):
            ax = axes[row][col]
            ax.axis("off")
            if col < len(per_depth[depth]):
                rec = per_depth[depth][col]
                ax.imshow(rec.image.rgb)
                ax.set_title(f"#{rec.node_id} {rec.status.value}", fontsize=7)
    fig.suptitle("node pool by depth", fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def _figure_loss(report: DecompositionReport, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    history = report.whole_tree.get("history", [])
    fig, ax = plt.subplots(figsize=(5, 3))
    if history:
        evals = [h[0] for h in history]
        losses = [h[1] for h in history]
        ax.plot(evals, losses, lw=1.2)
        ax.set_yscale("log")
    ax.set_xlabel("objective evaluations")
    ax.set_ylabel("best loss")
    ax.set_title("whole-tree refinement")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
