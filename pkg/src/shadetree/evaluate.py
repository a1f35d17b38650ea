"""Dataset evaluation harness: decompose every sample, tabulate PSNR/SSIM.

Part of the metrics surface: runs the full pipeline over a generated
dataset manifest and writes per-sample rows plus an aggregate mean row as
CSV, a JSON summary, and a small matplotlib figure next to the CSV.
Per-sample failures become rows with a status flag; the suite never
aborts.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .envmap import EnvLibrary, default_library
from .errors import DecompositionFailed, ShadeTreeError
from .image import load_png
from .pipeline import DecompositionReport, PipelineConfig, decompose

__all__ = ["EvalRow", "evaluate_suite", "write_rows_csv", "aggregate"]

CSV_COLUMNS = ("dataset_id", "sample_id", "status", "psnr_db", "ssim",
               "nodes", "stage2_nodes", "seconds")


@dataclass
class EvalRow:
    dataset_id: str
    sample_id: str
    status: str               # ok | failed | error
    psnr_db: float
    ssim: float
    nodes: int = 0
    stage2_nodes: int = 0
    seconds: float = 0.0

    def as_list(self) -> list:
        return [self.dataset_id, self.sample_id, self.status,
                _fmt(self.psnr_db), _fmt(self.ssim), self.nodes,
                self.stage2_nodes, _fmt(self.seconds)]


def _fmt(x: float) -> str:
    if isinstance(x, float) and math.isnan(x):
        return "nan"
    return f"{x:.6f}"


def _evaluate_one(dataset_id: str, entry: dict, base: Path,
                  config: PipelineConfig, envlib: EnvLibrary
                  ) -> tuple[EvalRow, DecompositionReport | None]:
    sample_id = entry["id"]
    image = load_png(base / entry["files"]["png"])
    try:
        report = decompose(image, config, envlib)
        status = "ok"
    except DecompositionFailed as exc:
        report = exc.report
        status = "failed"
    except ShadeTreeError:
        return EvalRow(dataset_id, sample_id, "error", float("nan"),
                       float("nan")), None
    row = EvalRow(dataset_id, sample_id, status, report.psnr, report.ssim,
                  nodes=len(report.pool.nodes), stage2_nodes=len(report.stage2),
                  seconds=report.seconds)
    return row, report


def evaluate_suite(manifest_path, config: PipelineConfig | None = None,
                   out_dir=None, envlib: EnvLibrary | None = None,
                   threads: int = 1, limit: int | None = None) -> list[EvalRow]:
    """Run decompose over every manifest entry; optionally write outputs.

    Rows come back sorted by sample id regardless of execution order, so
    parallel runs produce identical files.
    """
    config = config or PipelineConfig()
    envlib = envlib or default_library()
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    base = manifest_path.parent
    dataset_id = f"{manifest.get('style', '?')}/{manifest.get('split', '?')}"
    entries = manifest["entries"][:limit] if limit else manifest["entries"]

    if threads > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(_evaluate_one, dataset_id, entry, base,
                                   config, envlib)
                       for entry in entries]
            rows = [f.result()[0] for f in futures]
    else:
        rows = [_evaluate_one(dataset_id, entry, base, config, envlib)[0]
                for entry in entries]
    rows.sort(key=lambda r: r.sample_id)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_rows_csv(rows, out / "metrics.csv")
        summary = aggregate(rows)
        (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
        _write_figure(rows, out / "metrics_hist.png")
    return rows


def aggregate(rows: list[EvalRow]) -> dict:
    scored = [r for r in rows if not math.isnan(r.psnr_db)]
    psnrs = [r.psnr_db for r in scored]
    ssims = [r.ssim for r in scored]
    return {
        "count": len(rows),
        "scored": len(scored),
        "errors": len([r for r in rows if r.status == "error"]),
        "failed": len([r for r in rows if r.status == "failed"]),
        "mean_psnr_db": float(np.mean(psnrs)) if psnrs else float("nan"),
        "median_psnr_db": float(np.median(psnrs)) if psnrs else float("nan"),
        "mean_ssim": float(np.mean(ssims)) if ssims else float("nan"),
        "median_ssim": float(np.median(ssims)) if ssims else float("nan"),
        "total_seconds": float(sum(r.seconds for r in rows)),
    }


def write_rows_csv(rows: list[EvalRow], path) -> None:
    """Per-sample rows plus one aggregate mean row, fixed column order."""
    summary = aggregate(rows)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            writer.writerow(row.as_list())
        writer.writerow([rows[0].dataset_id if rows else "", "mean", "aggregate",
                         _fmt(summary["mean_psnr_db"]), _fmt(summary["mean_ssim"]),
                         "", "", _fmt(summary["total_seconds"])])


def _write_figure(rows: list[EvalRow], path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    scored = [r.psnr_db for r in rows if not math.isnan(r.psnr_db)]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
    if scored:
        axes[0].hist(scored, bins=16, color="#4878b0", edgecolor="black")
        axes[0].axvline(float(np.median(scored)), color="crimson", ls="--",
                        label=f"median {np.median(scored):.1f} dB")
        axes[0].legend(fontsize=8)
    axes[0].set_xlabel("re-render PSNR (dB)")
    axes[0].set_ylabel("samples")
    ssims = [r.ssim for r in rows if not math.isnan(r.ssim)]
    if ssims:
        axes[1].hist(ssims, bins=16, color="#6aa56a", edgecolor="black")
    axes[1].set_xlabel("re-render SSIM")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
