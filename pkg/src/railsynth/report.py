"""Report rendering: structured JSON, a delimited metrics table, and
static matplotlib figures (prediction overlays, flow heatmaps).

The CSV carries no timestamp so identical runs produce byte-identical
tables; the JSON mirrors the full EvalReport including its timestamp.
"""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluation import BAND_ORDER, EvalReport

CSV_COLUMNS = ["band", "sample_count", "iou_railway", "iou_background",
               "miou", "pixel_accuracy"]


def config_fingerprint(config: dict) -> str:
    """Stable short hash of a config mapping."""
    canonical = json.dumps(config, sort_keys=True, default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def _band_sort_key(band: str):
    return (BAND_ORDER.index(band) if band in BAND_ORDER else len(BAND_ORDER), band)


def write_report(report: EvalReport, out_dir: str | Path) -> tuple[Path, Path]:
    """Write report.json + report.csv; returns both paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / "report.json"
    with json_path.open("w", encoding="utf-8") as fh:
        json.dump(report.as_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    csv_path = out_dir / "report.csv"
    with csv_path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for band in sorted(report.per_band, key=_band_sort_key):
            m = report.per_band[band]
            writer.writerow([band, m.sample_count,
                             f"{m.iou_railway:.6f}", f"{m.iou_background:.6f}",
                             f"{m.miou:.6f}", f"{m.pixel_accuracy:.6f}"])
    return json_path, csv_path


def load_report(path: str | Path) -> EvalReport:
    with Path(path).open("r", encoding="utf-8") as fh:
        return EvalReport.from_dict(json.load(fh))


def write_ablation_table(rows: list[dict], out_dir: str | Path) -> tuple[Path, Path]:
    """Write ablation.json + ablation.csv; returns both paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / "ablation.json"
    with json_path.open("w", encoding="utf-8") as fh:
        json.dump(rows, fh, indent=2, sort_keys=True)
        fh.write("\n")
    csv_path = out_dir / "ablation.csv"
    columns = ["variant", "seed", "miou", "pixel_accuracy", "eval_split"]
    with csv_path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([row["variant"], row["seed"],
                             f"{row['miou']:.6f}", f"{row['pixel_accuracy']:.6f}",
                             row["eval_split"]])
    return json_path, csv_path


def plot_band_summary(report: EvalReport, out_path: str | Path) -> Path:
    """Bar chart of per-band mIoU and pixel accuracy."""
    bands = sorted(report.per_band, key=_band_sort_key)
    mious = [report.per_band[b].miou for b in bands]
    accs = [report.per_band[b].pixel_accuracy for b in bands]
    x = np.arange(len(bands))
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar(x - 0.18, mious, width=0.36, label="mIoU")
    ax.bar(x + 0.18, accs, width=0.36, label="pixel accuracy")
    ax.set_xticks(x, bands)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("score")
    ax.legend(frameon=False)
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_prediction_overlay(image: np.ndarray, pred: np.ndarray, gt: np.ndarray,
                            out_path: str | Path, title: str = "") -> Path:
    """Side-by-side: input frame and prediction-vs-ground-truth agreement.

    Agreement coloring: true positives green, false negatives red
    (missed railway), false positives orange (phantom railway).
    """
    overlay = image.astype(np.float32) / 255.0
    pred_b = pred.astype(bool)
    gt_b = gt.astype(bool)
    tint = np.zeros_like(overlay)
    tint[gt_b & pred_b] = (0.1, 0.8, 0.1)
    tint[gt_b & ~pred_b] = (0.9, 0.1, 0.1)
    tint[~gt_b & pred_b] = (0.95, 0.6, 0.05)
    shown = np.clip(overlay * 0.6 + tint * 0.4, 0, 1)
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.2))
    axes[0].imshow(image)
    axes[0].set_title("input")
    axes[1].imshow(shown)
    axes[1].set_title(title or "pred vs gt")
    for ax in axes:
        ax.set_axis_off()
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_flow_heatmap(magnitude: np.ndarray, out_path: str | Path,
                      title: str = "flow magnitude") -> Path:
    fig, ax = plt.subplots(figsize=(4.6, 3.4))
    im = ax.imshow(magnitude, cmap="inferno")
    fig.colorbar(im, ax=ax, label="px")
    ax.set_title(title)
    ax.set_axis_off()
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def render_eval_figures(predictor, band_manifests, out_dir: str | Path,
                        use_flow: bool = False, flow_dir=None,
                        per_band: int = 3) -> list[Path]:
    """Overlay + flow figures for the first few samples of each band."""
    from . import raster
    from .evaluation import _as_predict_fn
    from .optical_flow import read_flow_file
    from .scene_model import load_manifest
    from .segmentation import _flow_path_for

    predict_fn = _as_predict_fn(predictor)
    out_dir = Path(out_dir)
    written = []
    for band, manifest in band_manifests.items():
        manifest = Path(manifest)
        if not manifest.is_file():
            continue
        for idx, rec in enumerate(load_manifest(manifest)[:per_band]):
            image = raster.load_image(manifest.parent / rec.frame_t)
            gt = raster.load_mask(manifest.parent / rec.mask_t)
            flow = None
            if use_flow:
                flow = read_flow_file(_flow_path_for(manifest, rec.frame_t, flow_dir))
            pred = predict_fn(image, flow)
            written.append(plot_prediction_overlay(
                image, pred, gt, out_dir / f"{band}_{idx:02d}_overlay.png",
                title=f"{band} #{idx}"))
            if flow is not None:
                written.append(plot_flow_heatmap(
                    flow.magnitude(), out_dir / f"{band}_{idx:02d}_flow.png",
                    title=f"{band} #{idx} flow"))
    return written
