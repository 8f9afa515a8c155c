"""Segmentation metrics, distance-banded evaluation, and the ablation runner.

Class 1 is railway, class 0 is everything else. Bands (near/mid/far) are
manifest labels assigned at collection time, not derived from geometry.
Within a band, counts are micro-averaged: confusion totals are aggregated
over all images first, then turned into metrics.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import ndimage

from .errors import ValidationError
from .scene_model import load_manifest

log = logging.getLogger(__name__)

BAND_ORDER = ("near", "mid", "far")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValidationError(f"negative confusion count: {self}")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)


def confusion_counts(pred: np.ndarray, gt: np.ndarray, class_id: int) -> ConfusionCounts:
    """Per-class pixel confusion counts for binary masks."""
    if pred.shape != gt.shape:
        raise ValidationError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    p = pred.astype(bool) if class_id == 1 else ~pred.astype(bool)
    g = gt.astype(bool) if class_id == 1 else ~gt.astype(bool)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(np.count_nonzero(~p & ~g))
    return ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=tn)


def iou(counts: ConfusionCounts) -> float:
    """tp / (tp + fp + fn); 1.0 when the class is absent and not predicted."""
    denom = counts.tp + counts.fp + counts.fn
    if denom == 0:
        return 1.0
    return counts.tp / denom


def miou(per_class_ious: Sequence[float]) -> float:
    if len(per_class_ious) == 0:
        raise ValidationError("miou of an empty sequence")
    return float(np.mean(per_class_ious))


def pixel_accuracy(pred: np.ndarray, gt: np.ndarray) -> float:
    if pred.shape != gt.shape:
        raise ValidationError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    return float(np.count_nonzero(pred.astype(bool) == gt.astype(bool)) / pred.size)


@dataclass(frozen=True)
class ObstacleRegion:
    bbox: tuple[int, int, int, int]   # x_min, y_min, x_max, y_max (exclusive)
    area: int
    centroid: tuple[float, float]     # (x, y)


def obstacle_regions(pred_railway: np.ndarray, railway_roi: np.ndarray,
                     min_area: int = 1) -> list[ObstacleRegion]:
    """Connected intrusions: ROI pixels not predicted as railway.

    8-connected components of ``railway_roi AND NOT pred_railway`` with
    area >= min_area, sorted by area descending, ties by top-left corner.
    """
    if pred_railway.shape != railway_roi.shape:
        raise ValidationError(
            f"shape mismatch: pred {pred_railway.shape} vs roi {railway_roi.shape}")
    intrusion = railway_roi.astype(bool) & ~pred_railway.astype(bool)
    labels, n = ndimage.label(intrusion, structure=np.ones((3, 3), dtype=int))
    regions = []
    for label_id, sl in enumerate(ndimage.find_objects(labels), start=1):
        if sl is None:
            continue
        component = labels[sl] == label_id
        area = int(component.sum())
        if area < min_area:
            continue
        ys, xs = np.nonzero(component)
        cy = float(ys.mean() + sl[0].start)
        cx = float(xs.mean() + sl[1].start)
        regions.append(ObstacleRegion(
            bbox=(sl[1].start, sl[0].start, sl[1].stop, sl[0].stop),
            area=area, centroid=(cx, cy)))
    regions.sort(key=lambda r: (-r.area, r.bbox[1], r.bbox[0]))
    return regions


@dataclass(frozen=True)
class BandMetrics:
    sample_count: int
    iou_railway: float
    iou_background: float
    miou: float
    pixel_accuracy: float

    def as_dict(self) -> dict:
        return {"sample_count": self.sample_count,
                "iou_railway": self.iou_railway,
                "iou_background": self.iou_background,
                "miou": self.miou,
                "pixel_accuracy": self.pixel_accuracy}


@dataclass(frozen=True)
class EvalReport:
    per_band: dict[str, BandMetrics]
    config_fingerprint: str
    timestamp: str
    averaging: str = "micro"

    def as_dict(self) -> dict:
        return {"per_band": {b: m.as_dict() for b, m in self.per_band.items()},
                "config_fingerprint": self.config_fingerprint,
                "timestamp": self.timestamp,
                "averaging": self.averaging}

    @classmethod
    def from_dict(cls, obj: dict) -> "EvalReport":
        bands = {b: BandMetrics(**m) for b, m in obj["per_band"].items()}
        return cls(per_band=bands, config_fingerprint=obj["config_fingerprint"],
                   timestamp=obj["timestamp"],
                   averaging=obj.get("averaging", "micro"))


Predictor = Callable[[np.ndarray, object], np.ndarray]
"""(image, flow_or_none) -> binary railway mask."""


def _aggregate_band(pairs) -> BandMetrics:
    agg = {0: ConfusionCounts(0, 0, 0, 0), 1: ConfusionCounts(0, 0, 0, 0)}
    correct = 0
    total = 0
    n = 0
    for pred, gt in pairs:
        for cls in (0, 1):
            agg[cls] = agg[cls] + confusion_counts(pred, gt, cls)
        correct += int(np.count_nonzero(pred.astype(bool) == gt.astype(bool)))
        total += pred.size
        n += 1
    iou_bg = iou(agg[0])
    iou_rail = iou(agg[1])
    return BandMetrics(sample_count=n, iou_railway=iou_rail, iou_background=iou_bg,
                       miou=miou([iou_bg, iou_rail]),
                       pixel_accuracy=correct / total if total else 0.0)


def _as_predict_fn(predictor):
    from . import segmentation

    if callable(predictor) and not isinstance(predictor, segmentation.RailNet):
        return predictor
    model = (predictor if isinstance(predictor, segmentation.RailNet)
             else segmentation.load_checkpoint(predictor)[0])
    return lambda image, flow: segmentation.predict(model, image, flow)


def _manifest_pairs(manifest: Path, predict_fn, use_flow, flow_dir):
    from . import raster
    from .optical_flow import read_flow_file
    from .segmentation import _flow_path_for

    for rec in load_manifest(manifest):
        image = raster.load_image(manifest.parent / rec.frame_t)
        gt = raster.load_mask(manifest.parent / rec.mask_t)
        flow = None
        if use_flow:
            flow = read_flow_file(_flow_path_for(manifest, rec.frame_t, flow_dir))
        yield predict_fn(image, flow), gt


def evaluate_bands(predictor, band_manifests: Mapping[str, str | Path],
                   use_flow: bool = False, flow_dir=None,
                   config_fingerprint: str = "-",
                   timestamp: str = "") -> EvalReport:
    """Evaluate a model per distance band; micro-averaged within each band.

    ``predictor`` is either a checkpoint path / RailNet (predicted via
    segmentation.predict) or a callable ``(image, flow) -> binary mask``
    for oracle-style evaluation. Missing bands warn; an entirely empty
    report is an error.
    """
    predict_fn = _as_predict_fn(predictor)
    per_band: dict[str, BandMetrics] = {}
    for band, manifest in band_manifests.items():
        manifest = Path(manifest)
        if not manifest.is_file():
            warnings.warn(f"band {band!r}: manifest {manifest} missing, skipped")
            continue
        if not load_manifest(manifest):
            warnings.warn(f"band {band!r}: manifest {manifest} empty, skipped")
            continue
        per_band[band] = _aggregate_band(
            _manifest_pairs(manifest, predict_fn, use_flow, flow_dir))
    if not per_band:
        raise ValidationError("no band produced any metrics; empty report forbidden")
    from datetime import datetime, timezone
    stamp = timestamp or datetime.now(timezone.utc).isoformat()
    return EvalReport(per_band=per_band, config_fingerprint=config_fingerprint,
                      timestamp=stamp)


def evaluate_union(predictor, manifests: Sequence[str | Path],
                   use_flow: bool = False, flow_dir=None) -> BandMetrics:
    """Micro-averaged metrics over the union of several manifests."""
    predict_fn = _as_predict_fn(predictor)

    def pairs():
        for manifest in manifests:
            yield from _manifest_pairs(Path(manifest), predict_fn, use_flow, flow_dir)

    metrics = _aggregate_band(pairs())
    if metrics.sample_count == 0:
        raise ValidationError("union evaluation saw no samples")
    return metrics


def run_ablation(dataset_variants: Mapping[str, str | Path],
                 model_config, train_config, eval_manifests: Mapping[str, str | Path],
                 use_flow: bool = False, out_dir: str | Path = "ablation",
                 seeds: Sequence[int] | None = None) -> list[dict]:
    """Train one model per dataset variant (identical config) and compare.

    Evaluation pools the union of all supplied band manifests, recorded as
    ``eval_split: union`` in each row. Returns rows
    {variant, seed, miou, pixel_accuracy}; any training failure aborts the
    run naming the variant.
    """
    from dataclasses import replace

    from .segmentation import train

    if len(dataset_variants) < 2:
        raise ValidationError("ablation needs at least 2 dataset variants")
    out_dir = Path(out_dir)
    seeds = list(seeds) if seeds else [train_config.seed]
    rows = []
    for name, manifest in dataset_variants.items():
        for seed in seeds:
            cfg = replace(train_config, seed=seed)
            try:
                ckpt, _ = train(manifest, model_config, cfg, use_flow=use_flow,
                                out_dir=out_dir / f"{name}_s{seed}")
            except Exception as exc:
                raise RuntimeError(
                    f"ablation variant {name!r} (seed {seed}) failed to train: {exc}"
                ) from exc
            pooled = evaluate_union(ckpt, list(eval_manifests.values()),
                                    use_flow=use_flow)
            rows.append({"variant": name, "seed": seed,
                         "miou": pooled.miou,
                         "pixel_accuracy": pooled.pixel_accuracy,
                         "eval_split": "union"})
            log.info("ablation %s seed %d: miou=%.4f", name, seed, pooled.miou)
    return rows
