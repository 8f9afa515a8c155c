"""Core data types, manifest serialization, and dataset validation.

Mask semantics everywhere: 1 = visible railway. A pasted obstacle opens a
hole in the railway class, so ``mask = railway_mask AND NOT footprint``.
All types are immutable after construction and safe to share across
parallel workers; manifest writes are single-writer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ManifestError, ManifestVersionError, ValidationError

SCHEMA_VERSION = 1

WEATHER_VALUES = ("sunny", "foggy", "rainy")
CATEGORY_VALUES = ("person", "animal", "texture")


@dataclass(frozen=True)
class BaseScene:
    """Obstacle-free background image plus its annotated railway area."""

    image: np.ndarray          # H×W×3 uint8
    railway_mask: np.ndarray   # H×W uint8 {0,1}, 1 = railway area
    weather: str               # one of WEATHER_VALUES
    scene_id: str

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape[0], self.image.shape[1]


@dataclass(frozen=True)
class ObjectCutout:
    """Tight-cropped paste-able object: RGB patch plus binary alpha."""

    patch: np.ndarray          # h×w×3 uint8
    alpha: np.ndarray          # h×w uint8 {0,1}
    category: str
    source_id: str
    native_size: tuple[int, int]   # (H, W) of the source object patch

    def __post_init__(self):
        if self.patch.shape[:2] != self.alpha.shape:
            raise ValidationError(
                f"cutout {self.source_id!r}: patch {self.patch.shape[:2]} and "
                f"alpha {self.alpha.shape} dimensions differ")
        if not self.alpha.any():
            raise ValidationError(f"cutout {self.source_id!r}: alpha has no nonzero pixel")
        rows = np.flatnonzero(self.alpha.any(axis=1))
        cols = np.flatnonzero(self.alpha.any(axis=0))
        tight = (rows[0] == 0 and cols[0] == 0
                 and rows[-1] == self.alpha.shape[0] - 1
                 and cols[-1] == self.alpha.shape[1] - 1)
        if not tight:
            raise ValidationError(
                f"cutout {self.source_id!r}: alpha is not tight-cropped "
                f"(bbox rows {rows[0]}..{rows[-1]}, cols {cols[0]}..{cols[-1]} "
                f"inside {self.alpha.shape})")

    @property
    def size(self) -> tuple[int, int]:
        """(h, w) of the patch."""
        return self.alpha.shape


@dataclass(frozen=True)
class RescaleParams:
    """Depth-proportional rescale law: pasted height = alpha*anchor_y + beta."""

    alpha: float = 0.6
    beta: float = 30.0

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValidationError(f"rescale alpha must be > 0, got {self.alpha}")
        if self.beta < 0:
            raise ValidationError(f"rescale beta must be >= 0, got {self.beta}")

    def height_at(self, anchor_y: int) -> int:
        # round half up; Python's round() would round half to even
        return int(np.floor(self.alpha * anchor_y + self.beta + 0.5))


@dataclass(frozen=True)
class PlacementSpec:
    """Where a cutout lands: bottom-center anchor, frame-to-frame shift, rescale."""

    anchor: tuple[int, int]    # (x, y) of the cutout's bottom-center
    shift: tuple[int, int]     # (dx, dy) integer pixels
    rescale: RescaleParams = field(default_factory=RescaleParams)


@dataclass(frozen=True)
class CompositeSample:
    """One training unit: a pseudo frame pair with exact railway masks.

    ``hflipped`` is a train-time augmentation flag (flow dx must be negated
    when set); it is never serialized to the manifest.
    """

    frame_t: np.ndarray
    frame_t1: np.ndarray
    mask_t: np.ndarray
    mask_t1: np.ndarray
    placement: PlacementSpec
    scene_id: str
    seed: int
    weather: str = "sunny"
    category: str = "person"
    hflipped: bool = False

    def with_frames(self, frame_t, frame_t1, mask_t=None, mask_t1=None, **kw) -> "CompositeSample":
        return replace(self, frame_t=frame_t, frame_t1=frame_t1,
                       mask_t=self.mask_t if mask_t is None else mask_t,
                       mask_t1=self.mask_t1 if mask_t1 is None else mask_t1, **kw)


@dataclass(frozen=True)
class SampleRecord:
    """One manifest line. Raster paths are relative to the manifest's directory."""

    scene_id: str
    seed: int
    frame_t: str
    frame_t1: str
    mask_t: str
    mask_t1: str
    weather: str
    category: str
    anchor_x: int
    anchor_y: int
    dx: int
    dy: int

    def raster_paths(self) -> tuple[str, str, str, str]:
        return self.frame_t, self.frame_t1, self.mask_t, self.mask_t1


_RECORD_FIELDS = [f.name for f in fields(SampleRecord)]


def validate_scene(scene: BaseScene) -> list[str]:
    """Check BaseScene invariants; returns one message per violation.

    Violations are data, not errors: an empty list means the scene is valid.
    """
    violations = []
    if scene.image.ndim != 3 or scene.image.shape[2] != 3:
        violations.append(
            f"image must be H×W×3, got shape {scene.image.shape}")
    if scene.railway_mask.ndim != 2 or scene.image.shape[:2] != scene.railway_mask.shape:
        violations.append(
            f"shape mismatch: image {scene.image.shape[:2]} vs "
            f"railway_mask {scene.railway_mask.shape}")
    else:
        nonzero = int(np.count_nonzero(scene.railway_mask))
        if nonzero == 0:
            violations.append("railway_mask empty (no nonzero pixel)")
        elif nonzero == scene.railway_mask.size:
            violations.append("railway_mask covers the whole frame (all ones)")
    if scene.weather not in WEATHER_VALUES:
        violations.append(
            f"weather {scene.weather!r} not in {list(WEATHER_VALUES)}")
    return violations


def write_manifest(records: Sequence[SampleRecord], path: str | Path) -> int:
    """Write one JSON record per line; returns the count written.

    Every referenced raster must already exist on disk (relative to the
    manifest's directory). Overwrites any existing file.
    """
    path = Path(path)
    base = path.parent
    for rec in records:
        for rel in rec.raster_paths():
            if not (base / rel).is_file():
                raise ValidationError(
                    f"sample {rec.scene_id!r} (seed {rec.seed}): "
                    f"missing raster file {rel!r}")
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            obj = {"schema_version": SCHEMA_VERSION}
            obj.update({name: getattr(rec, name) for name in _RECORD_FIELDS})
            fh.write(json.dumps(obj, sort_keys=True) + "\n")
    return len(records)


def load_manifest(path: str | Path) -> list[SampleRecord]:
    """Load manifest records; unknown keys are ignored for forward compatibility."""
    path = Path(path)
    records = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"malformed record: {exc.msg}", line=lineno) from exc
            if not isinstance(obj, dict):
                raise ManifestError("record is not an object", line=lineno)
            version = obj.get("schema_version")
            if version != SCHEMA_VERSION:
                raise ManifestVersionError(
                    f"schema_version {version!r} not supported "
                    f"(expected {SCHEMA_VERSION})", line=lineno)
            missing = [k for k in _RECORD_FIELDS if k not in obj]
            if missing:
                raise ManifestError(f"missing keys {missing}", line=lineno)
            records.append(SampleRecord(**{k: obj[k] for k in _RECORD_FIELDS}))
    return records


def manifest_records(samples: Iterable[CompositeSample],
                     raster_paths: Iterable[tuple[str, str, str, str]]) -> list[SampleRecord]:
    """Pair in-memory samples with their written raster paths."""
    records = []
    for sample, (ft, ft1, mt, mt1) in zip(samples, raster_paths):
        records.append(SampleRecord(
            scene_id=sample.scene_id,
            seed=int(sample.seed),
            frame_t=ft, frame_t1=ft1, mask_t=mt, mask_t1=mt1,
            weather=sample.weather,
            category=sample.category,
            anchor_x=int(sample.placement.anchor[0]),
            anchor_y=int(sample.placement.anchor[1]),
            dx=int(sample.placement.shift[0]),
            dy=int(sample.placement.shift[1]),
        ))
    return records
