"""Produce ObjectCutouts from raw object images.

The production chain is detect -> segment -> extract with a pluggable
backend. Three backends are built in:

* chroma-key oracle -- deterministic, model-free; objects rendered on a
  flat key color (tests and demo data use this one),
* precomputed mask pairs -- a directory of ``img.png`` + ``img_mask.png``,
* subprocess plugin -- external detector/segmenter speaking the line
  protocol (see plugins module), for pretrained model weights.

Backends may return imperfect masks; nothing downstream assumes masks are
morphologically clean.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
from scipy import ndimage

from . import raster
from .errors import BackendError, ExtractionEmpty, ValidationError
from .plugins import DEFAULT_TIMEOUT, PluginClient
from .scene_model import ObjectCutout


@dataclass(frozen=True)
class BoundingBox:
    x_min: int
    y_min: int
    x_max: int
    y_max: int
    category: str
    confidence: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValidationError(f"degenerate box {self}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValidationError(f"confidence {self.confidence} outside [0, 1]")

    def validate_within(self, shape: tuple[int, int]):
        h, w = shape
        if self.x_min < 0 or self.y_min < 0 or self.x_max > w or self.y_max > h:
            raise ValidationError(f"box {self} outside image {h}×{w}")


class ExtractorBackend(Protocol):
    """detect(image) -> boxes; segment(image, box) -> full-frame binary mask."""

    name: str

    def detect(self, image: np.ndarray) -> list[BoundingBox]: ...

    def segment(self, image: np.ndarray, box: BoundingBox) -> np.ndarray: ...


def chroma_distance(image: np.ndarray, chroma_key: tuple[int, int, int]) -> np.ndarray:
    """Max-channel absolute distance from the key color, per pixel."""
    diff = image.astype(np.int16) - np.asarray(chroma_key, dtype=np.int16)
    return np.abs(diff).max(axis=2)


class OracleChromaBackend:
    """Deterministic stand-in for the detect+segment model chain.

    Objects are whatever is not the key color; each connected component
    becomes one detection (confidence 1.0, largest first).
    """

    def __init__(self, chroma_key=(0, 255, 0), tolerance: int = 10,
                 category: str = "object", min_area: int = 4):
        self.chroma_key = tuple(chroma_key)
        self.tolerance = int(tolerance)
        self.category = category
        self.min_area = min_area
        self.name = "oracle_chroma"

    def _foreground(self, image: np.ndarray) -> np.ndarray:
        return (chroma_distance(image, self.chroma_key) > self.tolerance).astype(np.uint8)

    def detect(self, image: np.ndarray) -> list[BoundingBox]:
        fg = self._foreground(image)
        labels, n = ndimage.label(fg, structure=np.ones((3, 3), dtype=int))
        boxes = []
        for sl in ndimage.find_objects(labels):
            if sl is None:
                continue
            area = int(np.count_nonzero(labels[sl]))
            if area < self.min_area:
                continue
            boxes.append(BoundingBox(
                x_min=sl[1].start, y_min=sl[0].start,
                x_max=sl[1].stop, y_max=sl[0].stop,
                category=self.category, confidence=1.0))
        boxes.sort(key=lambda b: (b.x_max - b.x_min) * (b.y_max - b.y_min), reverse=True)
        return boxes

    def segment(self, image: np.ndarray, box: BoundingBox) -> np.ndarray:
        mask = np.zeros(image.shape[:2], dtype=np.uint8)
        window = np.s_[box.y_min:box.y_max, box.x_min:box.x_max]
        mask[window] = self._foreground(image)[window]
        return mask


class MaskPairBackend:
    """Serves precomputed masks from ``<img>.png`` + ``<img>_mask.png`` pairs.

    Useful for datasets that already ship pixel annotations (pedestrian
    sets with per-instance masks); no model runs at all.
    """

    mask_suffix = "_mask"

    def __init__(self, directory: str | Path, category: str = "object"):
        self.directory = Path(directory)
        self.category = category
        self.name = "mask_pairs"
        self._by_shape: dict = {}
        for img_path in sorted(self.directory.glob("*.png")):
            if img_path.stem.endswith(self.mask_suffix):
                continue
            mask_path = img_path.with_name(img_path.stem + self.mask_suffix + ".png")
            if mask_path.is_file():
                self._by_shape[img_path.stem] = (img_path, mask_path)
        self._cache: dict = {}

    def pairs(self) -> list[tuple[Path, Path]]:
        return list(self._by_shape.values())

    def _mask_for(self, image: np.ndarray) -> np.ndarray:
        key = image.tobytes()
        if key not in self._cache:
            for img_path, mask_path in self._by_shape.values():
                candidate = raster.load_image(img_path)
                if candidate.shape == image.shape and np.array_equal(candidate, image):
                    self._cache[key] = raster.load_mask(mask_path)
                    break
            else:
                raise BackendError(
                    f"backend {self.name!r}: image not found among mask pairs "
                    f"in {self.directory}")
        return self._cache[key]

    def detect(self, image: np.ndarray) -> list[BoundingBox]:
        mask = self._mask_for(image)
        if not mask.any():
            return []
        rows = np.flatnonzero(mask.any(axis=1))
        cols = np.flatnonzero(mask.any(axis=0))
        return [BoundingBox(int(cols[0]), int(rows[0]),
                            int(cols[-1]) + 1, int(rows[-1]) + 1,
                            category=self.category, confidence=1.0)]

    def segment(self, image: np.ndarray, box: BoundingBox) -> np.ndarray:
        return self._mask_for(image)


class PluginBackend:
    """Detector/segmenter running as a subprocess (pretrained model weights).

    Requests: ``{"op":"detect","image":<path>,"categories":[...]}`` and
    ``{"op":"segment","image":<path>,"box":[x0,y0,x1,y1]}``. Responses:
    ``{"boxes":[{x_min,y_min,x_max,y_max,category,confidence},...]}`` and
    ``{"mask": <path-to-written-png>}``.
    """

    def __init__(self, command: str, categories: list[str] | None = None,
                 timeout: float = DEFAULT_TIMEOUT, workdir: str | Path | None = None):
        self.client = PluginClient(command, timeout=timeout)
        self.categories = list(categories) if categories else []
        self.name = f"plugin:{self.client.name}"
        self.workdir = Path(workdir) if workdir else None

    def _image_path(self, image: np.ndarray) -> Path:
        import tempfile
        directory = self.workdir or Path(tempfile.gettempdir())
        directory.mkdir(parents=True, exist_ok=True)
        digest = abs(hash(image.tobytes())) % 10**12
        path = directory / f"railsynth_plugin_{digest}.png"
        if not path.exists():
            raster.save_image(path, image)
        return path

    def detect(self, image: np.ndarray) -> list[BoundingBox]:
        response = self.client.request({
            "op": "detect",
            "image": str(self._image_path(image)),
            "categories": self.categories,
        })
        boxes = response.get("boxes")
        if boxes is None:
            raise BackendError(f"backend {self.name!r}: response missing 'boxes'")
        out = []
        for entry in boxes:
            try:
                out.append(BoundingBox(
                    int(entry["x_min"]), int(entry["y_min"]),
                    int(entry["x_max"]), int(entry["y_max"]),
                    category=str(entry.get("category", "object")),
                    confidence=float(entry.get("confidence", 0.0))))
            except (KeyError, TypeError, ValueError) as exc:
                raise BackendError(
                    f"backend {self.name!r}: malformed box {entry!r}: {exc}") from exc
        return out

    def segment(self, image: np.ndarray, box: BoundingBox) -> np.ndarray:
        response = self.client.request({
            "op": "segment",
            "image": str(self._image_path(image)),
            "box": [box.x_min, box.y_min, box.x_max, box.y_max],
        })
        mask_path = response.get("mask")
        if not mask_path:
            raise BackendError(f"backend {self.name!r}: response missing 'mask'")
        mask = raster.load_mask(mask_path)
        if mask.shape != image.shape[:2]:
            raise BackendError(
                f"backend {self.name!r}: mask shape {mask.shape} does not match "
                f"image {image.shape[:2]}")
        return mask

    def close(self):
        self.client.close()


def detect_objects(image: np.ndarray, allowed_categories: set[str],
                   backend: ExtractorBackend,
                   min_confidence: float = 0.0) -> list[BoundingBox]:
    """Detect objects, keep allowed categories, sort by descending confidence."""
    if image.size == 0:
        raise ValidationError("empty image")
    if not allowed_categories:
        raise ValidationError("allowed_categories must be nonempty")
    try:
        boxes = backend.detect(image)
    except (BackendError, ValidationError):
        raise
    except Exception as exc:
        raise BackendError(f"backend {backend.name!r} failed: {exc}") from exc
    kept = [b for b in boxes
            if b.category in allowed_categories and b.confidence >= min_confidence]
    for box in kept:
        box.validate_within(image.shape[:2])
    kept.sort(key=lambda b: b.confidence, reverse=True)
    return kept


def segment_from_box(image: np.ndarray, box: BoundingBox,
                     backend: ExtractorBackend) -> np.ndarray:
    """Segment within a prompting box; spilled pixels are clipped, not rejected."""
    box.validate_within(image.shape[:2])
    try:
        mask = backend.segment(image, box)
    except (BackendError, ExtractionEmpty):
        raise
    except Exception as exc:
        raise BackendError(f"backend {backend.name!r} failed: {exc}") from exc
    if mask.shape != image.shape[:2]:
        raise BackendError(
            f"backend {backend.name!r}: mask shape {mask.shape} does not match "
            f"image {image.shape[:2]}")
    clipped = np.zeros_like(mask, dtype=np.uint8)
    window = np.s_[box.y_min:box.y_max, box.x_min:box.x_max]
    clipped[window] = (mask[window] > 0).astype(np.uint8)
    if not clipped.any():
        raise ExtractionEmpty(f"no object pixels inside box {box}")
    return clipped


def extract_cutout(image: np.ndarray, mask: np.ndarray,
                   category: str = "object", source_id: str = "") -> ObjectCutout:
    """Tight-crop the masked pixels into an ObjectCutout."""
    if mask.shape != image.shape[:2]:
        raise ValidationError(
            f"mask shape {mask.shape} does not match image {image.shape[:2]}")
    if not mask.any():
        raise ExtractionEmpty("mask has no nonzero pixel")
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    window = np.s_[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]
    patch = np.ascontiguousarray(image[window])
    alpha = np.ascontiguousarray((mask[window] > 0).astype(np.uint8))
    return ObjectCutout(patch=patch, alpha=alpha, category=category,
                        source_id=source_id,
                        native_size=(patch.shape[0], patch.shape[1]))


def oracle_extract(image: np.ndarray, chroma_key=(0, 255, 0),
                   tolerance: int = 10, category: str = "object",
                   source_id: str = "") -> ObjectCutout:
    """Chroma-key extraction: alpha = pixels farther than tolerance from the key."""
    fg = (chroma_distance(image, chroma_key) > tolerance).astype(np.uint8)
    if not fg.any():
        raise ExtractionEmpty(
            f"all pixels within tolerance {tolerance} of chroma key {chroma_key}")
    return extract_cutout(image, fg, category=category, source_id=source_id)
