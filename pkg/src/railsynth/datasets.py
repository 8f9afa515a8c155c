"""On-disk dataset conventions.

Scenes tree::

    scenes_dir/<weather>/<scene_id>.png        # RGB base image
    scenes_dir/<weather>/<scene_id>_mask.png   # railway-area mask

Objects tree::

    objects_dir/person/*.png    # object images (chroma or mask-pair style)
    objects_dir/animal/*.png
    objects_dir/texture/*.png   # texture sheets, used raw for polygons

Cutouts for person/animal go through the configured detect -> segment ->
extract chain; texture images are consumed directly by the polygon
generator.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

from . import raster
from .cutout_extraction import (
    MaskPairBackend,
    OracleChromaBackend,
    PluginBackend,
    detect_objects,
    extract_cutout,
    segment_from_box,
)
from .errors import ConfigError, ExtractionEmpty, ValidationError
from .scene_model import WEATHER_VALUES, BaseScene, validate_scene

log = logging.getLogger(__name__)

MASK_SUFFIX = "_mask"


@dataclass(frozen=True)
class DetectConfig:
    backend: str = "oracle_chroma"
    min_confidence: float = 0.5
    chroma_key: tuple[int, int, int] = (0, 255, 0)
    chroma_tolerance: int = 40
    plugin: str | None = None
    timeout: float = 30.0

    def __post_init__(self):
        if self.backend not in ("oracle_chroma", "mask_pairs", "plugin"):
            raise ConfigError(
                f"detect.backend: {self.backend!r} not in "
                f"['oracle_chroma', 'mask_pairs', 'plugin']")
        if self.backend == "plugin" and not self.plugin:
            raise ConfigError("detect.plugin: required when backend is 'plugin'")


def load_scenes_dir(scenes_dir: str | Path, strict: bool = True) -> list[BaseScene]:
    """Load every (image, mask) scene pair, keyed by weather subdirectory."""
    scenes_dir = Path(scenes_dir)
    if not scenes_dir.is_dir():
        raise ValidationError(f"scenes dir {scenes_dir} does not exist")
    scenes = []
    for weather_dir in sorted(p for p in scenes_dir.iterdir() if p.is_dir()):
        weather = weather_dir.name
        if weather not in WEATHER_VALUES:
            log.warning("skipping unknown weather directory %s", weather_dir)
            continue
        for img_path in sorted(weather_dir.glob("*.png")):
            if img_path.stem.endswith(MASK_SUFFIX):
                continue
            mask_path = img_path.with_name(img_path.stem + MASK_SUFFIX + ".png")
            if not mask_path.is_file():
                raise ValidationError(f"scene {img_path} has no mask {mask_path.name}")
            scene = BaseScene(image=raster.load_image(img_path),
                              railway_mask=raster.load_mask(mask_path),
                              weather=weather, scene_id=img_path.stem)
            if strict:
                violations = validate_scene(scene)
                if violations:
                    raise ValidationError(
                        f"scene {img_path}: " + "; ".join(violations))
            scenes.append(scene)
    if not scenes:
        raise ValidationError(f"no scenes found under {scenes_dir}")
    return scenes


def _extract_via_chain(image, category: str, backend, min_confidence: float,
                       source_id: str):
    boxes = detect_objects(image, {category}, backend, min_confidence=min_confidence)
    if not boxes:
        raise ExtractionEmpty(f"{source_id}: no {category!r} detections")
    mask = segment_from_box(image, boxes[0], backend)
    return extract_cutout(image, mask, category=category, source_id=source_id)


def build_cutout_pools(objects_dir: str | Path, detect: DetectConfig,
                       categories: tuple[str, ...] = ("person", "animal", "texture"),
                       ) -> dict[str, list]:
    """Extract cutout pools per category; texture stays raw images."""
    objects_dir = Path(objects_dir)
    pools: dict[str, list] = {}
    for category in categories:
        cat_dir = objects_dir / category
        entries = []
        if cat_dir.is_dir():
            if category == "texture":
                for img_path in sorted(cat_dir.glob("*.png")):
                    if not img_path.stem.endswith(MASK_SUFFIX):
                        entries.append(raster.load_image(img_path))
            else:
                entries = _extract_category(cat_dir, category, detect)
        pools[category] = entries
        log.info("pool %s: %d entries", category, len(entries))
    return pools


def _extract_category(cat_dir: Path, category: str, detect: DetectConfig) -> list:
    cutouts = []
    if detect.backend == "mask_pairs":
        backend = MaskPairBackend(cat_dir, category=category)
        for img_path, mask_path in backend.pairs():
            mask = raster.load_mask(mask_path)
            if not mask.any():
                log.warning("mask pair %s: empty mask, skipped", mask_path)
                continue
            cutouts.append(extract_cutout(raster.load_image(img_path), mask,
                                          category=category,
                                          source_id=img_path.stem))
        return cutouts

    if detect.backend == "plugin":
        backend = PluginBackend(detect.plugin, categories=[category],
                                timeout=detect.timeout)
    else:
        backend = OracleChromaBackend(chroma_key=detect.chroma_key,
                                      tolerance=detect.chroma_tolerance,
                                      category=category)
    try:
        for img_path in sorted(cat_dir.glob("*.png")):
            if img_path.stem.endswith(MASK_SUFFIX):
                continue
            try:
                cutouts.append(_extract_via_chain(
                    raster.load_image(img_path), category, backend,
                    detect.min_confidence, source_id=img_path.stem))
            except ExtractionEmpty as exc:
                log.warning("object image %s: %s", img_path, exc)
    finally:
        if detect.backend == "plugin":
            backend.close()
    return cutouts
