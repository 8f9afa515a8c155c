"""Turn BaseScenes + ObjectCutouts into CompositeSamples.

The synthesis recipe: rescale the cutout by its anchor depth (pasted
height grows linearly with the anchor row, preserving aspect ratio),
hard-paste it bottom-centered on the anchor, and emit a pseudo frame pair
by pasting the same cutout again at a small positional shift. Ground-truth
masks come for free: visible railway = railway ROI minus the paste
footprint, exactly.

Pastes are hard (no feathering) so the stored masks stay pixel-exact;
``feather`` exists as an off-by-default escape hatch and trades mask
exactness for blending, so nothing in this package enables it.
"""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import cv2
import numpy as np
from scipy import ndimage

from . import raster
from .errors import ConfigError, ObjectTooSmall, PlacementOutOfFrame, ValidationError
from .scene_model import (
    CATEGORY_VALUES,
    WEATHER_VALUES,
    BaseScene,
    CompositeSample,
    ObjectCutout,
    PlacementSpec,
    RescaleParams,
    SampleRecord,
    write_manifest,
)

log = logging.getLogger(__name__)

MIN_PASTE_HEIGHT = 8
MARGIN_PX = 16          # dilation radius for placement_region=railway_and_margin
MAX_PLACEMENT_TRIES = 200


@dataclass(frozen=True)
class SynthesisConfig:
    counts: dict = field(default_factory=lambda: {"person": 0, "animal": 0, "texture": 0})
    rescale: RescaleParams = field(default_factory=RescaleParams)
    shift_range: tuple[int, int] = (5, 10)
    global_seed: int = 0
    placement_region: str = "railway_only"

    def __post_init__(self):
        for cat, n in self.counts.items():
            if cat not in CATEGORY_VALUES:
                raise ConfigError(f"counts.{cat}: unknown category")
            if n < 0:
                raise ConfigError(f"counts.{cat}: must be >= 0, got {n}")
        lo, hi = self.shift_range
        if lo < 1:
            raise ConfigError(f"shift_range: lo must be >= 1, got {lo}")
        if lo > hi:
            raise ConfigError(f"shift_range: lo {lo} > hi {hi}")
        if self.placement_region not in ("railway_only", "railway_and_margin"):
            raise ConfigError(
                f"placement_region: {self.placement_region!r} not in "
                f"['railway_only', 'railway_and_margin']")

    def total(self) -> int:
        return sum(self.counts.values())


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def rescale_cutout(cutout: ObjectCutout, anchor_y: int,
                   params: RescaleParams) -> ObjectCutout:
    """Resize a cutout for pasting at the given anchor row.

    Output height is ``round(alpha*anchor_y + beta)``; width scales to
    preserve the patch aspect ratio. The alpha mask is resampled with
    nearest-neighbor and re-binarized; if resampling empties a boundary
    row or column the result is re-tightened (a no-op for dense alphas).
    """
    if anchor_y < 0:
        raise ValidationError(f"anchor_y must be >= 0, got {anchor_y}")
    h_out = params.height_at(anchor_y)
    if h_out < MIN_PASTE_HEIGHT:
        raise ObjectTooSmall(
            f"rescaled height {h_out} px below minimum {MIN_PASTE_HEIGHT} "
            f"(anchor_y={anchor_y}, {params})")
    h_in, w_in = cutout.size
    w_out = max(1, _round_half_up(h_out / h_in * w_in))
    interp = cv2.INTER_AREA if h_out < h_in else cv2.INTER_LINEAR
    patch = cv2.resize(cutout.patch, (w_out, h_out), interpolation=interp)
    alpha = cv2.resize(cutout.alpha, (w_out, h_out), interpolation=cv2.INTER_NEAREST)
    alpha = (alpha > 0).astype(np.uint8)
    if not alpha.any():
        raise ObjectTooSmall(
            f"alpha vanished when resampling {cutout.size} -> ({h_out}, {w_out})")
    rows = np.flatnonzero(alpha.any(axis=1))
    cols = np.flatnonzero(alpha.any(axis=0))
    window = np.s_[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]
    return ObjectCutout(patch=np.ascontiguousarray(patch[window]),
                        alpha=np.ascontiguousarray(alpha[window]),
                        category=cutout.category, source_id=cutout.source_id,
                        native_size=cutout.native_size)


def footprint_window(shape: tuple[int, int], cutout: ObjectCutout,
                     anchor: tuple[int, int]):
    """Frame/cutout index windows for a bottom-center anchored paste.

    Returns (frame_slice, cutout_slice) clipped to the frame, or None when
    the footprint misses the frame entirely.
    """
    frame_h, frame_w = shape
    h, w = cutout.size
    x, y = anchor
    left = x - w // 2
    top = y - h + 1
    fr0, fr1 = max(0, top), min(frame_h, top + h)
    fc0, fc1 = max(0, left), min(frame_w, left + w)
    if fr0 >= fr1 or fc0 >= fc1:
        return None
    cr0, cc0 = fr0 - top, fc0 - left
    return (np.s_[fr0:fr1, fc0:fc1],
            np.s_[cr0:cr0 + (fr1 - fr0), cc0:cc0 + (fc1 - fc0)])


def paste(scene: BaseScene, cutout: ObjectCutout, anchor: tuple[int, int],
          feather: bool = False) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Hard-paste a cutout; returns (image, visible_railway_mask, footprint_mask).

    Pixels outside the footprint are bit-equal to the base scene. The
    footprint is the alpha placed in frame coordinates, clipped to frame;
    the visible mask is ``railway_mask AND NOT footprint``.
    """
    windows = footprint_window(scene.shape, cutout, anchor)
    if windows is None:
        raise PlacementOutOfFrame(
            f"cutout {cutout.size} anchored at {anchor} misses frame {scene.shape}")
    frame_win, cut_win = windows
    image = scene.image.copy()
    footprint = np.zeros(scene.shape, dtype=np.uint8)
    alpha = cutout.alpha[cut_win]
    footprint[frame_win] = alpha
    if feather:
        soft = cv2.GaussianBlur(alpha.astype(np.float32), (3, 3), 0)[..., None]
        region = image[frame_win].astype(np.float32)
        blended = soft * cutout.patch[cut_win].astype(np.float32) + (1 - soft) * region
        image[frame_win] = np.where(alpha[..., None] > 0,
                                    blended.round().astype(np.uint8),
                                    image[frame_win])
    else:
        image[frame_win] = np.where(alpha[..., None] > 0,
                                    cutout.patch[cut_win], image[frame_win])
    visible = (scene.railway_mask.astype(bool) & ~footprint.astype(bool)).astype(np.uint8)
    return image, visible, footprint


def _convex_hull(points: np.ndarray) -> np.ndarray:
    """Andrew's monotone chain; returns hull vertices counterclockwise."""
    pts = points[np.lexsort((points[:, 1], points[:, 0]))]

    def cross2(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    def half(iterable):
        chain = []
        for p in iterable:
            while len(chain) >= 2 and cross2(chain[-2], chain[-1], p) <= 0:
                chain.pop()
            chain.append(p)
        return chain

    lower = half(pts)
    upper = half(pts[::-1])
    return np.array(lower[:-1] + upper[:-1], dtype=np.float64)


def rasterize_convex_polygon(vertices: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Binary mask of pixels whose integer centers lie inside the convex polygon.

    Works for either vertex orientation: the half-plane test sign follows
    the polygon's signed area.
    """
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w]
    n = len(vertices)
    x = vertices[:, 0]
    y = vertices[:, 1]
    signed_area = np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)
    sign = 1.0 if signed_area >= 0 else -1.0
    inside = np.ones(shape, dtype=bool)
    for i in range(n):
        px, py = vertices[i]
        qx, qy = vertices[(i + 1) % n]
        cross = (qx - px) * (ys - py) - (qy - py) * (xs - px)
        inside &= sign * cross >= -1e-9
    return inside.astype(np.uint8)


def random_textured_polygon(texture_image: np.ndarray, rng: np.random.Generator,
                            radius_range: tuple[float, float] = (16.0, 48.0)) -> ObjectCutout:
    """Convex polygon with 3-8 vertices, filled by tiling the texture.

    Out-of-distribution obstacle generator: the shape never resembles a
    training category. Deterministic under a fixed rng state.
    """
    if texture_image.shape[0] < 32 or texture_image.shape[1] < 32:
        raise ValidationError(
            f"texture must be at least 32×32, got {texture_image.shape[:2]}")
    while True:
        n = int(rng.integers(3, 9))
        radius = rng.uniform(*radius_range)
        angles = np.sort(rng.uniform(0.0, 2.0 * np.pi, size=n))
        radii = rng.uniform(0.5, 1.0, size=n) * radius
        pts = np.stack([radii * np.cos(angles), radii * np.sin(angles)], axis=1)
        uniq = np.unique(pts.round(6), axis=0)
        if len(uniq) < 3:
            continue
        hull = _convex_hull(uniq)
        if len(hull) >= 3:
            break
    hull -= hull.min(axis=0, keepdims=True)
    extent = hull.max(axis=0)
    w = max(1, int(np.ceil(extent[0])) + 1)
    h = max(1, int(np.ceil(extent[1])) + 1)
    alpha = rasterize_convex_polygon(hull, (h, w))
    if not alpha.any():
        # degenerate sliver: fall back to a 1-px seed at the centroid
        cy, cx = int(round(hull[:, 1].mean())), int(round(hull[:, 0].mean()))
        alpha[min(cy, h - 1), min(cx, w - 1)] = 1
    reps = (int(np.ceil(h / texture_image.shape[0])),
            int(np.ceil(w / texture_image.shape[1])), 1)
    patch = np.tile(texture_image, reps)[:h, :w]
    from .cutout_extraction import extract_cutout
    return extract_cutout(patch, alpha, category="texture", source_id="polygon")


def generate_pair(scene: BaseScene, cutout: ObjectCutout, anchor: tuple[int, int],
                  shift: tuple[int, int], rescale: RescaleParams | None = None,
                  seed: int = 0, shift_range: tuple[int, int] = (5, 10),
                  weather: str | None = None) -> CompositeSample:
    """Paste the same cutout twice, shifted, on the same scene.

    frame_t anchors the cutout at ``anchor``; frame_t1 at ``anchor+shift``.
    The frames therefore differ only inside the union of the two paste
    footprints, and each frame's mask is exact by construction.
    """
    dx, dy = shift
    lo, hi = shift_range
    if not (lo <= dx <= hi and lo <= dy <= hi):
        raise ValidationError(
            f"shift {shift} outside configured range [{lo}, {hi}]")
    frame_t, mask_t, _ = paste(scene, cutout, anchor)
    frame_t1, mask_t1, _ = paste(scene, cutout, (anchor[0] + dx, anchor[1] + dy))
    placement = PlacementSpec(anchor=(int(anchor[0]), int(anchor[1])),
                              shift=(int(dx), int(dy)),
                              rescale=rescale or RescaleParams())
    return CompositeSample(
        frame_t=frame_t, frame_t1=frame_t1, mask_t=mask_t, mask_t1=mask_t1,
        placement=placement, scene_id=scene.scene_id, seed=int(seed),
        weather=weather or scene.weather, category=cutout.category)


def augment(sample: CompositeSample, rng) -> CompositeSample:
    """Train-time augmentation: flip, coarse dropout, brightness/contrast.

    Each transform fires with probability 0.5. Dropout and jitter apply
    identical parameters to both frames (fill from frame_t's channel
    means) so the pair still differs only inside the obstacle footprints;
    masks are never touched. A flip toggles ``hflipped`` so the training
    loader can mirror the flow raster and negate its dx channel.
    """
    gates = rng.random(3)
    frame_t, frame_t1 = sample.frame_t, sample.frame_t1
    mask_t, mask_t1 = sample.mask_t, sample.mask_t1
    hflipped = sample.hflipped

    if gates[0] < 0.5:
        frame_t = np.flip(frame_t, axis=1).copy()
        frame_t1 = np.flip(frame_t1, axis=1).copy()
        mask_t = np.flip(mask_t, axis=1).copy()
        mask_t1 = np.flip(mask_t1, axis=1).copy()
        hflipped = not hflipped

    if gates[1] < 0.5:
        h, w = frame_t.shape[:2]
        fill = frame_t.reshape(-1, 3).mean(axis=0).round().astype(np.uint8)
        frame_t = frame_t.copy()
        frame_t1 = frame_t1.copy()
        for _ in range(int(rng.integers(1, 5))):
            frac = rng.uniform(0.01, 0.10)
            aspect = rng.uniform(0.5, 2.0)
            rh = min(h, max(1, _round_half_up(np.sqrt(frac * h * w * aspect))))
            rw = min(w, max(1, _round_half_up(np.sqrt(frac * h * w / aspect))))
            while rh * rw > 0.10 * h * w and rw > 1:
                rw -= 1
            top = int(rng.integers(0, h - rh + 1))
            left = int(rng.integers(0, w - rw + 1))
            frame_t[top:top + rh, left:left + rw] = fill
            frame_t1[top:top + rh, left:left + rw] = fill

    if gates[2] < 0.5:
        scale = rng.uniform(0.8, 1.2)
        offset = rng.uniform(-20.0, 20.0)
        jitter = lambda f: np.clip(
            f.astype(np.float32) * scale + offset, 0, 255).astype(np.uint8)
        frame_t = jitter(frame_t)
        frame_t1 = jitter(frame_t1)

    return sample.with_frames(frame_t, frame_t1, mask_t, mask_t1, hflipped=hflipped)


def sample_seed(global_seed: int, index: int) -> int:
    """Stable per-sample seed: mixes (global_seed, index) via SeedSequence."""
    ss = np.random.SeedSequence(entropy=int(global_seed), spawn_key=(int(index),))
    return int(ss.generate_state(1, np.uint64)[0])


def placement_region_mask(scene: BaseScene, placement_region: str) -> np.ndarray:
    if placement_region == "railway_and_margin":
        return ndimage.binary_dilation(
            scene.railway_mask.astype(bool),
            structure=np.ones((3, 3), dtype=bool),
            iterations=MARGIN_PX).astype(np.uint8)
    return scene.railway_mask


class _SamplePlan:
    """Deterministic schedule: sample index -> (scene, category, seed)."""

    def __init__(self, scenes: Sequence[BaseScene], config: SynthesisConfig):
        self.config = config
        by_weather = {w: [s for s in scenes if s.weather == w] for w in WEATHER_VALUES}
        missing = [w for w, group in by_weather.items() if not group]
        if missing:
            warnings.warn(f"no scenes for weather value(s) {missing}; "
                          f"dataset will not be weather-balanced")
        self.weathers = [w for w in WEATHER_VALUES if by_weather[w]]
        if not self.weathers:
            raise ConfigError("no valid scenes supplied")
        self.by_weather = by_weather
        self.categories = []
        for cat in CATEGORY_VALUES:
            self.categories.extend([cat] * config.counts.get(cat, 0))

    def __len__(self) -> int:
        return len(self.categories)

    def entry(self, index: int) -> tuple[BaseScene, str, int]:
        weather = self.weathers[index % len(self.weathers)]
        group = self.by_weather[weather]
        scene = group[(index // len(self.weathers)) % len(group)]
        return scene, self.categories[index], sample_seed(self.config.global_seed, index)


def synthesize_sample(scene: BaseScene, cutout_pools: dict, category: str,
                      config: SynthesisConfig, seed: int) -> CompositeSample:
    """Generate one sample: pick cutout, place it, emit the frame pair.

    The anchor is drawn uniformly from the placement region, rejecting
    draws whose rescaled footprint misses the railway or the frame.
    """
    rng = np.random.default_rng(seed)
    pool = cutout_pools[category]
    choice = int(rng.integers(len(pool)))
    if category == "texture":
        cutout = random_textured_polygon(pool[choice], rng)
    else:
        cutout = pool[choice]
    lo, hi = config.shift_range
    dx = int(rng.integers(lo, hi + 1))
    dy = int(rng.integers(lo, hi + 1))
    region = placement_region_mask(scene, config.placement_region)
    region_yx = np.argwhere(region > 0)
    railway = scene.railway_mask
    for _ in range(MAX_PLACEMENT_TRIES):
        y, x = (int(v) for v in region_yx[int(rng.integers(len(region_yx)))])
        try:
            rescaled = rescale_cutout(cutout, y, config.rescale)
        except ObjectTooSmall:
            continue
        win_t = footprint_window(scene.shape, rescaled, (x, y))
        win_t1 = footprint_window(scene.shape, rescaled, (x + dx, y + dy))
        if win_t is None or win_t1 is None:
            continue
        frame_win, cut_win = win_t
        if not (railway[frame_win] & rescaled.alpha[cut_win]).any():
            continue
        return generate_pair(scene, rescaled, (x, y), (dx, dy),
                             rescale=config.rescale, seed=seed,
                             shift_range=config.shift_range)
    raise ValidationError(
        f"could not place a {category!r} cutout on scene {scene.scene_id!r} "
        f"after {MAX_PLACEMENT_TRIES} tries")


def iter_samples(scenes: Sequence[BaseScene], cutout_pools: dict,
                 config: SynthesisConfig) -> Iterator[CompositeSample]:
    """Generate samples one by one (index order), without touching disk."""
    plan = _check_and_plan(scenes, cutout_pools, config)
    for i in range(len(plan)):
        scene, category, seed = plan.entry(i)
        yield synthesize_sample(scene, cutout_pools, category, config, seed)


def _check_and_plan(scenes, cutout_pools, config) -> _SamplePlan:
    for cat, n in config.counts.items():
        if n > 0 and not cutout_pools.get(cat):
            raise ConfigError(f"counts.{cat} is {n} but the {cat!r} cutout pool is empty")
    return _SamplePlan(scenes, config)


_WORKER_STATE: dict = {}


def _pool_init(scenes, cutout_pools, config):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        _WORKER_STATE["plan"] = _SamplePlan(scenes, config)
    _WORKER_STATE["pools"] = cutout_pools
    _WORKER_STATE["config"] = config


def _pool_task(args):
    index, out_dir = args
    plan = _WORKER_STATE["plan"]
    scene, category, seed = plan.entry(index)
    sample = synthesize_sample(scene, _WORKER_STATE["pools"], category,
                               _WORKER_STATE["config"], seed)
    rels = _write_sample(sample, index, Path(out_dir))
    return index, rels, _record_fields(sample)


def _record_fields(sample: CompositeSample) -> tuple:
    return (sample.scene_id, int(sample.seed), sample.weather, sample.category,
            int(sample.placement.anchor[0]), int(sample.placement.anchor[1]),
            int(sample.placement.shift[0]), int(sample.placement.shift[1]))


def _write_sample(sample: CompositeSample, index: int, out_dir: Path):
    name = f"{index:06d}_{sample.scene_id}_{sample.category}"
    rels = (f"frames/{name}_t.png", f"frames/{name}_t1.png",
            f"masks/{name}_t.png", f"masks/{name}_t1.png")
    raster.save_image(out_dir / rels[0], sample.frame_t)
    raster.save_image(out_dir / rels[1], sample.frame_t1)
    raster.save_mask(out_dir / rels[2], sample.mask_t)
    raster.save_mask(out_dir / rels[3], sample.mask_t1)
    return rels


def synthesize_dataset(scenes: Sequence[BaseScene], cutout_pools: dict,
                       config: SynthesisConfig, out_dir: str | Path,
                       jobs: int = 1,
                       on_sample: Callable[[int, CompositeSample], None] | None = None) -> Path:
    """Generate the configured dataset and write its manifest.

    Output is a function of (scenes, pools, config) alone: every sample's
    rng derives from (global_seed, sample_index), so worker scheduling
    cannot change the result. ``on_sample`` (serial path only) observes
    each in-memory sample as it is produced. Returns the manifest path.
    """
    out_dir = Path(out_dir)
    plan = _check_and_plan(scenes, cutout_pools, config)
    total = len(plan)
    out_dir.mkdir(parents=True, exist_ok=True)

    paths: list[tuple | None] = [None] * total
    fields: list[tuple | None] = [None] * total
    if jobs > 1 and total > 1 and on_sample is None:
        with ProcessPoolExecutor(max_workers=jobs, initializer=_pool_init,
                                 initargs=(list(scenes), cutout_pools, config)) as pool:
            tasks = [(i, str(out_dir)) for i in range(total)]
            for index, rels, rec in pool.map(_pool_task, tasks, chunksize=8):
                paths[index] = rels
                fields[index] = rec
    else:
        for i in range(total):
            scene, category, seed = plan.entry(i)
            sample = synthesize_sample(scene, cutout_pools, category, config, seed)
            paths[i] = _write_sample(sample, i, out_dir)
            fields[i] = _record_fields(sample)
            if on_sample is not None:
                on_sample(i, sample)
            if total >= 50 and (i + 1) % 50 == 0:
                log.info("synthesized %d/%d samples", i + 1, total)

    records = []
    for rec, rels in zip(fields, paths):
        scene_id, seed, weather, category, ax, ay, dx, dy = rec
        records.append(SampleRecord(
            scene_id=scene_id, seed=seed, frame_t=rels[0], frame_t1=rels[1],
            mask_t=rels[2], mask_t1=rels[3], weather=weather, category=category,
            anchor_x=ax, anchor_y=ay, dx=dx, dy=dy))
    manifest_path = out_dir / "manifest.jsonl"
    write_manifest(records, manifest_path)
    return manifest_path
