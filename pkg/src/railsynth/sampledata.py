"""Procedural desk-scale fixtures: railway scenes, object images, textures.

Everything here is synthetic and deterministic under a seed. The scenes
mimic the structure that matters to the pipeline: a textured ground
plane, a perspective railway corridor with ballast/rails/sleepers, and
three weather renditions (sunny, foggy, rainy) of each layout. Objects
are drawn on a flat chroma-green canvas so the chroma-key oracle can
extract them exactly like a detector/segmenter chain would.

Run ``python -m railsynth.sampledata --out <dir>`` to materialize a demo
tree ready for the CLI.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import ndimage

from . import raster
from .scene_model import WEATHER_VALUES, BaseScene

CHROMA_KEY = (0, 255, 0)


def _smooth_noise(rng, shape, sigma, lo=0.0, hi=1.0):
    noise = ndimage.gaussian_filter(rng.normal(size=shape), sigma)
    span = noise.max() - noise.min()
    if span < 1e-9:
        return np.full(shape, (lo + hi) / 2.0)
    return lo + (noise - noise.min()) / span * (hi - lo)


def make_scene(scene_id: str, weather: str, seed: int,
               size: tuple[int, int] = (120, 160)) -> BaseScene:
    """One synthetic railway scene with its railway-area mask."""
    if weather not in WEATHER_VALUES:
        raise ValueError(f"weather {weather!r} not in {list(WEATHER_VALUES)}")
    rng = np.random.default_rng(seed)
    h, w = size
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)

    # ground plane: mossy gravel
    ground = _smooth_noise(rng, size, sigma=2.0, lo=0.25, hi=0.6)
    grain = _smooth_noise(rng, size, sigma=0.6, lo=-0.08, hi=0.08)
    image = np.zeros((h, w, 3), dtype=np.float64)
    image[..., 0] = ground * 0.55 + grain
    image[..., 1] = ground * 0.7 + grain
    image[..., 2] = ground * 0.45 + grain

    # railway corridor: trapezoid narrowing toward the horizon, mild curve
    horizon = int(h * rng.uniform(0.18, 0.30))
    bottom_half = w * rng.uniform(0.16, 0.24)
    top_half = w * rng.uniform(0.03, 0.05)
    center0 = w * rng.uniform(0.40, 0.60)
    curve = w * rng.uniform(-0.10, 0.10)
    depth = np.clip((ys - horizon) / (h - 1 - horizon), 0.0, 1.0)
    center = center0 + curve * (1.0 - depth) ** 2
    half = top_half + (bottom_half - top_half) * depth
    corridor = (ys >= horizon) & (np.abs(xs - center) <= half)
    mask = corridor.astype(np.uint8)

    # ballast bed, rails, sleepers
    ballast = _smooth_noise(rng, size, sigma=0.8, lo=0.45, hi=0.75)
    for c in range(3):
        image[..., c] = np.where(corridor, ballast * (0.95 + 0.05 * c), image[..., c])
    rail_offset = 0.55 * half
    rail_width = np.maximum(1.0, 0.08 * half)
    for sign in (-1.0, 1.0):
        rail = corridor & (np.abs(xs - (center + sign * rail_offset)) <= rail_width)
        for c in range(3):
            image[..., c] = np.where(rail, 0.16 + 0.04 * c, image[..., c])
    sleeper_phase = (depth ** 0.5 * rng.uniform(9.0, 13.0)) % 1.0
    sleepers = corridor & (sleeper_phase < 0.28) & (ys > horizon + 2)
    for c in range(3):
        image[..., c] = np.where(sleepers, image[..., c] * 0.55, image[..., c])

    # sky band above the horizon: graded blue with cloud structure and grain
    sky = ys < horizon
    sky_shade = 0.7 + 0.25 * (1.0 - ys / max(horizon, 1))
    clouds = _smooth_noise(rng, size, sigma=3.0, lo=-0.08, hi=0.08)
    grain = _smooth_noise(rng, size, sigma=0.5, lo=-0.03, hi=0.03)
    sky_tex = sky_shade + clouds + grain
    image[..., 0] = np.where(sky, sky_tex * 0.85, image[..., 0])
    image[..., 1] = np.where(sky, sky_tex * 0.9, image[..., 1])
    image[..., 2] = np.where(sky, sky_tex, image[..., 2])

    if weather == "sunny":
        image = np.clip(image * 1.15 + 0.02, 0.0, 1.0)
    elif weather == "foggy":
        haze = 0.35 + 0.45 * (1.0 - depth)
        image = image * (1.0 - haze[..., None]) + 0.78 * haze[..., None]
    else:  # rainy
        image = image * 0.55
        image[..., 2] = np.clip(image[..., 2] * 1.25 + 0.04, 0.0, 1.0)
        streak = (_smooth_noise(rng, size, sigma=(6.0, 0.5)) > 0.8)
        image = np.clip(image + streak[..., None] * 0.08, 0.0, 1.0)

    return BaseScene(image=(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8),
                     railway_mask=mask, weather=weather, scene_id=scene_id)


def make_person_image(seed: int, size: tuple[int, int] = (120, 64)) -> np.ndarray:
    """A person-ish figure on chroma green: torso, head, legs, clothing noise."""
    rng = np.random.default_rng(seed)
    h, w = size
    img = np.zeros((h, w, 3), dtype=np.float64)
    img[:] = np.array(CHROMA_KEY) / 255.0
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    cx = w / 2 + rng.uniform(-2, 2)

    head_r = h * rng.uniform(0.07, 0.09)
    head_cy = h * 0.12
    torso_top, torso_bot = h * 0.2, h * 0.58
    torso_hw = w * rng.uniform(0.16, 0.24)
    leg_hw = torso_hw * 0.4
    skin = np.array([0.85, 0.65, 0.5]) * rng.uniform(0.8, 1.1)
    shirt = rng.uniform(0.15, 0.9, size=3)
    pants = rng.uniform(0.1, 0.6, size=3)

    head = (xs - cx) ** 2 + (ys - head_cy * (h / h)) ** 2 <= head_r ** 2
    torso = (np.abs(xs - cx) <= torso_hw) & (ys >= torso_top) & (ys <= torso_bot)
    gap = leg_hw * 0.3
    legs = ((ys > torso_bot) & (ys <= h * 0.97)
            & ((np.abs(xs - (cx - leg_hw - gap)) <= leg_hw)
               | (np.abs(xs - (cx + leg_hw + gap)) <= leg_hw)))
    # clothing folds: broadband (coarse + fine) so flow has something to grip
    cloth_noise = (_smooth_noise(rng, size, sigma=2.5, lo=-0.22, hi=0.22)
                   + _smooth_noise(rng, size, sigma=1.0, lo=-0.10, hi=0.10))
    for region, color in ((head, skin), (torso, shirt), (legs, pants)):
        for c in range(3):
            img[..., c] = np.where(region, color[c] + cloth_noise, img[..., c])
    return (np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)


def make_animal_image(seed: int, size: tuple[int, int] = (90, 130)) -> np.ndarray:
    """A quadruped silhouette (cow/deer-ish) on chroma green with fur noise."""
    rng = np.random.default_rng(seed)
    h, w = size
    img = np.zeros((h, w, 3), dtype=np.float64)
    img[:] = np.array(CHROMA_KEY) / 255.0
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)

    body_cy, body_cx = h * 0.45, w * 0.5
    body_a, body_b = w * rng.uniform(0.3, 0.38), h * rng.uniform(0.2, 0.26)
    fur = np.array([0.45, 0.3, 0.18]) * rng.uniform(0.7, 1.4)
    head_r = body_b * rng.uniform(0.6, 0.8)
    head_cx = body_cx + body_a * (1.0 if rng.random() < 0.5 else -1.0)
    head_cy = body_cy - body_b * 0.6

    body = (((xs - body_cx) / body_a) ** 2 + ((ys - body_cy) / body_b) ** 2) <= 1.0
    head = (xs - head_cx) ** 2 + (ys - head_cy) ** 2 <= head_r ** 2
    legs = np.zeros((h, w), dtype=bool)
    leg_hw = max(2.0, w * 0.03)
    for frac in (-0.7, -0.25, 0.25, 0.7):
        lx = body_cx + frac * body_a
        legs |= ((np.abs(xs - lx) <= leg_hw) & (ys > body_cy) & (ys <= h * 0.95))
    fur_noise = (_smooth_noise(rng, size, sigma=2.5, lo=-0.18, hi=0.18)
                 + _smooth_noise(rng, size, sigma=1.2, lo=-0.10, hi=0.10))
    patches = _smooth_noise(rng, size, sigma=3.0) > 0.65
    for region in (legs, body, head):
        for c in range(3):
            img[..., c] = np.where(region, fur[c] + fur_noise, img[..., c])
    for c in range(3):
        img[..., c] = np.where((body | head) & patches, 0.9 + fur_noise, img[..., c])
    return (np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)


def make_texture_image(seed: int, size: tuple[int, int] = (64, 64)) -> np.ndarray:
    """A DTD-like texture: marbled, striped, or blotchy, always broadband.

    Purely periodic motifs are avoided on purpose: a pattern shifted by
    one period is self-similar, which is unrepresentative of photographed
    textures and degenerate for motion estimation.
    """
    rng = np.random.default_rng(seed)
    h, w = size
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    kind = rng.integers(3)
    if kind == 0:       # marbled: multi-octave noise
        field = (_smooth_noise(rng, size, sigma=6.0, lo=-1, hi=1)
                 + 0.6 * _smooth_noise(rng, size, sigma=2.5, lo=-1, hi=1)
                 + 0.3 * _smooth_noise(rng, size, sigma=1.0, lo=-1, hi=1))
    elif kind == 1:     # wavy stripes distorted by noise
        theta = rng.uniform(0, np.pi)
        period = rng.uniform(8.0, 16.0)
        wobble = _smooth_noise(rng, size, sigma=4.0, lo=-1, hi=1) * period
        field = np.sin(2 * np.pi * (xs * np.cos(theta) + ys * np.sin(theta) + wobble)
                       / period)
        field += _smooth_noise(rng, size, sigma=3.0, lo=-0.8, hi=0.8)
    else:               # blotches: thresholded blobs over a soft base
        blobs = _smooth_noise(rng, size, sigma=3.0, lo=-1, hi=1)
        field = np.where(blobs > rng.uniform(-0.2, 0.2), 1.0, -1.0) * 0.7
        field += 0.5 * _smooth_noise(rng, size, sigma=1.5, lo=-1, hi=1)
    span = max(field.max() - field.min(), 1e-9)
    t = (field - field.min()) / span
    c1 = rng.uniform(0.1, 0.9, size=3)
    c2 = rng.uniform(0.1, 0.9, size=3)
    img = c1[None, None, :] * t[..., None] + c2[None, None, :] * (1.0 - t[..., None])
    img += _smooth_noise(rng, size, sigma=0.8, lo=-0.05, hi=0.05)[..., None]
    return (np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)


def make_scenes(seed: int = 0, per_weather: int = 2,
                size: tuple[int, int] = (120, 160)) -> list[BaseScene]:
    scenes = []
    for wi, weather in enumerate(WEATHER_VALUES):
        for k in range(per_weather):
            scenes.append(make_scene(f"{weather}{k:02d}", weather,
                                     seed=seed * 1000 + wi * 100 + k, size=size))
    return scenes


def write_demo_tree(root: str | Path, seed: int = 0, per_weather: int = 2,
                    objects_per_category: int = 4,
                    scene_size: tuple[int, int] = (120, 160)) -> dict:
    """Write a scenes/ + objects/ tree the CLI can consume directly."""
    root = Path(root)
    paths = {"scenes_dir": root / "scenes", "objects_dir": root / "objects"}
    for scene in make_scenes(seed=seed, per_weather=per_weather, size=scene_size):
        sub = paths["scenes_dir"] / scene.weather
        raster.save_image(sub / f"{scene.scene_id}.png", scene.image)
        raster.save_mask(sub / f"{scene.scene_id}_mask.png", scene.railway_mask)
    makers = {"person": make_person_image, "animal": make_animal_image,
              "texture": make_texture_image}
    for cat, maker in makers.items():
        for k in range(objects_per_category):
            img = maker(seed=seed * 500 + k + {"person": 0, "animal": 7000,
                                               "texture": 9000}[cat])
            raster.save_image(paths["objects_dir"] / cat / f"{cat}{k:02d}.png", img)
    return paths


def main(argv=None) -> int:
    import argparse

    parser = argparse.ArgumentParser(
        description="Write a synthetic demo scenes/objects tree")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--per-weather", type=int, default=2)
    parser.add_argument("--objects", type=int, default=4)
    parser.add_argument("--height", type=int, default=120)
    parser.add_argument("--width", type=int, default=160)
    args = parser.parse_args(argv)
    paths = write_demo_tree(args.out, seed=args.seed, per_weather=args.per_weather,
                            objects_per_category=args.objects,
                            scene_size=(args.height, args.width))
    print(f"scenes: {paths['scenes_dir']}")
    print(f"objects: {paths['objects_dir']}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
