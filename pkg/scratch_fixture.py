"""Scratch: acceptance-style flow fixture (generate_pair with controlled anchors)."""
import time

import numpy as np

from railsynth import sampledata
from railsynth.compositor import (RescaleParams, footprint_window, generate_pair,
                                  random_textured_polygon, rescale_cutout)
from railsynth.cutout_extraction import oracle_extract
from railsynth.optical_flow import FlowSolverParams, estimate_flow, flow_magnitude_mask


def corridor_anchor(scene, rng, depth_lo=0.45, depth_hi=0.9):
    """Anchor inside the railway corridor, mid-depth, near its centerline."""
    mask = scene.railway_mask
    rows = np.flatnonzero(mask.any(axis=1))
    lo = rows[0] + int((rows[-1] - rows[0]) * depth_lo)
    hi = rows[0] + int((rows[-1] - rows[0]) * depth_hi)
    y = int(rng.integers(lo, hi + 1))
    cols = np.flatnonzero(mask[y])
    x = int(np.clip(int(cols.mean() + rng.integers(-6, 7)), cols[0], cols[-1]))
    return x, y


def make_pairs(n=50, size=(128, 176), seed=7, rescale=RescaleParams(0.45, 16.0)):
    scenes = sampledata.make_scenes(seed=1, per_weather=2, size=size)
    pools = {
        "person": [oracle_extract(sampledata.make_person_image(k), category="person",
                                  source_id=f"p{k}") for k in range(3)],
        "animal": [oracle_extract(sampledata.make_animal_image(7000 + k), category="animal",
                                  source_id=f"a{k}") for k in range(3)],
        "texture": [sampledata.make_texture_image(9000 + k) for k in range(3)],
    }
    cats = ["person", "animal", "texture"]
    pairs = []
    for i in range(n):
        rng = np.random.default_rng(seed * 10_000 + i)
        scene = scenes[i % len(scenes)]
        cat = cats[i % 3]
        pool = pools[cat]
        pick = pool[int(rng.integers(len(pool)))]
        cutout = random_textured_polygon(pick, rng) if cat == "texture" else pick
        dx = int(rng.integers(5, 11))
        dy = int(rng.integers(5, 11))
        for _ in range(100):
            x, y = corridor_anchor(scene, rng)
            scaled = rescale_cutout(cutout, y, rescale)
            h, w = scaled.size
            H, W = scene.shape
            # keep both footprints fully inside the frame
            left, top = x - w // 2, y - h + 1
            if (top >= 1 and left >= 1 and left + w + dx < W - 1
                    and y + dy < H - 1 and x + dx + w // 2 < W - 1):
                break
        else:
            continue
        sample = generate_pair(scene, scaled, (x, y), (dx, dy), rescale=rescale, seed=i)
        base = scene.image
        foot = (sample.frame_t != base).any(axis=2)
        pairs.append((sample, foot, (dx, dy)))
    return pairs


def evaluate(params, pairs, thresholds=(2.0, 2.5, 3.0), verbose=False):
    epes, pooled, rows = [], [], []
    ious = {t: [] for t in thresholds}
    t0 = time.time()
    sizes = []
    for idx, (sample, foot, (dx, dy)) in enumerate(pairs):
        flow = estimate_flow(sample.frame_t, sample.frame_t1, params)
        err = np.hypot(flow.dx - dx, flow.dy - dy)
        epes.append(float(np.median(err[foot])))
        pooled.append(err[foot])
        sizes.append(int(foot.sum()))
        for t in thresholds:
            mm = flow_magnitude_mask(flow, t)
            inter = np.logical_and(mm, foot).sum()
            union = np.logical_or(mm, foot).sum()
            ious[t].append(inter / union if union else 1.0)
        halo = (np.hypot(flow.dx, flow.dy) > thresholds[-1])[~(
            (sample.frame_t != sample.frame_t1).any(axis=2) | foot)].sum()
        rows.append((idx, sample.category, sample.scene_id, int(foot.sum()),
                     (dx, dy), round(epes[-1], 2), round(ious[thresholds[-1]][-1], 2),
                     int(halo)))
    dt = time.time() - t0
    epes = np.array(epes)
    pooled = np.concatenate(pooled)
    print(f"  n={len(epes)} t={dt:.1f}s fp-sizes med={int(np.median(sizes))} "
          f"min={min(sizes)} max={max(sizes)}")
    print(f"  EPE med-of-med={np.median(epes):.2f} pooled={np.median(pooled):.2f} "
          f"p90={np.percentile(epes, 90):.2f} max={epes.max():.2f}")
    for t in thresholds:
        arr = np.array(ious[t])
        print(f"   thr={t}: frac>=0.5={(arr >= 0.5).mean():.2f} mean={arr.mean():.2f} "
              f"min={arr.min():.2f}")
    if verbose:
        arr = np.array(ious[thresholds[-1]])
        for j in np.argsort(arr)[:10]:
            print("   lowIoU:", rows[j])


if __name__ == "__main__":
    pairs = make_pairs()
    print(f"pairs built: {len(pairs)}")
    evaluate(FlowSolverParams(), pairs)
