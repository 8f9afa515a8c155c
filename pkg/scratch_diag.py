"""Scratch: dissect specific failing pairs."""
import numpy as np
from scipy import ndimage

from railsynth import sampledata
from railsynth.compositor import RescaleParams, SynthesisConfig, iter_samples
from railsynth.optical_flow import FlowSolverParams, estimate_flow
from scratch_flow import build_pools

scenes = sampledata.make_scenes(seed=1, per_weather=2, size=(128, 176))
scenesdict = {s.scene_id: s for s in scenes}
pools = build_pools()
cfg = SynthesisConfig(counts={"person": 20, "animal": 20, "texture": 10},
                      rescale=RescaleParams(0.6, 30.0), shift_range=(5, 10),
                      global_seed=42)

targets = {44, 27, 48, 40, 3, 16}
for i, sample in enumerate(iter_samples(scenes, pools, cfg)):
    if i not in targets:
        continue
    true = np.array(sample.placement.shift, dtype=np.float64)
    base = scenesdict[sample.scene_id].image
    foot_t = (sample.frame_t != base).any(axis=2)
    rows = np.flatnonzero(foot_t.any(axis=1))
    cols = np.flatnonzero(foot_t.any(axis=0))
    H, W = foot_t.shape
    clip_info = (rows[0], H - 1 - rows[-1], cols[0], W - 1 - cols[-1])
    flow = estimate_flow(sample.frame_t, sample.frame_t1, FlowSolverParams())
    err = np.hypot(flow.dx - true[0], flow.dy - true[1])
    interior = ndimage.binary_erosion(foot_t, iterations=5)
    ring = foot_t & ~interior
    print(f"pair {i} cat={sample.category} shift={tuple(int(v) for v in true)} "
          f"anchor={sample.placement.anchor} fp={foot_t.sum()} "
          f"edge-dist(top,bot,left,right)={clip_info}")
    print(f"   med EPE: all={np.median(err[foot_t]):.2f} "
          f"interior={np.median(err[interior]) if interior.any() else -1:.2f} "
          f"ring={np.median(err[ring]):.2f}")
    med_dx = np.median(flow.dx[foot_t]); med_dy = np.median(flow.dy[foot_t])
    print(f"   median flow=({med_dx:.2f}, {med_dy:.2f})  "
          f"|flow|>2 outside union: "
          f"{(np.hypot(flow.dx, flow.dy) > 2)[~((sample.frame_t != sample.frame_t1).any(axis=2) | foot_t)].sum()}")
