"""Dense motion between pseudo frames under brightness constancy.

The built-in solver is a coarse-to-fine Horn-Schunck scheme: at each
pyramid level it minimizes the linearized data term
``(Ix*u + Iy*v + It)^2`` plus ``smoothness_weight * (|grad u|^2 + |grad v|^2)``
by fixed-point iteration, then upsamples and warps to the next finer
level. A single level cannot recover the 5-10 px object shifts this
pipeline produces; the pyramid is what makes them tractable.

Learned flow models plug in as subprocesses (see ``external_flow``), so
the built-in solver never blocks running the toolchain self-contained.
"""

from __future__ import annotations

import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from scipy import ndimage

from . import raster
from .errors import PluginError, ValidationError
from .plugins import DEFAULT_TIMEOUT, PluginClient

RSFL_MAGIC = b"RSFL"
FLOW_CLAMP_PX = 16.0     # fuse_inputs clamp, ~1.6x the max configured shift
MIN_PYRAMID_SIDE = 16
WARPS_PER_LEVEL = 3      # re-linearizations; the iteration budget is split across them
_MEDFILT = 5             # median-filter window applied after each warp round
_PRESMOOTH_SIGMA = 0.8   # Gaussian blur before differentiation, per warp round
_MAX_STEP = 4.0          # per-round increment clamp, px

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114], dtype=np.float32)  # ITU-R 601

_AVG_KERNEL = np.array([[1 / 12, 1 / 6, 1 / 12],
                        [1 / 6, 0.0, 1 / 6],
                        [1 / 12, 1 / 6, 1 / 12]], dtype=np.float32)


@dataclass(frozen=True)
class FlowField:
    """Per-pixel displacement from frame_t to frame_t1, in pixels."""

    dx: np.ndarray
    dy: np.ndarray

    def __post_init__(self):
        if self.dx.shape != self.dy.shape or self.dx.ndim != 2:
            raise ValidationError(
                f"flow channels must be matching 2-D rasters, "
                f"got {self.dx.shape} and {self.dy.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.dx.shape

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.dx, self.dy)

    def as_array(self) -> np.ndarray:
        return np.stack([self.dx, self.dy], axis=-1)


@dataclass(frozen=True)
class FlowSolverParams:
    smoothness_weight: float = 0.1
    iterations: int = 200
    pyramid_levels: int = 4

    def __post_init__(self):
        if self.smoothness_weight <= 0:
            raise ValidationError(
                f"smoothness_weight must be > 0, got {self.smoothness_weight}")
        if self.iterations < 1:
            raise ValidationError(f"iterations must be >= 1, got {self.iterations}")
        if self.pyramid_levels < 1:
            raise ValidationError(
                f"pyramid_levels must be >= 1, got {self.pyramid_levels}")


def to_luminance(frame: np.ndarray) -> np.ndarray:
    """RGB uint8 -> float32 luminance on the 8-bit [0, 255] scale.

    The solver's default smoothness_weight is calibrated against this
    scale; do not normalize to [0, 1] here.
    """
    return frame.astype(np.float32) @ LUMA_WEIGHTS


def _pyramid(image: np.ndarray, max_levels: int) -> list[np.ndarray]:
    """Factor-2 pyramid, finest first; coarsest short side stays >= 16 px."""
    levels = [image]
    while len(levels) < max_levels:
        h, w = levels[-1].shape
        nh, nw = (h + 1) // 2, (w + 1) // 2
        if min(nh, nw) < MIN_PYRAMID_SIDE:
            break
        levels.append(cv2.resize(levels[-1], (nw, nh), interpolation=cv2.INTER_AREA))
    return levels


def _warp(image: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    if not u.any() and not v.any():
        return image.copy()
    h, w = image.shape
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float32),
                         np.arange(h, dtype=np.float32))
    return cv2.remap(image, xs + u, ys + v, interpolation=cv2.INTER_LINEAR,
                     borderMode=cv2.BORDER_REPLICATE)


def _hs_level(i1: np.ndarray, i2: np.ndarray, u: np.ndarray, v: np.ndarray,
              params: FlowSolverParams) -> tuple[np.ndarray, np.ndarray]:
    """Refine flow at one pyramid level.

    Each warp round re-linearizes brightness constancy around the current
    flow (u0, v0) and runs its share of the fixed-point iterations:

        u <- uAvg - Ix * (Ix*(uAvg-u0) + Iy*(vAvg-v0) + It) / (w + Ix^2 + Iy^2)

    which solves the Horn-Schunck optimality conditions with the data term
    evaluated on the warped second frame.
    """
    base, extra = divmod(params.iterations, WARPS_PER_LEVEL)
    for round_idx in range(WARPS_PER_LEVEL):
        iters = base + (1 if round_idx < extra else 0)
        if iters == 0:
            continue
        u0, v0 = u.copy(), v.copy()
        i2w = _warp(i2, u0, v0)
        # pre-smoothing keeps the linearization honest on noisy texture
        s1 = ndimage.gaussian_filter(i1, _PRESMOOTH_SIGMA, mode="nearest")
        s2 = ndimage.gaussian_filter(i2w, _PRESMOOTH_SIGMA, mode="nearest")
        avg = 0.5 * (s1 + s2)
        ix = ndimage.correlate1d(avg, [-0.5, 0.0, 0.5], axis=1, mode="nearest")
        iy = ndimage.correlate1d(avg, [-0.5, 0.0, 0.5], axis=0, mode="nearest")
        it = s2 - s1
        denom = params.smoothness_weight + ix * ix + iy * iy
        for _ in range(iters):
            u_avg = ndimage.correlate(u, _AVG_KERNEL, mode="nearest")
            v_avg = ndimage.correlate(v, _AVG_KERNEL, mode="nearest")
            shared = (ix * (u_avg - u0) + iy * (v_avg - v0) + it) / denom
            u = u_avg - ix * shared
            v = v_avg - iy * shared
        # a warp round only ever needs a small residual; clamping the
        # increment stops blow-ups where the linearization is invalid
        # (weakly textured pixels beside a moving occlusion edge)
        u = u0 + np.clip(u - u0, -_MAX_STEP, _MAX_STEP)
        v = v0 + np.clip(v - v0, -_MAX_STEP, _MAX_STEP)
        u = ndimage.median_filter(u, size=_MEDFILT, mode="nearest")
        v = ndimage.median_filter(v, size=_MEDFILT, mode="nearest")
    return u, v


def estimate_flow(frame_t: np.ndarray, frame_t1: np.ndarray,
                  params: FlowSolverParams | None = None) -> FlowField:
    """Coarse-to-fine Horn-Schunck flow between two RGB frames.

    Pure and deterministic: same frames and params always return the same
    field. Identical frames yield exactly zero flow at any iteration count.
    """
    params = params or FlowSolverParams()
    if frame_t.shape != frame_t1.shape:
        raise ValidationError(
            f"frame dims differ: {frame_t.shape} vs {frame_t1.shape}")
    if frame_t.ndim != 3 or frame_t.shape[2] != 3:
        raise ValidationError(f"expected H×W×3 frames, got {frame_t.shape}")
    g1 = to_luminance(frame_t)
    g2 = to_luminance(frame_t1)
    pyr1 = _pyramid(g1, params.pyramid_levels)
    pyr2 = _pyramid(g2, params.pyramid_levels)

    u = np.zeros_like(pyr1[-1])
    v = np.zeros_like(pyr1[-1])
    for level in range(len(pyr1) - 1, -1, -1):
        i1, i2 = pyr1[level], pyr2[level]
        if u.shape != i1.shape:
            sy = i1.shape[0] / u.shape[0]
            sx = i1.shape[1] / u.shape[1]
            u = cv2.resize(u, (i1.shape[1], i1.shape[0]),
                           interpolation=cv2.INTER_LINEAR) * sx
            v = cv2.resize(v, (i1.shape[1], i1.shape[0]),
                           interpolation=cv2.INTER_LINEAR) * sy
        u, v = _hs_level(i1, i2, u, v, params)
    return FlowField(dx=u.astype(np.float32), dy=v.astype(np.float32))


def flow_magnitude_mask(flow: FlowField, threshold: float) -> np.ndarray:
    """Binary mask of pixels moving faster than ``threshold`` pixels."""
    if threshold <= 0:
        raise ValidationError(f"threshold must be > 0, got {threshold}")
    return (flow.magnitude() > threshold).astype(np.uint8)


def fuse_inputs(image: np.ndarray, flow: FlowField | None = None) -> np.ndarray:
    """Stack network inputs: RGB in [0,1], plus flow scaled to [-1,1] if present.

    Flow channels are clamped to +/-16 px before scaling; missing flow
    yields a 3-channel stack (the model contract accepts both).
    """
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValidationError(f"expected H×W×3 image, got {image.shape}")
    rgb = image.astype(np.float32) / 255.0
    if flow is None:
        return rgb
    if flow.shape != image.shape[:2]:
        raise ValidationError(
            f"flow shape {flow.shape} does not match image {image.shape[:2]}")
    fx = np.clip(flow.dx, -FLOW_CLAMP_PX, FLOW_CLAMP_PX) / FLOW_CLAMP_PX
    fy = np.clip(flow.dy, -FLOW_CLAMP_PX, FLOW_CLAMP_PX) / FLOW_CLAMP_PX
    return np.concatenate([rgb, fx[..., None], fy[..., None]], axis=2)


def write_flow_file(path: str | Path, flow: FlowField) -> None:
    """Little-endian binary: magic RSFL, u32 H, u32 W, then (dx, dy) float32 pairs."""
    h, w = flow.shape
    data = np.ascontiguousarray(flow.as_array().astype("<f4"))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(RSFL_MAGIC)
        fh.write(struct.pack("<II", h, w))
        fh.write(data.tobytes())


def read_flow_file(path: str | Path) -> FlowField:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != RSFL_MAGIC:
        raise ValidationError(f"{path}: bad magic {blob[:4]!r}, expected {RSFL_MAGIC!r}")
    h, w = struct.unpack("<II", blob[4:12])
    expected = 4 + 8 + h * w * 2 * 4
    if len(blob) != expected:
        raise ValidationError(
            f"{path}: truncated flow file ({len(blob)} bytes, expected {expected})")
    data = np.frombuffer(blob, dtype="<f4", offset=12).reshape(h, w, 2)
    return FlowField(dx=np.ascontiguousarray(data[..., 0]),
                     dy=np.ascontiguousarray(data[..., 1]))


def validate_flow_against(flow: FlowField, frame_shape: tuple[int, int],
                          origin: str) -> FlowField:
    """Reject wrong-sized or non-finite flow, naming the first bad pixel."""
    if flow.shape != frame_shape:
        raise PluginError(
            f"{origin}: flow dims {flow.shape} do not match frames {frame_shape}")
    finite = np.isfinite(flow.dx) & np.isfinite(flow.dy)
    if not finite.all():
        y, x = np.argwhere(~finite)[0]
        raise PluginError(
            f"{origin}: non-finite flow value at pixel (y={y}, x={x})")
    return flow


def external_flow(frame_t: np.ndarray, frame_t1: np.ndarray,
                  plugin_command: str, timeout: float = DEFAULT_TIMEOUT,
                  client: PluginClient | None = None) -> FlowField:
    """Delegate flow estimation to a subprocess plugin (e.g. a learned model).

    Protocol: request ``{"op":"flow","frame_t":p1,"frame_t1":p2}``,
    response ``{"flow": <path to an RSFL file>}``. The result is validated
    for dimensions and finiteness before being returned.
    """
    if frame_t.shape != frame_t1.shape:
        raise ValidationError(
            f"frame dims differ: {frame_t.shape} vs {frame_t1.shape}")
    own_client = client is None
    if own_client:
        client = PluginClient(plugin_command, timeout=timeout)
    try:
        with tempfile.TemporaryDirectory(prefix="railsynth_flow_") as tmp:
            p1 = Path(tmp) / "frame_t.png"
            p2 = Path(tmp) / "frame_t1.png"
            raster.save_image(p1, frame_t)
            raster.save_image(p2, frame_t1)
            response = client.request(
                {"op": "flow", "frame_t": str(p1), "frame_t1": str(p2)})
            flow_path = response.get("flow")
            if not flow_path:
                raise PluginError(
                    f"plugin {client.name!r}: response missing 'flow'")
            try:
                flow = read_flow_file(flow_path)
            except (OSError, ValidationError) as exc:
                raise PluginError(f"plugin {client.name!r}: {exc}") from exc
            return validate_flow_against(flow, frame_t.shape[:2],
                                         f"plugin {client.name!r}")
    finally:
        if own_client:
            client.close()
