from __future__ import annotations

import sys
import textwrap

import numpy as np
import pytest

from railsynth.compositor import RescaleParams, generate_pair, rescale_cutout
from railsynth.errors import PluginError, ValidationError
from railsynth.optical_flow import (
    FlowField,
    FlowSolverParams,
    estimate_flow,
    external_flow,
    flow_magnitude_mask,
    fuse_inputs,
    read_flow_file,
    write_flow_file,
)
from railsynth.sampledata import make_scene


@pytest.fixture(scope="module")
def textured_scene():
    return make_scene("flowtest", "sunny", seed=21, size=(128, 160))


class TestFlowSolverParams:
    def test_defaults(self):
        p = FlowSolverParams()
        assert (p.smoothness_weight, p.iterations, p.pyramid_levels) == (0.1, 200, 4)

    def test_invalid(self):
        with pytest.raises(ValidationError):
            FlowSolverParams(smoothness_weight=0.0)
        with pytest.raises(ValidationError):
            FlowSolverParams(iterations=0)
        with pytest.raises(ValidationError):
            FlowSolverParams(pyramid_levels=0)


class TestEstimateFlow:
    def test_identical_frames_exactly_zero(self, textured_scene):
        img = textured_scene.image
        for iters in (1, 50):
            flow = estimate_flow(img, img, FlowSolverParams(iterations=iters))
            assert float(np.abs(flow.as_array()).max()) == 0.0

    def test_dimension_mismatch(self, textured_scene):
        img = textured_scene.image
        with pytest.raises(ValidationError):
            estimate_flow(img, img[:-2], FlowSolverParams())

    def test_constant_frames_zero_flow(self):
        img = np.full((64, 64, 3), 120, dtype=np.uint8)
        flow = estimate_flow(img, img.copy(), FlowSolverParams())
        assert float(np.abs(flow.as_array()).max()) == 0.0

    def test_translated_patch_mean_flow(self, textured_scene, pools):
        # the documented oracle: a textured patch pasted on a textured
        # background, translated by (5, 5)
        cut = rescale_cutout(pools["animal"][0], 70, RescaleParams(0.5, 20))
        sample = generate_pair(textured_scene, cut, (80, 70), (5, 5))
        flow = estimate_flow(sample.frame_t, sample.frame_t1, FlowSolverParams())
        foot = (sample.frame_t != textured_scene.image).any(axis=2)
        assert abs(float(flow.dx[foot].mean()) - 5) <= 1.0
        assert abs(float(flow.dy[foot].mean()) - 5) <= 1.0

    def test_single_level_underestimates_pyramid_recovers(self, textured_scene):
        img = textured_scene.image
        rolled = np.roll(img, 10, axis=1)
        single = estimate_flow(img, rolled, FlowSolverParams(pyramid_levels=1))
        multi = estimate_flow(img, rolled, FlowSolverParams(pyramid_levels=4))
        assert abs(float(np.median(single.dx)) - 10) > 1.0
        assert abs(float(np.median(multi.dx)) - 10) <= 1.0

    def test_wraparound_translation_median_epe(self):
        # brightness-constancy sanity on a fully textured image
        from scipy import ndimage

        rng = np.random.default_rng(0)
        noise = (ndimage.gaussian_filter(rng.normal(size=(128, 160, 3)), (2, 2, 0))
                 + 0.5 * ndimage.gaussian_filter(rng.normal(size=(128, 160, 3)),
                                                 (0.8, 0.8, 0)))
        span = noise.max() - noise.min()
        img = ((noise - noise.min()) / span * 255).astype(np.uint8)
        for sx, sy in [(5, 5), (7, 10), (10, 7), (10, 10)]:
            rolled = np.roll(np.roll(img, sx, axis=1), sy, axis=0)
            flow = estimate_flow(img, rolled, FlowSolverParams())
            epe = np.hypot(flow.dx - sx, flow.dy - sy)
            assert float(np.median(epe)) < 1.0

    def test_pure_function_no_state(self, textured_scene):
        img = textured_scene.image
        rolled = np.roll(img, 6, axis=0)
        a = estimate_flow(img, rolled, FlowSolverParams())
        b = estimate_flow(img, rolled, FlowSolverParams())
        assert np.array_equal(a.as_array(), b.as_array())


class TestFlowMagnitudeMask:
    def test_zero_flow_empty_mask(self):
        flow = FlowField(dx=np.zeros((8, 8), np.float32),
                         dy=np.zeros((8, 8), np.float32))
        assert flow_magnitude_mask(flow, 1.0).sum() == 0

    def test_threshold_zero_rejected(self):
        flow = FlowField(dx=np.zeros((8, 8), np.float32),
                         dy=np.zeros((8, 8), np.float32))
        with pytest.raises(ValidationError):
            flow_magnitude_mask(flow, 0.0)

    def test_translation_mask_overlaps_footprint(self, textured_scene, pools):
        cut = rescale_cutout(pools["animal"][1], 70, RescaleParams(0.5, 20))
        sample = generate_pair(textured_scene, cut, (80, 70), (5, 5))
        flow = estimate_flow(sample.frame_t, sample.frame_t1, FlowSolverParams())
        mask = flow_magnitude_mask(flow, 2.0).astype(bool)
        union = (sample.frame_t != sample.frame_t1).any(axis=2) | \
            (sample.frame_t != textured_scene.image).any(axis=2)
        inter = (mask & union).sum()
        iou = inter / (mask | union).sum()
        assert iou >= 0.5


class TestFuseInputs:
    def test_no_flow_three_channels(self, textured_scene):
        stack = fuse_inputs(textured_scene.image)
        assert stack.shape == (*textured_scene.shape, 3)
        assert stack.min() >= 0.0 and stack.max() <= 1.0

    def test_constant_flow_scaling(self):
        img = np.zeros((6, 6, 3), dtype=np.uint8)
        flow = FlowField(dx=np.full((6, 6), 8.0, np.float32),
                         dy=np.full((6, 6), -8.0, np.float32))
        stack = fuse_inputs(img, flow)
        assert stack.shape == (6, 6, 5)
        assert np.allclose(stack[..., 3], 0.5)
        assert np.allclose(stack[..., 4], -0.5)

    def test_clamp(self):
        img = np.zeros((4, 4, 3), dtype=np.uint8)
        flow = FlowField(dx=np.full((4, 4), 100.0, np.float32),
                         dy=np.full((4, 4), -100.0, np.float32))
        stack = fuse_inputs(img, flow)
        assert np.allclose(stack[..., 3], 1.0)
        assert np.allclose(stack[..., 4], -1.0)

    def test_dim_mismatch(self):
        img = np.zeros((4, 4, 3), dtype=np.uint8)
        flow = FlowField(dx=np.zeros((5, 5), np.float32),
                         dy=np.zeros((5, 5), np.float32))
        with pytest.raises(ValidationError):
            fuse_inputs(img, flow)


class TestFlowFileFormat:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(2)
        flow = FlowField(dx=rng.normal(size=(12, 17)).astype(np.float32),
                         dy=rng.normal(size=(12, 17)).astype(np.float32))
        path = tmp_path / "f.rsfl"
        write_flow_file(path, flow)
        back = read_flow_file(path)
        assert np.array_equal(back.dx, flow.dx)
        assert np.array_equal(back.dy, flow.dy)

    def test_header_layout(self, tmp_path):
        flow = FlowField(dx=np.zeros((3, 5), np.float32),
                         dy=np.zeros((3, 5), np.float32))
        path = tmp_path / "f.rsfl"
        write_flow_file(path, flow)
        blob = path.read_bytes()
        assert blob[:4] == b"RSFL"
        assert int.from_bytes(blob[4:8], "little") == 3
        assert int.from_bytes(blob[8:12], "little") == 5
        assert len(blob) == 12 + 3 * 5 * 8

    def test_truncated_rejected(self, tmp_path):
        flow = FlowField(dx=np.zeros((3, 5), np.float32),
                         dy=np.zeros((3, 5), np.float32))
        path = tmp_path / "f.rsfl"
        write_flow_file(path, flow)
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(ValidationError, match="truncated"):
            read_flow_file(path)


def flow_plugin(tmp_path, body: str) -> str:
    script = tmp_path / "flow_plugin.py"
    script.write_text(textwrap.dedent(body))
    return f"{sys.executable} {script}"


ZERO_FLOW_PLUGIN = """
    import json, struct, sys
    import numpy as np
    from PIL import Image
    for line in sys.stdin:
        req = json.loads(line)
        im = np.asarray(Image.open(req["frame_t"]))
        h, w = im.shape[:2]
        out = req["frame_t"] + ".rsfl"
        with open(out, "wb") as fh:
            fh.write(b"RSFL")
            fh.write(struct.pack("<II", h, w))
            fh.write(np.zeros((h, w, 2), dtype="<f4").tobytes())
        print(json.dumps({"flow": out}))
        sys.stdout.flush()
"""


class TestExternalFlow:
    def test_zero_flow_stub(self, tmp_path):
        cmd = flow_plugin(tmp_path, ZERO_FLOW_PLUGIN)
        img = np.zeros((10, 12, 3), dtype=np.uint8)
        flow = external_flow(img, img, cmd)
        assert flow.shape == (10, 12)
        assert float(np.abs(flow.as_array()).max()) == 0.0

    def test_nan_pixel_named(self, tmp_path):
        cmd = flow_plugin(tmp_path, """
            import json, struct, sys
            import numpy as np
            from PIL import Image
            for line in sys.stdin:
                req = json.loads(line)
                im = np.asarray(Image.open(req["frame_t"]))
                h, w = im.shape[:2]
                data = np.zeros((h, w, 2), dtype="<f4")
                data[3, 4, 0] = np.nan
                out = req["frame_t"] + ".rsfl"
                with open(out, "wb") as fh:
                    fh.write(b"RSFL")
                    fh.write(struct.pack("<II", h, w))
                    fh.write(data.tobytes())
                print(json.dumps({"flow": out}))
                sys.stdout.flush()
        """)
        img = np.zeros((10, 12, 3), dtype=np.uint8)
        with pytest.raises(PluginError, match=r"y=3, x=4"):
            external_flow(img, img, cmd)

    def test_mismatched_dims_rejected(self, tmp_path):
        cmd = flow_plugin(tmp_path, """
            import json, struct, sys
            import numpy as np
            for line in sys.stdin:
                req = json.loads(line)
                out = req["frame_t"] + ".rsfl"
                with open(out, "wb") as fh:
                    fh.write(b"RSFL")
                    fh.write(struct.pack("<II", 4, 4))
                    fh.write(np.zeros((4, 4, 2), dtype="<f4").tobytes())
                print(json.dumps({"flow": out}))
                sys.stdout.flush()
        """)
        img = np.zeros((10, 12, 3), dtype=np.uint8)
        with pytest.raises(PluginError, match="dims"):
            external_flow(img, img, cmd)
