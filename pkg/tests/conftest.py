from __future__ import annotations

import numpy as np
import pytest

from railsynth import sampledata
from railsynth.cutout_extraction import oracle_extract
from railsynth.scene_model import BaseScene


@pytest.fixture(scope="session")
def scenes():
    return sampledata.make_scenes(seed=1, per_weather=1, size=(96, 128))


@pytest.fixture(scope="session")
def scene(scenes):
    return scenes[0]


@pytest.fixture(scope="session")
def pools():
    return {
        "person": [oracle_extract(sampledata.make_person_image(k),
                                  category="person", source_id=f"p{k}")
                   for k in range(2)],
        "animal": [oracle_extract(sampledata.make_animal_image(7000 + k),
                                  category="animal", source_id=f"a{k}")
                   for k in range(2)],
        "texture": [sampledata.make_texture_image(9000 + k) for k in range(2)],
    }


@pytest.fixture()
def flat_scene():
    """Minimal hand-built scene: uniform background, rectangular railway."""
    image = np.full((40, 60, 3), 90, dtype=np.uint8)
    mask = np.zeros((40, 60), dtype=np.uint8)
    mask[20:40, 10:50] = 1
    return BaseScene(image=image, railway_mask=mask, weather="sunny",
                     scene_id="flat")


def write_records_with_rasters(tmp_path, samples_and_names):
    """Helper used by manifest tests: writes rasters, returns records."""
    from railsynth import raster
    from railsynth.scene_model import SampleRecord

    records = []
    for name, (h, w) in samples_and_names:
        img = np.zeros((h, w, 3), dtype=np.uint8)
        mask = np.zeros((h, w), dtype=np.uint8)
        mask[0, 0] = 1
        rels = (f"frames/{name}_t.png", f"frames/{name}_t1.png",
                f"masks/{name}_t.png", f"masks/{name}_t1.png")
        raster.save_image(tmp_path / rels[0], img)
        raster.save_image(tmp_path / rels[1], img)
        raster.save_mask(tmp_path / rels[2], mask)
        raster.save_mask(tmp_path / rels[3], mask)
        records.append(SampleRecord(
            scene_id=name, seed=hash(name) % 2**63, frame_t=rels[0],
            frame_t1=rels[1], mask_t=rels[2], mask_t1=rels[3],
            weather="sunny", category="person", anchor_x=5, anchor_y=6,
            dx=5, dy=7))
    return records
