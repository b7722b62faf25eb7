import importlib.resources
from pathlib import Path

import numpy as np
import pytest

from smdk.core import FanBeamGeometry, MixingMatrix, read_tensor
from smdk.experiment import validate_config


DATA_DIR = Path(str(importlib.resources.files("smdk").joinpath("data")))


@pytest.fixture(scope="session")
def data_dir() -> Path:
    return DATA_DIR


@pytest.fixture(scope="session")
def desk_config():
    text = (DATA_DIR / "config_desk.yaml").read_text()
    return validate_config(text, base_dir=DATA_DIR)


@pytest.fixture(scope="session")
def bundled_mixing() -> MixingMatrix:
    data = read_tensor(DATA_DIR / "mixing_4bin.smdk")[:, :, 0]
    return MixingMatrix(data=data, material_names=("bone", "soft_tissue", "iodine"))


@pytest.fixture
def small_geom() -> FanBeamGeometry:
    """33x33 grid with an odd detector count: the middle detector's ray runs
    through the isocenter, handy for axis-aligned chord checks."""
    return FanBeamGeometry(
        source_to_detector_mm=180.0,
        source_to_isocenter_mm=132.0,
        num_views=60,
        num_detectors=65,
        detector_pitch_mm=0.8,
        image_width_px=33,
        image_height_px=33,
        pixel_size_mm=1.0,
    )


@pytest.fixture
def medium_geom() -> FanBeamGeometry:
    return FanBeamGeometry(
        source_to_detector_mm=180.0,
        source_to_isocenter_mm=132.0,
        num_views=90,
        num_detectors=128,
        detector_pitch_mm=0.4,
        image_width_px=64,
        image_height_px=64,
        pixel_size_mm=0.4,
    )


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
