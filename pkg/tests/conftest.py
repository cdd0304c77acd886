import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from truncmark.geometry import ScanGeometry
from truncmark.fdk import ReconSpec


@pytest.fixture(scope="session")
def tiny_geom():
    """Small short-scan geometry for fast unit tests (FOV radius ~31.8 mm)."""
    return ScanGeometry(
        source_to_detector_mm=600.0,
        source_to_isocenter_mm=300.0,
        detector_cols=128,
        detector_rows=32,
        extended_detector_cols=160,
        detector_pixel_mm=1.0,
        scan_range_deg=200.0,
        angular_step_deg=2.0,
    )


@pytest.fixture(scope="session")
def tiny_recon():
    return ReconSpec(out_dims=(96, 96, 24), out_voxel_mm=1.0)


@pytest.fixture(scope="session")
def table1_geom():
    """Full-scale clinical geometry (no heavy compute in unit tests)."""
    return ScanGeometry(
        source_to_detector_mm=1164.0,
        source_to_isocenter_mm=622.0,
        detector_cols=976,
        detector_rows=976,
        extended_detector_cols=2048,
        detector_pixel_mm=0.305,
        scan_range_deg=200.0,
        angular_step_deg=0.5,
    )


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
