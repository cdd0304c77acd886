import hashlib
import json

import numpy as np
import pytest

from oracles import thresholded_xy_eccentricity
from truncmark.dataprep import (BatchConfig, PairManifest, PrepParams,
                                ProjectionCache, ScenarioSpec, batch_generate,
                                dense_marker_params, derive_seed,
                                make_pair_conventional, make_pair_task_specific,
                                residual_confinement, scenario_geometry)
from truncmark.fdk import ReconSpec
from truncmark.geometry import ScanGeometry, derive_fov
from truncmark.volume import (Marker, MarkerSet, VolumeError, generate_markers,
                              synthetic_anatomy)

TINY_RECON = ReconSpec(out_dims=(64, 64, 32), out_voxel_mm=2.0)
TINY_PARAMS = PrepParams(recon=TINY_RECON)


@pytest.fixture(scope="module")
def tiny_anatomy():
    return synthetic_anatomy((64, 64, 32), 2.0, rng_seed=0)


@pytest.fixture(scope="module")
def shared_cache():
    return ProjectionCache()


def test_scenario_presets_and_validation():
    a = ScenarioSpec.from_name("A")
    assert (a.name, a.fov_diameter_cm, a.photons) == ("A_regular", 16.0, 1e6)
    b = ScenarioSpec.from_name("B")
    assert (b.fov_diameter_cm, b.photons) == (12.0, 1e6)
    c = ScenarioSpec.from_name("C")
    assert (c.fov_diameter_cm, c.photons) == (16.0, 1e4)
    with pytest.raises(ValueError):
        ScenarioSpec("A_regular", 12.0, 1e6)  # canonical values enforced
    ScenarioSpec("custom_wide", 20.0, 1e5)  # custom scenarios allowed
    with pytest.raises(ValueError):
        ScenarioSpec("custom_bad", -1.0, 1e5)


def test_scenario_geometry_cols(tiny_geom):
    sg_a = scenario_geometry(tiny_geom, ScenarioSpec("tiny_a", 8.0, 1e6))
    assert sg_a.detector_cols == tiny_geom.detector_cols  # native FOV ~6.4 cm
    sg_small = scenario_geometry(tiny_geom, ScenarioSpec("tiny_b", 4.0, 1e6))
    assert sg_small.detector_cols < tiny_geom.detector_cols
    assert 2 * derive_fov(sg_small).radius_mm == pytest.approx(40.0, abs=1.5)


def test_zero_marker_pair_is_bitwise_identical(tiny_anatomy, tiny_geom,
                                               shared_cache, tmp_path):
    manifest = make_pair_task_specific(
        tiny_anatomy, MarkerSet(), ScenarioSpec("tiny_b", 4.0, 1e6), tiny_geom,
        seed=3, out_dir=tmp_path, params=TINY_PARAMS, cache=shared_cache)
    inp, lab = manifest.load_input(), manifest.load_label()
    assert np.array_equal(inp.values, lab.values)
    assert not manifest.load_mask().any()


def test_degenerate_scenario_conventional_pair(tmp_path):
    """No truncation (extended == truncated detector) and near-infinite flux:
    conventional input equals the label up to vanishing noise."""
    geom = ScanGeometry(600, 300, 160, 32, 160, 1.0, 200, 2.0)
    anatomy = synthetic_anatomy((64, 64, 32), 2.0, rng_seed=0)
    markers = MarkerSet((Marker((0.0, 24.0, 0.0), 5.0, 2000.0),))
    manifest = make_pair_conventional(
        anatomy, markers, ScenarioSpec("degenerate", 12.0, 1e12), geom,
        seed=1, out_dir=tmp_path, params=TINY_PARAMS)
    inp, lab = manifest.load_input(), manifest.load_label()
    scale = np.abs(lab.values).max()
    assert np.abs(inp.values - lab.values).max() < 1e-4 * scale


def test_task_specific_confines_conventional_does_not(
        tiny_anatomy, tiny_geom, shared_cache, tmp_path):
    """The defining contrast: with truncated markers, the task-specific
    residual concentrates in the dilated mask while the conventional
    residual spreads everywhere."""
    markers = MarkerSet((Marker((0.0, 38.0, 0.0), 5.0, 2500.0),
                         Marker((14.0, 34.0, -10.0), 4.0, 2000.0)))
    scenario = ScenarioSpec("tiny_b", 4.0, 1e6)
    ts = make_pair_task_specific(tiny_anatomy, markers, scenario, tiny_geom,
                                 seed=5, out_dir=tmp_path / "ts",
                                 params=TINY_PARAMS, cache=shared_cache)
    conv = make_pair_conventional(tiny_anatomy, markers, scenario, tiny_geom,
                                  seed=5, out_dir=tmp_path / "conv",
                                  params=TINY_PARAMS, cache=shared_cache)
    frac_ts = residual_confinement(ts.load_input(), ts.load_label(), ts.load_mask())
    frac_conv = residual_confinement(conv.load_input(), conv.load_label(),
                                     conv.load_mask())
    assert frac_conv < 0.10  # > 90% of the energy escapes the mask
    assert frac_ts > 5 * frac_conv
    assert frac_ts > 0.3  # severely truncated markers still concentrate


def test_no_markers_conventional_residual_everywhere(
        tiny_anatomy, tiny_geom, shared_cache, tmp_path):
    manifest = make_pair_conventional(
        tiny_anatomy, MarkerSet(), ScenarioSpec("tiny_b", 4.0, 1e6), tiny_geom,
        seed=2, out_dir=tmp_path, params=TINY_PARAMS, cache=shared_cache)
    res = manifest.load_label().values - manifest.load_input().values
    assert float((res.astype(np.float64) ** 2).sum()) > 0.0
    assert not manifest.load_mask().any()


def test_distorted_marker_eccentricity(tiny_anatomy, tiny_geom, shared_cache,
                                       tmp_path):
    """A marker outside the truncated FOV (but inside the extended one, so
    the label stays clean) is distorted along y in the input but round in
    the label (thresholded-ellipse oracle)."""
    marker = Marker((0.0, 34.0, 0.0), 5.0, 2500.0)
    manifest = make_pair_task_specific(
        tiny_anatomy, MarkerSet((marker,)), ScenarioSpec("tiny_b", 4.0, 1e6),
        tiny_geom, seed=4, out_dir=tmp_path, params=TINY_PARAMS,
        cache=shared_cache)
    inp, lab = manifest.load_input(), manifest.load_label()
    idx = inp.mm_to_index(marker.center_mm)
    ecc_label = thresholded_xy_eccentricity(lab.values, idx)
    ecc_input = thresholded_xy_eccentricity(inp.values, idx)
    assert ecc_label < 1.2
    assert ecc_input > 1.2


def test_cross_mode_label_marker_geometry(tiny_anatomy, tiny_geom, shared_cache,
                                          tmp_path):
    """Same seed in both prep modes: label markers occupy the same voxels
    (their centers of mass coincide)."""
    markers = MarkerSet((Marker((6.0, 30.0, 4.0), 5.0, 2500.0),))
    scenario = ScenarioSpec("tiny_a", 8.0, 1e6)
    ts = make_pair_task_specific(tiny_anatomy, markers, scenario, tiny_geom,
                                 seed=7, out_dir=tmp_path / "ts",
                                 params=TINY_PARAMS, cache=shared_cache)
    conv = make_pair_conventional(tiny_anatomy, markers, scenario, tiny_geom,
                                  seed=7, out_dir=tmp_path / "conv",
                                  params=TINY_PARAMS, cache=shared_cache)
    assert ts.markers == conv.markers

    def label_com(manifest):
        lab = manifest.load_label().values.astype(np.float64)
        mask = manifest.load_mask()
        sel = np.where(mask, lab, 0.0)
        sel = np.where(sel >= 0.5 * sel.max(), sel, 0.0)
        idx = np.argwhere(sel > 0)
        w = sel[sel > 0]
        return (idx * w[:, None]).sum(axis=0) / w.sum()

    assert np.all(np.abs(label_com(ts) - label_com(conv)) < 0.1)


def test_marker_overlapping_anatomy_rejected(tiny_anatomy, tiny_geom, tmp_path):
    inside_body = MarkerSet((Marker((0.0, -20.0, 0.0), 4.0, 2000.0),))
    with pytest.raises(VolumeError, match="air"):
        make_pair_task_specific(tiny_anatomy, inside_body,
                                ScenarioSpec("tiny_a", 8.0, 1e6), tiny_geom,
                                seed=0, out_dir=tmp_path, params=TINY_PARAMS)


def test_batch_generate_deterministic(tiny_anatomy, tiny_geom, tmp_path):
    config = BatchConfig(scenarios=("A",), pairs_per_scenario=1,
                         prep_mode="task_specific", master_seed=11,
                         marker_count_range=(3, 3),
                         marker_region=((-20.0, 20.0), (30.0, 44.0), (-20.0, 20.0)),
                         marker_radius_range=(3.0, 4.5))
    outs = []
    for run in ("r1", "r2"):
        cache = ProjectionCache()
        manifests = batch_generate(tiny_anatomy, tiny_geom, config,
                                   tmp_path / run, params=TINY_PARAMS,
                                   cache=cache)
        assert len(manifests) == 1
        digest = hashlib.sha256()
        # payload files are bit-identical; manifest JSONs differ only in the
        # output directory they point at
        for p in sorted((tmp_path / run).glob("*.mvol")):
            digest.update(p.name.encode())
            digest.update(p.read_bytes())
        digest.update(manifests[0].markers.to_json().encode())
        outs.append(digest.hexdigest())
    assert outs[0] == outs[1]


def test_batch_scenario_b_records_fov(tiny_anatomy, tiny_geom, tmp_path):
    config = BatchConfig(scenarios=("B",), pairs_per_scenario=1,
                         master_seed=0, marker_count_range=(2, 2),
                         marker_region=((-20.0, 20.0), (30.0, 44.0), (-20.0, 20.0)),
                         marker_radius_range=(3.0, 4.0))
    manifests = batch_generate(tiny_anatomy, tiny_geom, config, tmp_path,
                               params=TINY_PARAMS)
    assert manifests[0].scenario.fov_diameter_cm == 12.0
    loaded = PairManifest.from_json(
        (tmp_path / f"{manifests[0].pair_id}.json").read_text())
    assert loaded == manifests[0]


def test_zero_pairs_config(tiny_anatomy, tiny_geom, tmp_path):
    config = BatchConfig(scenarios=("A",), pairs_per_scenario=0)
    assert batch_generate(tiny_anatomy, tiny_geom, config, tmp_path,
                          params=TINY_PARAMS) == []


def test_dense_marker_mode_places_hundred():
    count_range, radius_range, region = dense_marker_params(
        (8, 12), (3.0, 4.5),
        ((-30.0, 30.0), (45.0, 65.0), (-30.0, 30.0)))
    assert count_range[0] >= 100
    ms = generate_markers(0, count_range=count_range, region=region,
                          radius_range=radius_range, max_attempts=60000)
    assert len(ms) >= 100


def test_derive_seed_stable_and_distinct():
    assert derive_seed(1, 2, 3) == derive_seed(1, 2, 3)
    assert derive_seed(1, 2, 3) != derive_seed(1, 3, 2)


def test_manifest_json_shape(tiny_anatomy, tiny_geom, shared_cache, tmp_path):
    markers = MarkerSet((Marker((5.0, 30.0, 0.0), 4.0, 1500.0),))
    manifest = make_pair_task_specific(
        tiny_anatomy, markers, ScenarioSpec("tiny_a", 8.0, 1e6), tiny_geom,
        seed=9, out_dir=tmp_path, params=TINY_PARAMS, cache=shared_cache)
    data = json.loads(manifest.to_json())
    assert set(data) == {"pair_id", "scenario", "input_path", "label_path",
                         "marker_mask_path", "markers", "geometry", "seed",
                         "prep_mode"}
    assert data["prep_mode"] == "task_specific"
    mask = manifest.load_mask()
    assert mask.dtype == bool
    assert mask.any()
    inp = manifest.load_input()
    assert inp.dims == TINY_RECON.out_dims
