import json
import math

import numpy as np
import pytest

from truncmark.geometry import (GeometryError, ScanGeometry, cols_for_fov,
                                derive_fov, pixel_center_mm, pixel_ray,
                                point_line_distance_mm, view_pose)


def test_table1_fov_matches_stated_diameter(table1_geom):
    fov = derive_fov(table1_geom)
    fan_deg = math.degrees(table1_geom.fan_half_angle_rad())
    assert fan_deg == pytest.approx(7.287, abs=5e-3)
    assert fov.radius_mm == pytest.approx(78.9, abs=0.05)
    # diameter ~15.8 cm, i.e. the stated 16 cm within rounding
    assert round(2 * fov.radius_mm / 10.0) == 16


def test_fov_shrinks_with_halved_detector(table1_geom):
    fov = derive_fov(table1_geom, cols=488)
    assert fov.radius_mm == pytest.approx(39.7, abs=0.05)


def test_fov_limit_tiny_detector():
    geom = ScanGeometry(600, 300, 2, 8, 4, 0.05, 200, 2.0)
    assert derive_fov(geom).radius_mm < 0.1


def test_fov_monotonicity(table1_geom):
    radii = [derive_fov(table1_geom, cols=c).radius_mm for c in (200, 400, 600, 976)]
    assert all(a < b for a, b in zip(radii, radii[1:]))
    base = dict(
        source_to_isocenter_mm=622.0, detector_cols=976, detector_rows=976,
        extended_detector_cols=2048, detector_pixel_mm=0.305,
        scan_range_deg=220.0, angular_step_deg=0.5,
    )
    radii_sdd = [
        derive_fov(ScanGeometry(source_to_detector_mm=sdd, **base)).radius_mm
        for sdd in (1164.0, 1400.0, 1800.0, 2400.0)
    ]
    assert all(a > b for a, b in zip(radii_sdd, radii_sdd[1:]))


def test_short_scan_condition_enforced():
    with pytest.raises(GeometryError):
        ScanGeometry(1164, 622, 976, 976, 2048, 0.305, 185.0, 0.5)
    # 200 deg >= 180 + 2 * 7.287 = 194.57 passes
    ScanGeometry(1164, 622, 976, 976, 2048, 0.305, 200.0, 0.5)


def test_constructor_validation():
    with pytest.raises(GeometryError):
        ScanGeometry(600, 700, 128, 32, 160, 1.0, 200, 2.0)  # SID > SDD
    with pytest.raises(GeometryError):
        ScanGeometry(600, 300, 128, 32, 100, 1.0, 200, 2.0)  # ext < trunc
    with pytest.raises(GeometryError):
        ScanGeometry(600, 300, 128, 32, 161, 1.0, 200, 2.0)  # odd difference
    with pytest.raises(GeometryError):
        ScanGeometry(600, 300, 128, 32, 160, 1.0, 200, 3.0)  # non-integer views


def test_view_pose_zero_and_quarter(tiny_geom):
    p0 = view_pose(tiny_geom, 0)
    sid, sdd = 300.0, 600.0
    assert np.allclose(p0.source_mm, [sid, 0, 0])
    assert np.allclose(p0.detector_origin_mm, [sid - sdd, 0, 0])
    p90 = view_pose(tiny_geom, 45)  # 45 views x 2 deg = 90 deg
    assert np.allclose(p90.source_mm, [0, sid, 0], atol=1e-9)


def test_consecutive_poses_rotate_by_step(tiny_geom):
    step = math.radians(tiny_geom.angular_step_deg)
    rot = np.array([
        [math.cos(step), -math.sin(step), 0],
        [math.sin(step), math.cos(step), 0],
        [0, 0, 1],
    ])
    for i in (0, 17, 63):
        a, b = view_pose(tiny_geom, i), view_pose(tiny_geom, i + 1)
        assert np.allclose(rot @ a.source_mm, b.source_mm, atol=1e-9)
        assert np.allclose(rot @ a.detector_u_axis, b.detector_u_axis, atol=1e-12)


def test_view_index_out_of_range(tiny_geom):
    with pytest.raises(GeometryError):
        view_pose(tiny_geom, tiny_geom.view_count)
    with pytest.raises(GeometryError):
        view_pose(tiny_geom, -1)


def test_central_pixel_ray_points_at_isocenter():
    geom = ScanGeometry(600, 300, 129, 33, 161, 1.0, 200, 2.0)
    pose = view_pose(geom, 10)
    ray = pixel_ray(pose, 64, 16, 129, 33, 1.0)
    to_iso = -pose.source_mm / np.linalg.norm(pose.source_mm)
    assert np.allclose(ray.direction, to_iso, atol=1e-12)


def test_corner_ray_passes_through_corner(tiny_geom):
    pose = view_pose(tiny_geom, 7)
    corner = pixel_center_mm(pose, 0, 0, 128, 32, 1.0)
    ray = pixel_ray(pose, 0, 0, 128, 32, 1.0)
    assert point_line_distance_mm(corner, ray) < 0.5 * math.sqrt(2)


def test_rays_pass_through_pixel_centers(tiny_geom, rng):
    for _ in range(50):
        i = int(rng.integers(tiny_geom.view_count))
        u = int(rng.integers(tiny_geom.detector_cols))
        v = int(rng.integers(tiny_geom.detector_rows))
        pose = view_pose(tiny_geom, i)
        ray = pixel_ray(pose, u, v, 128, 32, 1.0)
        target = pixel_center_mm(pose, u, v, 128, 32, 1.0)
        assert np.array_equal(ray.origin_mm, pose.source_mm)
        assert point_line_distance_mm(target, ray) < 1e-9


def test_pixel_in_fov_iff_inside_truncated_window(tiny_geom, rng):
    """Ray-to-FOV-axis distance is below the FOV radius exactly for pixels
    of the central truncated window of the extended detector (axis distance
    measured in-plane, since the FOV is a cylinder around z)."""
    fov = derive_fov(tiny_geom)
    cols_ext = tiny_geom.extended_detector_cols
    off = (cols_ext - tiny_geom.detector_cols) // 2
    checked = 0
    for _ in range(10000):
        i = int(rng.integers(tiny_geom.view_count))
        u = int(rng.integers(cols_ext))
        v = int(rng.integers(tiny_geom.detector_rows))
        pose = view_pose(tiny_geom, i)
        ray = pixel_ray(pose, u, v, cols_ext, tiny_geom.detector_rows, 1.0)
        o2, d2 = ray.origin_mm[:2], ray.direction[:2]
        d2n = d2 / np.linalg.norm(d2)
        dist = abs(o2[0] * d2n[1] - o2[1] * d2n[0])
        inside_window = off <= u < off + tiny_geom.detector_cols
        assert (dist <= fov.radius_mm) == inside_window
        checked += 1
    assert checked == 10000


def test_pixel_ray_out_of_grid(tiny_geom):
    pose = view_pose(tiny_geom, 0)
    with pytest.raises(GeometryError):
        pixel_ray(pose, 128, 0, 128, 32, 1.0)


def test_cols_for_fov_desk():
    geom = ScanGeometry(1164, 622, 244, 128, 512, 1.22, 200, 1.0)
    assert cols_for_fov(geom, 160.0) == 244  # native detector already ~16 cm
    cols_b = cols_for_fov(geom, 120.0)
    assert cols_b < 244 and (512 - cols_b) % 2 == 0
    fov = derive_fov(geom, cols_b)
    assert 2 * fov.radius_mm == pytest.approx(120.0, abs=2.0)


def test_json_round_trip(table1_geom):
    text = table1_geom.to_json()
    data = json.loads(text)
    assert data["source_to_detector_mm"] == 1164.0
    assert data["extended_detector_cols"] == 2048
    assert ScanGeometry.from_json(text) == table1_geom
