"""Desk-scale acceptance suite: one test per criterion, each printing a
[ACCEPTANCE n] PASS/FAIL line (run with -s to see them live).

Heavy intermediates (the extended anatomy projection, per-scenario shared
anatomy reconstructions, per-seed marker reconstructions) are module-scoped
and reused across criteria so the whole suite stays within the runtime
target on a 2-core machine.
"""

import math
import time

import numpy as np
import pytest

from oracles import cylinder_stack_data
from truncmark import io
from truncmark.config import (GEOMETRY_PRESETS, RECON_PRESETS,
                              default_marker_region)
from truncmark.dataprep import (PrepParams, ProjectionCache, ScenarioSpec,
                                make_pair_conventional, make_pair_task_specific,
                                residual_confinement, scenario_geometry)
from truncmark.direct_detect import DirectConfig, detect_direct_detailed
from truncmark.evalreg import accuracy_table, register_rigid
from truncmark.fdk import ReconSpec, reconstruct, shortscan_weight
from truncmark.geometry import ScanGeometry, derive_fov
from truncmark.projector import (NoiseSpec, ProjectionStack, add_poisson_noise,
                                 project_markers, truncate, zero_fill)
from truncmark.sphere_detect import (HoughConfig3d, brute_force_accumulator_3d,
                                     _gather_votes, _surface_voxels,
                                     detect_recovered, expected_marker_voxels)
from truncmark.truncation import extrapolate_stack
from truncmark.volume import generate_markers, mu_to_hu, synthetic_anatomy

pytestmark = pytest.mark.acceptance

SEEDS = (1, 2, 3, 4, 5)
SCENARIO_NAMES = ("A", "B", "C")
RECOVERY_CFG = HoughConfig3d(radius_range_px=(3, 5), expected_marker_count=12,
                             nominal_radius_px=3.75, upper_fraction=0.3)
DIRECT_CFG = DirectConfig()


def _report(criterion: int, ok: bool, detail: str) -> None:
    print(f"\n[ACCEPTANCE {criterion}] {'PASS' if ok else 'FAIL'}: {detail}")


@pytest.fixture(scope="module")
def desk():
    geom = ScanGeometry(**GEOMETRY_PRESETS["desk"])
    recon = ReconSpec(**RECON_PRESETS["desk"])
    anatomy = synthetic_anatomy(recon.out_dims, recon.out_voxel_mm, rng_seed=0)
    region = default_marker_region(recon)
    return geom, recon, anatomy, region


@pytest.fixture(scope="module")
def marker_sets(desk):
    _, _, _, region = desk
    return {seed: generate_markers(seed, count_range=(12, 12), region=region,
                                   radius_range=(3.0, 4.5))
            for seed in SEEDS}


@pytest.fixture(scope="module")
def anatomy_cache(desk):
    geom, _, anatomy, _ = desk
    cache = ProjectionCache()
    from truncmark.dataprep import _anatomy_extended

    _anatomy_extended(anatomy, geom, cache)  # ~40 s, shared by everything below
    return cache


@pytest.fixture(scope="module")
def shared_recons(desk, anatomy_cache):
    """Per-scenario shared anatomy term S and per-(scenario, seed) marker
    reconstructions for labels (untruncated) and inputs (WCE of truncated)."""
    geom, recon, anatomy, region = desk
    from truncmark.dataprep import _anatomy_extended, derive_seed

    ext = _anatomy_extended(anatomy, geom, anatomy_cache)
    out = {"S": {}, "label_mk": {}, "input_mk": {}}
    markers = {seed: generate_markers(seed, count_range=(12, 12), region=region,
                                      radius_range=(3.0, 4.5))
               for seed in SEEDS}
    for name in SCENARIO_NAMES:
        scenario = ScenarioSpec.from_name(name)
        sgeom = scenario_geometry(geom, scenario)
        noisy = add_poisson_noise(
            truncate(ext, sgeom.detector_cols),
            NoiseSpec(scenario.photons, derive_seed(100, 0xA0)))
        out["S"][name] = reconstruct(extrapolate_stack(noisy), recon)
        for seed in SEEDS:
            if seed not in out["label_mk"]:
                # the extended detector does not depend on the scenario
                utp = project_markers(markers[seed], sgeom, extended=True)
                out["label_mk"][seed] = reconstruct(utp, recon)
            if name in ("A", "B"):
                tp = project_markers(markers[seed], sgeom, extended=False)
                out["input_mk"][(name, seed)] = reconstruct(
                    extrapolate_stack(tp), recon)
    return out


def test_criterion_1_residual_confinement(desk, anatomy_cache, tmp_path):
    """Task-specific pairs: >= 99% of (label - input) energy inside the
    3-voxel-dilated mask on 2 pairs per scenario; conventional pairs under
    A/B leak > 10% outside.
    """
    geom, recon, anatomy, region = desk
    params = PrepParams(recon=recon)
    t0 = time.time()
    rows = []
    for name in SCENARIO_NAMES:
        scenario = ScenarioSpec.from_name(name)
        for seed in (1, 2):
            markers = generate_markers(seed, count_range=(12, 12), region=region,
                                       radius_range=(3.0, 4.5))
            m = make_pair_task_specific(anatomy, markers, scenario, geom, seed,
                                        tmp_path / "ts", params=params,
                                        cache=anatomy_cache)
            frac = residual_confinement(m.load_input(), m.load_label(),
                                        m.load_mask())
            rows.append(("task_specific", name, seed, frac))
    conv_rows = []
    for name in ("A", "B"):
        scenario = ScenarioSpec.from_name(name)
        for seed in (1, 2):
            markers = generate_markers(seed, count_range=(12, 12), region=region,
                                       radius_range=(3.0, 4.5))
            m = make_pair_conventional(anatomy, markers, scenario, geom, seed,
                                       tmp_path / "conv", params=params,
                                       cache=anatomy_cache)
            frac = residual_confinement(m.load_input(), m.load_label(),
                                        m.load_mask())
            conv_rows.append((name, seed, frac))
    elapsed = time.time() - t0

    detail_ts = ", ".join(f"{n}{s}={100 * f:.2f}%" for _, n, s, f in rows)
    detail_conv = ", ".join(f"{n}{s}={100 * (1 - f):.1f}%out" for n, s, f in conv_rows)
    ts_ok = all(f >= 0.99 for *_, f in rows)
    conv_ok = all(1.0 - f > 0.10 for *_, f in conv_rows)
    ok = ts_ok and conv_ok and elapsed < 600
    _report(1, ok, f"task-specific inside-mask [{detail_ts}]; "
                   f"conventional outside-mask [{detail_conv}]; "
                   f"runtime {elapsed:.0f}s")
    assert conv_ok, f"conventional pairs must leak > 10% outside: {detail_conv}"
    assert elapsed < 600, f"criterion-1 runtime {elapsed:.0f}s exceeds 10 min"
    assert ts_ok, (
        "task-specific confinement < 99% on severely truncated pairs "
        f"({detail_ts}); see the decisions ledger: residual streak energy of "
        "markers outside the scenario-B field of view is scale-free in the "
        "truncation depth, so the 99%/3-voxel bound only holds when markers "
        "stay inside the FOV (scenarios A/C)"
    )


def test_criterion_2_recovery_detection(desk, marker_sets, shared_recons):
    """3D Hough on oracle-recovered (label) volumes: 12 markers x 5 seeds x
    3 scenarios, every axis within 1 voxel, zero false positives."""
    _, _, _, _ = desk
    failures = []
    total = 0
    for name in SCENARIO_NAMES:
        s_vol = shared_recons["S"][name]
        for seed in SEEDS:
            label = s_vol.like(s_vol.values + shared_recons["label_mk"][seed].values)
            detected = detect_recovered(label, RECOVERY_CFG)
            table = accuracy_table(marker_sets[seed], detected, label.voxel_mm)
            total += 1
            ok = (table.matched == 12 and table.fp_count == 0
                  and all(table.fractions[ax][1] == 1.0 for ax in "xyz"))
            if not ok:
                failures.append((name, seed, table.matched, table.fp_count,
                                 {ax: table.fractions[ax][1] for ax in "xyz"}))
    _report(2, not failures,
            f"{total - len(failures)}/{total} volumes at 100% within 1 voxel, "
            f"0 FP{'; failures: ' + str(failures) if failures else ''}")
    assert not failures


def test_criterion_3_direct_detection(desk, marker_sets, shared_recons):
    """Direct method on scenario-A inputs: 100% detection with every axis
    within 2 voxels over 5 seeds; scenario B rate reported with FN count."""
    s_a = shared_recons["S"]["A"]
    failures = []
    for seed in SEEDS:
        inp = s_a.like(s_a.values + shared_recons["input_mk"][("A", seed)].values)
        detected, _ = detect_direct_detailed(inp, DIRECT_CFG)
        table = accuracy_table(marker_sets[seed], detected, inp.voxel_mm)
        ok = (table.matched == 12
              and all(table.fractions[ax][2] == 1.0 for ax in "xyz"))
        if not ok:
            failures.append((seed, table.matched, table.fn_count,
                             {ax: table.fractions[ax][2] for ax in "xyz"}))
    s_b = shared_recons["S"]["B"]
    b_rows = []
    for seed in SEEDS:
        inp = s_b.like(s_b.values + shared_recons["input_mk"][("B", seed)].values)
        detected, _ = detect_direct_detailed(inp, DIRECT_CFG)
        table = accuracy_table(marker_sets[seed], detected, inp.voxel_mm)
        b_rows.append((seed, table.matched, table.fn_count, table.fp_count))
    b_fn = sum(r[2] for r in b_rows)
    b_rate = sum(r[1] for r in b_rows) / (12 * len(SEEDS))
    _report(3, not failures,
            f"scenario A: {5 - len(failures)}/5 seeds at 100% within 2 voxels"
            f"{'; failures: ' + str(failures) if failures else ''} | "
            f"scenario B (reported): rate {100 * b_rate:.1f}%, FN {b_fn}, "
            f"per-seed {b_rows}")
    assert not failures
    assert all(r[1] >= 1 for r in b_rows)  # B degrades but never collapses


def test_criterion_4_dynamic_threshold_constant():
    cfg = HoughConfig3d(radius_range_px=(7, 8), expected_marker_count=7,
                        nominal_radius_px=8.0)
    k = expected_marker_voxels(cfg)
    ok = k == 15013 and abs(k - 15000) / 15000 < 1e-3
    _report(4, ok, f"K(7 markers, r=8 px) = {k}, "
                   f"{100 * abs(k - 15000) / 15000:.3f}% from 15000")
    assert ok


def test_criterion_5_fdk_fidelity(desk):
    geom, _, _, _ = desk
    data = cylinder_stack_data(geom, 50.0, 0.02, geom.extended_detector_cols)
    ext = ProjectionStack(geom, geom.extended_detector_cols, geom.detector_rows,
                          geom.view_count, data, geom.view_angles_deg())
    native = truncate(ext)
    vol = reconstruct(native, ReconSpec((160, 160, 40), 1.0))
    x = vol.axis_coords_mm(0)[:, None]
    y = vol.axis_coords_mm(1)[None, :]
    inside = np.sqrt(x * x + y * y) < 0.8 * 50.0
    hu = mu_to_hu(vol.values[:, :, 20].astype(np.float64))
    mean_hu, std_hu = float(hu[inside].mean()), float(hu[inside].std())

    rng = np.random.default_rng(0)
    r_rad = math.radians(geom.scan_range_deg)
    gmax = geom.fan_half_angle_rad()
    gammas = rng.uniform(-gmax, gmax, 10000)
    wedge = np.maximum(r_rad - math.pi + 2 * gammas, 1e-9)
    betas = rng.uniform(0, 1, 10000) * wedge  # start-wedge rays: conjugate in range
    conj = betas + math.pi - 2 * gammas
    assert np.all((conj >= 0) & (conj <= r_rad))
    sums = (shortscan_weight(betas, gammas, r_rad)
            + shortscan_weight(conj, -gammas, r_rad))
    max_dev = float(np.abs(sums - 1.0).max())

    ok = abs(mean_hu) <= 30.0 and std_hu < 25.0 and max_dev < 1e-6
    _report(5, ok, f"water cylinder mean {mean_hu:+.2f} HU (|.| <= 30), "
                   f"std {std_hu:.2f} HU (< 25); conjugate sums over 10^4 "
                   f"pairs max |sum-1| = {max_dev:.2e}")
    assert ok


def test_criterion_6_wce_benefit(desk):
    geom, _, _, _ = desk
    scenario_b = ScenarioSpec.from_name("B")
    sgeom = scenario_geometry(geom, scenario_b)
    data = cylinder_stack_data(geom, 70.0, 0.02, geom.extended_detector_cols)
    ext = ProjectionStack(geom, geom.extended_detector_cols, geom.detector_rows,
                          geom.view_count, data, geom.view_angles_deg())
    tp = truncate(ext, sgeom.detector_cols)
    spec = ReconSpec((160, 160, 40), 1.0)
    wce_vol = reconstruct(extrapolate_stack(tp), spec)
    zf_vol = reconstruct(zero_fill(tp), spec)
    x = wce_vol.axis_coords_mm(0)[:, None]
    y = wce_vol.axis_coords_mm(1)[None, :]
    gt = np.where(np.sqrt(x * x + y * y) <= 70.0, 0.02, 0.0)
    fov_r = derive_fov(sgeom).radius_mm
    in_fov = np.sqrt(x * x + y * y) < fov_r

    def rmse(vol):
        sl = vol.values[:, :, 20].astype(np.float64)
        return float(np.sqrt(((sl - gt)[in_fov] ** 2).mean()))

    r_wce, r_zf = rmse(wce_vol), rmse(zf_vol)
    improvement = 1.0 - r_wce / r_zf
    ok = improvement >= 0.5
    _report(6, ok, f"RMSE inside FOV: WCE {r_wce:.5f} vs zero-fill {r_zf:.5f} "
                   f"(mu/mm) -> {100 * improvement:.1f}% improvement (>= 50%)")
    assert ok


def test_criterion_7_registration(desk, marker_sets):
    truth = marker_sets[1].centers_mm()
    assert len(truth) == 12
    _, exact = register_rigid(truth, truth)
    means, stds = [], []
    for seed in range(100):
        noise = np.random.default_rng(seed).normal(0.0, 0.1, truth.shape)
        _, rep = register_rigid(truth + noise, truth)
        means.append(rep.mean_error_mm)
        stds.append(rep.std_mm)
    mean_e, mean_s = float(np.mean(means)), float(np.mean(stds))
    ok = exact.mean_error_mm < 1e-9 and mean_e <= 0.2 and mean_s <= 0.15
    _report(7, ok, f"exact-input e = {exact.mean_error_mm:.2e} mm; noisy "
                   f"(sigma 0.1 mm, 100 seeds): mean e {mean_e:.3f} mm "
                   f"(<= 0.2), sigma {mean_s:.3f} mm (<= 0.15)")
    assert ok


def test_criterion_8_hough_oracle_equivalence():
    from truncmark.direct_detect import (accumulate_circles_2d,
                                         brute_force_accumulator_2d)

    # 2D: two binarized discs on a 64x64 field
    ax0 = np.arange(64, dtype=float)[:, None]
    ax1 = np.arange(64, dtype=float)[None, :]
    field = ((ax0 - 30.2) ** 2 + (ax1 - 25.8) ** 2 <= 25.0).astype(float)
    field += ((ax0 - 14.0) ** 2 + (ax1 - 46.0) ** 2 <= 12.25).astype(float)
    acc2, edges = accumulate_circles_2d(field, (3, 6), 0.5)
    dense2 = brute_force_accumulator_2d((64, 64), edges.astype(np.int64), 3.0,
                                        0.5, acc2.shape[2])
    eq2 = np.array_equal(acc2, dense2)
    argmax2 = (np.unravel_index(np.argmax(acc2), acc2.shape)
               == np.unravel_index(np.argmax(dense2), dense2.shape))

    # 3D: one voxelized sphere in a 48^3 grid
    ax = np.arange(48, dtype=float)
    d2 = ((ax[:, None, None] - 20) ** 2 + (ax[None, :, None] - 25) ** 2
          + (ax[None, None, :] - 17) ** 2)
    vol = (d2 <= 25.0).astype(np.float32)
    cand = vol > 0.5
    voters = np.argwhere(_surface_voxels(cand)).astype(np.int64)
    centers = np.argwhere(cand).astype(np.int64)
    cfg = HoughConfig3d(radius_range_px=(3, 6), expected_marker_count=1,
                        nominal_radius_px=5)
    acc3 = np.zeros((centers.shape[0], len(cfg.radii)), dtype=np.int32)
    _gather_votes(centers, voters, 3.0, 1.0, len(cfg.radii), acc3)
    dense3 = brute_force_accumulator_3d((48, 48, 48), voters, 3.0, 1.0,
                                        len(cfg.radii))
    eq3 = all(
        np.array_equal(acc3[i], dense3[cx, cy, cz])
        for i, (cx, cy, cz) in enumerate(centers)
    )
    di = np.unravel_index(np.argmax(dense3), dense3.shape)
    fi, fb = np.unravel_index(np.argmax(acc3), acc3.shape)
    argmax3 = tuple(centers[fi]) == di[:3] and fb == di[3]

    ok = eq2 and argmax2 and eq3 and argmax3
    _report(8, ok, f"2D accumulator equality: {eq2}, argmax match: {argmax2}; "
                   f"3D cell equality: {eq3}, argmax match: {argmax3}")
    assert ok
