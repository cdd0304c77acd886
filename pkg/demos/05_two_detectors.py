"""Run both detectors at desk scale and compare: the direct method reads
distorted markers straight from the truncated input volume, the recovery
method reads clean markers from the (oracle-recovered) label volume.

This is the full-size configuration the acceptance suite uses; expect a
couple of minutes on two cores. The forward projection of the anatomy is
computed once and shared between the two scenarios.
"""

import tempfile

from truncmark.config import GEOMETRY_PRESETS, RECON_PRESETS, default_marker_region
from truncmark.dataprep import (PrepParams, ProjectionCache, ScenarioSpec,
                                make_pair_task_specific)
from truncmark.direct_detect import DirectConfig, detect_direct
from truncmark.evalreg import accuracy_table, register_rigid
from truncmark.fdk import ReconSpec
from truncmark.geometry import ScanGeometry
from truncmark.sphere_detect import HoughConfig3d, detect_recovered
from truncmark.volume import generate_markers, synthetic_anatomy

geom = ScanGeometry(**GEOMETRY_PRESETS["desk"])
recon = ReconSpec(**RECON_PRESETS["desk"])
anatomy = synthetic_anatomy(recon.out_dims, recon.out_voxel_mm, rng_seed=0)
markers = generate_markers(2, count_range=(8, 8),
                           region=default_marker_region(recon),
                           radius_range=(3.0, 4.5))
params = PrepParams(recon=recon)
direct_cfg = DirectConfig()
recovery_cfg = HoughConfig3d(radius_range_px=(3, 5), expected_marker_count=8,
                             nominal_radius_px=3.75)

cache = ProjectionCache()
print(f"truth: {len(markers)} markers in the band above the body\n")
for scenario in (ScenarioSpec.from_name("A"), ScenarioSpec.from_name("B")):
    with tempfile.TemporaryDirectory() as td:
        pair = make_pair_task_specific(anatomy, markers, scenario, geom, 1, td,
                                       params=params, cache=cache)
        inp, lab = pair.load_input(), pair.load_label()
    det_direct = detect_direct(inp, direct_cfg)
    det_recovered = detect_recovered(lab, recovery_cfg)
    print(f"--- {scenario.name} ({scenario.fov_diameter_cm:.0f} cm FOV) ---")
    print(f"direct method on the input volume: {len(det_direct)} detections")
    print(accuracy_table(markers, det_direct, inp.voxel_mm).format_text())
    print(f"recovery method on the label volume: {len(det_recovered)} detections")
    print(accuracy_table(markers, det_recovered, lab.voxel_mm).format_text())
    if len(det_recovered) >= 3:
        _, report = register_rigid(det_recovered.centers_mm(),
                                   markers.centers_mm(), correspondence="auto")
        print(f"registration of recovered markers: mean error "
              f"{report.mean_error_mm:.3f} mm, sigma {report.std_mm:.3f} mm")
    print()

print("Severe truncation (scenario B) distorts markers outside the 12 cm FOV;")
print("the direct method may start missing them there, while detection on the")
print("recovered volume stays at full accuracy.")
