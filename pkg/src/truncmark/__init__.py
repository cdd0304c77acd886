"""truncmark: cone-beam CT simulation and fiducial-marker detection under
severe lateral data truncation.

The package covers the full desk-scale pipeline: scan geometry, phantoms and
analytic spherical markers, forward projection with photon noise,
water-cylinder extrapolation, short-scan FDK reconstruction, training-pair
generation whose input/label difference is confined to the marker regions,
two marker detectors (direct multi-step and recovery-side 3D Hough), and
evaluation/registration metrics.
"""

from .geometry import (FovSpec, GeometryError, Ray, ScanGeometry, ViewPose,
                       cols_for_fov, derive_fov, pixel_ray, view_pose)
from .volume import (HuMuScale, Marker, MarkerPlacementError, MarkerSet, Volume,
                     VolumeError, composite_with_markers, generate_markers,
                     hu_to_mu, marker_mask, mu_to_hu, synthetic_anatomy,
                     voxelize_markers)
from .io import (FormatError, read_marker_set, read_projections, read_volume,
                 write_detections_csv, write_marker_set, write_projections,
                 write_volume)
from .projector import (NoiseSpec, ProjectionError, ProjectionStack,
                        add_poisson_noise, combine, project_markers,
                        project_volume, truncate, zero_fill)
from .truncation import WceParams, extrapolate_row, extrapolate_stack
from .fdk import (FilterSpec, ReconSpec, reconstruct, redundancy_weights,
                  shortscan_weight)
from .dataprep import (BatchConfig, PairManifest, PrepParams, ScenarioSpec,
                       batch_generate, derive_seed, make_pair_conventional,
                       make_pair_task_specific, residual_confinement,
                       scenario_geometry)
from .direct_detect import (DepthEstimate, DirectConfig, InPlaneDetection,
                            SlabStack, compress_slabs, depth_baseline,
                            detect_direct, extract_cuboid, hough_circles_2d,
                            segment_baseline)
from .sphere_detect import (HoughConfig3d, SphereDetection, detect_recovered,
                            dynamic_threshold, hough_spheres, refine_subvoxel)
from .evalreg import (AccuracyTable, RecoveryMetrics, RegistrationError,
                      RegistrationReport, RigidTransform, accuracy_table,
                      marker_f1, register_rigid)

__version__ = "0.1.0"
