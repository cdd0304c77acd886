"""Training-pair generation: conventional pairs (truncated input vs complete
label, everything differs) and task-specific pairs built so that the
input/label difference is confined to the marker regions.

Task-specific pairs share one anatomy reconstruction S between input and
label; markers are projected separately onto the truncated and the extended
detector, reconstructed, and added to S. Photon noise lives only in S, so it
cancels exactly in the pair residual.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import io
from .fdk import ReconSpec, reconstruct
from .geometry import ScanGeometry, cols_for_fov
from .projector import (NoiseSpec, ProjectionStack, add_poisson_noise,
                        project_markers, project_volume, truncate)
from .truncation import WceParams, extrapolate_stack
from .volume import (HuMuScale, MarkerSet, Volume, generate_markers,
                     marker_mask, VolumeError)

CANONICAL_SCENARIOS = {
    "A_regular": (16.0, 1e6),
    "B_severe_truncation": (12.0, 1e6),
    "C_heavy_noise": (16.0, 1e4),
}


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    fov_diameter_cm: float
    photons: float

    def __post_init__(self):
        if self.fov_diameter_cm <= 0 or self.photons <= 0:
            raise ValueError("scenario parameters must be positive")
        canonical = CANONICAL_SCENARIOS.get(self.name)
        if canonical is not None and canonical != (self.fov_diameter_cm, self.photons):
            raise ValueError(
                f"scenario {self.name} must use fov/photons {canonical}, "
                f"got {(self.fov_diameter_cm, self.photons)}"
            )

    @classmethod
    def from_name(cls, short: str) -> "ScenarioSpec":
        key = {
            "A": "A_regular",
            "B": "B_severe_truncation",
            "C": "C_heavy_noise",
        }.get(short, short)
        if key not in CANONICAL_SCENARIOS:
            raise ValueError(f"unknown scenario {short!r}")
        fov, photons = CANONICAL_SCENARIOS[key]
        return cls(key, fov, photons)


@dataclass(frozen=True)
class PairManifest:
    pair_id: str
    scenario: ScenarioSpec
    input_path: str
    label_path: str
    marker_mask_path: str
    markers: MarkerSet
    geometry: ScanGeometry
    seed: int
    prep_mode: str  # "conventional" | "task_specific"

    def to_json(self) -> str:
        return json.dumps(
            {
                "pair_id": self.pair_id,
                "scenario": asdict(self.scenario),
                "input_path": self.input_path,
                "label_path": self.label_path,
                "marker_mask_path": self.marker_mask_path,
                "markers": json.loads(self.markers.to_json()),
                "geometry": json.loads(self.geometry.to_json()),
                "seed": self.seed,
                "prep_mode": self.prep_mode,
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "PairManifest":
        d = json.loads(text)
        return cls(
            pair_id=d["pair_id"],
            scenario=ScenarioSpec(**d["scenario"]),
            input_path=d["input_path"],
            label_path=d["label_path"],
            marker_mask_path=d["marker_mask_path"],
            markers=MarkerSet.from_json(json.dumps(d["markers"])),
            geometry=ScanGeometry(**d["geometry"]),
            seed=d["seed"],
            prep_mode=d["prep_mode"],
        )

    def load_input(self) -> Volume:
        return io.read_volume(self.input_path)

    def load_label(self) -> Volume:
        return io.read_volume(self.label_path)

    def load_mask(self) -> np.ndarray:
        return io.read_volume(self.marker_mask_path).values > 0.5


@dataclass(frozen=True)
class PrepParams:
    recon: ReconSpec = field(default_factory=ReconSpec)
    wce: WceParams = field(default_factory=WceParams)
    mask_dilation_voxels: float = 3.0
    scale: HuMuScale = field(default_factory=HuMuScale)


def derive_seed(master: int, *parts: int) -> int:
    """Stable per-purpose substream seed."""
    return int(np.random.SeedSequence([int(master), *[int(p) for p in parts]]).generate_state(1)[0])


def scenario_geometry(geom: ScanGeometry, scenario: ScenarioSpec) -> ScanGeometry:
    """Geometry whose truncated detector realizes the scenario FOV (never
    wider than the native truncated detector)."""
    cols = cols_for_fov(geom, scenario.fov_diameter_cm * 10.0)
    return geom if cols == geom.detector_cols else geom.with_detector_cols(cols)


def _check_markers_in_air(anatomy: Volume, markers: MarkerSet) -> None:
    from .volume import _sphere_mask

    for m in markers:
        sl, mask = _sphere_mask(anatomy, m.center_mm, m.radius_mm)
        if mask is not None and np.any(anatomy.values[sl][mask] != 0.0):
            raise VolumeError(
                f"marker at {m.center_mm} overlaps anatomy; projection-domain "
                "combination requires markers in air"
            )


class ProjectionCache(dict):
    """Optional memo for the expensive anatomy forward projection; safe to
    share across pairs that reuse the same anatomy and geometry."""


def _anatomy_extended(anatomy: Volume, geom: ScanGeometry,
                      cache: ProjectionCache | None) -> ProjectionStack:
    key = ("anatomy_ext", id(anatomy), geom)
    if cache is not None and key in cache:
        return cache[key]
    stack = project_volume(anatomy, geom, extended=True)
    if cache is not None:
        cache[key] = stack
    return stack


def _write_member(vol: Volume, path: Path) -> str:
    path.parent.mkdir(parents=True, exist_ok=True)
    io.write_volume(vol, path)
    return str(path)


def make_pair_task_specific(
    anatomy: Volume,
    markers: MarkerSet,
    scenario: ScenarioSpec,
    geom: ScanGeometry,
    seed: int,
    out_dir,
    params: PrepParams = PrepParams(),
    pair_id: str | None = None,
    cache: ProjectionCache | None = None,
) -> PairManifest:
    """input = S + R(WCE(A_TP(markers))), label = S + R(A_UTP(markers)) with
    the shared anatomy term S = R(WCE(noise(A_TP(anatomy))))."""
    _check_markers_in_air(anatomy, markers)
    sgeom = scenario_geometry(geom, scenario)
    out_dir = Path(out_dir)
    pair_id = pair_id or f"ts_{scenario.name}_{seed}"

    anatomy_tp = truncate(_anatomy_extended(anatomy, geom, cache), sgeom.detector_cols)
    noisy = add_poisson_noise(
        anatomy_tp, NoiseSpec(scenario.photons, derive_seed(seed, 0xA0)))
    shared = reconstruct(extrapolate_stack(noisy, params.wce, params.scale),
                         params.recon)

    mk_tp = project_markers(markers, sgeom, extended=False, scale=params.scale)
    mk_utp = project_markers(markers, sgeom, extended=True, scale=params.scale)
    input_vol = shared.like(
        shared.values
        + reconstruct(extrapolate_stack(mk_tp, params.wce, params.scale),
                      params.recon).values)
    label_vol = shared.like(shared.values + reconstruct(mk_utp, params.recon).values)

    mask = marker_mask(input_vol, markers, params.mask_dilation_voxels)
    return _finish_pair(pair_id, scenario, input_vol, label_vol, mask, markers,
                        sgeom, seed, "task_specific", out_dir)


def make_pair_conventional(
    anatomy: Volume,
    markers: MarkerSet,
    scenario: ScenarioSpec,
    geom: ScanGeometry,
    seed: int,
    out_dir,
    params: PrepParams = PrepParams(),
    pair_id: str | None = None,
    cache: ProjectionCache | None = None,
) -> PairManifest:
    """input = R(WCE(noise(A_TP(anatomy (+) markers)))),
    label = R(A_UTP(anatomy (+) markers)); everything differs between the
    two members (noise, truncation artifacts and markers)."""
    _check_markers_in_air(anatomy, markers)
    sgeom = scenario_geometry(geom, scenario)
    out_dir = Path(out_dir)
    pair_id = pair_id or f"conv_{scenario.name}_{seed}"

    anatomy_ext = _anatomy_extended(anatomy, geom, cache)
    anatomy_tp = truncate(anatomy_ext, sgeom.detector_cols)
    mk_tp = project_markers(markers, sgeom, extended=False, scale=params.scale)
    mk_utp = project_markers(markers, sgeom, extended=True, scale=params.scale)

    combined_tp = anatomy_tp.like(anatomy_tp.data + mk_tp.data)
    noisy = add_poisson_noise(
        combined_tp, NoiseSpec(scenario.photons, derive_seed(seed, 0xA0)))
    input_vol = reconstruct(extrapolate_stack(noisy, params.wce, params.scale),
                            params.recon)

    ext_cols = geom.extended_detector_cols
    combined_ext = np.array(mk_utp.data)
    off = (ext_cols - anatomy_ext.cols_used) // 2
    combined_ext[:, :, off:off + anatomy_ext.cols_used] += anatomy_ext.data
    label_stack = mk_utp.like(combined_ext)
    label_vol = reconstruct(label_stack, params.recon)

    mask = marker_mask(input_vol, markers, params.mask_dilation_voxels)
    return _finish_pair(pair_id, scenario, input_vol, label_vol, mask, markers,
                        sgeom, seed, "conventional", out_dir)


def _finish_pair(pair_id, scenario, input_vol, label_vol, mask, markers,
                 geom, seed, mode, out_dir: Path) -> PairManifest:
    mask_vol = input_vol.like(mask.astype(np.float32))
    manifest = PairManifest(
        pair_id=pair_id,
        scenario=scenario,
        input_path=_write_member(input_vol, out_dir / f"{pair_id}_input.mvol"),
        label_path=_write_member(label_vol, out_dir / f"{pair_id}_label.mvol"),
        marker_mask_path=_write_member(mask_vol, out_dir / f"{pair_id}_mask.mvol"),
        markers=markers,
        geometry=geom,
        seed=seed,
        prep_mode=mode,
    )
    (out_dir / f"{pair_id}.json").write_text(manifest.to_json())
    io.write_marker_set(markers, out_dir / f"{pair_id}_markers.json")
    return manifest


def residual_confinement(input_vol: Volume, label_vol: Volume,
                         mask: np.ndarray) -> float:
    """Fraction of (label - input) energy (sum of squares) inside the mask."""
    res = label_vol.values.astype(np.float64) - input_vol.values.astype(np.float64)
    total = float((res**2).sum())
    if total == 0.0:
        return 1.0
    return float((res[mask] ** 2).sum()) / total


@dataclass(frozen=True)
class BatchConfig:
    scenarios: tuple[str, ...] = ("A", "B", "C")
    pairs_per_scenario: int = 2
    prep_mode: str = "task_specific"
    master_seed: int = 0
    marker_count_range: tuple[int, int] = (8, 25)
    marker_region: tuple = ((-40.0, 40.0), (45.0, 72.0), (-25.0, 25.0))
    marker_radius_range: tuple[float, float] = (3.0, 6.0)
    marker_intensity_range: tuple[float, float] = (1000.0, 3000.0)
    dense_markers: bool = False

    def __post_init__(self):
        if self.prep_mode not in ("conventional", "task_specific"):
            raise ValueError(f"unknown prep mode {self.prep_mode!r}")


def dense_marker_params(count_range, radius_range, region):
    """Dense-insertion adjustment: >= 100 small markers per volume (used to
    raise marker pixel counts in recovery-style training sets). Radii shrink
    and the band widens so the x-z non-overlap constraint stays satisfiable."""
    count_range = (max(100, count_range[0]), max(120, count_range[1]))
    radius_range = (1.2, 2.2)
    (x0, x1), yr, (z0, z1) = region
    region = ((x0 * 1.25, x1 * 1.25), yr, (z0 * 1.1, z1 * 1.1))
    return count_range, radius_range, region


def batch_generate(
    anatomy: Volume,
    geom: ScanGeometry,
    config: BatchConfig,
    out_dir,
    params: PrepParams = PrepParams(),
    cache: ProjectionCache | None = None,
) -> list[PairManifest]:
    """Deterministic pair set; per-pair seeds derive from the master seed."""
    if cache is None:
        cache = ProjectionCache()
    make = (make_pair_task_specific if config.prep_mode == "task_specific"
            else make_pair_conventional)
    count_range = config.marker_count_range
    radius_range = config.marker_radius_range
    region = config.marker_region
    if config.dense_markers:
        count_range, radius_range, region = dense_marker_params(
            count_range, radius_range, region)
    manifests = []
    for s_i, short in enumerate(config.scenarios):
        scenario = ScenarioSpec.from_name(short)
        for p_i in range(config.pairs_per_scenario):
            seed = derive_seed(config.master_seed, s_i, p_i)
            markers = generate_markers(
                derive_seed(seed, 0x3A),
                count_range=count_range,
                region=region,
                radius_range=radius_range,
                intensity_range=config.marker_intensity_range,
            )
            manifests.append(
                make(anatomy, markers, scenario, geom, seed, out_dir,
                     params=params, cache=cache,
                     pair_id=f"{config.prep_mode}_{scenario.name}_s{seed & 0xFFFF:04x}_{p_i}")
            )
    return manifests
