"""Run configuration: geometry presets, scenario handling and strict JSON
config parsing (unknown keys are rejected).

The desk preset keeps the fan angle and the truncated/extended detector
ratio of the clinical C-arm geometry but shrinks counts so full pipelines
run in minutes on a laptop; the paper preset carries the full-scale values.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .dataprep import BatchConfig, PrepParams, ScenarioSpec
from .direct_detect import DirectConfig
from .fdk import FilterSpec, ReconSpec
from .geometry import ScanGeometry
from .sphere_detect import HoughConfig3d
from .truncation import WceParams
from .volume import HuMuScale


class ConfigError(ValueError):
    pass


GEOMETRY_PRESETS = {
    "desk": dict(
        source_to_detector_mm=1164.0,
        source_to_isocenter_mm=622.0,
        detector_cols=244,
        detector_rows=128,
        extended_detector_cols=512,
        detector_pixel_mm=1.22,
        scan_range_deg=200.0,
        angular_step_deg=1.0,
        start_angle_deg=0.0,
    ),
    "paper": dict(
        source_to_detector_mm=1164.0,
        source_to_isocenter_mm=622.0,
        detector_cols=976,
        detector_rows=976,
        extended_detector_cols=2048,
        detector_pixel_mm=0.305,
        scan_range_deg=200.0,
        angular_step_deg=0.5,
        start_angle_deg=0.0,
    ),
}

RECON_PRESETS = {
    "desk": dict(out_dims=(160, 160, 120), out_voxel_mm=1.0),
    "paper": dict(out_dims=(800, 800, 600), out_voxel_mm=0.313),
}


def default_marker_region(recon: ReconSpec) -> tuple:
    """Marker band in the air gap above the body, near the lateral mid-line.

    Sized so markers stay inside the regular-scenario FOV (clean reference
    shapes) while reaching well outside the severe-truncation FOV, and so
    their detector-row footprint stays on the panel for every view.
    """
    w, h, d = (recon.out_voxel_mm * (n - 1) for n in recon.out_dims)
    return ((-0.189 * w, 0.189 * w), (0.283 * h, 0.409 * h), (-0.252 * d, 0.252 * d))


@dataclass(frozen=True)
class RunConfig:
    preset: str = "desk"
    geometry: ScanGeometry = field(
        default_factory=lambda: ScanGeometry(**GEOMETRY_PRESETS["desk"]))
    scenario: ScenarioSpec = field(
        default_factory=lambda: ScenarioSpec.from_name("A"))
    scenarios: tuple[str, ...] = ("A", "B", "C")
    seed: int = 0
    phantom_seed: int = 0
    workers: int | None = None
    out_dir: str = "runs/out"
    prep_mode: str = "task_specific"
    method: str = "recovery"
    pairs_per_scenario: int = 2
    marker_count_range: tuple[int, int] = (8, 12)
    marker_region: tuple | None = None
    marker_radius_range: tuple[float, float] = (3.0, 4.5)
    marker_intensity_range: tuple[float, float] = (1000.0, 3000.0)
    dense_markers: bool = False
    recon: ReconSpec = field(default_factory=lambda: ReconSpec(**RECON_PRESETS["desk"]))
    wce: WceParams = field(default_factory=WceParams)
    mask_dilation_voxels: float = 3.0
    mu_water_mm: float = 0.02
    direct: DirectConfig = field(default_factory=DirectConfig)
    recovery: HoughConfig3d = field(default_factory=HoughConfig3d)

    def scale(self) -> HuMuScale:
        return HuMuScale(self.mu_water_mm)

    def prep_params(self) -> PrepParams:
        return PrepParams(recon=self.recon, wce=self.wce,
                          mask_dilation_voxels=self.mask_dilation_voxels,
                          scale=self.scale())

    def batch_config(self) -> BatchConfig:
        region = self.marker_region or default_marker_region(self.recon)
        return BatchConfig(
            scenarios=self.scenarios,
            pairs_per_scenario=self.pairs_per_scenario,
            prep_mode=self.prep_mode,
            master_seed=self.seed,
            marker_count_range=self.marker_count_range,
            marker_region=region,
            marker_radius_range=self.marker_radius_range,
            marker_intensity_range=self.marker_intensity_range,
            dense_markers=self.dense_markers,
        )

    def resolved_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["geometry"] = dataclasses.asdict(self.geometry)
        d["scenario"] = dataclasses.asdict(self.scenario)
        d["marker_region"] = self.marker_region or default_marker_region(self.recon)
        return d


def _reject_unknown(data: dict, allowed, path: str) -> None:
    unknown = set(data) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown config key(s) at {path}: {sorted(unknown)}")


def _parse_geometry(preset: str, data: dict | None) -> ScanGeometry:
    base = dict(GEOMETRY_PRESETS[preset])
    if data:
        _reject_unknown(data, base, "geometry")
        base.update(data)
    return ScanGeometry(**base)


def _parse_scenario(value) -> ScenarioSpec:
    if isinstance(value, str):
        return ScenarioSpec.from_name(value)
    if isinstance(value, dict):
        _reject_unknown(value, ("name", "fov_diameter_cm", "photons"), "scenario")
        return ScenarioSpec(**value)
    raise ConfigError(f"scenario must be a name or object, got {type(value).__name__}")


def _parse_recon(preset: str, data: dict | None) -> ReconSpec:
    base = dict(RECON_PRESETS[preset])
    filt = FilterSpec()
    if data:
        _reject_unknown(data, ("out_dims", "out_voxel_mm", "filter",
                               "short_scan_weighting"), "recon")
        data = dict(data)
        fdata = data.pop("filter", None)
        if fdata is not None:
            _reject_unknown(fdata, ("kind", "cutoff_frac"), "recon.filter")
            filt = FilterSpec(**fdata)
        base.update({k: tuple(v) if k == "out_dims" else v for k, v in data.items()
                     if k != "short_scan_weighting"})
    return ReconSpec(filter=filt, **base)


def _parse_section(cls, data: dict | None, path: str, **defaults):
    kwargs = dict(defaults)
    if data:
        names = [f.name for f in dataclasses.fields(cls)]
        _reject_unknown(data, names, path)
        kwargs.update({
            k: tuple(v) if isinstance(v, list) else v for k, v in data.items()
        })
    return cls(**kwargs)


_TOP_KEYS = (
    "preset", "geometry", "scenario", "scenarios", "seed", "phantom_seed",
    "workers", "out_dir", "prep_mode", "method", "pairs_per_scenario",
    "markers", "recon", "wce", "mask_dilation_voxels", "mu_water_mm",
    "direct", "recovery",
)

_MARKER_KEYS = ("count_range", "region", "radius_range", "intensity_range", "dense")


def parse_config(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    _reject_unknown(data, _TOP_KEYS, "<root>")
    preset = data.get("preset", "desk")
    if preset not in GEOMETRY_PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    try:
        geometry = _parse_geometry(preset, data.get("geometry"))
        scenario = _parse_scenario(data.get("scenario", "A"))
        recon = _parse_recon(preset, data.get("recon"))
        wce = _parse_section(WceParams, data.get("wce"), "wce")
        direct = _parse_section(DirectConfig, data.get("direct"), "direct")
        recovery = _parse_section(HoughConfig3d, data.get("recovery"), "recovery")
        markers = data.get("markers", {})
        _reject_unknown(markers, _MARKER_KEYS, "markers")
        method = data.get("method", "recovery")
        if method not in ("direct", "recovery"):
            raise ConfigError(f"unknown method {method!r}")
        prep_mode = data.get("prep_mode", "task_specific")
        if prep_mode not in ("task_specific", "conventional"):
            raise ConfigError(f"unknown prep_mode {prep_mode!r}")
        scenarios = tuple(data.get("scenarios", ("A", "B", "C")))
        for s in scenarios:
            ScenarioSpec.from_name(s)
        region = markers.get("region")
        return RunConfig(
            preset=preset,
            geometry=geometry,
            scenario=scenario,
            scenarios=scenarios,
            seed=int(data.get("seed", 0)),
            phantom_seed=int(data.get("phantom_seed", 0)),
            workers=data.get("workers"),
            out_dir=str(data.get("out_dir", "runs/out")),
            prep_mode=prep_mode,
            method=method,
            pairs_per_scenario=int(data.get("pairs_per_scenario", 2)),
            marker_count_range=tuple(markers.get("count_range", (8, 12))),
            marker_region=tuple(tuple(r) for r in region) if region else None,
            marker_radius_range=tuple(markers.get("radius_range", (3.0, 4.5))),
            marker_intensity_range=tuple(markers.get("intensity_range", (1000.0, 3000.0))),
            dense_markers=bool(markers.get("dense", False)),
            recon=recon,
            wce=wce,
            mask_dilation_voxels=float(data.get("mask_dilation_voxels", 3.0)),
            mu_water_mm=float(data.get("mu_water_mm", 0.02)),
            direct=direct,
            recovery=recovery,
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def load_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    return parse_config(data)
