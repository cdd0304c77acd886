"""C-arm cone-beam acquisition geometry: circular trajectory, per-view poses,
pixel rays and derived quantities (fan angle, field of view, magnification).

Conventions: isocenter at the world origin, source orbit in the x-y plane,
detector v-axis along +z, angles in degrees, lengths in mm.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict, field

import numpy as np


class GeometryError(ValueError):
    """Invalid scan geometry or out-of-range detector/view index."""


@dataclass(frozen=True)
class ScanGeometry:
    """Full description of one circular cone-beam acquisition.

    The truncated detector (``detector_cols``) is what the physical system
    measures; the extended detector (``extended_detector_cols``) is the
    virtual wide detector used for reference data. Both share the pixel
    pitch and row count, and the extension is symmetric about the principal
    ray (``extended - truncated`` must be even so pixel centers align).
    """

    source_to_detector_mm: float
    source_to_isocenter_mm: float
    detector_cols: int
    detector_rows: int
    extended_detector_cols: int
    detector_pixel_mm: float
    scan_range_deg: float
    angular_step_deg: float
    start_angle_deg: float = 0.0

    def __post_init__(self):
        sdd, sid = self.source_to_detector_mm, self.source_to_isocenter_mm
        if not (sdd > sid > 0):
            raise GeometryError(f"need SDD > SID > 0, got SDD={sdd}, SID={sid}")
        for name in ("detector_cols", "detector_rows", "extended_detector_cols"):
            if getattr(self, name) <= 0:
                raise GeometryError(f"{name} must be positive")
        if self.detector_pixel_mm <= 0:
            raise GeometryError("detector_pixel_mm must be positive")
        if self.extended_detector_cols < self.detector_cols:
            raise GeometryError("extended detector narrower than truncated detector")
        if (self.extended_detector_cols - self.detector_cols) % 2 != 0:
            raise GeometryError("extended - truncated column count must be even")
        if self.angular_step_deg <= 0 or self.scan_range_deg <= 0:
            raise GeometryError("scan range and angular step must be positive")
        n = self.scan_range_deg / self.angular_step_deg
        if abs(n - round(n)) > 1e-9:
            raise GeometryError(
                f"angular_step {self.angular_step_deg} does not divide "
                f"scan_range {self.scan_range_deg} into an integer view count"
            )
        # Short-scan condition: the scan must cover 180 deg plus the full fan.
        min_range = 180.0 + 2.0 * math.degrees(self.fan_half_angle_rad(self.detector_cols))
        if self.scan_range_deg < min_range - 1e-9:
            raise GeometryError(
                f"scan range {self.scan_range_deg} deg violates the short-scan "
                f"condition (needs >= {min_range:.2f} deg)"
            )

    @property
    def view_count(self) -> int:
        return int(round(self.scan_range_deg / self.angular_step_deg))

    @property
    def magnification(self) -> float:
        return self.source_to_detector_mm / self.source_to_isocenter_mm

    def fan_half_angle_rad(self, cols: int | None = None) -> float:
        """Half opening angle of the fan subtended by ``cols`` detector columns."""
        if cols is None:
            cols = self.detector_cols
        half_width = 0.5 * cols * self.detector_pixel_mm
        return math.atan2(half_width, self.source_to_detector_mm)

    def view_angles_deg(self) -> np.ndarray:
        return self.start_angle_deg + self.angular_step_deg * np.arange(self.view_count)

    def with_detector_cols(self, cols: int) -> "ScanGeometry":
        """Same geometry with a different truncated-detector width."""
        d = asdict(self)
        d["detector_cols"] = int(cols)
        return ScanGeometry(**d)

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, text: str) -> "ScanGeometry":
        return cls(**json.loads(text))


@dataclass(frozen=True)
class Ray:
    origin_mm: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.origin_mm, dtype=float)
        d = np.asarray(self.direction, dtype=float)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise GeometryError("ray direction must be unit length")
        object.__setattr__(self, "origin_mm", o)
        object.__setattr__(self, "direction", d)


@dataclass(frozen=True)
class FovSpec:
    radius_mm: float
    center_mm: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.radius_mm <= 0:
            raise GeometryError("FOV radius must be positive")


@dataclass(frozen=True)
class ViewPose:
    """Source position and detector frame for one view.

    ``detector_origin_mm`` is the principal point (u = v = 0), i.e. the
    detector center; pixel centers sit at symmetric u/v offsets around it.
    """

    source_mm: np.ndarray
    detector_origin_mm: np.ndarray
    detector_u_axis: np.ndarray
    detector_v_axis: np.ndarray
    angle_deg: float = field(default=0.0)


def derive_fov(geom: ScanGeometry, cols: int | None = None) -> FovSpec:
    """Field of view of the (truncated) detector: the isocentric cylinder seen
    from every view, radius = SID * sin(fan half-angle)."""
    gamma = geom.fan_half_angle_rad(cols)
    return FovSpec(radius_mm=geom.source_to_isocenter_mm * math.sin(gamma))


def cols_for_fov(geom: ScanGeometry, fov_diameter_mm: float) -> int:
    """Detector column count whose fan covers a given FOV diameter.

    Rounded down to the widest even-offset width not exceeding the native
    truncated detector, so scenario crops stay aligned with pixel centers.
    """
    r = 0.5 * fov_diameter_mm
    sid = geom.source_to_isocenter_mm
    if r >= sid:
        raise GeometryError("requested FOV larger than the scanner orbit")
    half_width = geom.source_to_detector_mm * math.tan(math.asin(r / sid))
    cols = int(round(2.0 * half_width / geom.detector_pixel_mm))
    cols -= (geom.extended_detector_cols - cols) % 2  # keep crop offset integral
    return min(cols, geom.detector_cols)


def view_pose(geom: ScanGeometry, view_index: int) -> ViewPose:
    """Source/detector pose for one view of the circular trajectory."""
    if not 0 <= view_index < geom.view_count:
        raise GeometryError(
            f"view index {view_index} outside [0, {geom.view_count})"
        )
    beta = math.radians(geom.start_angle_deg + view_index * geom.angular_step_deg)
    cb, sb = math.cos(beta), math.sin(beta)
    sid, sdd = geom.source_to_isocenter_mm, geom.source_to_detector_mm
    source = np.array([sid * cb, sid * sb, 0.0])
    # Detector plane is perpendicular to the source-isocenter line, SDD away
    # from the source, so its center sits at (SID - SDD) along the source ray.
    center = np.array([(sid - sdd) * cb, (sid - sdd) * sb, 0.0])
    u_axis = np.array([-sb, cb, 0.0])
    v_axis = np.array([0.0, 0.0, 1.0])
    return ViewPose(source, center, u_axis, v_axis, math.degrees(beta))


def pixel_center_mm(pose: ViewPose, u: int, v: int, cols: int, rows: int,
                    pixel_mm: float) -> np.ndarray:
    du = (u - 0.5 * (cols - 1)) * pixel_mm
    dv = (v - 0.5 * (rows - 1)) * pixel_mm
    return pose.detector_origin_mm + du * pose.detector_u_axis + dv * pose.detector_v_axis


def pixel_ray(pose: ViewPose, u: int, v: int, cols: int, rows: int,
              pixel_mm: float) -> Ray:
    """Ray from the source through the center of detector pixel (u, v)."""
    if not (0 <= u < cols and 0 <= v < rows):
        raise GeometryError(f"pixel ({u}, {v}) outside {cols}x{rows} detector")
    target = pixel_center_mm(pose, u, v, cols, rows, pixel_mm)
    d = target - pose.source_mm
    return Ray(pose.source_mm.copy(), d / np.linalg.norm(d))


def point_line_distance_mm(point: np.ndarray, ray: Ray) -> float:
    rel = np.asarray(point, dtype=float) - ray.origin_mm
    t = float(np.dot(rel, ray.direction))
    return float(np.linalg.norm(rel - t * ray.direction))
