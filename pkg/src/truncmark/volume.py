"""Voxel volume container, HU/attenuation conversion, synthetic anatomy and
spherical fiducial marker generation.

Volumes store linear attenuation (mm^-1) on an isotropic grid; ``origin_mm``
is the world position of the center of voxel (0, 0, 0) and arrays are indexed
``values[ix, iy, iz]``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class VolumeError(ValueError):
    """Malformed volume data or impossible marker placement."""


class MarkerPlacementError(VolumeError):
    """Rejection sampling could not satisfy the x-z non-overlap constraint."""


@dataclass(frozen=True)
class HuMuScale:
    """Affine HU <-> attenuation map, water at ``mu_water_mm``."""

    mu_water_mm: float = 0.02

    def __post_init__(self):
        if self.mu_water_mm <= 0:
            raise VolumeError("mu_water_mm must be positive")


def hu_to_mu(hu, scale: HuMuScale = HuMuScale()):
    """mu = mu_water * (1 + HU/1000); air (-1000 HU) maps to 0."""
    return scale.mu_water_mm * (1.0 + np.asarray(hu, dtype=float) / 1000.0)


def mu_to_hu(mu, scale: HuMuScale = HuMuScale()):
    return 1000.0 * (np.asarray(mu, dtype=float) / scale.mu_water_mm - 1.0)


@dataclass(frozen=True)
class Volume:
    dims: tuple[int, int, int]
    voxel_mm: float
    origin_mm: tuple[float, float, float]
    values: np.ndarray

    def __post_init__(self):
        nx, ny, nz = self.dims
        if min(nx, ny, nz) <= 0 or self.voxel_mm <= 0:
            raise VolumeError("dims and voxel size must be positive")
        v = self.values
        if v.shape != (nx, ny, nz):
            raise VolumeError(f"values shape {v.shape} does not match dims {self.dims}")
        if not np.all(np.isfinite(v)):
            idx = np.argwhere(~np.isfinite(v))[0]
            raise VolumeError(f"non-finite voxel at index {tuple(int(i) for i in idx)}")
        object.__setattr__(self, "values", np.ascontiguousarray(v, dtype=np.float32))
        object.__setattr__(self, "origin_mm", tuple(float(c) for c in self.origin_mm))
        object.__setattr__(self, "dims", (int(nx), int(ny), int(nz)))

    @classmethod
    def centered(cls, dims, voxel_mm, values=None) -> "Volume":
        """Volume whose grid is centered on the isocenter."""
        dims = tuple(int(d) for d in dims)
        origin = tuple(-0.5 * (d - 1) * voxel_mm for d in dims)
        if values is None:
            values = np.zeros(dims, dtype=np.float32)
        return cls(dims, float(voxel_mm), origin, values)

    def like(self, values: np.ndarray) -> "Volume":
        return Volume(self.dims, self.voxel_mm, self.origin_mm, values)

    def axis_coords_mm(self, axis: int) -> np.ndarray:
        return self.origin_mm[axis] + self.voxel_mm * np.arange(self.dims[axis])

    def index_to_mm(self, idx) -> np.ndarray:
        return np.asarray(self.origin_mm) + self.voxel_mm * np.asarray(idx, dtype=float)

    def mm_to_index(self, pos_mm) -> np.ndarray:
        return (np.asarray(pos_mm, dtype=float) - np.asarray(self.origin_mm)) / self.voxel_mm


@dataclass(frozen=True)
class Marker:
    center_mm: tuple[float, float, float]
    radius_mm: float
    intensity_hu: float


@dataclass(frozen=True)
class MarkerSet:
    markers: tuple[Marker, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "markers", tuple(self.markers))

    def __len__(self):
        return len(self.markers)

    def __iter__(self):
        return iter(self.markers)

    def centers_mm(self) -> np.ndarray:
        if not self.markers:
            return np.zeros((0, 3))
        return np.array([m.center_mm for m in self.markers], dtype=float)

    def to_json(self) -> str:
        return json.dumps(
            [
                {
                    "center_mm": list(m.center_mm),
                    "radius_mm": m.radius_mm,
                    "intensity_hu": m.intensity_hu,
                }
                for m in self.markers
            ]
        )

    @classmethod
    def from_json(cls, text: str) -> "MarkerSet":
        return cls(
            tuple(
                Marker(tuple(d["center_mm"]), d["radius_mm"], d["intensity_hu"])
                for d in json.loads(text)
            )
        )


def check_xz_overlap(markers: MarkerSet) -> bool:
    """True when no two marker discs overlap in the x-z plane."""
    ms = markers.markers
    for i in range(len(ms)):
        for j in range(i + 1, len(ms)):
            a, b = ms[i], ms[j]
            d = np.hypot(a.center_mm[0] - b.center_mm[0], a.center_mm[2] - b.center_mm[2])
            if d <= a.radius_mm + b.radius_mm:
                return False
    return True


def generate_markers(
    rng_seed: int,
    count_range: tuple[int, int] = (8, 25),
    region=((-30.0, 30.0), (45.0, 65.0), (-30.0, 30.0)),
    radius_range: tuple[float, float] = (3.0, 6.0),
    intensity_range: tuple[float, float] = (1000.0, 3000.0),
    max_attempts: int = 20000,
) -> MarkerSet:
    """Random spherical markers inside an axis-aligned box, rejected until no
    two spheres overlap when projected onto the x-z plane.

    Deterministic for a given seed. Raises :class:`MarkerPlacementError` when
    the box cannot host the drawn count within ``max_attempts`` placements.
    """
    rng = np.random.default_rng(rng_seed)
    lo, hi = count_range
    if lo > hi or lo < 1:
        raise VolumeError(f"bad count range {count_range}")
    count = int(rng.integers(lo, hi + 1))
    (x0, x1), (y0, y1), (z0, z1) = region

    placed: list[Marker] = []
    attempts = 0
    while len(placed) < count:
        if attempts >= max_attempts:
            raise MarkerPlacementError(
                f"placed {len(placed)}/{count} markers in {attempts} attempts; "
                "x-z non-overlap constraint cannot be met in this region"
            )
        attempts += 1
        r = float(rng.uniform(*radius_range))
        if x1 - x0 < 2 * r or y1 - y0 < 2 * r or z1 - z0 < 2 * r:
            raise MarkerPlacementError(f"region too small for marker radius {r:.2f} mm")
        cx = float(rng.uniform(x0 + r, x1 - r))
        cy = float(rng.uniform(y0 + r, y1 - r))
        cz = float(rng.uniform(z0 + r, z1 - r))
        ok = all(
            np.hypot(cx - m.center_mm[0], cz - m.center_mm[2]) > r + m.radius_mm
            for m in placed
        )
        if ok:
            hu = float(rng.uniform(*intensity_range))
            placed.append(Marker((cx, cy, cz), r, hu))
    return MarkerSet(tuple(placed))


def synthetic_anatomy(
    dims=(160, 160, 120),
    voxel_mm: float = 1.0,
    rng_seed: int = 0,
    scale: HuMuScale = HuMuScale(),
    holder: bool = False,
) -> Volume:
    """Deterministic torso phantom: a water body ellipsoid with a bone column
    and a few soft-tissue blobs, air above the body surface where markers and
    holder go.

    The body top stays below y = +26 mm (scaled with the volume extent) so
    the upper ~30% of the y range is guaranteed air.
    """
    dims = tuple(int(d) for d in dims)
    vol = Volume.centered(dims, voxel_mm)
    x = vol.axis_coords_mm(0)[:, None, None]
    y = vol.axis_coords_mm(1)[None, :, None]
    z = vol.axis_coords_mm(2)[None, None, :]
    ext = voxel_mm * (np.asarray(dims) - 1)
    sx, sy = ext[0] / 160.0, ext[1] / 160.0  # desk-scale reference extents

    hu = np.full(dims, -1000.0, dtype=np.float64)

    # Body: water ellipsoid, center displaced toward the couch.
    bc = (0.0, -20.0 * sy, 0.0)
    ba = (68.0 * sx, 46.0 * sy, max(ext[2] * 0.60, voxel_mm))
    body = ((x - bc[0]) / ba[0]) ** 2 + ((y - bc[1]) / ba[1]) ** 2 + ((z - bc[2]) / ba[2]) ** 2 <= 1.0
    hu[body] = 0.0

    rng = np.random.default_rng(rng_seed)
    # Soft-tissue blobs inside the body, kept away from the body center so the
    # center voxel stays exactly water.
    for _ in range(4):
        r = float(rng.uniform(8.0, 16.0)) * sx
        ang = float(rng.uniform(0, 2 * np.pi))
        rad = float(rng.uniform(0.45, 0.8))
        cx = bc[0] + rad * (ba[0] - r) * np.cos(ang)
        cy = bc[1] + rad * (ba[1] - r) * np.sin(ang)
        cz = float(rng.uniform(-0.3, 0.3)) * ext[2] / 2
        dhu = float(rng.choice([-80.0, 60.0]))
        if np.hypot(cx - bc[0], cy - bc[1]) <= r + 4.0 * voxel_mm:
            continue  # would shade the body-center voxel
        blob = (x - cx) ** 2 + (y - cy) ** 2 + (z - cz) ** 2 <= r * r
        hu[blob & body] = dhu

    # Spine analog: bone cylinder along z plus denser vertebral bumps.
    spine_y = -35.0 * sy
    spine_r = 12.0 * sx
    cyl = (x - 0.0) ** 2 + (y - spine_y) ** 2 <= spine_r**2
    hu[cyl & body] = 900.0
    pitch = max(25.0 * (ext[2] / 120.0), 4 * voxel_mm)
    for zc in np.arange(-ext[2] / 2, ext[2] / 2 + 1e-9, pitch):
        bump = (x - 0.0) ** 2 + (y - spine_y) ** 2 + (z - zc) ** 2 <= (13.0 * sx) ** 2
        hu[bump & body] = 1100.0

    if holder:
        # Simple holder bar along x in the air gap above the body.
        hy, hz, hr = 38.0 * sy, 0.0, 3.0 * sx
        bar = ((y - hy) ** 2 + (z - hz) ** 2 <= hr * hr) & (np.abs(x) <= 55.0 * sx)
        hu[bar] = 500.0

    return vol.like(hu_to_mu(hu, scale).astype(np.float32))


def voxelize_markers(template: Volume, markers: MarkerSet,
                     scale: HuMuScale = HuMuScale()) -> np.ndarray:
    """Attenuation field of the markers alone on the template grid.

    Center-inclusion voxelization: a voxel takes the marker's attenuation iff
    its center lies inside the sphere.
    """
    out = np.zeros(template.dims, dtype=np.float32)
    for m in markers:
        sl, mask = _sphere_mask(template, m.center_mm, m.radius_mm)
        if mask is not None:
            out[sl][mask] = hu_to_mu(m.intensity_hu, scale)
    return out


def marker_mask(template: Volume, markers: MarkerSet, dilate_voxels: float = 0.0) -> np.ndarray:
    """Binary mask of the marker spheres, optionally grown by a Euclidean
    margin of ``dilate_voxels`` voxels."""
    out = np.zeros(template.dims, dtype=bool)
    margin = dilate_voxels * template.voxel_mm
    for m in markers:
        sl, mask = _sphere_mask(template, m.center_mm, m.radius_mm + margin)
        if mask is not None:
            out[sl] |= mask
    return out


def _sphere_mask(template: Volume, center_mm, radius_mm):
    """Boolean ball mask restricted to its bounding box; (slices, mask)."""
    c = template.mm_to_index(center_mm)
    r_vox = radius_mm / template.voxel_mm
    lo = np.maximum(np.floor(c - r_vox).astype(int), 0)
    hi = np.minimum(np.ceil(c + r_vox).astype(int) + 1, template.dims)
    if np.any(lo >= hi):
        return None, None
    sl = tuple(slice(int(a), int(b)) for a, b in zip(lo, hi))
    ax = [np.arange(lo[i], hi[i]) - c[i] for i in range(3)]
    d2 = (
        ax[0][:, None, None] ** 2
        + ax[1][None, :, None] ** 2
        + ax[2][None, None, :] ** 2
    )
    return sl, d2 <= r_vox * r_vox


def composite_with_markers(anatomy: Volume, markers: MarkerSet,
                           scale: HuMuScale = HuMuScale(),
                           require_air: bool = True) -> Volume:
    """Anatomy with marker voxels overwritten by marker attenuation.

    Marker spheres must sit in air (zero attenuation); this makes overwrite
    and projection-domain addition equivalent.
    """
    out = np.array(anatomy.values, copy=True)
    for m in markers:
        sl, mask = _sphere_mask(anatomy, m.center_mm, m.radius_mm)
        if mask is None:
            continue
        if require_air and np.any(out[sl][mask] != 0.0):
            raise VolumeError(
                f"marker at {m.center_mm} overlaps non-air voxels; "
                "markers must lie in the air gap above the body"
            )
        out[sl][mask] = hu_to_mu(m.intensity_hu, scale)
    return anatomy.like(out)
