"""Sphere detection in recovered volumes: histogram-based dynamic threshold,
3D surface-voting Hough transform at 1 px step, and sub-voxel refinement.

The fast voter is a gather over candidate centers restricted to
above-threshold voxels; ``brute_force_accumulator_3d`` provides the dense
reference accumulator with identical vote arithmetic for oracle checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .volume import Marker, MarkerSet, Volume, mu_to_hu, HuMuScale


class SphereDetectError(ValueError):
    pass


@dataclass(frozen=True)
class HoughConfig3d:
    radius_range_px: tuple[int, int] = (3, 6)
    step_px: int = 1
    expected_marker_count: int = 12
    nominal_radius_px: float = 4.5
    safety_factor: float = 1.0
    min_votes_frac: float = 0.4
    upper_fraction: float = 0.3

    def __post_init__(self):
        rmin, rmax = self.radius_range_px
        if rmin <= 0 or rmax < rmin:
            raise SphereDetectError(f"bad radius range {self.radius_range_px}")
        if int(self.step_px) != self.step_px or self.step_px < 1:
            raise SphereDetectError("step_px must be an integer >= 1")

    @property
    def radii(self) -> np.ndarray:
        rmin, rmax = self.radius_range_px
        return np.arange(rmin, rmax + 1, int(self.step_px), dtype=float)


@dataclass(frozen=True)
class SphereDetection:
    center_px: tuple[float, float, float]
    radius_px: float
    score: int


def expected_marker_voxels(cfg: HoughConfig3d) -> int:
    """K = round(safety * count * (4/3) pi r^3) with r the nominal radius."""
    k = cfg.safety_factor * cfg.expected_marker_count \
        * (4.0 / 3.0) * math.pi * cfg.nominal_radius_px**3
    return int(round(k))


def dynamic_threshold(values: np.ndarray, cfg: HoughConfig3d,
                      scale: HuMuScale = HuMuScale()) -> float:
    """K-th largest voxel intensity, selected on a 1 HU histogram.

    Returns the threshold in the volume's own unit (attenuation).
    """
    k = expected_marker_voxels(cfg)
    flat = values.ravel()
    if k > flat.size:
        raise SphereDetectError(
            f"expected marker voxel count {k} exceeds volume size {flat.size}"
        )
    if k < 1:
        raise SphereDetectError("expected marker voxel count must be >= 1")
    hu = mu_to_hu(flat, scale)
    lo = math.floor(hu.min())
    bins = np.floor(hu - lo).astype(np.int64)
    counts = np.bincount(bins)
    from_top = np.cumsum(counts[::-1])
    cut = counts.size - 1 - int(np.searchsorted(from_top, k))
    return float(flat[bins >= cut].min())


def _surface_voxels(cand: np.ndarray) -> np.ndarray:
    """Candidate voxels with at least one 6-neighbor outside the set."""
    interior = np.ones_like(cand)
    for axis in range(3):
        for shift in (1, -1):
            rolled = np.roll(cand, shift, axis=axis)
            # Edge voxels of the array count as exposed.
            sl = [slice(None)] * 3
            sl[axis] = 0 if shift == 1 else -1
            rolled[tuple(sl)] = False
            interior &= rolled
    return cand & ~interior


@numba.njit(cache=True, parallel=True)
def _gather_votes(centers, voters, r_min, step, n_bins, acc):
    # A voter at distance d supports radius r when d is in (r - step, r]:
    # the inner surface shell of a center-inclusion voxelized sphere of
    # radius r lies exactly in that interval.
    n_c = centers.shape[0]
    n_v = voters.shape[0]
    for i in numba.prange(n_c):
        cx, cy, cz = centers[i, 0], centers[i, 1], centers[i, 2]
        for j in range(n_v):
            dx = np.float64(voters[j, 0] - cx)
            dy = np.float64(voters[j, 1] - cy)
            dz = np.float64(voters[j, 2] - cz)
            d = math.sqrt(dx * dx + dy * dy + dz * dz)
            b = int(math.ceil((d - r_min) / step))
            if 0 <= b < n_bins:
                acc[i, b] += 1


@numba.njit(cache=True)
def brute_force_accumulator_3d(shape, voters, r_min, step, n_bins):
    """Dense accumulator over every grid cell; reference oracle path."""
    nx, ny, nz = shape
    acc = np.zeros((nx, ny, nz, n_bins), dtype=np.int32)
    for ix in range(nx):
        for iy in range(ny):
            for iz in range(nz):
                for j in range(voters.shape[0]):
                    dx = np.float64(voters[j, 0] - ix)
                    dy = np.float64(voters[j, 1] - iy)
                    dz = np.float64(voters[j, 2] - iz)
                    d = math.sqrt(dx * dx + dy * dy + dz * dz)
                    b = int(math.ceil((d - r_min) / step))
                    if 0 <= b < n_bins:
                        acc[ix, iy, iz, b] += 1
    return acc


def ideal_shell_counts(cfg: HoughConfig3d) -> np.ndarray:
    """Votes an exactly centered ideal sphere surface casts per radius bin:
    lattice points with distance in (r - step, r]."""
    rmin, rmax = cfg.radius_range_px
    reach = int(math.ceil(rmax + 0.5))
    ax = np.arange(-reach, reach + 1, dtype=float)
    d = np.sqrt(ax[:, None, None] ** 2 + ax[None, :, None] ** 2 + ax[None, None, :] ** 2)
    bins = np.ceil((d - rmin) / cfg.step_px).astype(int)
    n_bins = len(cfg.radii)
    return np.array([(bins == b).sum() for b in range(n_bins)])


def hough_spheres(values: np.ndarray, cfg: HoughConfig3d,
                  threshold: float) -> list[SphereDetection]:
    """Surface voting over (cx, cy, cz, r); candidate centers are the voxels
    strictly above threshold, peaks gated at ``min_votes_frac`` of the ideal
    shell count, duplicates suppressed within the sum of candidate radii."""
    cand = values > threshold
    if not cand.any():
        return []
    voters = np.argwhere(_surface_voxels(cand)).astype(np.int64)
    centers = np.argwhere(cand).astype(np.int64)
    radii = cfg.radii
    n_bins = len(radii)
    acc = np.zeros((centers.shape[0], n_bins), dtype=np.int32)
    rmin = float(cfg.radius_range_px[0])
    _gather_votes(centers, voters, rmin, float(cfg.step_px), n_bins, acc)

    min_votes = np.maximum(
        np.round(cfg.min_votes_frac * ideal_shell_counts(cfg)).astype(int), 1)
    cand_cells = np.argwhere(acc >= min_votes[None, :])
    if cand_cells.size == 0:
        return []
    scores = acc[cand_cells[:, 0], cand_cells[:, 1]]
    pos = centers[cand_cells[:, 0]]
    r_px = radii[cand_cells[:, 1]]
    order = np.lexsort((cand_cells[:, 1], pos[:, 2], pos[:, 0], pos[:, 1], -scores))

    accepted: list[SphereDetection] = []
    acc_pos: list[np.ndarray] = []
    acc_r: list[float] = []
    for k in order:
        p = pos[k].astype(float)
        r = float(r_px[k])
        # Duplicates of one sphere cluster within a couple of voxels while
        # distinct (non-overlapping) markers keep centers farther apart
        # than either radius.
        clash = False
        for q, rq in zip(acc_pos, acc_r):
            if np.linalg.norm(p - q) <= max(2.0, 0.8 * max(r, rq)):
                clash = True
                break
        if clash:
            continue
        accepted.append(SphereDetection(tuple(p), r, int(scores[k])))
        acc_pos.append(p)
        acc_r.append(r)
    return accepted


def refine_subvoxel(values: np.ndarray, det: SphereDetection,
                    max_shift_px: float = 1.5) -> np.ndarray:
    """Intensity-weighted centroid of above-half-peak voxels within
    radius + 1 of the detection; the shift is capped at ``max_shift_px``."""
    c = np.asarray(det.center_px, dtype=float)
    reach = det.radius_px + 1.0
    lo = np.maximum(np.floor(c - reach).astype(int), 0)
    hi = np.minimum(np.ceil(c + reach).astype(int) + 1, values.shape)
    box = values[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]].astype(np.float64)
    gx, gy, gz = np.meshgrid(
        np.arange(lo[0], hi[0]), np.arange(lo[1], hi[1]), np.arange(lo[2], hi[2]),
        indexing="ij",
    )
    inside = (gx - c[0]) ** 2 + (gy - c[1]) ** 2 + (gz - c[2]) ** 2 <= reach * reach
    if not inside.any():
        return c
    peak = box[inside].max()
    sel = inside & (box >= 0.5 * peak)
    w = np.clip(box[sel], 0.0, None)
    if w.sum() <= 0:
        return c
    centroid = np.array([
        (gx[sel] * w).sum() / w.sum(),
        (gy[sel] * w).sum() / w.sum(),
        (gz[sel] * w).sum() / w.sum(),
    ])
    shift = centroid - c
    norm = np.linalg.norm(shift)
    if norm > max_shift_px:
        shift *= max_shift_px / norm
    return c + shift


def detect_recovered(vol: Volume, cfg: HoughConfig3d = HoughConfig3d(),
                     scale: HuMuScale = HuMuScale()) -> MarkerSet:
    """Dynamic threshold, 3D Hough and sub-voxel refinement on the upper
    part of a recovered volume; detections reported in mm (and px via
    :func:`detect_recovered_detailed`)."""
    markers, _ = detect_recovered_detailed(vol, cfg, scale)
    return markers


def detect_recovered_detailed(vol: Volume, cfg: HoughConfig3d = HoughConfig3d(),
                              scale: HuMuScale = HuMuScale()):
    ny = vol.dims[1]
    y0 = ny - int(round(cfg.upper_fraction * ny))
    upper = vol.values[:, y0:, :]
    threshold = dynamic_threshold(upper, cfg, scale)
    dets = hough_spheres(upper, cfg, threshold)
    markers = []
    records = []
    for det in dets:
        refined = refine_subvoxel(upper, det)
        full_px = refined + np.array([0.0, y0, 0.0])
        center_mm = vol.index_to_mm(full_px)
        nearest = tuple(int(round(v)) for v in full_px)
        intensity = float(mu_to_hu(vol.values[nearest], scale))
        markers.append(Marker(tuple(center_mm), det.radius_px * vol.voxel_mm, intensity))
        records.append({
            "x_px": full_px[0], "y_px": full_px[1], "z_px": full_px[2],
            "x_mm": center_mm[0], "y_mm": center_mm[1], "z_mm": center_mm[2],
            "radius_px": det.radius_px, "score": det.score, "confidence": 1.0,
        })
    return MarkerSet(tuple(markers)), records
