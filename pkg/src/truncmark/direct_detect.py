"""Multi-step direct detection of (possibly distorted) markers in a
reconstructed volume: slab compression along y, per-layer segmentation, 2D
circle Hough at half-pixel step for in-plane coordinates, cuboid integration
and a statistical depth estimate along y.

Stages only remove candidates, never add: the final set is a subset of the
2D Hough candidates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numba
import numpy as np
from scipy import ndimage

from .volume import Marker, MarkerSet, Volume, mu_to_hu, HuMuScale


class DirectDetectError(ValueError):
    pass


# Named radius priors (px): simulation range plus the big/small real-marker
# presets used with 0.313 mm voxels.
RADIUS_PRESETS_PX = {
    "sim_paper_scale": (5, 10),
    "big_markers": (7, 8),
    "small_markers": (4, 5),
}


@dataclass(frozen=True)
class SlabStack:
    layers: np.ndarray  # (n_slabs, nx, nz)
    slab_y_ranges: tuple[tuple[int, int], ...]
    upper_y_range: tuple[int, int]
    provenance: str = ""


@dataclass(frozen=True)
class InPlaneDetection:
    x_px: float
    z_px: float
    radius_px: float
    score: int


@dataclass(frozen=True)
class DepthEstimate:
    y_px: float | None
    confidence: float

    REJECT_THRESHOLD = 0.5  # none-state iff confidence below this


def compress_slabs(vol: Volume, upper_fraction: float = 0.3,
                   n_slabs: int = 8) -> SlabStack:
    """Split the upper part of the volume into equal flat slabs parallel to
    the x-z plane and integrate each along y (orthogonal projection, which
    preserves marker size)."""
    ny = vol.dims[1]
    upper = int(round(upper_fraction * ny))
    y0 = ny - upper
    if upper < n_slabs:
        raise DirectDetectError(
            f"upper region has {upper} rows, fewer than {n_slabs} slabs"
        )
    bounds = [y0 + int(round(i * upper / n_slabs)) for i in range(n_slabs + 1)]
    layers = np.stack([
        vol.values[:, bounds[i]:bounds[i + 1], :].sum(axis=1) * vol.voxel_mm
        for i in range(n_slabs)
    ])
    ranges = tuple((bounds[i], bounds[i + 1]) for i in range(n_slabs))
    return SlabStack(layers.astype(np.float32), ranges, (y0, ny))


def otsu_threshold(values: np.ndarray, bins: int = 256) -> float:
    """Classic maximum between-class variance threshold."""
    v = values.ravel().astype(np.float64)
    lo, hi = float(v.min()), float(v.max())
    if hi <= lo:
        return hi
    hist, edges = np.histogram(v, bins=bins, range=(lo, hi))
    p = hist.astype(np.float64) / v.size
    centers = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(p)
    mu = np.cumsum(p * centers)
    mu_t = mu[-1]
    w1 = 1.0 - w0
    valid = (w0 > 0) & (w1 > 0)
    var_between = np.zeros_like(w0)
    var_between[valid] = (mu_t * w0[valid] - mu[valid]) ** 2 / (w0[valid] * w1[valid])
    return float(centers[int(np.argmax(var_between))])


def segment_baseline(layer: np.ndarray, min_component_px: int = 10,
                     max_foreground_frac: float = 0.25) -> np.ndarray:
    """Otsu binarization, 3x3 morphological opening, removal of components
    smaller than ``min_component_px``. Returns a {0,1} float field.

    A layer whose Otsu split marks more than ``max_foreground_frac`` of the
    pixels has no compact bright content (Otsu on a near-empty layer just
    splits the noise); such layers segment to zero.
    """
    if not np.all(np.isfinite(layer)):
        raise DirectDetectError("non-finite layer")
    t = otsu_threshold(layer)
    binary = layer > t
    if not binary.any() or binary.mean() > max_foreground_frac:
        return np.zeros_like(layer, dtype=np.float32)
    binary = ndimage.binary_opening(binary, structure=np.ones((3, 3), dtype=bool))
    labels, n = ndimage.label(binary)
    if n:
        sizes = ndimage.sum_labels(np.ones_like(labels), labels, np.arange(1, n + 1))
        keep = np.zeros(n + 1, dtype=bool)
        keep[1:] = sizes >= min_component_px
        binary = keep[labels]
    return binary.astype(np.float32)


def _boundary_pixels(field: np.ndarray) -> np.ndarray:
    on = field > 0.5
    interior = np.ones_like(on)
    for axis in range(2):
        for shift in (1, -1):
            rolled = np.roll(on, shift, axis=axis)
            sl = [slice(None)] * 2
            sl[axis] = 0 if shift == 1 else -1
            rolled[tuple(sl)] = False
            interior &= rolled
    return np.argwhere(on & ~interior)


_OFFSET_CACHE: dict = {}


def _vote_offsets(r_min: float, r_max: float, step: float):
    """Half-grid center offsets per radius bin: offset (ox, oz) in half-pixel
    units belongs to bin b when floor((0.5*hypot - r_min)/step + 0.5) == b."""
    key = (r_min, r_max, step)
    if key in _OFFSET_CACHE:
        return _OFFSET_CACHE[key]
    n_bins = int(math.floor((r_max - r_min) / step + 1e-9)) + 1
    reach = int(math.ceil(2.0 * (r_max + step))) + 1
    ax = np.arange(-reach, reach + 1)
    ox, oz = np.meshgrid(ax, ax, indexing="ij")
    d = 0.5 * np.hypot(ox, oz)
    b = np.floor((d - r_min) / step + 0.5).astype(np.int64)
    sel = (b >= 0) & (b < n_bins)
    table = np.column_stack([ox[sel], oz[sel], b[sel]]).astype(np.int64)
    _OFFSET_CACHE[key] = (table, n_bins)
    return table, n_bins


@numba.njit(cache=True)
def _scatter_votes_2d(edges, offsets, n1, n2, n_bins):
    acc = np.zeros((n1, n2, n_bins), dtype=np.int32)
    for e in range(edges.shape[0]):
        ex2 = 2 * edges[e, 0]
        ez2 = 2 * edges[e, 1]
        for k in range(offsets.shape[0]):
            cx2 = ex2 + offsets[k, 0]
            cz2 = ez2 + offsets[k, 1]
            if 0 <= cx2 < n1 and 0 <= cz2 < n2:
                acc[cx2, cz2, offsets[k, 2]] += 1
    return acc


@numba.njit(cache=True)
def brute_force_accumulator_2d(shape, edges, r_min, step, n_bins):
    """Dense half-grid accumulator by direct distance evaluation (oracle)."""
    n1 = 2 * shape[0] - 1
    n2 = 2 * shape[1] - 1
    acc = np.zeros((n1, n2, n_bins), dtype=np.int32)
    for cx2 in range(n1):
        for cz2 in range(n2):
            for e in range(edges.shape[0]):
                dx = 0.5 * (cx2 - 2.0 * edges[e, 0])
                dz = 0.5 * (cz2 - 2.0 * edges[e, 1])
                d = math.sqrt(dx * dx + dz * dz)
                b = int(math.floor((d - r_min) / step + 0.5))
                if 0 <= b < n_bins:
                    acc[cx2, cz2, b] += 1
    return acc


def accumulate_circles_2d(field: np.ndarray, radius_range_px, step_px=0.5):
    """Fast scatter path of the circle accumulator; identical arithmetic to
    :func:`brute_force_accumulator_2d`."""
    r_min, r_max = float(radius_range_px[0]), float(radius_range_px[1])
    edges = _boundary_pixels(field)
    table, n_bins = _vote_offsets(r_min, r_max, float(step_px))
    n1, n2 = 2 * field.shape[0] - 1, 2 * field.shape[1] - 1
    if edges.size == 0:
        return np.zeros((n1, n2, n_bins), dtype=np.int32), edges
    acc = _scatter_votes_2d(edges.astype(np.int64), table, n1, n2, n_bins)
    return acc, edges


def ideal_circle_votes(radius_range_px, step_px=0.5) -> np.ndarray:
    """Boundary pixel count of an ideal circle per radius bin
    (circumference); the vote threshold is a fraction of this. A binarized
    disc spreads its jagged boundary over two or three adjacent bins, so
    fractions around 0.25 of the circumference are realistic peaks."""
    r_min, r_max = float(radius_range_px[0]), float(radius_range_px[1])
    n_bins = int(math.floor((r_max - r_min) / step_px + 1e-9)) + 1
    return np.array([round(2.0 * math.pi * (r_min + b * step_px))
                     for b in range(n_bins)], dtype=int)


def _ring_occupancy(field, cx, cz, r, inner_margin=1.0, outer_margin=2.5) -> float:
    """Foreground fraction of the annulus just outside the candidate circle."""
    n1, n2 = field.shape
    reach = int(math.ceil(r + outer_margin)) + 1
    x0, x1 = max(int(cx) - reach, 0), min(int(cx) + reach + 1, n1)
    z0, z1 = max(int(cz) - reach, 0), min(int(cz) + reach + 1, n2)
    gx, gz = np.meshgrid(np.arange(x0, x1), np.arange(z0, z1), indexing="ij")
    d = np.hypot(gx - cx, gz - cz)
    ring = (d > r + inner_margin) & (d <= r + outer_margin)
    if not ring.any():
        return 0.0
    return float((field[x0:x1, z0:z1][ring] > 0.5).mean())


def _sector_coverage(edges, cx, cz, r, n_sectors=16) -> float:
    """Fraction of angular sectors containing boundary pixels near radius r.

    The band reaches further inward than outward because the boundary of a
    center-inclusion disc of radius r lies in (r-1, r]; the sector count
    adapts to the circumference so small circles are not penalized.
    """
    if edges.size == 0:
        return 0.0
    sectors_eff = int(np.clip(round(math.pi * r), 6, n_sectors))
    dx = edges[:, 0] - cx
    dz = edges[:, 1] - cz
    d = np.hypot(dx, dz)
    near = (d > r - 1.1) & (d < r + 0.6)
    if not near.any():
        return 0.0
    ang = np.arctan2(dz[near], dx[near])
    sectors = np.floor((ang + np.pi) / (2 * np.pi) * sectors_eff).astype(int) % sectors_eff
    return len(np.unique(sectors)) / sectors_eff


def hough_circles_2d(field: np.ndarray, radius_range_px=(3, 6), step_px: float = 0.5,
                     min_votes_frac: float = 0.25, sector_coverage: float = 0.7,
                     n_sectors: int = 16,
                     max_ring_occupancy: float = 0.25) -> list[InPlaneDetection]:
    """Gradient-free boundary voting on a binary field over (x, z, r) at
    half-pixel resolution.

    Peaks need enough votes (fraction of the ideal boundary count), angular
    coverage of the boundary, and an empty annulus just outside the circle:
    markers are isolated filled discs, while inscribed circles at bar ends
    continue into foreground along the bar axis. Ties break by (z, x, r)
    ascending.
    """
    acc, edges = accumulate_circles_2d(field, radius_range_px, step_px)
    r_min = float(radius_range_px[0])
    min_votes = np.maximum(
        np.round(min_votes_frac * ideal_circle_votes(radius_range_px, step_px)), 3)
    cells = np.argwhere(acc >= min_votes[None, None, :])
    if cells.size == 0:
        return []
    scores = acc[cells[:, 0], cells[:, 1], cells[:, 2]]
    xs = 0.5 * cells[:, 0]
    zs = 0.5 * cells[:, 1]
    rs = r_min + step_px * cells[:, 2]
    order = np.lexsort((rs, xs, zs, -scores))

    labels, _ = ndimage.label(field > 0.5)
    claimed: set[int] = set()
    accepted: list[InPlaneDetection] = []
    for k in order:
        x, z, r = float(xs[k]), float(zs[k]), float(rs[k])
        # Duplicate responses of one circle cluster within a couple of
        # pixels; distinct markers cannot overlap, so their centers stay
        # farther apart than either radius.
        if any(math.hypot(x - a.x_px, z - a.z_px) <= max(2.0, 0.8 * max(r, a.radius_px))
               for a in accepted):
            continue
        if _sector_coverage(edges, x, z, r, n_sectors) < sector_coverage:
            continue
        if _ring_occupancy(field, x, z, r) > max_ring_occupancy:
            continue
        # Markers are filled discs: a genuine center lies on its own
        # component. This rejects phantom rings voted between neighboring
        # discs, and claiming the component deduplicates within a disc.
        comp = int(labels[int(round(x)), int(round(z))])
        if comp == 0 or comp in claimed:
            continue
        claimed.add(comp)
        accepted.append(InPlaneDetection(x, z, r, int(scores[k])))
    return accepted


def extract_cuboid(vol: Volume, det: InPlaneDetection,
                   dims: tuple[int | None, int, int] = (None, 13, 13),
                   y_range: tuple[int, int] | None = None) -> np.ndarray:
    """Long cuboid with the in-plane detection as its axis, integrated along
    z into a (Y, wx) image. The window is clamped inside the volume so the
    output shape never changes."""
    nx, ny, nz = vol.dims
    y_len, wx, wz = dims
    if y_range is None:
        y_range = (0, ny) if y_len is None else (max(0, ny - y_len), ny)
    y0, y1 = y_range
    x0 = int(round(det.x_px)) - wx // 2
    z0 = int(round(det.z_px)) - wz // 2
    x0 = min(max(x0, 0), max(nx - wx, 0))
    z0 = min(max(z0, 0), max(nz - wz, 0))
    block = vol.values[x0:x0 + wx, y0:y1, z0:z0 + wz]
    return (block.sum(axis=2) * vol.voxel_mm).T.astype(np.float32)  # (Y, wx)


def depth_baseline(img: np.ndarray, mad_k: float = 6.0) -> DepthEstimate:
    """Median-subtracted, MAD-gated intensity centroid of the dominant blob
    along y. Returns the none-state for marker-free images.

    Dominance is integrated intensity down-weighted by lateral distance from
    the image mid-column: the cuboid axis runs through the candidate, so the
    target blob is centered while intruding neighbors sit near the edges.
    """
    if not np.all(np.isfinite(img)):
        raise DirectDetectError("non-finite cuboid image")
    b = img.astype(np.float64) - np.median(img)
    sigma = 1.4826 * np.median(np.abs(b))
    sigma = max(sigma, 1e-12)
    peak = float(b.max())
    confidence = min(1.0, peak / (2.0 * mad_k * sigma))
    if peak < mad_k * sigma:
        return DepthEstimate(None, confidence)
    labels, n = ndimage.label(b >= 0.5 * peak)
    if n == 0:
        return DepthEstimate(None, confidence)
    mid = 0.5 * (img.shape[1] - 1)
    lat_sigma = max(img.shape[1] / 4.0, 1.0)
    scores = np.empty(n)
    for k in range(1, n + 1):
        blob_k = labels == k
        xc = float((np.nonzero(blob_k)[1]).mean())
        scores[k - 1] = b[blob_k].sum() * math.exp(-0.5 * ((xc - mid) / lat_sigma) ** 2)
    blob = labels == (1 + int(np.argmax(scores)))
    w = b[blob]
    ys = np.nonzero(blob)[0].astype(np.float64)
    return DepthEstimate(float((ys * w).sum() / w.sum()), confidence)


@dataclass(frozen=True)
class DirectConfig:
    upper_fraction: float = 0.3
    n_slabs: int = 8
    # Binarized discs erode to ~0.87 of the physical radius (the threshold
    # cuts the chord profile near half maximum), so the search range starts
    # below the smallest physical marker radius.
    radius_range_px: tuple[float, float] = (2.5, 5.0)
    hough_step_px: float = 0.5
    min_votes_frac: float = 0.25
    sector_coverage: float = 0.7
    cuboid_cross_px: int = 11
    mad_k: float = 6.0
    min_component_px: int = 10
    # Intensity priors: streak/ring ghosts sit near air while even badly
    # distorted markers keep a dense core nearby (min_center_hu checks a
    # 3x3x3 neighborhood; min_point_hu the final center voxel itself).
    min_center_hu: float = 0.0
    min_point_hu: float = -400.0
    segmenter: Callable[[np.ndarray], np.ndarray] | None = None
    depth_estimator: Callable[[np.ndarray], DepthEstimate] | None = None


def detect_direct(vol: Volume, cfg: DirectConfig = DirectConfig(),
                  scale: HuMuScale = HuMuScale()) -> MarkerSet:
    markers, _ = detect_direct_detailed(vol, cfg, scale)
    return markers


def detect_direct_detailed(vol: Volume, cfg: DirectConfig = DirectConfig(),
                           scale: HuMuScale = HuMuScale()):
    """Full chain: compress, segment, merge, 2D Hough, cuboid depth; in-plane
    candidates whose depth estimate is the none-state are discarded."""
    slabs = compress_slabs(vol, cfg.upper_fraction, cfg.n_slabs)
    segment = cfg.segmenter or (
        lambda layer: segment_baseline(layer, cfg.min_component_px))
    merged = np.maximum.reduce([segment(layer) for layer in slabs.layers])
    cands = hough_circles_2d(
        merged, cfg.radius_range_px, cfg.hough_step_px,
        cfg.min_votes_frac, cfg.sector_coverage,
    )
    y0, y1 = slabs.upper_y_range
    staged = []
    for det in cands:
        img = extract_cuboid(
            vol, det, (None, cfg.cuboid_cross_px, cfg.cuboid_cross_px), (y0, y1))
        est = (cfg.depth_estimator(img) if cfg.depth_estimator
               else depth_baseline(img, cfg.mad_k))
        if est.y_px is None:
            continue
        full_px = np.array([det.x_px, y0 + est.y_px, det.z_px])
        nearest = [int(round(min(max(v, 0), n - 1)))
                   for v, n in zip(full_px, vol.dims)]
        lo = [max(c - 1, 0) for c in nearest]
        hi = [min(c + 2, n) for c, n in zip(nearest, vol.dims)]
        core_hu = float(mu_to_hu(
            vol.values[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]].max(), scale))
        if core_hu < cfg.min_center_hu:
            continue
        intensity = float(mu_to_hu(vol.values[tuple(nearest)], scale))
        staged.append((det, est, full_px, intensity))

    # Markers never overlap in x-z, so their centers stay at least two
    # physical radii apart; duplicate responses of one marker cluster much
    # closer. Detected radii are too coarse for per-pair exclusion discs, so
    # suppress within a conservative constant below the minimum separation.
    dedup_dist = 1.8 * float(cfg.radius_range_px[0])
    staged.sort(key=lambda s: (-s[0].score, -s[3]))
    markers = []
    records = []
    kept: list[InPlaneDetection] = []
    for det, est, full_px, intensity in staged:
        if intensity < cfg.min_point_hu:
            continue
        if any(math.hypot(det.x_px - k.x_px, det.z_px - k.z_px) <= dedup_dist
               for k in kept):
            continue
        kept.append(det)
        center_mm = vol.index_to_mm(full_px)
        markers.append(Marker(tuple(center_mm), det.radius_px * vol.voxel_mm, intensity))
        records.append({
            "x_px": full_px[0], "y_px": full_px[1], "z_px": full_px[2],
            "x_mm": center_mm[0], "y_mm": center_mm[1], "z_mm": center_mm[2],
            "radius_px": det.radius_px, "score": det.score,
            "confidence": est.confidence,
        })
    return MarkerSet(tuple(markers)), records
