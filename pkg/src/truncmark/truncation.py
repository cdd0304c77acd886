"""Water-cylinder extrapolation (WCE) of laterally truncated projection rows.

Each truncated row edge is completed with the parallel-beam profile of a
water cylinder fitted to the boundary value and slope; rows that admit no
decaying cylinder fall back to a cosine roll-off. Interior columns are never
modified.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .projector import ProjectionStack, ProjectionError
from .volume import HuMuScale


@dataclass(frozen=True)
class WceParams:
    edge_window_px: int = 5
    max_extension_cols: int | None = None  # None: fill the whole pad
    cosine_rolloff_px: int = 40
    boundary_threshold: float = 0.01  # mu*mm below which an edge counts as air

    def __post_init__(self):
        if self.edge_window_px < 2:
            raise ProjectionError("edge_window_px must be >= 2")
        if self.cosine_rolloff_px < 1:
            raise ProjectionError("cosine_rolloff_px must be >= 1")


@dataclass(frozen=True)
class _EdgeFit:
    """Decaying profile for one truncated side; value(0) equals the boundary."""

    kind: str  # "cylinder" | "rolloff" | "zero"
    p_b: float = 0.0
    xi_mm: float = 0.0  # boundary offset from the fitted cylinder center
    r2_mm2: float = 0.0
    rolloff_mm: float = 0.0
    mu_water: float = 0.02

    def value(self, offset_mm: np.ndarray) -> np.ndarray:
        offset_mm = np.asarray(offset_mm, dtype=float)
        if self.kind == "zero":
            return np.zeros_like(offset_mm)
        if self.kind == "rolloff":
            phase = offset_mm / self.rolloff_mm
            out = self.p_b * np.cos(0.5 * np.pi * np.clip(phase, 0.0, 1.0)) ** 2
            return np.where(phase >= 1.0, 0.0, out)
        arg = self.r2_mm2 - (self.xi_mm + offset_mm) ** 2
        return 2.0 * self.mu_water * np.sqrt(np.maximum(arg, 0.0))


def _fit_edge(samples_inward: np.ndarray, params: WceParams, pixel_mm: float,
              mu_water: float) -> _EdgeFit:
    """Fit one side. ``samples_inward[0]`` is the boundary column and indices
    grow toward the row interior."""
    p_b = float(max(samples_inward[0], 0.0))
    if p_b <= params.boundary_threshold:
        return _EdgeFit("zero")
    w = min(params.edge_window_px, samples_inward.size)
    # Least-squares slope over the edge window, evaluated at the boundary
    # and oriented outward. A quadratic fit removes the secant bias of a
    # straight line on the convex falling edge of a cylinder profile.
    x = -pixel_mm * np.arange(w, dtype=float)
    y = np.maximum(samples_inward[:w], 0.0)
    if w >= 3:
        coeff = np.polyfit(x, y, 2)
        slope = float(coeff[1])  # derivative of c2 x^2 + c1 x + c0 at x = 0
    elif w == 2:
        slope = float((y[0] - y[1]) / pixel_mm)
    else:
        slope = 0.0
    if slope > 1e-12:
        # Profile still rising at the truncation edge: no decaying cylinder.
        return _EdgeFit("rolloff", p_b=p_b,
                        rolloff_mm=params.cosine_rolloff_px * pixel_mm,
                        mu_water=mu_water)
    q = p_b / (2.0 * mu_water)
    xi = -slope * q / (2.0 * mu_water)
    return _EdgeFit("cylinder", p_b=p_b, xi_mm=xi, r2_mm2=xi * xi + q * q,
                    mu_water=mu_water)


def _extension(fit: _EdgeFit, n_cols: int, pixel_mm: float,
               max_cols: int | None) -> np.ndarray:
    """Sample the fitted profile on the padded columns; taper to zero when
    the profile would not vanish inside the allowed extension."""
    out = np.zeros(n_cols, dtype=np.float64)
    if fit.kind == "zero" or n_cols == 0:
        return out
    limit = n_cols if max_cols is None else min(max_cols, n_cols)
    if limit < 1:
        return out
    offs = pixel_mm * np.arange(1, limit + 1, dtype=float)
    vals = fit.value(offs)
    if vals[-1] > 0.0:
        k = np.arange(1, limit + 1, dtype=float)
        vals = vals * np.cos(0.5 * np.pi * k / limit) ** 2
    out[:limit] = vals
    return out


def extrapolate_row(row: np.ndarray, params: WceParams, pixel_mm: float,
                    pad_left: int, pad_right: int,
                    scale: HuMuScale = HuMuScale()) -> np.ndarray:
    """Extend one detector row by ``pad_left``/``pad_right`` columns.

    Always succeeds; returns the widened row with the input bit-identical in
    the interior. Small negative inputs are treated as zero for the fit only.
    """
    row = np.asarray(row)
    if not np.all(np.isfinite(row)):
        raise ProjectionError("non-finite row")
    mu_w = scale.mu_water_mm
    left = _fit_edge(row[:max(params.edge_window_px, 2)].astype(float),
                     params, pixel_mm, mu_w)
    right = _fit_edge(row[::-1][:max(params.edge_window_px, 2)].astype(float),
                      params, pixel_mm, mu_w)
    ext_l = _extension(left, pad_left, pixel_mm, params.max_extension_cols)[::-1]
    ext_r = _extension(right, pad_right, pixel_mm, params.max_extension_cols)
    return np.concatenate([ext_l.astype(row.dtype), row, ext_r.astype(row.dtype)])


def boundary_fit_values(row: np.ndarray, params: WceParams, pixel_mm: float,
                        scale: HuMuScale = HuMuScale()) -> tuple[float, float]:
    """Fitted-profile values at offset zero for (left, right); used to verify
    continuity with the boundary columns."""
    mu_w = scale.mu_water_mm
    left = _fit_edge(np.asarray(row[:max(params.edge_window_px, 2)], dtype=float),
                     params, pixel_mm, mu_w)
    right = _fit_edge(np.asarray(row[::-1][:max(params.edge_window_px, 2)], dtype=float),
                      params, pixel_mm, mu_w)
    return (float(left.value(np.zeros(1))[0]), float(right.value(np.zeros(1))[0]))


def extrapolate_stack(p: ProjectionStack, params: WceParams = WceParams(),
                      scale: HuMuScale = HuMuScale(),
                      target_cols: int | None = None) -> ProjectionStack:
    """Row-wise WCE for every view and row, widening the stack symmetrically
    to the extended detector width."""
    geom = p.geom
    if target_cols is None:
        target_cols = geom.extended_detector_cols
    if target_cols < p.cols_used or (target_cols - p.cols_used) % 2 != 0:
        raise ProjectionError("extension must be symmetric and non-negative")
    pad = (target_cols - p.cols_used) // 2
    max_ext = params.max_extension_cols
    if max_ext is not None and max_ext > pad:
        raise ProjectionError(
            f"max_extension_cols={max_ext} exceeds the available pad {pad}"
        )
    du = geom.detector_pixel_mm
    out = np.zeros((p.views, p.rows, target_cols), dtype=np.float32)
    out[:, :, pad:pad + p.cols_used] = p.data
    mu_w = scale.mu_water_mm
    w = max(params.edge_window_px, 2)
    # Only rows whose boundary columns carry signal need a fit.
    need_l = np.argwhere(p.data[:, :, 0] > params.boundary_threshold)
    need_r = np.argwhere(p.data[:, :, -1] > params.boundary_threshold)
    for v, r in need_l:
        row = p.data[v, r].astype(np.float64)
        left = _fit_edge(row[:w], params, du, mu_w)
        out[v, r, :pad] = _extension(left, pad, du, max_ext)[::-1]
    for v, r in need_r:
        row = p.data[v, r].astype(np.float64)
        right = _fit_edge(row[::-1][:w], params, du, mu_w)
        out[v, r, pad + p.cols_used:] = _extension(right, pad, du, max_ext)
    return ProjectionStack(geom, target_cols, p.rows, p.views, out, p.angles_deg)
