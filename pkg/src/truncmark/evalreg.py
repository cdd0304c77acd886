"""Evaluation metrics (per-marker F1 and intensity difference, detection
accuracy tables) and rigid registration with fiducial registration error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import MarkerSet, Volume, hu_to_mu, mu_to_hu, HuMuScale


class EvalError(ValueError):
    pass


class RegistrationError(EvalError):
    pass


@dataclass(frozen=True)
class RecoveryMetrics:
    mean_f1: float
    mean_intensity_diff_hu: float
    per_marker: tuple[dict, ...]


@dataclass(frozen=True)
class AccuracyTable:
    fractions: dict  # axis -> {0: f, 1: f, 2: f}
    fn_count: int
    fp_count: int
    matched: int

    def format_text(self) -> str:
        lines = ["d      x        y        z"]
        for d in (0, 1, 2):
            row = [f"<={d}" if d else " =0"]
            for ax in "xyz":
                row.append(f"{100.0 * self.fractions[ax][d]:6.1f}%")
            lines.append("  ".join(row))
        lines.append(f"FN={self.fn_count}  FP={self.fp_count}  matched={self.matched}")
        return "\n".join(lines)


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray  # 3x3, proper orthonormal
    translation_mm: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float)
        t = np.asarray(self.translation_mm, dtype=float)
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-9:
            raise RegistrationError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise RegistrationError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation_mm", t)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation_mm


@dataclass(frozen=True)
class RegistrationReport:
    mean_error_mm: float
    std_mm: float
    residuals_mm: tuple[float, ...]
    correspondence: tuple[tuple[int, int], ...]


def _seeded_region(vol: Volume, center_mm, nominal_mu: float,
                   radius_mm: float, similar_frac: float) -> np.ndarray:
    """26-connected component of above-threshold voxels containing the true
    center, evaluated on a local box. Threshold: background plus
    ``similar_frac`` of the marker's nominal attenuation."""
    c = np.round(vol.mm_to_index(center_mm)).astype(int)
    r_vox = radius_mm / vol.voxel_mm
    reach = int(math.ceil(3.0 * r_vox)) + 3
    lo = np.maximum(c - reach, 0)
    hi = np.minimum(c + reach + 1, vol.dims)
    box = vol.values[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]].astype(np.float64)
    gx, gy, gz = np.meshgrid(*(np.arange(lo[i], hi[i]) for i in range(3)), indexing="ij")
    dist2 = (gx - c[0]) ** 2 + (gy - c[1]) ** 2 + (gz - c[2]) ** 2
    bg_sel = dist2 > (r_vox + 2.0) ** 2
    background = float(np.median(box[bg_sel])) if bg_sel.any() else 0.0
    mask = box >= background + similar_frac * nominal_mu
    labels, n = ndimage.label(mask, structure=np.ones((3, 3, 3), dtype=bool))
    out = np.zeros(vol.dims, dtype=bool)
    seed = tuple(c - lo)
    if not (0 <= seed[0] < box.shape[0]):
        return out
    lab = labels[seed]
    if lab == 0:
        return out
    out[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = labels == lab
    return out


def marker_f1(reference: Volume, prediction: Volume, markers: MarkerSet,
              scale: HuMuScale = HuMuScale(),
              similar_frac: float = 0.5) -> RecoveryMetrics:
    """Per-marker F1 of the prediction's connected bright region against the
    reference's, plus the mean absolute HU difference over the reference
    region."""
    if reference.dims != prediction.dims or reference.voxel_mm != prediction.voxel_mm:
        raise EvalError("reference and prediction grids differ")
    per = []
    for i, m in enumerate(markers):
        mu_nom = float(hu_to_mu(m.intensity_hu, scale))
        ref_region = _seeded_region(reference, m.center_mm, mu_nom, m.radius_mm,
                                    similar_frac)
        if not ref_region.any():
            raise EvalError(f"marker {i} region empty in reference")
        pred_region = _seeded_region(prediction, m.center_mm, mu_nom, m.radius_mm,
                                     similar_frac)
        inter = int((ref_region & pred_region).sum())
        denom = int(ref_region.sum()) + int(pred_region.sum())
        f1 = 2.0 * inter / denom if denom else 0.0
        diff_mu = np.abs(prediction.values[ref_region].astype(np.float64)
                         - reference.values[ref_region].astype(np.float64)).mean()
        diff_hu = float(diff_mu / scale.mu_water_mm * 1000.0)
        per.append({"marker": i, "f1": float(f1), "intensity_diff_hu": diff_hu})
    return RecoveryMetrics(
        mean_f1=float(np.mean([p["f1"] for p in per])),
        mean_intensity_diff_hu=float(np.mean([p["intensity_diff_hu"] for p in per])),
        per_marker=tuple(per),
    )


def accuracy_table(truth: MarkerSet, detected: MarkerSet, voxel_mm: float,
                   gate_px: float = 5.0) -> AccuracyTable:
    """Greedy nearest-neighbor matching inside a gate, then per-axis
    absolute rounded-voxel differences bucketed at 0 / <=1 / <=2."""
    t = truth.centers_mm()
    d = detected.centers_mm()
    pairs = []
    if len(t) and len(d):
        dist = np.linalg.norm(t[:, None, :] - d[None, :, :], axis=2) / voxel_mm
        order = np.argsort(dist, axis=None)
        used_t, used_d = set(), set()
        for flat in order:
            i, j = np.unravel_index(flat, dist.shape)
            if dist[i, j] > gate_px:
                break
            if i in used_t or j in used_d:
                continue
            used_t.add(int(i))
            used_d.add(int(j))
            pairs.append((int(i), int(j)))
    fractions = {}
    for ax_i, ax in enumerate("xyz"):
        if pairs:
            diffs = np.array([
                abs(np.rint((t[i, ax_i] - d[j, ax_i]) / voxel_mm)) for i, j in pairs
            ])
            fractions[ax] = {dd: float((diffs <= dd).mean()) for dd in (0, 1, 2)}
        else:
            fractions[ax] = {0: 0.0, 1: 0.0, 2: 0.0}
    return AccuracyTable(
        fractions=fractions,
        fn_count=len(t) - len(pairs),
        fp_count=len(d) - len(pairs),
        matched=len(pairs),
    )


def _mutual_nearest(a: np.ndarray, b: np.ndarray) -> list[tuple[int, int]]:
    dist = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2)
    fwd = dist.argmin(axis=1)
    bwd = dist.argmin(axis=0)
    return [(i, int(fwd[i])) for i in range(len(a)) if bwd[fwd[i]] == i]


def register_rigid(detected_mm, reference_mm, correspondence: str = "known"
                   ) -> tuple[RigidTransform, RegistrationReport]:
    """Least-squares rigid fit (SVD orthogonal Procrustes with a reflection
    guard) mapping detected points onto reference points.

    ``correspondence="known"`` pairs points by index; ``"auto"`` uses mutual
    nearest neighbors after centroid alignment.
    """
    a = np.asarray(detected_mm, dtype=float)
    b = np.asarray(reference_mm, dtype=float)
    if correspondence == "known":
        if a.shape != b.shape:
            raise RegistrationError("point lists differ in length")
        pairs = [(i, i) for i in range(len(a))]
    elif correspondence == "auto":
        pairs = _mutual_nearest(a - a.mean(axis=0), b - b.mean(axis=0))
    else:
        raise RegistrationError(f"unknown correspondence mode {correspondence!r}")
    if len(pairs) < 3:
        raise RegistrationError(f"need >= 3 matched points, have {len(pairs)}")
    pa = a[[i for i, _ in pairs]]
    pb = b[[j for _, j in pairs]]
    ca, cb = pa.mean(axis=0), pb.mean(axis=0)
    h = (pa - ca).T @ (pb - cb)
    u, s, vt = np.linalg.svd(h)
    if s[1] <= 1e-9 * max(s[0], 1e-300):
        raise RegistrationError("collinear point configuration")
    d = float(np.sign(np.linalg.det(vt.T @ u.T)))
    if d < 0 and s[2] > 0.25 * s[0]:
        raise RegistrationError(
            "optimal alignment is a reflection; check for mirrored input"
        )
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    t = cb - r @ ca
    transform = RigidTransform(r, t)
    residuals = np.linalg.norm(transform.apply(pa) - pb, axis=1)
    report = RegistrationReport(
        mean_error_mm=float(residuals.mean()),
        std_mm=float(residuals.std()),
        residuals_mm=tuple(float(x) for x in residuals),
        correspondence=tuple(pairs),
    )
    return transform, report


def format_recovery_table(rows: dict[str, RecoveryMetrics]) -> str:
    lines = [f"{'case':24s}  {'F1':>7s}  {'dIntensity(HU)':>14s}"]
    for name, m in rows.items():
        lines.append(f"{name:24s}  {100 * m.mean_f1:6.1f}%  {m.mean_intensity_diff_hu:14.1f}")
    return "\n".join(lines)


def format_registration_table(rows: dict[str, RegistrationReport]) -> str:
    lines = [f"{'case':24s}  {'N':>3s}  {'mean e (mm)':>11s}  {'sigma (mm)':>10s}"]
    for name, r in rows.items():
        lines.append(
            f"{name:24s}  {len(r.residuals_mm):3d}  {r.mean_error_mm:11.3f}  {r.std_mm:10.3f}"
        )
    return "\n".join(lines)


def profile_plot_svg(volumes: dict[str, Volume], marker_center_mm, path,
                     half_width_mm: float = 15.0,
                     scale: HuMuScale = HuMuScale()) -> None:
    """Line intensity profiles (HU) through a marker along x, y and z for one
    or more volumes, written as an SVG figure."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 3, figsize=(12, 3.2))
    any_vol = next(iter(volumes.values()))
    c_idx = np.round(any_vol.mm_to_index(marker_center_mm)).astype(int)
    for ax_i, (ax, name) in enumerate(zip(axes, "xyz")):
        half = int(round(half_width_mm / any_vol.voxel_mm))
        for label, vol in volumes.items():
            n = vol.dims[ax_i]
            idx = [slice(c, c + 1) for c in c_idx]
            i0, i1 = max(0, c_idx[ax_i] - half), min(n, c_idx[ax_i] + half + 1)
            idx[ax_i] = slice(i0, i1)
            prof = mu_to_hu(vol.values[tuple(idx)].ravel(), scale)
            coords = vol.axis_coords_mm(ax_i)[i0:i1]
            ax.plot(coords, prof, label=label)
        ax.set_xlabel(f"{name} (mm)")
        ax.set_ylabel("HU")
        ax.grid(alpha=0.3)
    axes[0].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
