"""Bit-exact file I/O for volumes (`mvol`), projection stacks (`mproj`),
marker sets (JSON) and detection tables (CSV).

Both binary formats are a single UTF-8 JSON header line terminated by a
newline, followed by a little-endian float32 payload.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .geometry import ScanGeometry
from .volume import MarkerSet, Volume, VolumeError


class FormatError(ValueError):
    """Malformed mvol/mproj header or payload."""


MVOL_MAGIC = "MVOL1"
MPROJ_MAGIC = "MPROJ1"


def write_volume(vol: Volume, path) -> None:
    header = {
        "magic": MVOL_MAGIC,
        "nx": vol.dims[0],
        "ny": vol.dims[1],
        "nz": vol.dims[2],
        "voxel_mm": vol.voxel_mm,
        "origin_mm": list(vol.origin_mm),
        "unit": "mu_per_mm",
        "dtype": "f32le",
        "order": "x-fastest,then y,then z",
    }
    payload = np.asfortranarray(vol.values, dtype="<f4")
    with open(path, "wb") as f:
        f.write((json.dumps(header) + "\n").encode("utf-8"))
        f.write(payload.tobytes(order="F"))


def read_volume(path) -> Volume:
    with open(path, "rb") as f:
        line = f.readline()
        try:
            header = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError(f"{path}: bad mvol header: {e}") from e
        if header.get("magic") != MVOL_MAGIC:
            raise FormatError(f"{path}: not an mvol file")
        nx, ny, nz = (int(header[k]) for k in ("nx", "ny", "nz"))
        raw = f.read()
    expected = nx * ny * nz * 4
    if len(raw) != expected:
        raise FormatError(
            f"{path}: payload is {len(raw)} bytes, header implies {expected}"
        )
    values = np.frombuffer(raw, dtype="<f4").reshape((nx, ny, nz), order="F")
    bad = ~np.isfinite(values)
    if bad.any():
        idx = np.argwhere(bad)[0]
        raise FormatError(f"{path}: non-finite voxel at {tuple(int(i) for i in idx)}")
    try:
        return Volume(
            (nx, ny, nz),
            float(header["voxel_mm"]),
            tuple(float(c) for c in header["origin_mm"]),
            np.ascontiguousarray(values),
        )
    except (KeyError, VolumeError) as e:
        raise FormatError(f"{path}: {e}") from e


def write_projections(stack, path) -> None:
    from .projector import ProjectionStack  # local import to avoid a cycle

    assert isinstance(stack, ProjectionStack)
    header = {
        "magic": MPROJ_MAGIC,
        "views": stack.views,
        "rows": stack.rows,
        "cols": stack.cols_used,
        "pixel_mm": stack.geom.detector_pixel_mm,
        "angles_deg": [float(a) for a in stack.angles_deg],
        "geometry": json.loads(stack.geom.to_json()),
    }
    with open(path, "wb") as f:
        f.write((json.dumps(header) + "\n").encode("utf-8"))
        f.write(np.ascontiguousarray(stack.data, dtype="<f4").tobytes())


def read_projections(path):
    from .projector import ProjectionStack

    with open(path, "rb") as f:
        line = f.readline()
        try:
            header = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError(f"{path}: bad mproj header: {e}") from e
        if header.get("magic") != MPROJ_MAGIC:
            raise FormatError(f"{path}: not an mproj file")
        views, rows, cols = (int(header[k]) for k in ("views", "rows", "cols"))
        raw = f.read()
    expected = views * rows * cols * 4
    if len(raw) != expected:
        raise FormatError(
            f"{path}: payload is {len(raw)} bytes, header implies {expected}"
        )
    data = np.frombuffer(raw, dtype="<f4").reshape((views, rows, cols)).copy()
    if not np.all(np.isfinite(data)):
        raise FormatError(f"{path}: non-finite projection value")
    geom = ScanGeometry(**header["geometry"])
    return ProjectionStack(
        geom=geom,
        cols_used=cols,
        rows=rows,
        views=views,
        data=data,
        angles_deg=np.asarray(header["angles_deg"], dtype=float),
    )


def write_marker_set(markers: MarkerSet, path) -> None:
    Path(path).write_text(markers.to_json())


def read_marker_set(path) -> MarkerSet:
    return MarkerSet.from_json(Path(path).read_text())


DETECTION_CSV_FIELDS = [
    "pair_id", "x_mm", "y_mm", "z_mm", "x_px", "y_px", "z_px", "score", "confidence",
]


def write_detections_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=DETECTION_CSV_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in DETECTION_CSV_FIELDS})
