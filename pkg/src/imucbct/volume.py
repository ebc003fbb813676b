"""Volume grid types, raw volume I/O, and slice image export."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ShapeError

MM_PER_M = 1000.0


@dataclass(frozen=True)
class VolumeSpec:
    """Regular isotropic voxel grid; origin is the world position (mm) of
    the center of voxel (0, 0, 0)."""

    dims: tuple
    spacing_mm: float
    origin_mm: tuple

    def __post_init__(self):
        if len(self.dims) != 3 or any(int(d) <= 0 for d in self.dims):
            raise ConfigurationError(f"bad volume dims {self.dims}")
        if self.spacing_mm <= 0:
            raise ConfigurationError("voxel spacing must be positive")

    @classmethod
    def centered(cls, dims, spacing_mm, center_mm=(0.0, 0.0, 0.0)):
        dims = tuple(int(d) for d in dims)
        origin = tuple(c - spacing_mm * (d - 1) / 2.0 for c, d in zip(center_mm, dims))
        return cls(dims=dims, spacing_mm=float(spacing_mm), origin_mm=origin)

    def voxel_centers_m(self):
        """World coordinates (meters) of all voxel centers, shape (nx*ny*nz, 3).

        Ordered with the z index varying fastest (C order over [ix, iy, iz]).
        """
        nx, ny, nz = self.dims
        ox, oy, oz = self.origin_mm
        xs = ox + self.spacing_mm * np.arange(nx)
        ys = oy + self.spacing_mm * np.arange(ny)
        zs = oz + self.spacing_mm * np.arange(nz)
        gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
        return np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()]) / MM_PER_M


@dataclass
class Volume:
    """Scalar attenuation grid (1/m) on a VolumeSpec lattice, data[ix, iy, iz]."""

    spec: VolumeSpec
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.shape != tuple(self.spec.dims):
            raise ShapeError(f"data shape {self.data.shape} != dims {self.spec.dims}")
        if not np.all(np.isfinite(self.data)):
            raise ShapeError("volume data contains non-finite values")


def save_volume(vol: Volume, raw_path, sidecar_path=None):
    """Write raw little-endian float32 plus a JSON sidecar."""
    raw_path = str(raw_path)
    if sidecar_path is None:
        sidecar_path = raw_path.rsplit(".", 1)[0] + ".json"
    tmp = raw_path + ".tmp"
    vol.data.astype("<f4").tofile(tmp)
    os.replace(tmp, raw_path)
    doc = {
        "dims": list(vol.spec.dims),
        "spacing_mm": vol.spec.spacing_mm,
        "origin_mm": list(vol.spec.origin_mm),
    }
    tmp = str(sidecar_path) + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")
    os.replace(tmp, sidecar_path)


def load_volume(raw_path, sidecar_path=None) -> Volume:
    raw_path = str(raw_path)
    if sidecar_path is None:
        sidecar_path = raw_path.rsplit(".", 1)[0] + ".json"
    with open(sidecar_path) as fh:
        doc = json.load(fh)
    spec = VolumeSpec(dims=tuple(doc["dims"]), spacing_mm=float(doc["spacing_mm"]),
                      origin_mm=tuple(doc["origin_mm"]))
    data = np.fromfile(raw_path, dtype="<f4").astype(float)
    nx, ny, nz = spec.dims
    if data.size != nx * ny * nz:
        raise ShapeError(f"raw volume size {data.size} != {nx * ny * nz}")
    return Volume(spec=spec, data=data.reshape(spec.dims))


def save_slice_pgm(vol: Volume, axis, index, path):
    """Export one slice as 16-bit PGM with a fixed [0, 1] display window.

    Callers are expected to scale the volume to [0, 1] first; values
    outside the window are clipped.
    """
    if axis not in (0, 1, 2):
        raise ConfigurationError("axis must be 0, 1 or 2")
    sl = np.take(vol.data, index, axis=axis)
    img = np.clip(sl, 0.0, 1.0)
    pix = np.round(img * 65535.0).astype(">u2")
    header = f"P5\n{pix.shape[1]} {pix.shape[0]}\n65535\n".encode("ascii")
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(pix.tobytes())
    os.replace(tmp, path)
