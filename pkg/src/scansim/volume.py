"""Volumetric ultrasound data and oblique slice extraction.

A volume is a dense grid of uint8 intensities with physical spacing; a
virtual probe pose places a 2D imaging plane anywhere inside (or outside)
it. Slices are sampled with trilinear interpolation and zero padding.

Probe frame convention: u = image lateral (columns), v = image axial depth
(rows), w = elevational advance direction (the plane normal). The probe
position maps to the top-center pixel of the slice (skin contact point).
"""

from __future__ import annotations

import io
import json
import os
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from PIL import Image
from scipy.spatial.transform import Rotation

from .errors import MalformedHeader, NoMask, UnsupportedVersion

_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class UsVolume:
    """A 3D ultrasound intensity grid with physical geometry.

    `voxels` is stored as a (nz, ny, nx) uint8 array so that the raw
    x-fastest byte order of the file maps directly onto C order. The
    optional `mask` holds binary vessel labels with identical geometry.
    """

    dims: Tuple[int, int, int]            # (nx, ny, nz)
    spacing: np.ndarray                   # mm per voxel, shape (3,)
    origin: np.ndarray                    # world position of voxel (0,0,0), mm
    voxels: np.ndarray                    # uint8, shape (nz, ny, nx)
    mask: Optional[np.ndarray] = None     # uint8 in {0,1}, same shape

    def __post_init__(self):
        nx, ny, nz = self.dims
        if min(nx, ny, nz) < 2:
            raise ValueError("all dims must be >= 2")
        if np.any(np.asarray(self.spacing) <= 0):
            raise ValueError("spacing components must be positive")
        if self.voxels.shape != (nz, ny, nx):
            raise ValueError("voxel array shape inconsistent with dims")
        if self.mask is not None and self.mask.shape != (nz, ny, nx):
            raise ValueError("mask shape inconsistent with dims")

    @property
    def has_mask(self) -> bool:
        return self.mask is not None

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        """World-frame bounding box (lo, hi) of the voxel grid, mm."""
        lo = np.asarray(self.origin, dtype=float)
        hi = lo + (np.asarray(self.dims) - 1) * np.asarray(self.spacing)
        return lo, hi


@dataclass(frozen=True)
class ProbePose:
    """6-DoF virtual probe pose: world position (mm) and a proper rotation
    whose columns are the probe axes (u, v, w) expressed in world frame."""

    position: np.ndarray          # shape (3,)
    orientation: np.ndarray       # shape (3, 3), world <- probe

    def __post_init__(self):
        R = np.asarray(self.orientation, dtype=float)
        if R.shape != (3, 3):
            raise ValueError("orientation must be 3x3")
        err = np.max(np.abs(R.T @ R - np.eye(3)))
        if err > _ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise ValueError("orientation must be a proper rotation")

    @classmethod
    def from_position_axes(cls, position, u, v, w) -> "ProbePose":
        R = np.column_stack([u, v, w]).astype(float)
        return cls(np.asarray(position, dtype=float), R)

    @property
    def u(self) -> np.ndarray:
        return self.orientation[:, 0]

    @property
    def v(self) -> np.ndarray:
        return self.orientation[:, 1]

    @property
    def w(self) -> np.ndarray:
        return self.orientation[:, 2]

    def to_wire(self) -> dict:
        """Serialize as position + quaternion (x, y, z, w)."""
        q = Rotation.from_matrix(self.orientation).as_quat()
        return {"position": [float(x) for x in self.position],
                "quaternion": [float(x) for x in q]}

    @classmethod
    def from_wire(cls, d: dict) -> "ProbePose":
        R = Rotation.from_quat(d["quaternion"]).as_matrix()
        return cls(np.asarray(d["position"], dtype=float), R)


@dataclass(frozen=True)
class SliceSpec:
    """Pixel geometry of an extracted slice."""

    width_px: int = 224
    height_px: int = 224
    pixel_spacing: float = 0.2     # mm per pixel

    def __post_init__(self):
        if self.width_px <= 0 or self.height_px <= 0:
            raise ValueError("pixel counts must be positive")
        if self.pixel_spacing <= 0:
            raise ValueError("pixel_spacing must be positive")


@dataclass(frozen=True)
class SliceImage:
    """An 8-bit grayscale B-mode slice."""

    width: int
    height: int
    pixels: np.ndarray            # uint8, shape (height, width)

    def __post_init__(self):
        if self.pixels.shape != (self.height, self.width):
            raise ValueError("pixel array shape inconsistent")

    def to_png_bytes(self) -> bytes:
        buf = io.BytesIO()
        Image.fromarray(self.pixels, mode="L").save(buf, format="PNG")
        return buf.getvalue()

    @classmethod
    def from_png_bytes(cls, data: bytes) -> "SliceImage":
        arr = np.asarray(Image.open(io.BytesIO(data)).convert("L"))
        return cls(arr.shape[1], arr.shape[0], arr)


# ---------------------------------------------------------------------------
# .usvol file format: one JSON header line, then raw voxel bytes (x-fastest),
# then raw mask bytes if has_mask.
# ---------------------------------------------------------------------------

def load_volume(path: str) -> UsVolume:
    """Load a `.usvol` file."""
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, "rb") as f:
        header_line = f.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise MalformedHeader(f"unparseable header: {e}") from None
        version = header.get("version")
        if version != 1:
            raise UnsupportedVersion(f"unsupported version: {version}")
        try:
            dims = tuple(int(d) for d in header["dims"])
            spacing = np.asarray(header["spacing_mm"], dtype=float)
            origin = np.asarray(header["origin_mm"], dtype=float)
            has_mask = bool(header["has_mask"])
        except (KeyError, TypeError, ValueError) as e:
            raise MalformedHeader(f"bad header fields: {e}") from None
        if len(dims) != 3 or min(dims) < 2:
            raise MalformedHeader(f"bad dims: {dims}")
        nx, ny, nz = dims
        count = nx * ny * nz
        payload = f.read()
    expected = count * (2 if has_mask else 1)
    if len(payload) != expected:
        raise MalformedHeader(
            f"payload size {len(payload)} != expected {expected}")
    voxels = np.frombuffer(payload[:count], dtype=np.uint8).reshape(nz, ny, nx)
    mask = None
    if has_mask:
        mask = np.frombuffer(payload[count:], dtype=np.uint8).reshape(nz, ny, nx)
    return UsVolume(dims=dims, spacing=spacing, origin=origin,
                    voxels=voxels, mask=mask)


def write_volume(vol: UsVolume, path: str) -> None:
    """Write a `.usvol` file; load_volume(write_volume(v)) round-trips
    byte-identically."""
    header = {
        "version": 1,
        "dims": list(vol.dims),
        "spacing_mm": [float(s) for s in vol.spacing],
        "origin_mm": [float(o) for o in vol.origin],
        "has_mask": vol.has_mask,
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, separators=(",", ":")).encode("utf-8"))
        f.write(b"\n")
        f.write(np.ascontiguousarray(vol.voxels, dtype=np.uint8).tobytes())
        if vol.has_mask:
            f.write(np.ascontiguousarray(vol.mask, dtype=np.uint8).tobytes())


# ---------------------------------------------------------------------------
# Slice sampling
# ---------------------------------------------------------------------------

def _plane_world_points(pose: ProbePose, spec: SliceSpec) -> np.ndarray:
    """World coordinates of every slice pixel, shape (H, W, 3).

    Pixel (r, c) sits at probe-frame ((c - (W-1)/2) * px, r * px, 0).
    """
    W, H, px = spec.width_px, spec.height_px, spec.pixel_spacing
    cols = (np.arange(W) - (W - 1) / 2.0) * px
    rows = np.arange(H) * px
    uu, vv = np.meshgrid(cols, rows)                       # (H, W)
    local = np.stack([uu, vv, np.zeros_like(uu)], axis=-1)  # (H, W, 3)
    return pose.position + local @ pose.orientation.T


def _trilinear(grid: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Trilinear interpolation of a zero-padded (nz, ny, nx) grid at
    fractional voxel coordinates (..., 3) ordered (x, y, z)."""
    nx, ny, nz = grid.shape[2], grid.shape[1], grid.shape[0]
    x, y, z = coords[..., 0], coords[..., 1], coords[..., 2]
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    z0 = np.floor(z).astype(np.int64)
    fx, fy, fz = x - x0, y - y0, z - z0

    out = np.zeros(x.shape, dtype=np.float64)
    for dz in (0, 1):
        for dy in (0, 1):
            for dx in (0, 1):
                xi, yi, zi = x0 + dx, y0 + dy, z0 + dz
                inside = ((xi >= 0) & (xi < nx) &
                          (yi >= 0) & (yi < ny) &
                          (zi >= 0) & (zi < nz))
                vals = np.zeros(x.shape, dtype=np.float64)
                vals[inside] = grid[zi[inside], yi[inside], xi[inside]]
                wx = fx if dx else (1.0 - fx)
                wy = fy if dy else (1.0 - fy)
                wz = fz if dz else (1.0 - fz)
                out += vals * wx * wy * wz
    return out


def sample_slice(vol: UsVolume, pose: ProbePose, spec: SliceSpec) -> SliceImage:
    """Extract an oblique slice by trilinear interpolation.

    Points outside the voxel grid sample as 0 (anechoic); interpolated
    values are rounded half-up to uint8. Deterministic: identical inputs
    yield bit-identical images.
    """
    pts = _plane_world_points(pose, spec)
    coords = (pts - vol.origin) / vol.spacing
    vals = _trilinear(vol.voxels, coords)
    pixels = np.clip(np.floor(vals + 0.5), 0, 255).astype(np.uint8)
    return SliceImage(spec.width_px, spec.height_px, pixels)


def mask_centroid_in_plane(vol: UsVolume, pose: ProbePose,
                           spec: SliceSpec) -> Optional[Tuple[float, float]]:
    """Mean (row, col) of slice pixels whose nearest mask voxel is 1.

    The mask is looked up nearest-neighbor to keep it binary. Returns None
    when the plane misses the mask entirely.
    """
    if not vol.has_mask:
        raise NoMask("volume has no mask channel")
    pts = _plane_world_points(pose, spec)
    coords = (pts - vol.origin) / vol.spacing
    idx = np.rint(coords).astype(np.int64)
    nx, ny, nz = vol.dims
    inside = ((idx[..., 0] >= 0) & (idx[..., 0] < nx) &
              (idx[..., 1] >= 0) & (idx[..., 1] < ny) &
              (idx[..., 2] >= 0) & (idx[..., 2] < nz))
    hit = np.zeros(inside.shape, dtype=bool)
    hit[inside] = vol.mask[idx[inside][:, 2], idx[inside][:, 1],
                           idx[inside][:, 0]] > 0
    if not hit.any():
        return None
    rows, cols = np.nonzero(hit)
    return float(rows.mean()), float(cols.mean())


def transform_pose(pose: ProbePose, delta_translation,
                   delta_rotation: np.ndarray = None) -> ProbePose:
    """Apply a probe-frame motion delta to a pose.

    position' = position + R @ delta_translation; R' = R @ delta_rotation.
    """
    t = np.asarray(delta_translation, dtype=float)
    new_pos = pose.position + pose.orientation @ t
    R = pose.orientation
    if delta_rotation is not None:
        R = R @ np.asarray(delta_rotation, dtype=float)
    return ProbePose(new_pos, R)


def apply_motion(pose: ProbePose, delta) -> ProbePose:
    """Apply a workflow MotionDelta (translation + rotation) to a pose."""
    return transform_pose(pose, delta.translation, delta.rotation)
