"""Pinhole camera: projection, unprojection, depth windows, frustum sampling.

Conventions (used everywhere in the package): camera looks down +z, +x right,
+y down; pixel (u, v) = (column, row) with pixel centers at integer
coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "CameraIntrinsics",
    "FrustumRange",
    "BehindCameraError",
    "EmptyTargetError",
    "project",
    "unproject",
    "compute_depth_range",
    "frustum_sample_points",
    "load_camera",
    "save_camera",
    "INFERENCE_Z_RANGE",
]

# heuristic depth window used when no ground-truth extent is available
INFERENCE_Z_RANGE = 2.0


class BehindCameraError(ValueError):
    """A point with z <= 0 cannot be projected."""


class EmptyTargetError(ValueError):
    """The mask selects no usable pixels."""


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def scaled(self, factor: int) -> "CameraIntrinsics":
        """Intrinsics whose pixel (i, j) samples original pixel (i*factor, j*factor).

        Matches top-left nearest downsampling, so ground-truth planes computed
        at a reduced resolution agree with downsampled full-resolution planes.
        """
        return CameraIntrinsics(self.fx / factor, self.fy / factor,
                                self.cx / factor, self.cy / factor,
                                self.width // factor, self.height // factor)


@dataclass(frozen=True)
class FrustumRange:
    z_min: float
    z_max: float

    def __post_init__(self):
        if not (0 < self.z_min < self.z_max):
            raise ValueError(f"need 0 < z_min < z_max, got [{self.z_min}, {self.z_max}]")


def project(cam: CameraIntrinsics, p):
    """3-D camera-space point(s) -> pixel coordinates (u, v)."""
    p = np.asarray(p, dtype=np.float64)
    z = p[..., 2]
    if np.any(z <= 0):
        raise BehindCameraError("cannot project a point with z <= 0")
    u = cam.fx * p[..., 0] / z + cam.cx
    v = cam.fy * p[..., 1] / z + cam.cy
    return np.stack([u, v], axis=-1)


def unproject(cam: CameraIntrinsics, pixel, z):
    """Pixel coordinates (u, v) plus depth(s) -> 3-D camera-space point(s)."""
    pixel = np.asarray(pixel, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if np.any(z <= 0):
        raise BehindCameraError("depth must be positive")
    x = (pixel[..., 0] - cam.cx) * z / cam.fx
    y = (pixel[..., 1] - cam.cy) * z / cam.fy
    return np.stack([x, y, np.broadcast_to(z, x.shape)], axis=-1)


def compute_depth_range(depth, mask, z_range=None, gt_mesh=None) -> FrustumRange:
    """Depth window starting at the closest masked depth.

    z_max comes from ``gt_mesh``'s furthest vertex depth (training mode) or
    from ``z_range`` (inference mode, default 2.0 m heuristic).
    """
    mask = np.asarray(mask).astype(bool)
    depth = np.asarray(depth, dtype=np.float64)
    if mask.shape != depth.shape:
        raise ValueError("depth and mask resolutions differ")
    vals = depth[mask]
    if vals.size == 0:
        raise EmptyTargetError("mask selects no pixels")
    if not np.all(np.isfinite(vals)):
        raise ValueError("masked depth contains non-finite values")
    z_min = float(vals.min())
    if gt_mesh is not None:
        z_max = float(np.max(np.asarray(gt_mesh.vertices)[:, 2]))
    else:
        z_max = z_min + (INFERENCE_Z_RANGE if z_range is None else float(z_range))
    return FrustumRange(z_min, z_max)


def frustum_sample_points(cam: CameraIntrinsics, rng_range: FrustumRange, n: int, seed: int):
    """n i.i.d. volume-uniform points in the frustum window.

    Pixel coordinates are continuous uniform over the image rectangle; depth is
    drawn through the inverse CDF of z^3 so that density per unit volume is
    uniform (slab area grows with z^2).
    """
    if n <= 0:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    u = rng.uniform(-0.5, cam.width - 0.5, size=n)
    v = rng.uniform(-0.5, cam.height - 0.5, size=n)
    z3 = rng.uniform(rng_range.z_min ** 3, rng_range.z_max ** 3, size=n)
    z = np.cbrt(z3)
    return unproject(cam, np.stack([u, v], axis=-1), z)


def save_camera(cam: CameraIntrinsics, path):
    with open(path, "w") as f:
        for key in ("fx", "fy", "cx", "cy", "width", "height"):
            f.write(f"{key}={getattr(cam, key)!r}\n")


def load_camera(path) -> CameraIntrinsics:
    kv = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or "=" not in line:
                continue
            k, v = line.split("=", 1)
            kv[k.strip()] = v.strip()
    return CameraIntrinsics(fx=float(kv["fx"]), fy=float(kv["fy"]),
                            cx=float(kv["cx"]), cy=float(kv["cy"]),
                            width=int(kv["width"]), height=int(kv["height"]))
