"""The occupancy-plane representation: ground-truth planes, depth-difference
images with sinusoidal encoding, the 5-channel augmented RGB input, plane
depth sampling, and the OPLN container format."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .camera import CameraIntrinsics, FrustumRange
from .mesh import TriangleMesh, pixel_ray_crossings

__all__ = [
    "OPlane",
    "OPlaneStack",
    "PE_CHANNELS",
    "positional_encode",
    "depth_diff_image",
    "gt_oplane",
    "gt_oplane_stack",
    "sample_train_depths",
    "uniform_inference_depths",
    "augment_rgb",
    "downsample_binary",
    "save_oplane_stack",
    "load_oplane_stack",
    "FARID_INTERP",
    "FARID_DERIV",
]

PE_CHANNELS = 64

# Farid 5-tap interpolation / derivative pair (published coefficients)
FARID_INTERP = np.array([0.030320, 0.249724, 0.439911, 0.249724, 0.030320])
FARID_DERIV = np.array([0.104550, 0.292315, 0.0, -0.292315, -0.104550])


@dataclass
class OPlane:
    z: float
    values: np.ndarray  # (H', W'); binary for GT, probabilities for predictions


@dataclass
class OPlaneStack:
    planes: list
    cam: CameraIntrinsics
    frustum: FrustumRange

    def __post_init__(self):
        zs = [p.z for p in self.planes]
        if any(b <= a for a, b in zip(zs, zs[1:])):
            raise ValueError("plane depths must be strictly increasing")
        shapes = {p.values.shape for p in self.planes}
        if len(shapes) > 1:
            raise ValueError("planes must share one resolution")

    @property
    def z_values(self):
        return np.array([p.z for p in self.planes])

    @property
    def resolution(self):
        return self.planes[0].values.shape

    def as_array(self):
        return np.stack([p.values for p in self.planes])


# ---------------------------------------------------------------------------
# positional encoding and depth-difference images

_T = np.arange(PE_CHANNELS // 2)
_PE_FREQ = 50.0 / (200.0 ** (2.0 * _T / PE_CHANNELS))


def positional_encode(pos):
    """64-channel interleaved sin/cos encoding of a scalar depth difference.

    Channel 2t is sin(50*pos / 200^(2t/64)), channel 2t+1 the cosine
    counterpart, t = 0..31. Accepts scalars or arrays; the channel axis
    comes first.
    """
    pos = np.asarray(pos, dtype=np.float64)
    ang = _PE_FREQ.reshape((-1,) + (1,) * pos.ndim) * pos[None]
    out = np.empty((PE_CHANNELS,) + pos.shape)
    out[0::2] = np.sin(ang)
    out[1::2] = np.cos(ang)
    return out


def _nearest_downsample(img, out_h, out_w):
    h, w = img.shape[:2]
    if h % out_h or w % out_w:
        raise ValueError(f"{h}x{w} -> {out_h}x{out_w} is not an integer downscale")
    return img[::h // out_h, ::w // out_w]


def depth_diff_image(depth, z, out_h, out_w, z_max=None):
    """Per-pixel PE(z - depth), channel-major, at the requested resolution.

    Pixels without a valid (finite) depth get the sentinel difference
    z - z_max, the most negative plausible value; losses never read them.
    """
    depth = _nearest_downsample(np.asarray(depth, dtype=np.float64), out_h, out_w)
    diff = z - depth
    bad = ~np.isfinite(diff)
    if bad.any():
        if z_max is None:
            raise ValueError("depth has invalid pixels; pass z_max for the sentinel")
        diff = np.where(bad, z - z_max, diff)
    return positional_encode(diff)


# ---------------------------------------------------------------------------
# ground-truth planes

def gt_oplane_stack(mesh: TriangleMesh, cam: CameraIntrinsics, zs, res,
                    frustum: FrustumRange = None, crossings=None) -> OPlaneStack:
    """Binary planes at the given depths, sampled at pixel centers.

    One rasterization pass collects every surface crossing along each pixel
    ray; each plane is then a parity lookup. Equivalent to a per-pixel
    point-inside query on a watertight mesh.
    """
    out_h, out_w = res
    if cam.height % out_h or cam.width % out_w:
        raise ValueError("plane resolution must divide the camera resolution")
    factor = cam.height // out_h
    if cam.width // out_w != factor:
        raise ValueError("plane resolution must keep the camera aspect")
    scaled = cam.scaled(factor) if factor > 1 else cam
    if crossings is None:
        crossings = pixel_ray_crossings(mesh, scaled)
    zs = sorted(float(z) for z in zs)
    if any(z <= 0 for z in zs):
        raise ValueError("plane depths must be positive")
    planes = [OPlane(z, crossings.occupancy_at(z)) for z in zs]
    if frustum is None:
        frustum = FrustumRange(min(zs) * 0.5, max(zs) + 1e-6)
    return OPlaneStack(planes, scaled, frustum)


def gt_oplane(mesh: TriangleMesh, cam: CameraIntrinsics, z, res) -> OPlane:
    return gt_oplane_stack(mesh, cam, [z], res).planes[0]


# ---------------------------------------------------------------------------
# plane depth sampling

def sample_train_depths(frustum: FrustumRange, n: int, rng) -> np.ndarray:
    """n i.i.d. uniform depths in the window, sorted ascending."""
    if n < 1:
        raise ValueError("need at least one plane")
    return np.sort(rng.uniform(frustum.z_min, frustum.z_max, size=n))


def uniform_inference_depths(frustum: FrustumRange, n: int) -> np.ndarray:
    """n evenly spaced depths, endpoints inclusive (align with grid slices)."""
    if n < 2:
        raise ValueError("need at least two planes")
    return np.linspace(frustum.z_min, frustum.z_max, n)


# ---------------------------------------------------------------------------
# augmented RGB input

def augment_rgb(rgb, mask):
    """5 x H x W input: RGB, mask-boundary distance, Farid edge response.

    The distance channel is the unsigned Euclidean distance to the mask's
    boundary pixels, normalized by the image diagonal; the edge channel is the
    gradient magnitude of the grayscale image under the separable 5-tap Farid
    filter pair, normalized by its maximum.
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    mask = np.asarray(mask).astype(bool)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"rgb must be (H, W, 3), got {rgb.shape}")
    if rgb.shape[:2] != mask.shape:
        raise ValueError(f"rgb {rgb.shape[:2]} and mask {mask.shape} resolutions differ")
    h, w = mask.shape

    boundary = mask & ~ndimage.binary_erosion(mask, border_value=0)
    if boundary.any():
        dist = ndimage.distance_transform_edt(~boundary)
    else:
        dist = np.zeros((h, w))
    dist = dist / np.hypot(h, w)

    gray = rgb.mean(axis=2)
    gx = ndimage.correlate1d(ndimage.correlate1d(gray, FARID_DERIV, axis=1, mode="nearest"),
                             FARID_INTERP, axis=0, mode="nearest")
    gy = ndimage.correlate1d(ndimage.correlate1d(gray, FARID_DERIV, axis=0, mode="nearest"),
                             FARID_INTERP, axis=1, mode="nearest")
    edges = np.hypot(gx, gy)
    peak = edges.max()
    if peak > 0:
        edges = edges / peak
    return np.concatenate([rgb.transpose(2, 0, 1), dist[None], edges[None]], axis=0)


def downsample_binary(img, out_h, out_w):
    """Nearest (top-left per block) downsampling; keeps values binary."""
    return _nearest_downsample(np.asarray(img), out_h, out_w).copy()


# ---------------------------------------------------------------------------
# OPLN container

_MAGIC = b"OPLN"
_VERSION = 1


def save_oplane_stack(stack: OPlaneStack, path, binary=None):
    """Little-endian container: magic, version/H'/W'/N (u16), intrinsics
    (6 x f64), plane depths (N x f32), then either N bit-packed row-major
    binary planes (GT) or N x H' x W' 32-bit floats (predictions).
    """
    arr = stack.as_array()
    if binary is None:
        binary = bool(np.isin(arr, (0, 1)).all())
    h, w = stack.resolution
    n = len(stack.planes)
    cam = stack.cam
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<HHHH", _VERSION, h, w, n))
        f.write(struct.pack("<6d", cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height))
        f.write(np.asarray(stack.z_values, dtype="<f4").tobytes())
        if binary:
            packed = np.packbits(arr.astype(np.uint8).reshape(n, -1), axis=-1)
            f.write(packed.tobytes())
        else:
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_oplane_stack(path) -> OPlaneStack:
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise ValueError(f"{path}: not an OPLN file")
        version, h, w, n = struct.unpack("<HHHH", f.read(8))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported OPLN version {version}")
        fx, fy, cx, cy, width, height = struct.unpack("<6d", f.read(48))
        zs = np.frombuffer(f.read(4 * n), dtype="<f4").astype(np.float64)
        cam = CameraIntrinsics(fx, fy, cx, cy, int(width), int(height))
        payload = f.read()
    packed_row = (h * w + 7) // 8
    if len(payload) == n * packed_row:
        raw = np.frombuffer(payload, dtype=np.uint8).reshape(n, packed_row)
        arr = np.unpackbits(raw, axis=-1)[:, :h * w].reshape(n, h, w).astype(bool)
    elif len(payload) == 4 * n * h * w:
        arr = np.frombuffer(payload, dtype="<f4").reshape(n, h, w).astype(np.float64)
    else:
        raise ValueError(f"{path}: payload size matches neither plane encoding")
    planes = [OPlane(float(z), arr[i]) for i, z in enumerate(zs)]
    z_lo = float(zs[0])
    z_hi = float(zs[-1]) if n > 1 and zs[-1] > zs[0] else z_lo + 1e-6
    return OPlaneStack(planes, cam, FrustumRange(z_lo * 0.5 if z_lo else 1e-6, z_hi + 1e-9))
