"""Single-image reconstruction: sweep a uniform stack of plane depths through
the frustum window, stack the predicted occupancy probabilities into a voxel
grid, and extract the 0.5 isosurface."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .camera import INFERENCE_Z_RANGE, CameraIntrinsics, FrustumRange, compute_depth_range
from .mesh import MeshError, VoxelGrid, marching_cubes
from .planes import OPlane, OPlaneStack, augment_rgb, downsample_binary, \
    uniform_inference_depths

__all__ = ["ReconstructionConfig", "predict_oplane_stack", "planes_to_grid", "reconstruct"]


@dataclass
class ReconstructionConfig:
    n_planes: int = 256
    iso: float = 0.5
    z_range: float = INFERENCE_Z_RANGE
    mask_gating: bool = True       # zero probabilities outside the object mask
    front_zeroing: bool = False    # zero probabilities in front of the depth map
    chunk_size: int = 16           # plane depths per forward pass

    def __post_init__(self):
        if self.n_planes < 2:
            raise ValueError("need at least two planes to span the window")
        if not (0 < self.iso < 1):
            raise ValueError("iso level must lie in (0, 1)")
        if self.chunk_size < 1:
            raise ValueError("chunk_size must be positive")


def predict_oplane_stack(model, rgb, depth, mask, cam: CameraIntrinsics,
                         cfg: ReconstructionConfig = ReconstructionConfig(),
                         frustum: FrustumRange = None) -> OPlaneStack:
    """Predicted occupancy probabilities at N uniform depths.

    Image features are computed once and shared across depth chunks, so the
    result is bitwise independent of ``chunk_size``.
    """
    mcfg = model.config
    if (cam.height, cam.width) != (mcfg.height, mcfg.width):
        raise ValueError(f"input resolution {cam.height}x{cam.width} does not match "
                         f"model input {mcfg.height}x{mcfg.width}")
    if frustum is None:
        frustum = compute_depth_range(depth, mask, z_range=cfg.z_range)
    depths = uniform_inference_depths(frustum, cfg.n_planes)
    aug = augment_rgb(rgb, mask).astype(mcfg.np_dtype)
    depth = np.asarray(depth, dtype=np.float64)

    features = None
    probs = []
    for lo in range(0, cfg.n_planes, cfg.chunk_size):
        chunk = depths[lo:lo + cfg.chunk_size]
        fwd = model.predict_planes(aug, depth, chunk, frustum=frustum,
                                   precomputed_features=features)
        features = fwd.features
        logits = fwd.fine_logits.data.reshape(len(chunk), mcfg.out_h, mcfg.out_w)
        probs.append(T._sigmoid_np(logits.astype(np.float64)))
    prob = np.concatenate(probs)

    factor = mcfg.height // mcfg.out_h
    if cfg.mask_gating:
        prob = prob * downsample_binary(np.asarray(mask, dtype=bool), mcfg.out_h, mcfg.out_w)
    if cfg.front_zeroing:
        d = depth[::factor, ::factor]
        behind = depths[:, None, None] >= np.where(np.isfinite(d), d, np.inf)
        prob = prob * behind
    planes = [OPlane(float(z), prob[i]) for i, z in enumerate(depths)]
    return OPlaneStack(planes, cam.scaled(factor), frustum)


def planes_to_grid(stack: OPlaneStack) -> VoxelGrid:
    """View a uniformly spaced prediction stack as a frustum voxel grid."""
    zs = stack.z_values
    if len(zs) < 2:
        raise MeshError("grid extraction needs at least two planes")
    dz = np.diff(zs)
    if np.ptp(dz) > 1e-9 * max(abs(zs[-1]), 1.0):
        raise MeshError("plane depths are not uniformly spaced")
    frustum = FrustumRange(float(zs[0]), float(zs[-1]))
    return VoxelGrid(stack.as_array(), stack.cam, frustum)


def reconstruct(model, rgb, depth, mask, cam: CameraIntrinsics,
                cfg: ReconstructionConfig = ReconstructionConfig(),
                frustum: FrustumRange = None):
    """RGB-D observation -> camera-space mesh. Returns (mesh, plane stack)."""
    stack = predict_oplane_stack(model, rgb, depth, mask, cam, cfg, frustum)
    grid = planes_to_grid(stack)
    mesh = marching_cubes(grid, iso=cfg.iso)
    if mesh.is_empty:
        warnings.warn("no occupancy above the iso level; returning an empty mesh",
                      RuntimeWarning)
    return mesh, stack
