"""Occupancy-plane single-view RGB-D shape reconstruction.

A shape is represented as a stack of binary occupancy images at depths inside
the camera frustum. The package covers ground-truth plane generation, a small
trainable convolutional predictor with a two-resolution masked BCE+DICE
objective, plane-sweep inference to a camera-space mesh, and the evaluation
protocol (volumetric IoU, Chamfer-L1, normal consistency, ICP, visibility).
"""

from .camera import CameraIntrinsics, FrustumRange, compute_depth_range
from .infer import ReconstructionConfig, reconstruct
from .mesh import TriangleMesh, VoxelGrid, marching_cubes, points_inside
from .metrics import MetricReport, chamfer_l1, normal_consistency, volumetric_iou
from .model import ModelConfig, OPlanesModel, load_checkpoint, save_checkpoint
from .planes import OPlane, OPlaneStack, gt_oplane_stack, positional_encode
from .synth import SceneSpec, generate_scene, write_dataset
from .train import TrainConfig, fit

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics", "FrustumRange", "compute_depth_range",
    "ReconstructionConfig", "reconstruct",
    "TriangleMesh", "VoxelGrid", "marching_cubes", "points_inside",
    "MetricReport", "chamfer_l1", "normal_consistency", "volumetric_iou",
    "ModelConfig", "OPlanesModel", "load_checkpoint", "save_checkpoint",
    "OPlane", "OPlaneStack", "gt_oplane_stack", "positional_encode",
    "SceneSpec", "generate_scene", "write_dataset",
    "TrainConfig", "fit",
    "__version__",
]
