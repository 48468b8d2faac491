"""Procedural RGB-D scenes: watertight primitive meshes placed in the camera
frustum, rendered to self-consistent (RGB, depth, mask, camera, mesh) samples
so training and evaluation need no external dataset."""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from skimage import measure

from .camera import CameraIntrinsics, load_camera, save_camera
from .mesh import TriangleMesh, load_mesh, pixel_ray_crossings, save_mesh
from .metrics import visibility_level

__all__ = [
    "SceneSpec",
    "SceneSample",
    "icosphere",
    "box_mesh",
    "csg_mesh",
    "generate_scene",
    "write_dataset",
    "load_sample",
    "load_manifest",
    "write_pfm",
    "read_pfm",
    "write_pgm",
    "read_pgm",
    "manifest_hash",
]


# ---------------------------------------------------------------------------
# primitive meshes


def icosphere(subdivisions: int = 3, radius: float = 1.0, center=(0.0, 0.0, 0.0)):
    """Subdivided icosahedron; watertight by construction."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts[0])
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    for _ in range(subdivisions):
        verts_list = list(verts)
        midpoint = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in midpoint:
                m = verts_list[a] + verts_list[b]
                m = m / np.linalg.norm(m)
                midpoint[key] = len(verts_list)
                verts_list.append(m)
            return midpoint[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        verts = np.array(verts_list)
        faces = np.array(new_faces, dtype=np.int64)
    return TriangleMesh(verts * radius + np.asarray(center, dtype=np.float64), faces)


def box_mesh(center=(0.0, 0.0, 0.0), half_extents=(0.5, 0.5, 0.5)):
    """Axis-aligned cuboid of 12 outward-wound triangles."""
    c = np.asarray(center, dtype=np.float64)
    h = np.asarray(half_extents, dtype=np.float64)
    corners = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
                       dtype=np.float64)
    verts = c + corners * h
    faces = np.array([
        [0, 1, 3], [0, 3, 2],   # -x
        [4, 6, 7], [4, 7, 5],   # +x
        [0, 4, 5], [0, 5, 1],   # -y
        [2, 3, 7], [2, 7, 6],   # +y
        [0, 2, 6], [0, 6, 4],   # -z
        [1, 5, 7], [1, 7, 3],   # +z
    ], dtype=np.int64)
    return TriangleMesh(verts, faces)


# ---------------------------------------------------------------------------
# CSG by inside-test union, polygonized on a local grid


def _sphere_sdf(center, radius):
    center = np.asarray(center, dtype=np.float64)

    def f(p):
        return np.linalg.norm(p - center, axis=-1) - radius

    return f, (center - radius, center + radius)


def _capsule_sdf(a, b, radius):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ab = b - a
    denom = float(ab @ ab) or 1.0

    def f(p):
        t = np.clip(((p - a) @ ab) / denom, 0.0, 1.0)
        closest = a + t[..., None] * ab
        return np.linalg.norm(p - closest, axis=-1) - radius

    lo = np.minimum(a, b) - radius
    hi = np.maximum(a, b) + radius
    return f, (lo, hi)


def _box_sdf(center, half):
    center = np.asarray(center, dtype=np.float64)
    half = np.asarray(half, dtype=np.float64)

    def f(p):
        q = np.abs(p - center) - half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside

    return f, (center - half, center + half)


def csg_mesh(primitives, resolution: int = 48, margin: float = 0.1):
    """Union of signed-distance primitives, polygonized on a local regular grid.

    ``primitives`` is a list of (sdf, (lo, hi)) pairs as produced by the
    ``_*_sdf`` helpers; the output mesh is watertight by construction.
    """
    lo = np.min([b[0] for _, b in primitives], axis=0) - margin
    hi = np.max([b[1] for _, b in primitives], axis=0) + margin
    axes = [np.linspace(lo[k], hi[k], resolution) for k in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    sdf = np.min([f(grid) for f, _ in primitives], axis=0)
    spacing = [(hi[k] - lo[k]) / (resolution - 1) for k in range(3)]
    verts, faces, _, _ = measure.marching_cubes(sdf, level=0.0, spacing=spacing)
    return TriangleMesh(verts + lo, faces.astype(np.int64)).remove_degenerate_faces()


def _stick_figure(rng, scale):
    """Capsule-union articulated figure; proportions jittered per sample."""
    torso_r = scale * rng.uniform(0.13, 0.18)
    torso_h = scale * rng.uniform(0.45, 0.6)
    head_r = scale * rng.uniform(0.12, 0.16)
    limb_r = scale * rng.uniform(0.07, 0.1)
    hip = np.zeros(3)
    neck = hip + [0, -torso_h, 0]
    prims = [_capsule_sdf(hip, neck, torso_r),
             _sphere_sdf(neck + [0, -head_r * 1.4, 0], head_r)]
    for side in (-1, 1):
        arm_dir = np.array([side, rng.uniform(0.1, 0.9), rng.uniform(-0.3, 0.3)])
        arm_dir = arm_dir / np.linalg.norm(arm_dir) * scale * rng.uniform(0.35, 0.5)
        prims.append(_capsule_sdf(neck, neck + arm_dir, limb_r))
        leg_dir = np.array([side * rng.uniform(0.15, 0.5), 1.0, rng.uniform(-0.3, 0.3)])
        leg_dir = leg_dir / np.linalg.norm(leg_dir) * scale * rng.uniform(0.45, 0.6)
        prims.append(_capsule_sdf(hip, hip + leg_dir, limb_r))
    return prims


def _random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


# ---------------------------------------------------------------------------
# scenes


@dataclass(frozen=True)
class SceneSpec:
    shape: str = "sphere"                 # sphere | capsule | box | figure
    scale_range: tuple = (0.25, 0.45)     # meters (characteristic radius)
    depth_range: tuple = (1.6, 2.6)       # object center depth, meters
    visibility: str = "none"              # none | crop | occluder
    csg_resolution: int = 48

    def __post_init__(self):
        if self.shape not in ("sphere", "capsule", "box", "figure"):
            raise ValueError(f"unknown shape family {self.shape!r}")
        if self.visibility not in ("none", "crop", "occluder"):
            raise ValueError(f"unknown visibility mode {self.visibility!r}")


@dataclass
class SceneSample:
    rgb: np.ndarray            # (H, W, 3) in [0, 1]
    depth: np.ndarray          # (H, W) float32 z-depth, +inf at misses
    mask: np.ndarray           # (H, W) bool
    cam: CameraIntrinsics
    mesh: TriangleMesh         # ground truth, camera coordinates
    z_range: float             # training-mode depth window extent
    visibility: float
    name: str = ""
    path: str = ""
    meta: dict = field(default_factory=dict)


def _build_shape(spec: SceneSpec, rng):
    scale = rng.uniform(*spec.scale_range)
    if spec.shape == "sphere":
        return icosphere(4, scale)
    if spec.shape == "box":
        half = scale * rng.uniform(0.5, 1.0, size=3)
        mesh = box_mesh(half_extents=half)
        return mesh.transformed(rotation=_random_rotation(rng))
    if spec.shape == "capsule":
        axis = rng.normal(size=3)
        axis = axis / np.linalg.norm(axis) * scale * rng.uniform(0.8, 1.4)
        prims = [_capsule_sdf(-axis / 2, axis / 2, scale * rng.uniform(0.4, 0.6))]
        return csg_mesh(prims, spec.csg_resolution)
    mesh = csg_mesh(_stick_figure(rng, scale * 2.2), spec.csg_resolution)
    return mesh.transformed(rotation=_random_rotation(rng))


def _shade(crossings, cam, albedo, background=0.35):
    depth, mask, normals = crossings.first_hit()
    light = np.array([0.3, -0.5, -0.8])
    light = light / np.linalg.norm(light)
    lam = np.clip(-(normals @ light), 0.0, 1.0)
    rgb = np.full((cam.height, cam.width, 3), background)
    rgb[mask] = np.asarray(albedo) * (0.25 + 0.75 * lam[mask, None])
    return rgb, depth, mask


def generate_scene(spec: SceneSpec, seed: int, cam: CameraIntrinsics = None,
                   max_retries: int = 20) -> SceneSample:
    """One self-consistent sample; deterministic per (spec, seed, camera)."""
    if cam is None:
        cam = CameraIntrinsics(fx=120.0, fy=120.0, cx=63.5, cy=63.5, width=128, height=128)
    rng = np.random.default_rng(seed)
    for attempt in range(max_retries):
        shape = _build_shape(spec, rng)
        z_c = rng.uniform(*spec.depth_range)
        # lateral placement: pick the image point the center projects to
        margin = 0.15 * cam.width
        if spec.visibility == "crop":
            # center exactly on an in-view boundary plane: centrally symmetric
            # shapes then have visibility 1/2 up to tessellation asymmetry
            edge = rng.integers(4)
            u = [-0.5, cam.width - 0.5, rng.uniform(margin, cam.width - margin),
                 rng.uniform(margin, cam.width - margin)][edge]
            v = [rng.uniform(margin, cam.height - margin),
                 rng.uniform(margin, cam.height - margin), -0.5, cam.height - 0.5][edge]
        else:
            u = rng.uniform(margin, cam.width - margin)
            v = rng.uniform(margin, cam.height - margin)
        center = np.array([(u - cam.cx) * z_c / cam.fx, (v - cam.cy) * z_c / cam.fy, z_c])
        mesh = shape.transformed(translation=center)
        if np.any(mesh.vertices[:, 2] <= 0.05):
            continue

        target_cross = pixel_ray_crossings(mesh, cam)
        rgb, depth, mask = _shade(target_cross, cam,
                                  albedo=rng.uniform(0.3, 0.9, size=3))
        if spec.visibility == "occluder":
            occ_scale = rng.uniform(0.1, 0.2)
            occ_z = z_c - rng.uniform(0.5, 0.9)
            du = rng.uniform(-0.15, 0.15) * cam.width
            occ_center = np.array([(u + du - cam.cx) * occ_z / cam.fx,
                                   (v - cam.cy) * occ_z / cam.fy, occ_z])
            if occ_z <= 0.1:
                continue
            occ = icosphere(2, occ_scale, occ_center)
            occ_rgb, occ_depth, occ_mask = _shade(pixel_ray_crossings(occ, cam),
                                                  cam, albedo=(0.6, 0.3, 0.2))
            nearer = occ_depth < depth
            rgb = np.where(nearer[..., None], occ_rgb, rgb)
            mask = mask & ~(occ_mask & nearer)
            depth = np.minimum(depth, occ_depth)
        if not mask.any():
            continue

        z_min = float(depth[mask].min())
        z_gt_max = float(mesh.vertices[:, 2].max())
        vis = visibility_level(mesh, cam, n=20_000, seed=seed)
        return SceneSample(rgb=rgb, depth=depth.astype(np.float32), mask=mask,
                           cam=cam, mesh=mesh,
                           z_range=max(z_gt_max - z_min, 1e-3), visibility=vis,
                           name=f"scene{seed}",
                           meta={"spec": spec.shape, "seed": seed, "attempt": attempt})
    raise RuntimeError(f"could not place a visible shape after {max_retries} tries")


# ---------------------------------------------------------------------------
# file formats


def write_pfm(path, data):
    data = np.asarray(data, dtype="<f4")
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{data.shape[1]} {data.shape[0]}\n".encode())
        f.write(b"-1.0\n")
        f.write(data[::-1].tobytes())  # PFM rows run bottom-up


def read_pfm(path):
    with open(path, "rb") as f:
        if f.readline().strip() != b"Pf":
            raise ValueError(f"{path}: not a single-channel PFM")
        w, h = map(int, f.readline().split())
        scale = float(f.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(4 * w * h), dtype=dtype).reshape(h, w)
    return np.ascontiguousarray(data[::-1]).astype(np.float32)


def write_pgm(path, mask):
    mask = np.asarray(mask).astype(bool)
    with open(path, "wb") as f:
        f.write(f"P5\n{mask.shape[1]} {mask.shape[0]}\n255\n".encode())
        f.write((mask.astype(np.uint8) * 255).tobytes())


def read_pgm(path):
    with open(path, "rb") as f:
        if f.readline().strip() != b"P5":
            raise ValueError(f"{path}: not a binary PGM")
        line = f.readline()
        while line.startswith(b"#"):
            line = f.readline()
        w, h = map(int, line.split())
        maxval = int(f.readline())
        data = np.frombuffer(f.read(w * h), dtype=np.uint8).reshape(h, w)
    return data >= (maxval + 1) // 2


# ---------------------------------------------------------------------------
# dataset on disk


def _write_sample(sample: SceneSample, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    Image.fromarray((np.clip(sample.rgb, 0, 1) * 255).round().astype(np.uint8)) \
        .save(os.path.join(out_dir, "rgb.png"))
    write_pfm(os.path.join(out_dir, "depth.pfm"), sample.depth)
    write_pgm(os.path.join(out_dir, "mask.pgm"), sample.mask)
    save_mesh(sample.mesh, os.path.join(out_dir, "mesh.obj"))
    save_camera(sample.cam, os.path.join(out_dir, "camera.txt"))
    with open(os.path.join(out_dir, "meta.txt"), "w") as f:
        f.write(f"z_range={sample.z_range!r}\n")
        f.write(f"visibility={sample.visibility!r}\n")
        for k, v in sample.meta.items():
            f.write(f"{k}={v}\n")


def write_dataset(specs, n_per_spec, out_dir, seed, cam=None, split="train"):
    """Per-sample subdirectories plus a line-oriented manifest; returns the
    manifest path. Deterministic for a fixed (specs, seed, camera)."""
    specs = list(specs)
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    index = 0
    for spec in specs:
        for _ in range(n_per_spec):
            sample = generate_scene(spec, seed=seed * 100_003 + index, cam=cam)
            name = f"sample_{index:04d}"
            _write_sample(sample, os.path.join(out_dir, name))
            entries.append(f"{name} {split} {spec.shape}")
            index += 1
    manifest = os.path.join(out_dir, "manifest.txt")
    with open(manifest, "w") as f:
        f.write("\n".join(entries) + "\n")
    return manifest


def load_sample(sample_dir) -> SceneSample:
    rgb = np.asarray(Image.open(os.path.join(sample_dir, "rgb.png")),
                     dtype=np.float64) / 255.0
    depth = read_pfm(os.path.join(sample_dir, "depth.pfm"))
    mask = read_pgm(os.path.join(sample_dir, "mask.pgm"))
    mesh = load_mesh(os.path.join(sample_dir, "mesh.obj"))
    cam = load_camera(os.path.join(sample_dir, "camera.txt"))
    meta = {}
    with open(os.path.join(sample_dir, "meta.txt")) as f:
        for line in f:
            if "=" in line:
                k, v = line.strip().split("=", 1)
                meta[k] = v
    return SceneSample(rgb=rgb, depth=depth, mask=mask, cam=cam, mesh=mesh,
                       z_range=float(meta.pop("z_range")),
                       visibility=float(meta.pop("visibility")),
                       name=os.path.basename(os.path.normpath(sample_dir)),
                       path=str(sample_dir), meta=meta)


def load_manifest(dataset_dir):
    """List of sample directories in manifest order."""
    manifest = os.path.join(dataset_dir, "manifest.txt")
    dirs = []
    with open(manifest) as f:
        for line in f:
            parts = line.split()
            if parts:
                dirs.append(os.path.join(dataset_dir, parts[0]))
    return dirs


def manifest_hash(dataset_dir):
    """Content hash over the manifest and every file it references."""
    h = hashlib.sha256()
    manifest = os.path.join(dataset_dir, "manifest.txt")
    with open(manifest, "rb") as f:
        h.update(f.read())
    for d in load_manifest(dataset_dir):
        for fname in sorted(os.listdir(d)):
            with open(os.path.join(d, fname), "rb") as f:
                h.update(fname.encode())
                h.update(f.read())
    return h.hexdigest()
