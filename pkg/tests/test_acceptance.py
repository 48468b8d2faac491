"""Acceptance gate: one test per release criterion, each with its runtime
budget. Numbered comments match the criterion list in the README."""

import csv
import os
import time

import numpy as np
import pytest
from click.testing import CliRunner

from oplanes import tensor as T
from oplanes.camera import CameraIntrinsics, FrustumRange, compute_depth_range
from oplanes.cli import main as cli_main
from oplanes.infer import ReconstructionConfig, planes_to_grid, reconstruct
from oplanes.losses import bce_loss, dice_loss, total_loss
from oplanes.mesh import marching_cubes, points_inside
from oplanes.metrics import (chamfer_l1, icp_register, normal_consistency,
                             visibility_binning, visibility_level, volumetric_iou)
from oplanes.model import ForwardOutput, ModelConfig, OPlanesModel
from oplanes.planes import gt_oplane_stack
from oplanes.synth import SceneSpec, box_mesh, generate_scene, icosphere
from oplanes.train import TrainConfig, fit

CAM256 = CameraIntrinsics(fx=240.0, fy=240.0, cx=127.5, cy=127.5, width=256, height=256)


# ---------------------------------------------------------------------------
# shared overfit runs (criteria 6-8 reuse the same trained models)

_SCENE_CACHE = []
_MODEL_CACHE = {}
_IOU_CACHE = {}


def _scenes():
    if not _SCENE_CACHE:
        for i, shape in enumerate(["sphere", "capsule", "box"]):
            spec = SceneSpec(shape=shape, scale_range=(0.3, 0.42),
                             depth_range=(1.8, 2.2))
            _SCENE_CACHE.append(generate_scene(spec, seed=100 + i))
    return _SCENE_CACHE


def _overfit_model(seed, spatial_1x1=False):
    key = (seed, spatial_1x1)
    if key not in _MODEL_CACHE:
        model = OPlanesModel(ModelConfig.desk(spatial_1x1=spatial_1x1), seed=seed)
        fit(model, _scenes(), TrainConfig(iterations=500, seed=seed))
        _MODEL_CACHE[key] = model
    return _MODEL_CACHE[key]


def _mean_iou(key, n_planes=64):
    # reconstruction sweeps the supervised depth window (the training-mode
    # frustum); the 2.0 m inference heuristic assumes training data whose
    # windows covered it, which a 3-scene overfit run has never seen
    if (key, n_planes) not in _IOU_CACHE:
        model = _MODEL_CACHE[key]
        vals = []
        for s in _scenes():
            fr = compute_depth_range(s.depth, s.mask, gt_mesh=s.mesh)
            mesh, _ = reconstruct(model, s.rgb, s.depth, s.mask, s.cam,
                                  ReconstructionConfig(n_planes=n_planes),
                                  frustum=fr)
            vals.append(volumetric_iou(mesh, s.mesh, s.cam, fr, seed=0))
        _IOU_CACHE[(key, n_planes)] = float(np.mean(vals))
    return _IOU_CACHE[(key, n_planes)]


# ---------------------------------------------------------------------------
# 1. gradient suite: every trainable op and the composed desk-width model


def _op_cases():
    rng = np.random.default_rng(0)
    p = lambda *s: T.Param(rng.normal(scale=0.7, size=s))
    w = p(3, 2, 3, 3)
    b = p(3)
    x = p(2, 2, 6, 6)
    yield "conv2d", lambda: T.tensor_sum(T.conv2d(x, w, b)), [w, b, x]
    g, be, xg = p(4), p(4), p(2, 4, 4, 4)
    yield "group_norm", lambda: T.tensor_sum(T.sigmoid(T.group_norm(xg, 2, g, be))), [g, be, xg]
    xr = T.Param(rng.normal(scale=0.7, size=(3, 4, 4)) + np.sign(rng.normal(size=(3, 4, 4))) * 0.2)
    yield "relu", lambda: T.tensor_sum(T.relu(xr)), [xr]
    xs = p(3, 4, 4)
    yield "sigmoid", lambda: T.tensor_sum(T.sigmoid(xs)), [xs]
    a1, a2 = p(2, 3, 3), p(2, 3, 3)
    yield "add_scale", lambda: T.tensor_sum(T.scale(T.add(a1, a2), 1.7)), [a1, a2]
    c1, c2 = p(2, 4, 4), p(3, 4, 4)
    yield "concat", lambda: T.tensor_sum(T.sigmoid(T.concat_channels([c1, c2]))), [c1, c2]
    i1, i2 = p(2, 5, 3, 3), p(2, 5, 3, 3)
    yield "inner_product", lambda: T.tensor_sum(T.sigmoid(T.pixelwise_inner_product(i1, i2))), [i1, i2]
    bb = p(3, 2, 2)
    yield "broadcast", lambda: T.tensor_sum(T.sigmoid(T.broadcast_batch(bb, 4))), [bb]
    pa = p(2, 3, 4, 4)
    yield "avg_pool", lambda: T.tensor_sum(T.sigmoid(T.avg_pool2x(pa))), [pa]
    up = p(2, 2, 3, 3)
    yield "upsample", lambda: T.tensor_sum(T.sigmoid(T.bilinear_upsample(up, 6, 6))), [up]


def test_criterion_1_gradient_suite():
    start = time.monotonic()
    for name, loss, params in _op_cases():
        for q in params:
            q.grad = np.zeros_like(q.data)
        err = T.finite_difference_check(loss, params)
        assert err < 1e-4, f"{name}: {err}"

    # composed model at desk channel widths; 16x16 spatial keeps the sweep
    # inside the budget without changing any layer's arithmetic
    cfg = ModelConfig(height=16, width=16, c_enc=32, c_head=16,
                      encoder_widths=(16, 32, 64, 64), dtype="float64")
    model = OPlanesModel(cfg, seed=1)
    nrng = np.random.default_rng(7)
    for q in model.parameters():
        q.data = q.data + nrng.normal(scale=1e-2, size=q.data.shape)
    rng = np.random.default_rng(4)
    aug = rng.random((5, 16, 16))
    depth = rng.uniform(1.5, 2.0, size=(16, 16))
    fr = FrustumRange(1.5, 2.5)

    def loss():
        out = model.predict_planes(aug, depth, [1.8, 2.2], frustum=fr)
        return T.add(T.tensor_sum(T.sigmoid(out.fine_logits)),
                     T.tensor_sum(T.sigmoid(out.coarse_logits)))

    # conv biases feeding a group norm have exactly zero gradient; step 1e-5
    # because relu kinks bias the default secant inside a deep composite
    names = ["enc.stage0.weight", "enc.lateral0.weight", "enc.smooth.gamma",
             "enc.stage1.beta", "rgb.2.bias", "depth.0.gamma",
             "spatial.2.weight", "spatial.2.bias"]
    subset = [model.p.params[n] for n in names]
    for q in model.parameters():
        q.grad = np.zeros_like(q.data)
    err = T.finite_difference_check(loss, subset, epsilon=1e-5)
    assert err < 1e-4
    assert time.monotonic() - start < 120


# ---------------------------------------------------------------------------
# 2. occupancy oracle equivalence on a 2562-vertex sphere


def test_criterion_2_occupancy_oracle():
    start = time.monotonic()
    center = np.array([0.0, 0.0, 2.0])
    radius = 0.5
    mesh = icosphere(4, radius, center)
    assert len(mesh.vertices) == 2562
    zs = np.linspace(1.55, 2.45, 64)
    stack = gt_oplane_stack(mesh, CAM256, zs, (256, 256))
    js, iss = np.meshgrid(np.arange(256), np.arange(256))
    agree = 0
    for plane in stack.planes:
        x = (js - CAM256.cx) * plane.z / CAM256.fx
        y = (iss - CAM256.cy) * plane.z / CAM256.fy
        analytic = x ** 2 + y ** 2 + (plane.z - center[2]) ** 2 < radius ** 2
        agree += int((plane.values.astype(bool) == analytic).sum())
    assert agree / (64 * 256 * 256) >= 0.995

    rng = np.random.default_rng(0)
    pts = center + rng.uniform(-0.7, 0.7, size=(10_000, 3))
    by_winding = points_inside(mesh, pts, method="winding")
    by_parity = points_inside(mesh, pts, method="parity")
    assert np.array_equal(by_winding, by_parity)
    assert time.monotonic() - start < 60


# ---------------------------------------------------------------------------
# 3. representation round trip: planes -> grid -> marching cubes -> mesh


def test_criterion_3_round_trip():
    start = time.monotonic()
    source = icosphere(3, 0.5, (0.0, 0.0, 2.0))
    frustum = FrustumRange(1.45, 2.55)
    zs = np.linspace(frustum.z_min, frustum.z_max, 256)
    stack = gt_oplane_stack(source, CAM256, zs, (256, 256), frustum=frustum)
    recovered = marching_cubes(planes_to_grid(stack))
    iou = volumetric_iou(recovered, source, CAM256, frustum, seed=0)
    assert iou >= 0.95
    assert time.monotonic() - start < 60


# ---------------------------------------------------------------------------
# 4. metric oracles


def test_criterion_4_metric_oracles():
    start = time.monotonic()
    # snug frustum keeps the IoU estimator's variance inside the tolerance
    cam = CameraIntrinsics(fx=80.0, fy=80.0, cx=63.5, cy=63.5, width=128, height=128)
    frustum = FrustumRange(1.45, 2.55)
    a = box_mesh(center=(0.0, 0.0, 2.0))
    b = box_mesh(center=(0.5, 0.0, 2.0))
    assert abs(volumetric_iou(a, b, cam, frustum, seed=0) - 1.0 / 3.0) < 0.01

    sphere = icosphere(3, 0.5, (0.0, 0.0, 2.0))
    assert chamfer_l1(sphere, sphere) < 1e-3
    assert normal_consistency(sphere, sphere) >= 0.999

    ang = np.deg2rad(5.0)
    rot = np.array([[np.cos(ang), -np.sin(ang), 0.0],
                    [np.sin(ang), np.cos(ang), 0.0],
                    [0.0, 0.0, 1.0]])
    trans = np.array([0.01, 0.0, 0.0])
    src = box_mesh(center=(0.0, 0.0, 2.0), half_extents=(0.3, 0.2, 0.25))
    dst = src.transformed(rotation=rot, translation=trans)
    xf = icp_register(src, dst)
    assert np.abs(xf.rotation - rot).max() < 1e-3
    assert np.abs(xf.translation - trans).max() < 1e-3
    assert time.monotonic() - start < 60


# ---------------------------------------------------------------------------
# 5. loss semantics


def test_criterion_5_loss_semantics():
    start = time.monotonic()
    rng = np.random.default_rng(0)
    n, h, w = 3, 8, 8
    fine = T.Param(rng.normal(scale=2.0, size=(n, 1, h, w)))
    coarse = T.Param(rng.normal(scale=2.0, size=(n, 1, h // 2, w // 2)))
    depths = np.array([1.8, 2.0, 2.2])
    fwd = ForwardOutput(fine, coarse, None, depths)
    mask_f = rng.random((h, w)) > 0.3
    depth_f = np.where(mask_f, rng.uniform(1.5, 2.1, size=(h, w)), np.inf)
    depth_f[mask_f.argmax(), :2] = 5.0  # masked but in front of every plane
    mask_c, depth_c = mask_f[::2, ::2], depth_f[::2, ::2]
    gt_f = (rng.random((n, h, w)) > 0.5).astype(np.float64)
    gt_c = gt_f[:, ::2, ::2]

    base, _ = total_loss(fwd, gt_f, gt_c, mask_f, depth_f, mask_c, depth_c)
    fwd.fine_logits.data[:, 0][:, ~(mask_f & (depth_f <= depths.max()))] += 137.0
    fwd.coarse_logits.data[:, 0][:, ~(mask_c & (depth_c <= depths.max()))] -= 42.0
    mutated, _ = total_loss(fwd, gt_f, gt_c, mask_f, depth_f, mask_c, depth_c)
    assert float(base.data) == float(mutated.data)  # restriction is bitwise

    valid = np.stack([mask_f & (depth_f <= z) for z in depths])
    perfect = T.Param(np.where(gt_f > 0.5, 20.0, -20.0))
    assert float(bce_loss(perfect, gt_f, valid, float(mask_f.sum())).data) < 1e-6
    confident = T.Param(np.where(gt_f > 0.5, 40.0, -40.0))
    assert float(dice_loss(confident, gt_f, valid).data) == 0.0

    # empty-plane convention: a plane with a zero dice denominator (no valid
    # pixels, hence no ground-truth or predicted mass) contributes loss 0
    empty_gt = np.zeros((1, h, w))
    any_logits = T.Param(rng.normal(size=(1, h, w)))
    assert float(dice_loss(any_logits, empty_gt, np.zeros((1, h, w), bool)).data) == 0.0
    assert time.monotonic() - start < 10


# ---------------------------------------------------------------------------
# 6-8. end-to-end overfit and its ablations


def test_criterion_6_overfit_iou():
    start = time.monotonic()
    _overfit_model(0)
    assert _mean_iou((0, False), n_planes=64) >= 0.7
    assert time.monotonic() - start < 20 * 60


def test_criterion_7_spatial_kernel_ablation():
    start = time.monotonic()
    for seed in (0, 1, 2):
        for ablate in (False, True):
            _overfit_model(seed, spatial_1x1=ablate)
            _mean_iou((seed, ablate), n_planes=64)
    full = np.median([_IOU_CACHE[((s, False), 64)] for s in (0, 1, 2)])
    ablated = np.median([_IOU_CACHE[((s, True), 64)] for s in (0, 1, 2)])
    assert full >= ablated
    assert time.monotonic() - start < 60 * 60


def test_criterion_8_plane_count_decoupling():
    _overfit_model(0)
    start = time.monotonic()  # budget covers inference; training is shared
    iou_32 = _mean_iou((0, False), n_planes=32)
    iou_256 = _mean_iou((0, False), n_planes=256)
    assert iou_256 >= iou_32
    assert time.monotonic() - start < 5 * 60


# ---------------------------------------------------------------------------
# 9. visibility tooling


class _Row:
    def __init__(self, iou):
        self.iou = iou
        self.chamfer_l1 = 0.1
        self.normal_consistency = 0.9


def test_criterion_9_visibility_tooling():
    start = time.monotonic()
    cam = CameraIntrinsics(fx=120.0, fy=120.0, cx=63.5, cy=63.5, width=128, height=128)
    z = 2.0
    x_edge = (cam.width - 0.5 - cam.cx) / cam.fx * z
    cube = box_mesh(center=(x_edge, 0.0, z), half_extents=(0.3, 0.3, 0.3))
    assert abs(visibility_level(cube, cam, seed=0) - 0.5) < 0.01

    levels = [0.1, 0.5, 0.8, 1.0]
    rows = visibility_binning(levels, [_Row(v) for v in levels])
    assert len(rows) == 4
    assert [r["count"] for r in rows] == [1, 1, 1, 1]
    assert rows[3]["bin"] == "full"
    assert time.monotonic() - start < 60


# ---------------------------------------------------------------------------
# 10. end-to-end determinism through the command line


def test_criterion_10_determinism(tmp_path):
    runner = CliRunner()

    def pipeline(root):
        data = str(root / "data")
        run = str(root / "run")
        pred = str(root / "pred.obj")
        report = str(root / "report.csv")
        for args in (["gen-data", "--n", "1", "--seed", "3", "--out", data],
                     ["train", "--data", data, "--out", run, "--iters", "2",
                      "--seed", "3"],
                     ["infer", "--ckpt", os.path.join(run, "final.opck"),
                      "--sample", os.path.join(data, "sample_0000"),
                      "--planes", "16", "--out", pred],
                     ["eval", "--pred", pred, "--sample",
                      os.path.join(data, "sample_0000"), "--out", report]):
            result = runner.invoke(cli_main, args)
            assert result.exit_code == 0, result.output
        return [open(p, "rb").read() for p in
                (os.path.join(run, "final.opck"), os.path.join(run, "loss.csv"),
                 pred, report)]

    first = pipeline(tmp_path / "a")
    second = pipeline(tmp_path / "b")
    assert first == second
