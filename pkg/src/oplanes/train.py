"""Optimization loop: per iteration, fresh random plane depths per mesh,
ground-truth planes from cached pixel-ray crossings, forward, two-resolution
loss, backward, Adam."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .camera import FrustumRange
from .losses import LossWeights, total_loss
from .mesh import pixel_ray_crossings
from .model import OPlanesModel, save_checkpoint
from .planes import augment_rgb, downsample_binary, gt_oplane_stack

__all__ = ["TrainConfig", "PreparedSample", "prepare_sample", "fit", "TrainingDiverged"]


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 4
    epochs: int = 15
    n_planes: int = 10
    seed: int = 0
    deterministic: bool = True
    iterations: int = None        # overrides epochs when set (desk-scale runs)
    weights: LossWeights = LossWeights()
    use_coarse_loss: bool = True  # intermediate-supervision ablation switch
    checkpoint_every_epoch: bool = True

    def __post_init__(self):
        if self.n_planes < 1 or self.lr <= 0:
            raise ValueError("need n_planes >= 1 and lr > 0")


@dataclass
class PreparedSample:
    """Per-scene data the inner loop reuses: augmented input, loss-resolution
    mask/depth pyramids, the training frustum, and GT ray crossings."""
    name: str
    aug: np.ndarray
    depth_full: np.ndarray
    frustum: FrustumRange
    mask_fine: np.ndarray
    depth_fine: np.ndarray
    mask_coarse: np.ndarray
    depth_coarse: np.ndarray
    crossings: object
    cam: object


def prepare_sample(sample, config) -> PreparedSample:
    cam = sample.cam
    if (cam.height, cam.width) != (config.height, config.width):
        raise ValueError(f"sample resolution {cam.height}x{cam.width} does not match "
                         f"model input {config.height}x{config.width}")
    z_min = float(np.asarray(sample.depth)[sample.mask].min())
    frustum = FrustumRange(z_min, z_min + sample.z_range)
    factor_f = config.height // config.out_h
    factor_c = config.height // config.coarse_h
    depth = np.asarray(sample.depth, dtype=np.float64)
    mask = np.asarray(sample.mask, dtype=bool)
    crossings = pixel_ray_crossings(sample.mesh, cam.scaled(factor_f))
    return PreparedSample(
        name=sample.name,
        aug=augment_rgb(sample.rgb, mask).astype(config.np_dtype),
        depth_full=depth,
        frustum=frustum,
        mask_fine=downsample_binary(mask, config.out_h, config.out_w),
        depth_fine=depth[::factor_f, ::factor_f],
        mask_coarse=downsample_binary(mask, config.coarse_h, config.coarse_w),
        depth_coarse=depth[::factor_c, ::factor_c],
        crossings=crossings,
        cam=cam,
    )


def fit(model: OPlanesModel, samples, cfg: TrainConfig, out_dir=None, log_path=None,
        start_iteration=0):
    """Train in place; returns the per-iteration loss log (list of dicts).

    ``start_iteration`` offsets the iteration counter when resuming from a
    checkpoint; the optimizer moments restart fresh.
    """
    if not samples:
        raise ValueError("dataset is empty")
    prepared = [s if isinstance(s, PreparedSample) else prepare_sample(s, model.config)
                for s in samples]
    rng = np.random.default_rng([cfg.seed, start_iteration])
    n = len(prepared)
    batch = min(cfg.batch_size, n)
    iters_per_epoch = max(1, (n + batch - 1) // batch)
    total_iters = cfg.iterations if cfg.iterations is not None \
        else cfg.epochs * iters_per_epoch
    params = model.parameters()
    state = T.AdamState()
    T.zero_grads(params)
    log = []
    order = []
    for it in range(start_iteration, start_iteration + total_iters):
        if len(order) < batch:
            order += list(rng.permutation(n))
        idx = [order.pop(0) for _ in range(batch)]
        row = {"iteration": it, "epoch": it // iters_per_epoch, "bce_fine": 0.0,
               "dice_fine": 0.0, "bce_coarse": 0.0, "dice_coarse": 0.0, "total": 0.0}
        for i in idx:
            ps = prepared[i]
            depths = np.sort(rng.uniform(ps.frustum.z_min, ps.frustum.z_max,
                                         size=cfg.n_planes))
            gt_stack = gt_oplane_stack(None, ps.cam, depths,
                                       (model.config.out_h, model.config.out_w),
                                       frustum=ps.frustum, crossings=ps.crossings)
            gt_fine = gt_stack.as_array().astype(np.float64)
            gt_coarse = gt_fine[:, ::2, ::2]
            fwd = model.predict_planes(ps.aug, ps.depth_full, depths, frustum=ps.frustum)
            loss, terms = total_loss(fwd, gt_fine, gt_coarse,
                                     ps.mask_fine, ps.depth_fine,
                                     ps.mask_coarse, ps.depth_coarse,
                                     weights=cfg.weights,
                                     use_coarse=cfg.use_coarse_loss)
            if not np.isfinite(terms["total"]):
                raise TrainingDiverged(
                    f"non-finite loss at iteration {it} on sample {ps.name!r}: {terms}")
            loss.backward(np.asarray(1.0 / batch, dtype=loss.dtype))
            for key in ("bce_fine", "dice_fine", "bce_coarse", "dice_coarse", "total"):
                row[key] += terms[key] / batch
        T.adam_step(params, state, lr=cfg.lr)
        T.zero_grads(params)
        log.append(row)
        if out_dir and cfg.checkpoint_every_epoch and (it + 1) % iters_per_epoch == 0:
            save_checkpoint(model, os.path.join(out_dir, f"epoch_{row['epoch']:03d}.opck"),
                            extra={"iteration": it + 1, "seed": cfg.seed})
    if out_dir:
        save_checkpoint(model, os.path.join(out_dir, "final.opck"),
                        extra={"iteration": start_iteration + total_iters,
                               "seed": cfg.seed})
    if log_path:
        write_loss_log(log, log_path)
    return log


def write_loss_log(log, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iteration", "epoch", "bce_fine", "dice_fine",
                         "bce_coarse", "dice_coarse", "total"])
        for row in log:
            writer.writerow([row["iteration"], row["epoch"],
                             f"{row['bce_fine']:.8f}", f"{row['dice_fine']:.8f}",
                             f"{row['bce_coarse']:.8f}", f"{row['dice_coarse']:.8f}",
                             f"{row['total']:.8f}"])
