"""Two-resolution training objective: masked BCE plus DICE, both restricted to
pixels behind the observed front surface.

Losses consume logits and carry hand-written backward kernels, so they plug
into the same tape as the model ops. BCE follows the paper's normalization
(plane count times mask area); DICE returns one minus the overlap coefficient
so both terms are minimized.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor, _make, _sigmoid_np

__all__ = ["LossWeights", "valid_pixel_mask", "bce_loss", "dice_loss", "total_loss"]

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class LossWeights:
    lambda_bce: float = 1.0
    lambda_dice: float = 1.0

    def __post_init__(self):
        if self.lambda_bce < 0 or self.lambda_dice < 0:
            raise ValueError("loss weights must be non-negative")


def valid_pixel_mask(mask, depth, z):
    """Pixels that are masked and lie behind the front surface at plane depth z."""
    mask = np.asarray(mask).astype(bool)
    depth = np.asarray(depth)
    if mask.shape != depth.shape:
        raise ShapeError(f"mask {mask.shape} vs depth {depth.shape}")
    return mask & (z >= depth)


def _check_batch(pred_logits, gt, valid):
    data = pred_logits.data
    if data.ndim == 4 and data.shape[1] == 1:
        data_shape = (data.shape[0],) + data.shape[2:]
    elif data.ndim == 3:
        data_shape = data.shape
    else:
        raise ShapeError(f"expected (N, 1, h, w) or (N, h, w) logits, got {data.shape}")
    if gt.shape != data_shape or valid.shape != data_shape:
        raise ShapeError(f"plane batch mismatch: logits {data_shape}, "
                         f"gt {gt.shape}, valid {valid.shape}")
    return data.reshape(data_shape)


def bce_loss(pred_logits: Tensor, gt, valid, mask_area: float) -> Tensor:
    """Mean negative log-likelihood over valid pixels, normalized by
    (number of planes) * (mask pixel count at this resolution)."""
    gt = np.asarray(gt, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    logits = _check_batch(pred_logits, gt, valid)
    n_planes = gt.shape[0]
    if mask_area <= 0 or not valid.any():
        warnings.warn("BCE loss saw no valid pixels; contributing zero", RuntimeWarning)
        return _make(np.asarray(0.0, dtype=pred_logits.dtype), (pred_logits,),
                     lambda g: pred_logits.accumulate_grad(np.zeros_like(pred_logits.data)))
    p = _sigmoid_np(logits.astype(np.float64))
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    nll = -(gt * np.log(pc) + (1.0 - gt) * np.log(1.0 - pc))
    norm = float(n_planes) * float(mask_area)
    loss = np.asarray((nll * valid).sum() / norm, dtype=pred_logits.dtype)

    def backward(grad):
        g = ((p - gt) * valid / norm * float(grad)).astype(pred_logits.dtype)
        pred_logits.accumulate_grad(g.reshape(pred_logits.data.shape))

    return _make(loss, (pred_logits,), backward)


def dice_loss(pred_logits: Tensor, gt, valid) -> Tensor:
    """Mean over planes of (1 - dice overlap) between prediction probabilities
    and ground truth on valid pixels; empty planes contribute zero loss."""
    gt = np.asarray(gt, dtype=np.float64)
    valid = np.asarray(valid, dtype=np.float64)
    logits = _check_batch(pred_logits, gt, valid)
    n = gt.shape[0]
    p = _sigmoid_np(logits.astype(np.float64))
    inter = (valid * gt * p).sum(axis=(1, 2))
    denom = (valid * gt).sum(axis=(1, 2)) + (valid * p).sum(axis=(1, 2))
    safe = denom > 0
    d = np.ones(n)
    d[safe] = 2.0 * inter[safe] / denom[safe]
    loss = np.asarray((1.0 - d).mean(), dtype=pred_logits.dtype)

    def backward(grad):
        gp = np.zeros_like(p)
        # d(dice)/dp per plane, then chain through the sigmoid
        gp[safe] = (2.0 * (valid * gt)[safe]
                    - (2.0 * inter[safe] / denom[safe])[:, None, None] * valid[safe]) \
            / denom[safe][:, None, None]
        gl = -gp / n * p * (1.0 - p) * float(grad)
        pred_logits.accumulate_grad(gl.astype(pred_logits.dtype).reshape(pred_logits.data.shape))

    return _make(loss, (pred_logits,), backward)


def total_loss(forward, gt_fine, gt_coarse, mask_fine, depth_fine, mask_coarse,
               depth_coarse, weights: LossWeights = LossWeights(),
               use_coarse: bool = True):
    """lambda_BCE * BCE + lambda_DICE * DICE at both resolutions, summed.

    Returns (scalar Tensor, per-term breakdown dict). The coarse term uses the
    inner-product logits; ``use_coarse=False`` is the intermediate-supervision
    ablation.
    """
    depths = forward.depths
    valid_f = np.stack([valid_pixel_mask(mask_fine, depth_fine, z) for z in depths])
    mask_area_f = float(np.asarray(mask_fine, dtype=bool).sum())
    bce_f = bce_loss(forward.fine_logits, gt_fine, valid_f, mask_area_f)
    dice_f = dice_loss(forward.fine_logits, gt_fine, valid_f)

    terms = {"bce_fine": float(bce_f.data), "dice_fine": float(dice_f.data),
             "bce_coarse": 0.0, "dice_coarse": 0.0}
    total = T.add(T.scale(bce_f, weights.lambda_bce), T.scale(dice_f, weights.lambda_dice))
    if use_coarse:
        valid_c = np.stack([valid_pixel_mask(mask_coarse, depth_coarse, z) for z in depths])
        mask_area_c = float(np.asarray(mask_coarse, dtype=bool).sum())
        bce_c = bce_loss(forward.coarse_logits, gt_coarse, valid_c, mask_area_c)
        dice_c = dice_loss(forward.coarse_logits, gt_coarse, valid_c)
        terms["bce_coarse"] = float(bce_c.data)
        terms["dice_coarse"] = float(dice_c.data)
        coarse = T.add(T.scale(bce_c, weights.lambda_bce), T.scale(dice_c, weights.lambda_dice))
        total = T.add(total, coarse)
    terms["total"] = float(total.data)
    return total, terms
