"""Localization losses for the grid head.

Classification uses a compound hinge: cells whose label exceeds a small
threshold regress toward the label, background cells are only penalized for
positive responses.  Regression uses a GIoU loss over cells whose centers
fall inside the ground-truth box.
"""

from __future__ import annotations

import torch

from .errors import ShapeError


def hinge_cls_loss(pred: torch.Tensor, target: torch.Tensor,
                   target_threshold: float = 0.05) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"cls map {tuple(pred.shape)} vs label {tuple(target.shape)}")
    residual = torch.where(
        target > target_threshold, pred - target, pred.clamp(min=0.0)
    )
    return (residual * residual).mean()


def giou(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Generalized IoU of corner-form boxes, elementwise over leading dims."""
    if pred.shape != gt.shape or pred.shape[-1] != 4:
        raise ShapeError(f"box tensors {tuple(pred.shape)} vs {tuple(gt.shape)}")
    px0, py0, px1, py1 = pred.unbind(-1)
    gx0, gy0, gx1, gy1 = gt.unbind(-1)
    pa = (px1 - px0).clamp(min=0) * (py1 - py0).clamp(min=0)
    ga = (gx1 - gx0).clamp(min=0) * (gy1 - gy0).clamp(min=0)
    iw = (torch.minimum(px1, gx1) - torch.maximum(px0, gx0)).clamp(min=0)
    ih = (torch.minimum(py1, gy1) - torch.maximum(py0, gy0)).clamp(min=0)
    inter = iw * ih
    union = pa + ga - inter
    hull = (torch.maximum(px1, gx1) - torch.minimum(px0, gx0)) * (
        torch.maximum(py1, gy1) - torch.minimum(py0, gy0)
    )
    eps = 1e-9
    return inter / union.clamp(min=eps) - (hull - union) / hull.clamp(min=eps)


def giou_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """1 - GIoU, in [0, 2); shape of the inputs minus the box dimension."""
    return 1.0 - giou(pred, gt)


def reg_giou_loss(pred_reg: torch.Tensor, gt_reg: torch.Tensor,
                  valid_mask: torch.Tensor) -> torch.Tensor:
    """GIoU loss between edge-distance maps, averaged over valid cells.

    Maps are (..., 4, H, W) in (l, t, r, b) order and stride units.  Both
    decode against the same cell centers, so boxes relative to the center,
    (-l, -t, r, b), give the same GIoU as the absolute pixel boxes.
    """
    if pred_reg.shape != gt_reg.shape:
        raise ShapeError(
            f"reg map {tuple(pred_reg.shape)} vs label {tuple(gt_reg.shape)}"
        )
    if valid_mask.shape != pred_reg.shape[:-3] + pred_reg.shape[-2:]:
        raise ShapeError(
            f"valid mask {tuple(valid_mask.shape)} does not match reg map"
        )
    flip = torch.tensor([-1.0, -1.0, 1.0, 1.0], dtype=pred_reg.dtype,
                        device=pred_reg.device)
    pred_boxes = pred_reg.movedim(-3, -1) * flip
    gt_boxes = gt_reg.movedim(-3, -1) * flip
    losses = giou_loss(pred_boxes, gt_boxes)
    mask = valid_mask.to(losses.dtype)
    total = mask.sum()
    if total.item() == 0:
        return losses.sum() * 0.0
    return (losses * mask).sum() / total
