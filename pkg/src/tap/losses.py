"""Training objectives: focal + dice mask loss (20:1), IoU regression,
concept KL distillation and caption cross-entropy."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

MASK_FOCAL_WEIGHT = 20.0
MASK_DICE_WEIGHT = 1.0


@dataclass
class LossBreakdown:
    focal: float = 0.0
    dice: float = 0.0
    mask_total: float = 0.0
    iou_mse: float = 0.0
    concept_kl: float = 0.0
    caption_ce: float = 0.0

    def as_dict(self) -> dict:
        return {
            "focal": self.focal,
            "dice": self.dice,
            "mask_total": self.mask_total,
            "iou_mse": self.iou_mse,
            "concept_kl": self.concept_kl,
            "caption_ce": self.caption_ce,
        }


def focal_loss(mask_logits: torch.Tensor, gt_mask: torch.Tensor,
               gamma: float = 2.0, alpha: float = 0.25) -> torch.Tensor:
    """Mean over pixels of -alpha_t (1 - p_t)^gamma log p_t."""
    if mask_logits.shape != gt_mask.shape:
        raise ValueError("logits and mask shapes differ")
    gt = gt_mask.to(mask_logits.dtype)
    log_p = F.logsigmoid(mask_logits)
    log_not_p = F.logsigmoid(-mask_logits)
    log_pt = gt * log_p + (1.0 - gt) * log_not_p
    pt = torch.exp(log_pt)
    alpha_t = gt * alpha + (1.0 - gt) * (1.0 - alpha)
    return (-alpha_t * (1.0 - pt) ** gamma * log_pt).mean()


def dice_loss(mask_logits: torch.Tensor, gt_mask: torch.Tensor,
              eps: float = 1.0) -> torch.Tensor:
    """1 - (2 sum(p g) + eps) / (sum p + sum g + eps) over sigmoid probs."""
    if mask_logits.shape != gt_mask.shape:
        raise ValueError("logits and mask shapes differ")
    p = torch.sigmoid(mask_logits)
    g = gt_mask.to(p.dtype)
    if p.ndim <= 2:  # a single mask, possibly 2-D
        p, g = p.reshape(1, -1), g.reshape(1, -1)
    else:  # leading dims are batch, last two are the mask plane
        p = p.reshape(-1, p.shape[-2] * p.shape[-1])
        g = g.reshape(p.shape)
    inter = (p * g).sum(dim=-1)
    denom = p.sum(dim=-1) + g.sum(dim=-1)
    return (1.0 - (2.0 * inter + eps) / (denom + eps)).mean()


def mask_loss(mask_logits: torch.Tensor, gt_mask: torch.Tensor,
              gamma: float = 2.0, alpha: float = 0.25):
    """Focal and dice combined at the fixed 20:1 ratio."""
    fl = focal_loss(mask_logits, gt_mask, gamma, alpha)
    dl = dice_loss(mask_logits, gt_mask)
    return fl, dl, MASK_FOCAL_WEIGHT * fl + MASK_DICE_WEIGHT * dl


def concept_kl(student_logits: torch.Tensor, target: torch.Tensor,
               reverse: bool = False) -> torch.Tensor:
    """KL(target || softmax(student_logits)), the distillation objective.

    `reverse` switches to KL(student || target) for the ablation config.
    """
    if student_logits.shape[-1] != target.shape[-1]:
        raise ValueError("logit and target lengths differ")
    tsum = target.sum(dim=-1)
    if not torch.all((tsum - 1.0).abs() <= 1e-6) or bool((target < -1e-6).any()):
        raise ValueError("target distribution is off the simplex")
    log_s = F.log_softmax(student_logits, dim=-1)
    t = target.to(log_s.dtype).clamp_min(0.0)
    if reverse:
        s = log_s.exp()
        log_t = torch.log(t.clamp_min(1e-30))
        return (s * (log_s - log_t)).sum(dim=-1).mean()
    # 0 log 0 = 0 on the target side
    tlogt = torch.where(t > 0, t * torch.log(t.clamp_min(1e-30)), t.new_zeros(()))
    return (tlogt - t * log_s).sum(dim=-1).mean()


def actual_iou(mask_logits: torch.Tensor, gt_mask: torch.Tensor) -> torch.Tensor:
    """IoU of the thresholded (p >= 0.5, i.e. logit >= 0) masks; empty-vs-empty is 1."""
    pred = (mask_logits >= 0).reshape(*mask_logits.shape[:-2], -1)
    gt = gt_mask.to(torch.bool).reshape(*gt_mask.shape[:-2], -1)
    inter = (pred & gt).sum(dim=-1).to(torch.float64)
    union = (pred | gt).sum(dim=-1).to(torch.float64)
    return torch.where(union > 0, inter / union.clamp_min(1.0), torch.ones_like(union))


def iou_mse(iou_pred: torch.Tensor, iou_actual: torch.Tensor) -> torch.Tensor:
    """Mean squared error over the 4 mask slots."""
    return ((iou_pred - iou_actual.to(iou_pred.dtype)) ** 2).mean()


def caption_ce(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean next-token negative log-likelihood over caption positions.

    `logits` is (..., T, V) aligned so position i predicts targets[..., i];
    the semantic-token slot must already be excluded by the caller.
    """
    vocab = logits.shape[-1]
    if int(targets.max()) >= vocab or int(targets.min()) < 0:
        raise ValueError("target id outside vocabulary")
    return F.cross_entropy(logits.reshape(-1, vocab), targets.reshape(-1))


def pretrain_total(breakdown: LossBreakdown, w_mask: float = 1.0, w_iou: float = 1.0,
                   w_concept: float = 1.0) -> float:
    if min(w_mask, w_iou, w_concept) < 0:
        raise ValueError("loss weights must be nonnegative")
    return w_mask * breakdown.mask_total + w_iou * breakdown.iou_mse + w_concept * breakdown.concept_kl


def combine_pretrain_losses(mask_total: torch.Tensor, iou: torch.Tensor,
                            kl: torch.Tensor, w_mask: float, w_iou: float,
                            w_concept: float) -> torch.Tensor:
    if min(w_mask, w_iou, w_concept) < 0:
        raise ValueError("loss weights must be nonnegative")
    return w_mask * mask_total + w_iou * iou + w_concept * kl
