import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import torch
import torch.nn.functional as F
from torchvision.ops import sigmoid_focal_loss

from layout_data.types import PageRecord
from layout_engine.geometry import (Assignment, MatchWeights, box_cxcywh_to_xyxy, box_from_mask,
                                    generalized_box_iou, hungarian, matching_cost)
from layout_engine.mask_codec import MaskCodec, crop_to_patch
from layout_engine.model import ModelOutput

logger = logging.getLogger(__name__)

NO_OBJECT_WEIGHT = 0.1


@dataclass
class Targets:
    labels: torch.Tensor  # (M,) category ids, 1..C
    boxes: torch.Tensor  # (M, 4) normalized cx, cy, w, h
    mask_embeddings: torch.Tensor  # (M, D)

    def __len__(self) -> int:
        return int(self.labels.shape[0])


@dataclass
class LossOutput:
    total: torch.Tensor
    terms: Dict[str, float] = field(default_factory=dict)
    assignments: List[Assignment] = field(default_factory=list)


def encode_targets(page: PageRecord, codec: Optional[MaskCodec], dim: Optional[int] = None) -> Targets:
    """Ground truth of one page as normalized boxes, labels and mask embeddings."""
    labels, boxes, embeds = [], [], []
    width, height = float(page.width), float(page.height)
    d = codec.dim if codec is not None else (dim or 0)
    for inst in page.instances:
        bbox = inst.bbox
        raster = None
        if inst.mask is not None:
            raster = inst.mask.to_raster(page.height, page.width)
            if bbox is None:
                bbox = box_from_mask(raster)
        if bbox is None or bbox.area() <= 0:
            continue
        labels.append(inst.category_id)
        boxes.append([(bbox.x_min + bbox.x_max) / 2 / width, (bbox.y_min + bbox.y_max) / 2 / height,
                      bbox.width / width, bbox.height / height])
        if codec is not None:
            if raster is None:
                patch = np.ones((codec.patch_size, codec.patch_size))
            else:
                patch = crop_to_patch(raster, bbox, codec.patch_size)
            embeds.append(codec.encode(patch))
        else:
            embeds.append(np.zeros(d))
    return Targets(
        torch.tensor(labels, dtype=torch.long),
        torch.tensor(boxes, dtype=torch.float32).reshape(-1, 4),
        torch.tensor(np.asarray(embeds, dtype=np.float32)).reshape(len(labels), d),
    )


def _classification_loss(logits: torch.Tensor, target_classes: torch.Tensor, num_matched: int,
                         focal: bool) -> torch.Tensor:
    n, c1 = logits.shape
    if focal:
        onehot = F.one_hot(target_classes, c1).to(logits.dtype)[:, 1:]
        loss = sigmoid_focal_loss(logits[:, 1:], onehot, alpha=0.25, gamma=2.0, reduction="sum")
        return loss / max(num_matched, 1)
    weight = torch.ones(c1, dtype=logits.dtype, device=logits.device)
    weight[0] = NO_OBJECT_WEIGHT
    return F.cross_entropy(logits, target_classes, weight=weight, reduction="sum") / n


def iteration_loss(logits, boxes, embeds, targets: Targets, weights: MatchWeights, focal: bool = False):
    """Loss for one refinement iteration after its own Hungarian matching."""
    cost = matching_cost(logits.detach(), boxes.detach(), embeds.detach(), targets.labels,
                         targets.boxes, targets.mask_embeddings, weights, use_sigmoid=focal)
    assignment = hungarian(cost)
    m = len(assignment)
    pred_idx = torch.tensor(assignment.pred_indices, dtype=torch.long)
    gt_idx = torch.tensor(assignment.gt_indices, dtype=torch.long)

    target_classes = torch.zeros(logits.shape[0], dtype=torch.long, device=logits.device)
    if m:
        target_classes[pred_idx] = targets.labels[gt_idx]
    loss_cls = _classification_loss(logits, target_classes, m, focal)

    denom = max(m, 1)
    if m:
        src_boxes, tgt_boxes = boxes[pred_idx], targets.boxes[gt_idx].to(boxes.dtype)
        loss_l1 = (src_boxes - tgt_boxes).abs().sum() / denom
        g = torch.diag(generalized_box_iou(box_cxcywh_to_xyxy(src_boxes), box_cxcywh_to_xyxy(tgt_boxes)))
        loss_giou = (1.0 - g).sum() / denom
        src_e, tgt_e = embeds[pred_idx], targets.mask_embeddings[gt_idx].to(embeds.dtype)
        loss_mask = ((src_e - tgt_e) ** 2).sum() / max(embeds.shape[-1], 1) / denom
    else:
        zero = boxes.sum() * 0.0
        loss_l1 = loss_giou = loss_mask = zero

    terms = {"cls": loss_cls, "l1": loss_l1, "giou": loss_giou, "mask": loss_mask}
    total = (weights.cls * loss_cls + weights.l1 * loss_l1
             + weights.giou * loss_giou + weights.mask * loss_mask)
    return total, terms, assignment


def compute_loss(outputs: ModelOutput, targets: Targets, weights: MatchWeights = MatchWeights(),
                 focal: bool = False) -> LossOutput:
    """Mean over refinement iterations of the matched set-prediction loss."""
    totals = []
    sums = {"cls": 0.0, "l1": 0.0, "giou": 0.0, "mask": 0.0}
    assignments = []
    for it in outputs.iterations:
        total, terms, assignment = iteration_loss(it.class_logits, it.boxes, it.mask_embeddings,
                                                  targets, weights, focal)
        totals.append(total)
        assignments.append(assignment)
        for k, v in terms.items():
            sums[k] += float(v.detach())
    k = max(len(totals), 1)
    total = torch.stack(totals).mean()
    breakdown = {name: v / k for name, v in sums.items()}
    breakdown["total"] = float(total.detach())
    return LossOutput(total, breakdown, assignments)
