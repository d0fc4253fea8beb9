"""
Overlap measures, box/mask conversions and bipartite matching.

Scalar helpers work on BBox / InstanceMask, the pairwise numpy helpers serve
the evaluator and the torch helpers serve training.
"""
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from layout_data.types import BBox, InstanceMask


def iou(a: BBox, b: BBox) -> float:
    inter = a.intersection(b).area()
    union = a.area() + b.area() - inter
    return inter / union if union > 0 else 0.0


def giou(a: BBox, b: BBox) -> float:
    inter = a.intersection(b).area()
    union = a.area() + b.area() - inter
    hull = BBox(min(a.x_min, b.x_min), min(a.y_min, b.y_min),
                max(a.x_max, b.x_max), max(a.y_max, b.y_max)).area()
    if hull <= 0:
        return 0.0
    value = inter / union if union > 0 else 0.0
    return value - (hull - union) / hull


def _raster(m, height: Optional[int], width: Optional[int]) -> np.ndarray:
    if isinstance(m, InstanceMask):
        if m.is_raster and height is None:
            return m.raster
        if height is None or width is None:
            raise ValueError("polygon masks need page dimensions to rasterize")
        return m.to_raster(height, width)
    return np.asarray(m, dtype=bool)


def mask_iou(a, b, height: Optional[int] = None, width: Optional[int] = None) -> float:
    if height is None:
        for m in (a, b):
            if isinstance(m, InstanceMask) and m.is_raster:
                height, width = m.raster.shape
                break
            if isinstance(m, np.ndarray):
                height, width = m.shape
                break
    ra, rb = _raster(a, height, width), _raster(b, height, width)
    if ra.shape != rb.shape:
        raise ValueError(f"mask dimensions differ: {ra.shape} vs {rb.shape}")
    union = np.logical_or(ra, rb).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(ra, rb).sum() / union)


def box_from_mask(m, height: Optional[int] = None, width: Optional[int] = None) -> BBox:
    """Tightest box around the on-pixels; pixel (r, c) spans [c, c+1) x [r, r+1)."""
    raster = _raster(m, height, width)
    ys, xs = np.nonzero(raster)
    if ys.size == 0:
        raise ValueError("cannot take the bounding box of an empty mask")
    return BBox(float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


def mask_from_box(b: BBox, height: int, width: int) -> InstanceMask:
    """Filled rectangle: every pixel whose centre lies in [x_min, x_max) x [y_min, y_max)."""
    raster = np.zeros((height, width), dtype=bool)
    c0 = max(0, math.ceil(b.x_min - 0.5))
    c1 = min(width, math.ceil(b.x_max - 0.5))
    r0 = max(0, math.ceil(b.y_min - 0.5))
    r1 = min(height, math.ceil(b.y_max - 0.5))
    if c1 > c0 and r1 > r0:
        raster[r0:r1, c0:c1] = True
    return InstanceMask.from_raster(raster)


# -- pairwise numpy forms (evaluator) --

def box_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) corner-form arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def mask_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between stacks of boolean masks (N, H, W) and (M, H, W)."""
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if len(a) and len(b) and a.shape[1:] != b.shape[1:]:
        raise ValueError(f"mask stacks have different page dimensions: {a.shape[1:]} vs {b.shape[1:]}")
    fa = a.reshape(a.shape[0], int(np.prod(a.shape[1:]))).astype(np.float64)
    fb = b.reshape(b.shape[0], int(np.prod(b.shape[1:]))).astype(np.float64)
    if fa.shape[1] != fb.shape[1]:
        return np.zeros((len(fa), len(fb)))
    inter = fa @ fb.T
    union = fa.sum(1)[:, None] + fb.sum(1)[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


# -- torch forms (training) --

def box_cxcywh_to_xyxy(x: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = x.unbind(-1)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1)


def box_xyxy_to_cxcywh(x: torch.Tensor) -> torch.Tensor:
    x0, y0, x1, y1 = x.unbind(-1)
    return torch.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], dim=-1)


def box_area(boxes: torch.Tensor) -> torch.Tensor:
    return (boxes[:, 2] - boxes[:, 0]).clamp(min=0) * (boxes[:, 3] - boxes[:, 1]).clamp(min=0)


def box_iou(boxes1: torch.Tensor, boxes2: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    area1, area2 = box_area(boxes1), box_area(boxes2)
    lt = torch.max(boxes1[:, None, :2], boxes2[:, :2])
    rb = torch.min(boxes1[:, None, 2:], boxes2[:, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area1[:, None] + area2 - inter
    return inter / union.clamp(min=1e-12), union


def generalized_box_iou(boxes1: torch.Tensor, boxes2: torch.Tensor) -> torch.Tensor:
    """Pairwise GIoU for corner-form boxes, shape (N, M)."""
    iou_, union = box_iou(boxes1, boxes2)
    lt = torch.min(boxes1[:, None, :2], boxes2[:, :2])
    rb = torch.max(boxes1[:, None, 2:], boxes2[:, 2:])
    wh = (rb - lt).clamp(min=0)
    hull = (wh[..., 0] * wh[..., 1]).clamp(min=1e-12)
    return iou_ - (hull - union) / hull


# -- assignment --

@dataclass(frozen=True)
class CostMatrix:
    """Rows are predictions, columns ground truths."""
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"cost matrix must be 2-D, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("cost matrix has non-finite entries")
        object.__setattr__(self, "values", v)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class Assignment:
    pairs: Tuple[Tuple[int, int], ...]
    cost: float = 0.0

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def pred_indices(self) -> List[int]:
        return [p for p, _ in self.pairs]

    @property
    def gt_indices(self) -> List[int]:
        return [g for _, g in self.pairs]


def hungarian(c) -> Assignment:
    """Minimum-cost complete matching of size min(N, M)."""
    cm = c if isinstance(c, CostMatrix) else CostMatrix(np.asarray(c))
    if 0 in cm.shape:
        return Assignment((), 0.0)
    rows, cols = linear_sum_assignment(cm.values)
    pairs = tuple((int(r), int(k)) for r, k in zip(rows, cols))
    return Assignment(pairs, float(cm.values[rows, cols].sum()))


@dataclass(frozen=True)
class MatchWeights:
    cls: float = 2.0
    l1: float = 5.0
    giou: float = 2.0
    mask: float = 1.0

    def scaled(self, k: float) -> "MatchWeights":
        return MatchWeights(self.cls * k, self.l1 * k, self.giou * k, self.mask * k)


@torch.no_grad()
def matching_cost(pred_logits, pred_boxes, pred_embed, gt_labels, gt_boxes, gt_embed,
                  weights: MatchWeights = MatchWeights(), use_sigmoid: bool = False) -> CostMatrix:
    """
    cost[i, j] = -w_cls * p_i(label_j) + w_l1 * |b_i - b_j|_1 + w_giou * (1 - giou)
                 + w_mask * |e_i - e_j|^2 / D

    Boxes are normalized cx, cy, w, h; logits column 0 is the no-object class.
    """
    logits = torch.as_tensor(pred_logits, dtype=torch.float32)
    boxes = torch.as_tensor(pred_boxes, dtype=torch.float32)
    embed = torch.as_tensor(pred_embed, dtype=torch.float32)
    labels = torch.as_tensor(gt_labels, dtype=torch.long)
    tboxes = torch.as_tensor(gt_boxes, dtype=torch.float32).reshape(-1, 4)
    tembed = torch.as_tensor(gt_embed, dtype=torch.float32)
    if len(labels):
        tembed = tembed.reshape(len(labels), -1)
    if embed.shape[-1] != tembed.shape[-1] and len(labels):
        raise ValueError(f"mask embedding dims differ: {embed.shape[-1]} vs {tembed.shape[-1]}")
    if boxes.shape[-1] != 4:
        raise ValueError(f"boxes must have 4 coordinates, got {boxes.shape[-1]}")
    n, m = logits.shape[0], labels.shape[0]
    if m == 0 or n == 0:
        return CostMatrix(np.zeros((n, m)))

    prob = logits.sigmoid() if use_sigmoid else logits.softmax(-1)
    cost_cls = -prob[:, labels]
    cost_l1 = torch.cdist(boxes, tboxes, p=1)
    cost_giou = 1.0 - generalized_box_iou(box_cxcywh_to_xyxy(boxes), box_cxcywh_to_xyxy(tboxes))
    dim = max(embed.shape[-1], 1)
    cost_mask = ((embed[:, None, :] - tembed[None, :, :]) ** 2).sum(-1) / dim
    total = (weights.cls * cost_cls + weights.l1 * cost_l1
             + weights.giou * cost_giou + weights.mask * cost_mask)
    return CostMatrix(total.cpu().double().numpy())
