from itertools import permutations

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from layout_data.types import BBox, Instance, InstanceMask, PageRecord
from layout_engine.geometry import MatchWeights, box_cxcywh_to_xyxy, generalized_box_iou, matching_cost
from layout_engine.losses import NO_OBJECT_WEIGHT, Targets, compute_loss, encode_targets, iteration_loss
from layout_engine.model import IterationOutput, ModelOutput


def _targets(labels, boxes, embeds):
    embeds = torch.tensor(np.asarray(embeds, dtype=np.float32))
    return Targets(torch.tensor(labels, dtype=torch.long), torch.tensor(boxes, dtype=torch.float32).reshape(-1, 4),
                   embeds.reshape(len(labels), -1) if labels else embeds)


def _confident_logits(labels, n, c1):
    logits = torch.full((n, c1), -30.0)
    for i in range(n):
        logits[i, labels[i] if i < len(labels) else 0] = 30.0
    return logits


def test_perfect_prediction_has_zero_box_and_mask_terms():
    t = _targets([1, 2], [[0.3, 0.3, 0.2, 0.2], [0.7, 0.6, 0.3, 0.4]], [[1.0, 0.0], [0.0, 1.0]])
    logits = _confident_logits([1, 2], 3, 3)
    boxes = torch.cat([t.boxes, torch.tensor([[0.5, 0.5, 0.1, 0.1]])])
    embeds = torch.cat([t.mask_embeddings, torch.zeros(1, 2)])
    total, terms, assignment = iteration_loss(logits, boxes, embeds, t, MatchWeights())
    assert sorted(assignment.pairs) == [(0, 0), (1, 1)]
    assert float(terms["l1"]) == pytest.approx(0.0, abs=1e-6)
    assert float(terms["giou"]) == pytest.approx(0.0, abs=1e-6)
    assert float(terms["mask"]) == pytest.approx(0.0, abs=1e-6)
    assert float(terms["cls"]) == pytest.approx(0.0, abs=1e-6)
    assert float(total) == pytest.approx(0.0, abs=1e-5)


def test_empty_ground_truth_pushes_every_query_to_background():
    t = _targets([], [], np.zeros((0, 2)))
    logits = torch.randn(4, 3, generator=torch.Generator().manual_seed(0), requires_grad=True)
    boxes = torch.rand(4, 4, requires_grad=True)
    total, terms, assignment = iteration_loss(logits, boxes, torch.zeros(4, 2), t, MatchWeights())
    assert len(assignment) == 0
    expected = F.cross_entropy(logits, torch.zeros(4, dtype=torch.long), weight=torch.tensor([0.1, 1.0, 1.0]),
                               reduction="sum") / 4
    assert float(terms["cls"]) == pytest.approx(float(expected), rel=1e-6)
    assert float(terms["l1"]) == 0.0
    total.backward()
    assert logits.grad is not None


def test_small_case_equals_brute_force_assembly():
    g = torch.Generator().manual_seed(3)
    logits = torch.randn(3, 3, generator=g)
    boxes = torch.rand(3, 4, generator=g) * 0.4 + 0.3
    embeds = torch.randn(3, 5, generator=g)
    t = _targets([2, 1], (torch.rand(2, 4, generator=g) * 0.4 + 0.3).tolist(), torch.randn(2, 5, generator=g).tolist())
    w = MatchWeights()

    cost = matching_cost(logits, boxes, embeds, t.labels, t.boxes, t.mask_embeddings, w).values
    best = min(permutations(range(3), 2), key=lambda p: cost[p[0], 0] + cost[p[1], 1])
    pred = torch.tensor(best)
    gt = torch.tensor([0, 1])
    target_classes = torch.zeros(3, dtype=torch.long)
    target_classes[pred] = t.labels[gt]
    weight = torch.tensor([NO_OBJECT_WEIGHT, 1.0, 1.0])
    cls = F.cross_entropy(logits, target_classes, weight=weight, reduction="sum") / 3
    l1 = (boxes[pred] - t.boxes[gt]).abs().sum() / 2
    pairwise = generalized_box_iou(box_cxcywh_to_xyxy(boxes[pred]), box_cxcywh_to_xyxy(t.boxes[gt]))
    giou = (1 - torch.diag(pairwise)).sum() / 2
    mask = ((embeds[pred] - t.mask_embeddings[gt]) ** 2).sum() / 5 / 2
    expected = 2 * cls + 5 * l1 + 2 * giou + 1 * mask

    total, _, assignment = iteration_loss(logits, boxes, embeds, t, w)
    assert sorted(assignment.pairs) == sorted(zip(best, (0, 1)))
    assert float(total) == pytest.approx(float(expected), rel=1e-5)


def test_loss_is_invariant_to_query_order():
    g = torch.Generator().manual_seed(9)
    logits = torch.randn(5, 4, generator=g)
    boxes = torch.rand(5, 4, generator=g) * 0.4 + 0.3
    embeds = torch.randn(5, 3, generator=g)
    gt_boxes = (torch.rand(3, 4, generator=g) * 0.4 + 0.3).tolist()
    t = _targets([1, 3, 2], gt_boxes, torch.randn(3, 3, generator=g).tolist())
    perm = torch.tensor([4, 2, 0, 1, 3])
    a, _, _ = iteration_loss(logits, boxes, embeds, t, MatchWeights())
    b, _, _ = iteration_loss(logits[perm], boxes[perm], embeds[perm], t, MatchWeights())
    assert float(a) == pytest.approx(float(b), rel=1e-5)


def test_compute_loss_averages_iterations():
    t = _targets([1], [[0.5, 0.5, 0.2, 0.2]], [[0.0, 0.0]])
    g = torch.Generator().manual_seed(1)
    its = [IterationOutput(torch.randn(2, 2, generator=g), torch.rand(2, 4, generator=g) * 0.5 + 0.25,
                           torch.randn(2, 2, generator=g)) for _ in range(3)]
    out = compute_loss(ModelOutput(its), t)
    singles = [float(iteration_loss(i.class_logits, i.boxes, i.mask_embeddings, t, MatchWeights())[0]) for i in its]
    assert float(out.total) == pytest.approx(np.mean(singles), rel=1e-6)
    assert out.terms["total"] == pytest.approx(np.mean(singles), rel=1e-6)
    assert len(out.assignments) == 3


def test_focal_option_runs():
    t = _targets([1], [[0.5, 0.5, 0.2, 0.2]], [[0.0]])
    total, terms, _ = iteration_loss(torch.zeros(2, 2), torch.rand(2, 4) * 0.5 + 0.25, torch.zeros(2, 1), t,
                                     MatchWeights(), focal=True)
    assert torch.isfinite(total)
    assert float(terms["cls"]) > 0


def test_encode_targets_normalizes_boxes():
    mask = InstanceMask.from_polygons([[10, 20, 30, 20, 30, 60, 10, 60]])
    page = PageRecord(1, 100, 80, instances=(Instance(2, BBox(10, 20, 30, 60), mask),
                                             Instance(1, None, mask),
                                             Instance(1, BBox(5, 5, 5, 9))))
    t = encode_targets(page, None, dim=4)
    assert len(t) == 2
    assert t.labels.tolist() == [2, 1]
    assert torch.allclose(t.boxes[0], torch.tensor([0.2, 0.5, 0.2, 0.5]))
    assert torch.allclose(t.boxes[1], t.boxes[0])
    assert t.mask_embeddings.shape == (2, 4)


def test_unmatched_queries_only_receive_the_background_gradient():
    g = torch.Generator().manual_seed(5)
    logits = torch.randn(4, 3, generator=g, dtype=torch.float64).requires_grad_()
    boxes = (torch.rand(4, 4, generator=g, dtype=torch.float64) * 0.4 + 0.3).requires_grad_()
    embeds = torch.randn(4, 2, generator=g, dtype=torch.float64).requires_grad_()
    t = Targets(torch.tensor([2]), torch.tensor([[0.5, 0.5, 0.3, 0.3]], dtype=torch.float64),
                torch.zeros(1, 2, dtype=torch.float64))
    w = MatchWeights()
    total, _, assignment = iteration_loss(logits, boxes, embeds, t, w)
    total.backward()
    unmatched = [i for i in range(4) if i not in assignment.pred_indices]
    assert len(unmatched) == 3

    def loss_at(i, c, step):
        shifted = logits.detach().clone()
        shifted[i, c] += step
        return float(iteration_loss(shifted, boxes.detach(), embeds.detach(), t, w)[0])

    eps = 1e-6
    for i in unmatched:
        assert torch.all(boxes.grad[i] == 0) and torch.all(embeds.grad[i] == 0)
        background = logits[i].detach().softmax(-1) - F.one_hot(torch.tensor(0), 3).double()
        expected = w.cls * NO_OBJECT_WEIGHT * background / 4
        assert torch.allclose(logits.grad[i], expected, atol=1e-12)
        for c in range(3):
            numeric = (loss_at(i, c, eps) - loss_at(i, c, -eps)) / (2 * eps)
            assert numeric == pytest.approx(float(expected[c]), abs=1e-7)
