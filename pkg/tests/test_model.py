import numpy as np
import pytest
import torch

from layout_engine.losses import Targets, compute_loss
from layout_engine.model import (ModelConfig, QueryState, TransDLANet, backbone_features, count_parameters,
                                 forward, image_to_tensor, init_model, load_checkpoint, predict,
                                 roi_align_features, save_checkpoint)


def _tiny(**overrides):
    base = dict(num_queries=8, embed_dim=32, encoder_heads=4, ffn_dim=64, dynamic_dim=8,
                mask_embedding_dim=4, mask_patch_size=8, refinement_iterations=2)
    base.update(overrides)
    return ModelConfig.toy(num_classes=3, **base)


def _image(seed=0, h=64, w=80):
    return np.random.default_rng(seed).integers(0, 256, size=(h, w, 3), dtype=np.uint8)


def test_presets_validate():
    toy = ModelConfig.toy()
    assert (toy.num_queries, toy.refinement_iterations, toy.mask_embedding_dim) == (50, 3, 40)
    full = ModelConfig.full()
    assert (full.num_queries, full.refinement_iterations, full.embed_dim) == (300, 6, 256)
    with pytest.raises(ValueError):
        ModelConfig.toy(embed_dim=30, encoder_heads=4).validate()
    with pytest.raises(ValueError):
        ModelConfig.toy(mask_embedding_dim=1000).validate()
    assert ModelConfig.from_dict({**toy.to_dict(), "unknown": 1}) == toy


def test_forward_shapes():
    model = init_model(_tiny())
    out = forward(model, _image())
    assert len(out) == 2
    for it in out.iterations:
        assert it.class_logits.shape == (8, 4)
        assert it.boxes.shape == (8, 4)
        assert it.mask_embeddings.shape == (8, 4)
        assert torch.all(it.boxes >= 0) and torch.all(it.boxes <= 1)
    assert out.final is out.iterations[-1]


def test_backbone_stride_and_minimum_size():
    model = init_model(_tiny())
    feats = backbone_features(model, _image(h=64, w=96))
    assert feats.shape == (1, 32, 8, 12)
    with pytest.raises(ValueError):
        backbone_features(model, _image(h=32, w=96))


def test_image_to_tensor_scales_uint8():
    t = image_to_tensor(np.full((4, 5, 3), 255, dtype=np.uint8))
    assert t.shape == (1, 3, 4, 5)
    assert torch.all(t == 1.0)
    assert image_to_tensor(np.zeros((4, 5))).shape == (1, 3, 4, 5)


def test_init_is_deterministic_and_leaves_global_rng_alone():
    state = torch.get_rng_state()
    a = init_model(_tiny(), seed=5)
    b = init_model(_tiny(), seed=5)
    assert torch.equal(torch.get_rng_state(), state)
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)
    c = init_model(_tiny(), seed=6)
    assert not torch.equal(a.query_embed.weight, c.query_embed.weight)


def test_full_box_roi_align_reads_the_feature_map():
    feats = torch.arange(16, dtype=torch.float32).reshape(1, 1, 4, 4)
    roi = roi_align_features(feats, torch.tensor([[0.5, 0.5, 1.0, 1.0]]), 4)
    assert torch.allclose(roi[0, 0], feats[0, 0])


def test_single_bin_roi_align_on_a_two_by_two_map():
    feats = torch.tensor([[[[1.0, 2.0], [3.0, 4.0]]]])
    boxes = torch.tensor([[0.5, 0.5, 1.0, 1.0], [0.25, 0.5, 0.5, 1.0], [0.625, 0.375, 0.25, 0.25]])
    roi = roi_align_features(feats, boxes, 1)
    assert roi.shape == (3, 1, 1, 1)
    assert roi.flatten().tolist() == pytest.approx([2.5, 2.0, 2.25])


def test_encoder_is_permutation_equivariant():
    model = init_model(_tiny()).eval()
    g = torch.Generator().manual_seed(0)
    worst = 0.0
    with torch.no_grad():
        for _ in range(100):
            q = QueryState(torch.randn(8, 32, generator=g), model.init_boxes)
            perm = torch.randperm(8, generator=g)
            out = model.encoder_forward(q)
            permuted = model.encoder_forward(QueryState(q.embeddings[perm], q.boxes[perm]))
            worst = max(worst, float((permuted - out[perm]).abs().max()))
    assert worst < 1e-5


def test_dynamic_decoder_treats_queries_independently():
    model = init_model(_tiny()).eval()
    g = torch.Generator().manual_seed(2)
    q = torch.randn(5, 32, generator=g)
    roi = torch.randn(5, 32, 7, 7, generator=g)
    other_q, other_roi = q.clone(), roi.clone()
    other_q[1:] = torch.randn(4, 32, generator=g)
    other_roi[1:] = torch.randn(4, 32, 7, 7, generator=g)
    with torch.no_grad():
        together = model.dynamic_decode(q, roi)
        alone = torch.cat([model.dynamic_decode(q[i:i + 1], roi[i:i + 1]) for i in range(5)])
        neighbours_changed = model.dynamic_decode(other_q, other_roi)
    assert torch.allclose(together, alone, atol=1e-5)
    assert torch.allclose(neighbours_changed[0], together[0], atol=1e-5)


def test_dynamic_decoder_checks_counts():
    model = init_model(_tiny())
    with pytest.raises(ValueError):
        model.dynamic_decode(torch.zeros(3, 32), torch.zeros(2, 32, 7, 7))
    fused = model.dynamic_decode(torch.zeros(2, 32), torch.rand(2, 32, 7, 7))
    assert fused.shape == (2, 32)


def test_zero_deltas_keep_boxes():
    model = init_model(_tiny())
    boxes = torch.tensor([[0.5, 0.5, 1.0, 1.0], [0.3, 0.4, 0.2, 0.1]])
    assert torch.allclose(model.update_boxes(boxes, torch.zeros(2, 4)), boxes, atol=1e-6)
    moved = model.update_boxes(boxes, torch.tensor([[0.0, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]]))
    assert moved[1, 0] == pytest.approx(0.5, abs=1e-6)


def test_ablation_switches_change_the_graph():
    base = init_model(_tiny())
    assert len(base.heads) == 1
    unshared = init_model(_tiny(share_heads=False))
    assert len(unshared.heads) == 2
    no_encoder = init_model(_tiny(use_encoder=False))
    no_dynamic = init_model(_tiny(use_dynamic_decoder=False))
    assert count_parameters(no_encoder) < count_parameters(base)
    assert count_parameters(no_dynamic) < count_parameters(base)
    for model in (unshared, no_encoder, no_dynamic, init_model(_tiny(shared_trunk=True))):
        assert forward(model, _image()).final.class_logits.shape == (8, 4)


def test_loss_gradients_match_finite_differences():
    # detached refinement hides paths that finite differences still see
    model = init_model(ModelConfig.toy(num_classes=3, detach_boxes=False), seed=0).double()
    g = torch.Generator().manual_seed(0)
    box_out = model.head_for(0).box.layers[-1]
    with torch.no_grad():
        # zero deltas would leave every box edge on the clamp
        box_out.weight.copy_(0.01 * torch.randn(box_out.weight.shape, generator=g, dtype=torch.float64))
    x = image_to_tensor(_image(h=64, w=64)).double()
    targets = Targets(torch.tensor([1, 3]),
                      torch.tensor([[0.3, 0.3, 0.3, 0.2], [0.6, 0.7, 0.5, 0.3]], dtype=torch.float64),
                      torch.randn(2, 40, generator=g, dtype=torch.float64))

    def loss():
        return compute_loss(model(x), targets).total

    model.zero_grad()
    loss().backward()
    params = list(model.parameters())
    sizes = torch.tensor([p.numel() for p in params])
    offsets = torch.cumsum(sizes, 0) - sizes
    eps = 1e-7
    for flat in torch.randperm(int(sizes.sum()), generator=g)[:100].tolist():
        i = int(torch.searchsorted(offsets, flat, right=True)) - 1
        p, j = params[i], flat - int(offsets[i])
        analytic = float(p.grad.view(-1)[j]) if p.grad is not None else 0.0
        with torch.no_grad():
            original = float(p.view(-1)[j])
            p.view(-1)[j] = original + eps
            up = float(loss())
            p.view(-1)[j] = original - eps
            down = float(loss())
            p.view(-1)[j] = original
        numeric = (up - down) / (2 * eps)
        assert abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-2) < 1e-4, (i, j, numeric, analytic)


def test_predict_ranks_and_thresholds():
    model = init_model(_tiny())
    preds = predict(model, _image(), score_threshold=0.0, max_instances=5)
    assert len(preds) == 5
    scores = [p.score for p in preds]
    assert scores == sorted(scores, reverse=True)
    for p in preds:
        assert 1 <= p.category_id <= 3
        assert p.mask.raster.shape == (64, 80)
        assert 0.0 <= p.bbox.x_min <= p.bbox.x_max <= 80
    assert predict(model, _image(), score_threshold=1.0) == []


def test_checkpoint_round_trip(tmp_path):
    model = init_model(_tiny(), seed=2).eval()
    path = tmp_path / "model.pt"
    save_checkpoint(model, path, ["paragraph", "title", "figure"])
    loaded, names = load_checkpoint(path)
    assert names == ["paragraph", "title", "figure"]
    assert loaded.cfg == model.cfg
    with torch.no_grad():
        a = forward(model, _image()).final
        b = forward(loaded, _image()).final
    assert torch.equal(a.class_logits, b.class_logits)
    assert torch.equal(a.boxes, b.boxes)


def test_load_checkpoint_rejects_other_files(tmp_path):
    path = tmp_path / "other.pt"
    torch.save({"weights": torch.zeros(1)}, path)
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_model_refuses_invalid_config():
    with pytest.raises(ValueError):
        TransDLANet(ModelConfig(num_queries=0))
