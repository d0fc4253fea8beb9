import numpy as np
import pytest

from layout_data.types import BBox
from layout_engine.geometry import mask_from_box, mask_iou
from layout_engine.mask_codec import (MaskCodec, crop_to_patch, mask_codec_fit, mask_decode, mask_encode,
                                      paste_patch, training_patches)
from layout_engine.synth import SynthPageSpec, generate_corpus


def _rectangle_patches(n, m=28, seed=0):
    """Rectangles inside a larger box, so patches differ in where the mask sits."""
    rng = np.random.default_rng(seed)
    patches = []
    for _ in range(n):
        h, w = 96, 96
        x0, y0 = rng.integers(4, 40, size=2)
        x1, y1 = x0 + rng.integers(12, 50), y0 + rng.integers(12, 50)
        raster = mask_from_box(BBox(x0, y0, x1, y1), h, w).raster
        pad = rng.integers(0, 4, size=4)
        box = BBox(x0 - pad[0], y0 - pad[1], x1 + pad[2], y1 + pad[3])
        patches.append(crop_to_patch(raster, box, m))
    return np.asarray(patches)


def test_crop_of_a_filled_box_is_on_everywhere():
    raster = mask_from_box(BBox(10, 10, 30, 40), 64, 64).raster
    patch = crop_to_patch(raster, BBox(10, 10, 30, 40), 28)
    assert patch.shape == (28, 28)
    # border samples blend with the pixels outside the box
    assert np.allclose(patch[1:-1, 1:-1], 1.0)
    assert patch.min() >= 0.5


def test_paste_inverts_crop_for_box_aligned_masks():
    box = BBox(8, 12, 40, 30)
    raster = mask_from_box(box, 48, 64).raster
    assert np.array_equal(paste_patch(crop_to_patch(raster, box), box, 48, 64), raster)
    assert not paste_patch(np.ones((28, 28)), BBox(5, 5, 5, 9), 16, 16).any()


def test_codec_reconstructs_rectangle_masks():
    patches = _rectangle_patches(500)
    codec = mask_codec_fit(patches, 40)
    assert codec.dim == 40
    assert codec.patch_size == 28
    ious = [mask_iou(p >= 0.5, mask_decode(codec, mask_encode(codec, p))) for p in patches]
    assert np.median(ious) >= 0.9


def test_full_rank_codec_round_trips():
    patches = _rectangle_patches(100, m=8, seed=3)
    codec = mask_codec_fit(patches, 64)
    codes = codec.encode(patches)
    assert codes.shape == (100, 64)
    assert np.allclose(codec.decode(codes), patches, atol=1e-6)
    assert codec.residual_energy == pytest.approx(0.0, abs=1e-6)


def test_components_are_orthonormal():
    codec = mask_codec_fit(_rectangle_patches(200), 20)
    assert np.allclose(codec.components @ codec.components.T, np.eye(20), atol=1e-8)


def test_residual_energy_shrinks_with_dimension():
    patches = _rectangle_patches(200)
    energies = [mask_codec_fit(patches, d).residual_energy for d in (5, 20, 40)]
    assert energies[0] >= energies[1] >= energies[2]


def test_fit_rejects_bad_requests():
    patches = _rectangle_patches(10, m=8)
    with pytest.raises(ValueError):
        mask_codec_fit(patches, 65)
    with pytest.raises(ValueError):
        mask_codec_fit(patches, 20)
    with pytest.raises(ValueError):
        mask_codec_fit(np.zeros((4, 8)), 2)


def test_state_round_trip():
    codec = mask_codec_fit(_rectangle_patches(60), 10)
    again = MaskCodec.from_state(codec.to_state())
    assert np.array_equal(again.components, codec.components)
    assert np.array_equal(again.mean, codec.mean)
    assert again.patch_size == codec.patch_size
    assert again.residual_energy == pytest.approx(codec.residual_energy)


def test_training_patches_from_synthetic_pages():
    corpus = generate_corpus(SynthPageSpec(family="non_manhattan"), 5, seed=1, render=False)
    patches = training_patches([corpus.dataset], 16)
    assert patches.shape == (corpus.dataset.instance_count(), 16, 16)
    assert patches.min() >= 0.0 and patches.max() <= 1.0
