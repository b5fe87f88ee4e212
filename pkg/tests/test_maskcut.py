import numpy as np
import pytest

from refdet.datagen import SceneSpec, generate_scene
from refdet.encoder import ToyEmbedder
from refdet.geometry import iou_matrix
from refdet.maskcut import (StageRejected, bipartition_to_mask, build_affinity, corner_count, foreground_select,
                            mask_to_box, maskcut, ncut_second_eigenvector, pseudo_boxes_for_image, seed_component,
                            self_train_filter, update_affinity)


def two_block(n=8, eps=1e-5):
    W = np.full((2 * n, 2 * n), eps)
    W[:n, :n] = 1.0
    W[n:, n:] = 1.0
    return W


def test_two_block_recovers_a_block():
    x = ncut_second_eigenvector(two_block())
    mask = bipartition_to_mask(x)
    assert mask.sum() == 8
    assert mask[:8].all() != mask[8:].all() or mask[:8].all() or mask[8:].all()
    assert (mask[:8].all() and not mask[8:].any()) or (mask[8:].all() and not mask[:8].any())


def test_sign_convention():
    x = ncut_second_eigenvector(two_block())
    assert x[np.argmax(np.abs(x))] > 0


def test_generalised_eigen_residual(rng):
    f = rng.uniform(0, 1, (30, 5))
    W = build_affinity(f, 0.85)
    x, lam = ncut_second_eigenvector(W, return_value=True)
    D = np.diag(W.sum(1))
    np.testing.assert_allclose((D - W) @ x, lam * D @ x, atol=1e-8)


def test_affinity_properties(rng):
    W = build_affinity(rng.uniform(0, 1, (4, 4, 6)))
    assert W.shape == (16, 16)
    np.testing.assert_array_equal(W, W.T)
    assert set(np.unique(W)) <= {1.0, 1e-5}
    assert (np.diag(W) > 0).all()
    with pytest.raises(ValueError):
        build_affinity(np.zeros((4, 4, 3)))
    with pytest.raises(ValueError):
        build_affinity(np.ones((1, 2, 3)))


def test_zero_degree_rejected():
    W = two_block()
    W[0, :] = 0
    W[:, 0] = 0
    with pytest.raises(ValueError):
        ncut_second_eigenvector(W)


def test_foreground_select_rules():
    x = np.zeros(16)
    x[5] = 1.0  # seed at (1, 1)
    mask = np.zeros((4, 4), bool)
    mask[1, 1] = True
    assert foreground_select(mask, x) is mask
    # mask covering three corners and not the seed -> complement
    bad = np.zeros((4, 4), bool)
    bad[0, 0] = bad[0, 3] = bad[3, 0] = True
    np.testing.assert_array_equal(foreground_select(bad, x), ~bad)
    # exactly two corners is already too many
    two = np.zeros((4, 4), bool)
    two[0, 0] = two[0, 3] = True
    np.testing.assert_array_equal(foreground_select(two, x), ~two)


def test_foreground_select_rejects_seedless_complement():
    x = np.zeros(16)
    x[0] = 1.0  # seed in a corner
    mask = np.zeros((4, 4), bool)
    mask[0, 0] = mask[0, 3] = True  # holds the seed but two corners
    with pytest.raises(StageRejected):
        foreground_select(mask, x)


def test_update_affinity_masks_rows():
    W = np.ones((4, 4))
    prior = np.array([True, True, True, False])
    W2 = update_affinity(W, [prior])
    assert W2[3, 3] == 1.0
    assert (W2[:3] == 1e-5).all() and (W2[:, :3] == 1e-5).all()
    with pytest.raises(ValueError):
        update_affinity(W, [np.ones(4, bool)])


def test_mask_to_box_examples():
    m = np.zeros((6, 6), bool)
    m[3, 2] = True  # column 2, row 3
    np.testing.assert_allclose(mask_to_box(m, 8), [16, 24, 24, 32])
    m = np.zeros((6, 6), bool)
    m[1, 1] = m[3, 4] = True
    np.testing.assert_allclose(mask_to_box(m, 8), [8, 8, 40, 32])
    with pytest.raises(ValueError):
        mask_to_box(np.zeros((3, 3), bool), 8)


def test_seed_component():
    m = np.zeros((5, 5), bool)
    m[0:2, 0:2] = True
    m[4, 4] = True
    x = np.zeros(25)
    x[24] = 2.0
    comp = seed_component(m, x)
    assert comp.sum() == 1 and comp[4, 4]


def block_image(blocks, size=16, dim=4):
    """Patch-feature grid: background one colour, each block another."""
    f = np.zeros((size, size, dim))
    f[..., 0] = 1.0
    for k, (r0, c0, r1, c1) in enumerate(blocks):
        f[r0:r1, c0:c1] = 0.0
        f[r0:r1, c0:c1, k + 1] = 1.0
    return f


def test_maskcut_two_objects_disjoint():
    f = block_image([(2, 2, 5, 5), (9, 10, 13, 14)])
    out = maskcut(f, n_objects=3, patch_size=4)
    assert len(out) == 2
    masks = [m for m, _ in out]
    assert not (masks[0] & masks[1]).any()
    boxes = sorted(tuple(b) for _, b in out)
    assert boxes == [(8.0, 8.0, 20.0, 20.0), (40.0, 36.0, 56.0, 52.0)]


def test_maskcut_uniform_gives_nothing():
    assert maskcut(np.ones((8, 8, 3)), 3) == []


def test_maskcut_single_scene_recovery():
    emb = ToyEmbedder()
    spec = SceneSpec(min_objects=1, max_objects=1)
    hits = 0
    for s in range(50):
        sample = generate_scene(777 + s, spec)
        boxes = pseudo_boxes_for_image(sample.image, emb)
        if boxes and iou_matrix(np.asarray(boxes[:1]), sample.boxes)[0, 0] >= 0.5:
            hits += 1
    assert hits >= 40


def test_self_train_filter():
    dets = [("a", 0.95), ("b", 0.9), ("c", 0.5)]
    assert self_train_filter(dets) == [("a", 0.95)]
    assert self_train_filter(dets, 0.4) == dets


def test_corner_count():
    m = np.ones((3, 3), bool)
    assert corner_count(m) == 4
