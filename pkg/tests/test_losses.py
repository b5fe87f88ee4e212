import math

import numpy as np
import pytest
import torch

from refdet.assignment import MatchIndexPairs
from refdet.losses import (FSLossConfig, LossBreakdown, box_loss, cosine_loss, elementwise_giou, expected_fs_loss,
                           filter_queries,
                           fs_loss, hungarian_detection_loss, predicted_similarity, pseudo_similarity_targets,
                           remap_matches, sigmoid_focal_loss, total_loss)


def fs_reference(p_hat, p, pos, alpha=2.0, beta=4.0):
    """Direct transcription with Python floats, independent of the torch code."""
    total = 0.0
    for ph, pp, is_pos in zip(p_hat, p, pos):
        ph = min(max(ph, 1e-7), 1 - 1e-7)
        if is_pos:
            total += (1 - ph) ** alpha * math.log(ph)
        else:
            total += (1 - pp) ** beta * ph ** alpha * math.log(1 - ph)
    return -total / len(p_hat)


def test_else_branch_hand_value():
    # -(1-0.8)^4 * 0.5^2 * ln(0.5)
    expected = 0.2 ** 4 * 0.25 * math.log(2.0)
    assert expected == pytest.approx(2.7726e-4, abs=1e-8)
    got = fs_loss(torch.tensor([0.5], dtype=torch.float64), torch.tensor([0.8], dtype=torch.float64),
                  MatchIndexPairs([]), reference_index=0)
    assert float(got) == pytest.approx(expected, abs=1e-12)


def test_positive_branch_hand_value():
    # matched to the reference with p_hat = 0.9: -(0.1)^2 ln 0.9
    got = fs_loss(torch.tensor([0.9], dtype=torch.float64), torch.tensor([0.95], dtype=torch.float64),
                  MatchIndexPairs([(2, 0)]), reference_index=2)
    assert float(got) == pytest.approx(-(0.1 ** 2) * math.log(0.9), abs=1e-12)


def test_matches_reference_transcription(rng):
    for _ in range(20):
        n = int(rng.integers(1, 12))
        p_hat = rng.uniform(0.01, 0.99, n)
        p = rng.uniform(0, 1, n) * (rng.uniform(size=n) > 0.4)
        q = int(rng.integers(n))
        matches = MatchIndexPairs([(1, q)])
        pos = np.zeros(n, bool)
        pos[q] = True
        got = fs_loss(torch.from_numpy(p_hat), torch.from_numpy(p), matches, 1)
        assert float(got) == pytest.approx(fs_reference(p_hat, p, pos), rel=1e-12)


def test_extremes_are_finite():
    p_hat = torch.tensor([0.0, 1.0, 1.0], dtype=torch.float64)
    p = torch.tensor([0.0, 0.0, 1.0], dtype=torch.float64)
    got = fs_loss(p_hat, p, MatchIndexPairs([(0, 0)]), 0)
    assert torch.isfinite(got)


def test_perfect_negative_contributes_nothing():
    # p = 1 zeroes the penalty whatever p_hat is
    got = fs_loss(torch.tensor([0.7], dtype=torch.float64), torch.tensor([1.0], dtype=torch.float64),
                  MatchIndexPairs([]), 0)
    assert float(got) == 0.0


def test_gradient_matches_finite_differences(rng):
    h = 1e-5
    for _ in range(25):
        n = int(rng.integers(1, 8))
        p_hat = torch.tensor(rng.uniform(0.05, 0.95, n), dtype=torch.float64, requires_grad=True)
        p = torch.tensor(rng.uniform(0, 1, n), dtype=torch.float64)
        matches = MatchIndexPairs([(0, int(rng.integers(n)))])
        fs_loss(p_hat, p, matches, 0).backward()
        for i in range(n):
            up, dn = p_hat.detach().clone(), p_hat.detach().clone()
            up[i] += h
            dn[i] -= h
            fd = (float(fs_loss(up, p, matches, 0)) - float(fs_loss(dn, p, matches, 0))) / (2 * h)
            assert float(p_hat.grad[i]) == pytest.approx(fd, rel=1e-4, abs=1e-10)


def test_config_validation():
    with pytest.raises(ValueError):
        FSLossConfig(tau=1.0)
    with pytest.raises(ValueError):
        FSLossConfig(alpha=-1)
    with pytest.raises(ValueError):
        FSLossConfig(top_k=0)
    with pytest.raises(ValueError):
        FSLossConfig(temperature=0)


def test_similarity_targets():
    emb = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    matches = MatchIndexPairs([(0, 2), (1, 0), (2, 1)])
    p = pseudo_similarity_targets(0, emb, matches, 4, tau=0.0, temperature=10.0)
    s10 = 1 / (1 + math.exp(-10))
    np.testing.assert_allclose(p.numpy(), [0.5, 1 / (1 + math.exp(10)), s10, 0.0], atol=1e-12)
    p = pseudo_similarity_targets(0, emb, matches, 4, tau=0.6, temperature=10.0)
    np.testing.assert_allclose(p.numpy(), [0.0, 0.0, s10, 0.0], atol=1e-12)
    with pytest.raises(ValueError):
        pseudo_similarity_targets(5, emb, matches, 4)


def test_predicted_similarity_rejects_mismatch():
    with pytest.raises(ValueError):
        predicted_similarity(np.ones(3), np.ones((2, 4)))
    with pytest.raises(ValueError):
        predicted_similarity(np.ones(2), np.zeros((1, 2)))


def test_cosine_loss_signs():
    emb = np.array([[1.0, 0.0]])
    contents = torch.tensor([[1.0, 0.0], [1.0, 0.0]], dtype=torch.float64)
    s = 1 / (1 + math.exp(-10))
    got = cosine_loss(emb, contents, MatchIndexPairs([(0, 0)]))
    # matched query earns -s, the unmatched duplicate pays +s
    assert float(got) == pytest.approx(0.0, abs=1e-12)
    got = cosine_loss(emb, contents[:1], MatchIndexPairs([(0, 0)]))
    assert float(got) == pytest.approx(-s)


def test_focal_loss_matches_formula():
    logits = torch.tensor([2.0, -1.0], dtype=torch.float64)
    targets = torch.tensor([1.0, 0.0], dtype=torch.float64)
    got = sigmoid_focal_loss(logits, targets)
    p = torch.sigmoid(logits)
    exp = torch.stack([-0.25 * (1 - p[0]) ** 2 * torch.log(p[0]), -0.75 * p[1] ** 2 * torch.log(1 - p[1])])
    torch.testing.assert_close(got, exp)


def test_giou_and_box_loss():
    a = torch.tensor([[0.5, 0.5, 0.2, 0.2]], dtype=torch.float64)
    assert float(elementwise_giou(a, a)) == pytest.approx(1.0)
    assert float(box_loss(a, a)) == pytest.approx(0.0)
    b = torch.tensor([[0.15, 0.15, 0.1, 0.1]], dtype=torch.float64)
    c = torch.tensor([[0.35, 0.35, 0.1, 0.1]], dtype=torch.float64)
    # unit squares one gap apart in a 3x3 enclosure (scaled by 0.1)
    assert float(elementwise_giou(b, c)) == pytest.approx(-7 / 9)


def test_hungarian_loss_normalisation():
    ann = np.array([[0.5, 0.5, 0.2, 0.2]])
    preds = torch.tensor([[0.5, 0.5, 0.2, 0.2], [0.1, 0.1, 0.1, 0.1]], dtype=torch.float64)
    logits = torch.tensor([3.0, -3.0], dtype=torch.float64)
    cls, box = hungarian_detection_loss(ann, preds, logits, MatchIndexPairs([(0, 0)]), return_parts=True)
    expected = sigmoid_focal_loss(logits, torch.tensor([1.0, 0.0], dtype=torch.float64)).sum()
    assert float(cls) == pytest.approx(float(expected))
    assert float(box) == pytest.approx(0.0)
    # no matches: normaliser is 1 and the box term vanishes
    cls0, box0 = hungarian_detection_loss(np.zeros((0, 4)), preds, logits, MatchIndexPairs([]), return_parts=True)
    assert float(box0) == 0.0 and float(cls0) > 0


def test_filter_keeps_matched_outside_top_k():
    logits = torch.tensor([5.0, 4.0, 3.0, -10.0])
    assert filter_queries(logits, 2).tolist() == [0, 1]
    assert filter_queries(logits, 2, matched=[3]).tolist() == [0, 1, 3]
    assert filter_queries(logits, 10).tolist() == [0, 1, 2, 3]
    kept = filter_queries(logits, 2, matched=[3])
    assert remap_matches(MatchIndexPairs([(0, 3), (1, 2)]), kept).pairs == [(0, 2)]


def test_total_loss_modes():
    parts = LossBreakdown(hungarian=1.5, fs=0.25, cosine=-0.5)
    assert total_loss(parts, 2.0) == 1.5 + 2.0 * 0.25
    assert total_loss(parts, mode="cos") == 1.0
    assert total_loss(parts, 0.0) == 1.5
    assert total_loss(parts, mode="hung") == 1.5


@pytest.mark.parametrize("tau", [0.0, 0.6])
def test_expected_fs_equals_mean_over_references(rng, tau):
    emb = torch.tensor(rng.normal(size=(4, 6)))
    contents = torch.tensor(rng.normal(size=(7, 6)), requires_grad=True)
    matches = MatchIndexPairs([(0, 2), (1, 5), (3, 0)])
    cfg = FSLossConfig(tau=tau)
    full = expected_fs_loss(emb, contents, matches, cfg)
    per_ref = [fs_loss(predicted_similarity(emb[m], contents), pseudo_similarity_targets(m, emb, matches, 7, tau),
                       matches, m, cfg) for m in range(4)]
    assert full.item() == pytest.approx(torch.stack(per_ref).mean().item(), abs=1e-12)
    g_full, = torch.autograd.grad(full, contents)
    g_mean, = torch.autograd.grad(torch.stack(per_ref).mean(), contents)
    assert torch.allclose(g_full, g_mean, atol=1e-12)
    with pytest.raises(ValueError):
        expected_fs_loss(torch.zeros((0, 6)), contents, matches)
