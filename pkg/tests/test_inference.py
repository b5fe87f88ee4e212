import numpy as np
import pytest

from refdet.inference import Detection, detect_agnostic, match_category_aware, nms, track_sot
from stubs import MovingStub, StubModel


def stub(rng, n=6, d=4):
    return StubModel(rng.normal(size=n), rng.uniform(0.2, 0.8, (n, 4)) * [1, 1, 0.3, 0.3], rng.normal(size=(n, d)))


IMG = np.zeros((64, 64, 3), np.uint8)


def test_detect_thresholds(rng):
    m = stub(rng)
    assert detect_agnostic(IMG, m, 1.0) == []
    dets = detect_agnostic(IMG, m, 0.0)
    assert len(dets) == 6
    conf = [d.confidence for d in dets]
    assert conf == sorted(conf, reverse=True)
    hi = {tuple(d.box) for d in detect_agnostic(IMG, m, 0.6)}
    lo = {tuple(d.box) for d in detect_agnostic(IMG, m, 0.4)}
    assert hi <= lo


def det(content):
    return Detection(np.array([0, 0, 1, 1.0]), 0.9, np.asarray(content, float))


def test_match_examples():
    ids, sims = match_category_aware([det([1, 0])], [[1, 0]], 10, 0.9)
    assert ids[0] == 0 and sims[0] == pytest.approx(0.9999546021312976, abs=1e-12)
    ids, sims = match_category_aware([det([1, 0])], [[0, 1]], 10, 0.6)
    assert ids[0] == -1 and sims[0] == 0.5
    # exclusive argmax; ties go to the lower index
    ids, _ = match_category_aware([det([1, 0])], [[1, 0], [1, 0]], 10, 0.0)
    assert ids[0] == 0
    with pytest.raises(ValueError):
        match_category_aware([det([1, 0, 0])], [[1, 0]])
    with pytest.raises(ValueError):
        match_category_aware([det([1, 0])], np.zeros((0, 2)))


def test_match_threshold_monotone(rng):
    dets = [det(rng.normal(size=5)) for _ in range(30)]
    refs = rng.normal(size=(4, 5))
    counts = [(match_category_aware(dets, refs, 10, t)[0] >= 0).sum() for t in np.linspace(0, 1, 11)]
    assert all(a >= b for a, b in zip(counts, counts[1:]))


def test_nms():
    boxes = np.array([[0, 0, 10, 10], [1, 1, 10, 10], [20, 20, 30, 30.0]])
    assert list(nms(boxes, [0.9, 0.8, 0.7], 0.5)) == [0, 2]


def test_track_static_and_fallback():
    frames = [np.zeros((32, 32, 3), np.uint8) for _ in range(5)]
    for f in frames:
        f[10:20, 5:15] = 255

    class Emb:
        def encode_box(self, image, box):
            return np.array([1.0, 0.0])

    out = track_sot(frames, [5, 10, 15, 20], MovingStub([1.0, 0.0]), Emb())
    assert len(out) == 5
    for box, _ in out[1:]:
        np.testing.assert_allclose(box, [5, 10, 15, 20])
    empty = StubModel(np.zeros((0,)), np.zeros((0, 4)), np.zeros((0, 2)))
    out = track_sot(frames[:3], [5, 10, 15, 20], empty, Emb())
    assert [c for _, c in out] == [1.0, 0.0, 0.0]
    with pytest.raises(ValueError):
        track_sot(frames[:1], [5, 10, 15, 20], empty, Emb())
