import numpy as np
import pytest

from refdet.datagen import COLORS, SceneSpec, generate_scene, paint, render_alpha
from refdet.encoder import EmbeddingCache, ToyEmbedder, build_cache, crop_and_pad


def single_object(shape, color, size, angle=0.0, canvas=64):
    img = np.full((canvas, canvas, 3), 120.0)
    a = render_alpha(shape, size, angle)
    o = (canvas - a.shape[0]) // 2
    paint(img, a, o, o, COLORS[color])
    return img.astype(np.uint8), (o, o, o + a.shape[0], o + a.shape[0])


def test_crop_square_no_padding():
    img = np.arange(20 * 20 * 3, dtype=np.uint8).reshape(20, 20, 3)
    np.testing.assert_array_equal(crop_and_pad(img, (0, 0, 20, 20), out_size=None), img)


def test_crop_pads_symmetrically():
    img = np.full((40, 40, 3), 200, np.uint8)
    crop = crop_and_pad(img, (10, 5, 20, 25), out_size=None)  # 10 wide, 20 tall
    assert crop.shape == (20, 20, 3)
    assert (crop[:, :5] == 0).all() and (crop[:, 15:] == 0).all()
    assert (crop[:, 5:15] == 200).all()


def test_crop_zero_area():
    with pytest.raises(ValueError):
        crop_and_pad(np.zeros((10, 10, 3), np.uint8), (3, 3, 3, 8))


def test_embedding_contract():
    emb = ToyEmbedder()
    img, box = single_object("star", "green", 24)
    v = emb.encode_box(img, box)
    assert v.shape == (64,)
    assert np.linalg.norm(v) == pytest.approx(1.0)
    np.testing.assert_array_equal(v, emb.encode_box(img, box))


def test_blank_crop_fallback():
    v = ToyEmbedder().encode(np.full((32, 32, 3), 128, np.uint8))
    assert np.linalg.norm(v) == pytest.approx(1.0)
    assert np.allclose(v[:24], v[0])


def test_scale_invariance():
    emb = ToyEmbedder()
    small = emb.encode_box(*single_object("circle", "red", 14))
    large = emb.encode_box(*single_object("circle", "red", 40))
    assert small @ large >= 0.99


def test_red_circle_vs_blue_square():
    emb = ToyEmbedder()
    a = emb.encode_box(*single_object("circle", "red", 24))
    b = emb.encode_box(*single_object("square", "blue", 24))
    assert a @ b <= 0.5


def test_separability_and_centroid_accuracy():
    emb = ToyEmbedder()
    spec = SceneSpec(min_objects=1, max_objects=1)
    vecs, cats = [], []
    for s in range(1000):
        sample = generate_scene(40_000 + s, spec)
        vecs.append(emb.encode_box(sample.image, sample.boxes[0]))
        cats.append(int(sample.categories[0]))
    E, c = np.asarray(vecs), np.asarray(cats)
    C = E @ E.T
    same = c[:, None] == c[None, :]
    off = ~np.eye(len(c), dtype=bool)
    assert C[same & off].mean() - C[~same].mean() >= 0.2
    centroids = np.stack([E[c == k].mean(0) for k in range(12)])
    assert (np.argmax(E @ centroids.T, 1) == c).mean() >= 0.95


def test_patch_features_shape():
    f = ToyEmbedder().patch_features(np.zeros((64, 64, 3), np.uint8), 4)
    assert f.shape == (16, 16, 64)
    np.testing.assert_allclose(f.sum(-1), 1.0)


def test_cache_round_trip(tmp_path, rng):
    cache = EmbeddingCache(8)
    for img in (3, 1):
        for k in range(2):
            cache.put(img, k, rng.normal(size=8))
    assert cache.count == 4
    with pytest.raises(KeyError):
        cache.put(1, 0, np.zeros(8))
    path = tmp_path / "c.rfcd"
    cache.save(path)
    data = path.read_bytes()
    assert data[:4] == b"RFCD"
    back = EmbeddingCache.load(path)
    for key, vec in cache.entries.items():
        assert back.get(*key).tobytes() == vec.tobytes()
    assert back.for_image(1).shape == (2, 8)
    # records are sorted by key, so rebuilding in another order is byte-identical
    again = EmbeddingCache(8)
    for key in sorted(cache.entries, reverse=True):
        again.put(*key, cache.entries[key])
    assert again.to_bytes() == data


def test_cache_corruption():
    with pytest.raises(ValueError):
        EmbeddingCache.from_bytes(b"NOPE" + bytes(20))
    good = EmbeddingCache(2)
    good.put(0, 0, [1.0, 0.0])
    with pytest.raises(ValueError):
        EmbeddingCache.from_bytes(good.to_bytes()[:-1])


def test_build_cache_counts_and_missing_images():
    emb = ToyEmbedder()
    images, boxes = {}, {}
    for i in range(3):
        s = generate_scene(i, SceneSpec(min_objects=2, max_objects=2))
        images[i], boxes[i] = s.image, s.boxes
    cache, errors = build_cache(images, boxes, emb)
    assert cache.count == 6 and errors == []
    boxes[99] = np.array([[0, 0, 5, 5.0]])
    cache2, errors2 = build_cache(images, boxes, emb)
    assert cache2.count == 6 and len(errors2) == 1
    assert cache2.to_bytes() == cache.to_bytes()
