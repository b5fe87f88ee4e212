"""Desk-scale datasets: training mosaics with pseudo boxes, a test split with
held-out categories, and one-shot reference sets.

Everything is a deterministic function of the config; expensive pieces
(maskcut over every tile) can be memoised in an ``.npz`` file keyed by a digest
of the data and pseudo-box settings.
"""
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .datagen import (CATEGORY_NAMES, SceneSpec, category_id, generate_scene, mosaic_tile,
                      perturb_boxes, to_coco)
from .encoder import ToyEmbedder, crop_and_pad
from .maskcut import maskcut

log = logging.getLogger(__name__)

# independent RNG streams under one dataset seed
_TRAIN, _TEST, _REF, _WEAK, _VIDEO = 1, 2, 3, 4, 5
_TEST_ONLY = ("num_test_mosaics", "num_reference_sets")


def _seed(*parts):
    return np.random.SeedSequence([int(p) for p in parts])


def base_categories(held_out):
    held = {category_id(n) for n in held_out}
    return tuple(c for c in range(len(CATEGORY_NAMES)) if c not in held)


def tile_spec(data_cfg, categories):
    return SceneSpec(categories=tuple(categories), image_size=data_cfg.tile_size,
                     min_objects=data_cfg.min_objects, max_objects=data_cfg.max_objects,
                     min_size=data_cfg.min_size, max_size=data_cfg.max_size)


def make_mosaics(data_cfg, stream, categories, count, start_id=0):
    """``count`` mosaics, each tiled from four freshly generated scenes."""
    spec = tile_spec(data_cfg, categories)
    out = []
    for i in range(count):
        tiles = [generate_scene(_seed(data_cfg.seed, stream, i, k), spec) for k in range(4)]
        out.append(mosaic_tile(tiles, image_id=start_id + i))
    return out


def mosaic_pseudo_boxes(image, tile_size, embedder, pseudo_cfg):
    """Maskcut on each quadrant separately, boxes shifted into mosaic pixels.

    The source images of a mosaic are independent photos, so pseudo boxes are
    discovered per source image, as they would be before tiling.
    """
    boxes = []
    H, W = image.shape[:2]
    for oy in range(0, H, tile_size):
        for ox in range(0, W, tile_size):
            tile = image[oy:oy + tile_size, ox:ox + tile_size]
            feats = embedder.patch_features(tile, pseudo_cfg.patch_size)
            for _, b in maskcut(feats, pseudo_cfg.n_objects, pseudo_cfg.patch_size,
                                pseudo_cfg.affinity_tau, min_patches=pseudo_cfg.min_patches):
                boxes.append(b + np.array([ox, oy, ox, oy]))
    return np.asarray(boxes, dtype=np.float64).reshape(-1, 4)


def weak_pseudo_boxes(samples, pseudo_cfg, data_seed):
    """Ground-truth boxes with categories dropped, then subsampled / jittered."""
    out = []
    for s in samples:
        rng = np.random.default_rng(_seed(data_seed, _WEAK, s.image_id))
        boxes, _ = perturb_boxes(s.boxes, rng, pseudo_cfg.box_ratio, pseudo_cfg.noise_ratio, s.size)
        out.append(boxes)
    return out


def embed_boxes(image, boxes, embedder):
    return embedder.encode_boxes(image, boxes).astype(np.float32)


@dataclass
class TrainingSet:
    images: np.ndarray          # (K, H, W, 3) uint8
    image_ids: np.ndarray       # (K,)
    pseudo_boxes: list          # K arrays (M_k, 4) xyxy pixels
    embeddings: list            # K arrays (M_k, D) float32

    def __len__(self):
        return len(self.images)

    @property
    def image_size(self):
        return self.images.shape[1]


def _pack(ts):
    counts = np.array([len(b) for b in ts.pseudo_boxes], dtype=np.int64)
    dim = ts.embeddings[0].shape[1] if ts.embeddings else 0
    return dict(images=ts.images, image_ids=ts.image_ids, counts=counts,
                boxes=np.concatenate(ts.pseudo_boxes) if counts.sum() else np.zeros((0, 4)),
                embeddings=np.concatenate(ts.embeddings) if counts.sum() else np.zeros((0, dim), np.float32))


def _unpack(z):
    splits = np.cumsum(z["counts"])[:-1]
    return TrainingSet(z["images"], z["image_ids"], list(np.split(z["boxes"], splits)),
                       list(np.split(z["embeddings"], splits)))


def _train_digest(config):
    """Hash of the settings that shape the training split (test-only fields excluded)."""
    data = {k: v for k, v in config.to_dict()["data"].items() if k not in _TEST_ONLY}
    blob = json.dumps({"data": data, "pseudo": config.to_dict()["pseudo"]}, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def build_training_set(config, embedder=None, cache_dir=None):
    """Mosaics of base-category scenes with maskcut (or weak) pseudo boxes."""
    embedder = embedder or ToyEmbedder(config.model.embed_dim)
    path = None
    if cache_dir is not None:
        key = _train_digest(config) + f"-d{embedder.embed_dim}"
        path = Path(cache_dir) / f"train-{key}.npz"
        if path.exists():
            with np.load(path) as z:
                return _unpack(z)
    d = config.data
    mosaics = make_mosaics(d, _TRAIN, base_categories(d.held_out), d.num_mosaics)
    if config.pseudo.source == "weak":
        boxes = weak_pseudo_boxes(mosaics, config.pseudo, d.seed)
    elif config.pseudo.source == "maskcut":
        boxes = [mosaic_pseudo_boxes(m.image, d.tile_size, embedder, config.pseudo) for m in mosaics]
    else:
        raise ValueError(f"unknown pseudo-box source {config.pseudo.source!r}")
    embs = [embed_boxes(m.image, b, embedder) for m, b in zip(mosaics, boxes)]
    ts = TrainingSet(np.stack([m.image for m in mosaics]), np.array([m.image_id for m in mosaics]), boxes, embs)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp.npz")
        np.savez(tmp, **_pack(ts))
        tmp.replace(path)
    return ts


def build_test_set(config):
    """Mosaics over all categories; held-out objects are the evaluation targets,
    base-category objects act as distractors."""
    d = config.data
    return make_mosaics(d, _TEST, tuple(range(len(CATEGORY_NAMES))), d.num_test_mosaics, start_id=10 ** 6)


@dataclass
class ReferenceSet:
    set_id: int
    categories: list            # hidden category id per reference (evaluation only)
    crops: list                 # square crops, one per category
    embeddings: np.ndarray      # (R, D)


def build_reference_sets(config, embedder=None):
    """``num_reference_sets`` groups with one exemplar crop per held-out category."""
    embedder = embedder or ToyEmbedder(config.model.embed_dim)
    d = config.data
    out = []
    for s in range(d.num_reference_sets):
        cats, crops, embs = [], [], []
        for name in d.held_out:
            c = category_id(name)
            spec = SceneSpec(categories=(c,), image_size=d.tile_size, min_objects=1, max_objects=1,
                             min_size=d.min_size, max_size=d.max_size)
            sample = generate_scene(_seed(d.seed, _REF, s, c), spec)
            crop = crop_and_pad(sample.image, sample.boxes[0], embedder.input_size)
            cats.append(c)
            crops.append(crop)
            embs.append(embedder.encode(crop))
        out.append(ReferenceSet(s, cats, crops, np.asarray(embs)))
    return out


# ---------------------------------------------------------------------------
# on-disk layout used by the command line
# ---------------------------------------------------------------------------

def write_split(samples, out_dir, extra_info=None):
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    names = [f"images/{int(s.image_id):07d}.png" for s in samples]
    for s, n in zip(samples, names):
        Image.fromarray(s.image).save(out_dir / n, optimize=False)
    manifest, sidecar = to_coco(samples, names)
    manifest["info"] = dict(extra_info or {})
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    (out_dir / "eval_sidecar.json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))
    return manifest


def write_reference_sets(ref_sets, out_dir):
    out_dir = Path(out_dir)
    (out_dir / "crops").mkdir(parents=True, exist_ok=True)
    listing = []
    for rs in ref_sets:
        entries = []
        for c, crop in zip(rs.categories, rs.crops):
            name = f"crops/set{rs.set_id}_{CATEGORY_NAMES[c]}.png"
            Image.fromarray(crop).save(out_dir / name)
            entries.append({"crop": name, "category": CATEGORY_NAMES[c]})
        listing.append({"set_id": rs.set_id, "references": entries})
    (out_dir / "sets.json").write_text(json.dumps(listing, indent=1, sort_keys=True))


def load_split(split_dir):
    """``(manifest, {image_id: image array})`` for a split written by :func:`write_split`."""
    split_dir = Path(split_dir)
    manifest_path = split_dir / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json in {split_dir}")
    manifest = json.loads(manifest_path.read_text())
    images = {}
    for img in manifest["images"]:
        images[int(img["id"])] = lambda p=split_dir / img["file_name"]: np.asarray(Image.open(p).convert("RGB"))
    return manifest, images


def load_reference_sets(sets_path, embedder):
    sets_path = Path(sets_path)
    listing = json.loads(sets_path.read_text())
    out = []
    for entry in listing:
        cats, crops = [], []
        for ref in entry["references"]:
            crop = np.asarray(Image.open(sets_path.parent / ref["crop"]).convert("RGB"))
            crops.append(crop)
            cats.append(category_id(ref["category"]))
        embs = np.asarray([embedder.encode(c) for c in crops])
        out.append(ReferenceSet(int(entry["set_id"]), cats, crops, embs))
    return out


def samples_from_split(split_dir):
    """Rebuild :class:`SyntheticSample` objects (with hidden categories) from disk."""
    from .datagen import SyntheticSample
    from .geometry import box_convert
    split_dir = Path(split_dir)
    manifest, images = load_split(split_dir)
    sidecar_path = split_dir / "eval_sidecar.json"
    sidecar = json.loads(sidecar_path.read_text())["annotation_category"] if sidecar_path.exists() else {}
    per = {int(i["id"]): ([], []) for i in manifest["images"]}
    for a in manifest["annotations"]:
        per[int(a["image_id"])][0].append(box_convert(np.asarray(a["bbox"]), "xywh", "xyxy"))
        per[int(a["image_id"])][1].append(int(sidecar.get(str(a["id"]), -1)))
    return [SyntheticSample(images[i](), np.asarray(b).reshape(-1, 4), np.asarray(c, dtype=np.int64), i)
            for i, (b, c) in sorted(per.items())]


def write_pseudo_json(path, boxes_by_image, scores_by_image=None, info=None):
    """Pseudo boxes as COCO annotations ``{id, image_id, bbox (xywh), score}``, no category."""
    from .geometry import box_convert
    annotations, ann_id = [], 1
    for image_id in sorted(boxes_by_image):
        boxes = np.asarray(boxes_by_image[image_id], dtype=np.float64).reshape(-1, 4)
        scores = (scores_by_image or {}).get(image_id, np.ones(len(boxes)))
        for box, score in zip(boxes, scores):
            annotations.append({"id": ann_id, "image_id": int(image_id),
                                "bbox": [round(float(v), 6) for v in box_convert(box, "xyxy", "xywh")],
                                "score": round(float(score), 6)})
            ann_id += 1
    doc = {"info": dict(info or {}), "images": [{"id": int(i)} for i in sorted(boxes_by_image)],
           "annotations": annotations}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))
    return doc


def read_pseudo_json(path):
    """``(info, {image_id: (K, 4) xyxy})``; images listed without boxes map to empty arrays."""
    from .datagen import weak_boxes_source
    doc = json.loads(Path(path).read_text())
    return doc.get("info", {}), weak_boxes_source(str(path))


def training_set_from_files(split_dir, pseudo_path, cache_path):
    """Assemble a :class:`TrainingSet` from a written split, pseudo JSON and embedding cache."""
    from .encoder import EmbeddingCache
    manifest, images = load_split(split_dir)
    _, boxes = read_pseudo_json(pseudo_path)
    cache = EmbeddingCache.load(cache_path)
    ids = sorted(int(i["id"]) for i in manifest["images"])
    imgs, pb, embs = [], [], []
    for i in ids:
        b = boxes.get(i, np.zeros((0, 4)))
        e = cache.for_image(i)
        if len(e) != len(b):
            raise ValueError(f"image {i}: {len(b)} pseudo boxes but {len(e)} cached embeddings")
        imgs.append(images[i]())
        pb.append(b)
        embs.append(e.astype(np.float32))
    return TrainingSet(np.stack(imgs), np.asarray(ids), pb, embs)
