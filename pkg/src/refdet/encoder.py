"""Reference embeddings: crop preparation, the deterministic toy embedder and
the on-disk embedding cache.

Any object with ``embed_dim`` and ``encode(crop) -> (D,) unit vector`` can stand
in for :class:`ToyEmbedder`.
"""
import logging
import struct
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

HIST_BINS = 8
PATCH_LEVELS = 4
CHROMA_THRESHOLD = 40.0
CORE_CHROMA = 100.0
# Fixed affine preprocessing, measured once on generated crops and frozen.
# The colour histogram is centred on the palette mean so unrelated colours
# point away from each other; shape moments are centred on the mean over
# shapes and scaled by the inverse between-shape spread (capped at 6).
_COLOR_CENTER = np.array([
    0.0, 0.375, 0.056, 0.019, 0.013, 0.029, 0.188, 0.0,
    0.001, 0.377, 0.059, 0.024, 0.026, 0.194, 0.0, 0.0,
    0.001, 0.375, 0.057, 0.019, 0.013, 0.029, 0.187, 0.0,
])
_SHAPE_CENTER = np.array([0.908, 0.01, 0.166, 0.117, 0.208, 0.167, 0.39])
_SHAPE_SCALE = np.array([6.0, 0.0, 3.7, 6.0, 3.0, 3.7, 6.0])
SHAPE_WEIGHT = 0.4


def crop_and_pad(image, box, out_size=32):
    """Crop ``box`` (xyxy pixels), zero-pad symmetrically to a square, resize.

    The crop is snapped outward to whole pixels. Odd padding puts the extra
    pixel on the right / bottom.
    """
    img = np.asarray(image)
    h, w = img.shape[:2]
    x0, y0, x1, y1 = (float(v) for v in box)
    xi0, yi0 = max(int(np.floor(x0)), 0), max(int(np.floor(y0)), 0)
    xi1, yi1 = min(int(np.ceil(x1)), w), min(int(np.ceil(y1)), h)
    if xi1 <= xi0 or yi1 <= yi0:
        raise ValueError(f"zero-area crop for box {box}")
    crop = img[yi0:yi1, xi0:xi1]
    ch, cw = crop.shape[:2]
    side = max(ch, cw)
    padded = np.zeros((side, side) + crop.shape[2:], dtype=crop.dtype)
    py, px = (side - ch) // 2, (side - cw) // 2
    padded[py:py + ch, px:px + cw] = crop
    if out_size is None or side == out_size:
        return padded
    return np.asarray(Image.fromarray(padded).resize((out_size, out_size), Image.BILINEAR))


def color_histogram(pixels):
    """Per-channel 8-bin histograms of an (K, 3) pixel array, each summing to 1."""
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 3)
    bins = np.clip((pixels / 256.0 * HIST_BINS).astype(np.int64), 0, HIST_BINS - 1)
    hist = np.zeros((3, HIST_BINS))
    for c in range(3):
        hist[c] = np.bincount(bins[:, c], minlength=HIST_BINS)
    hist /= max(len(pixels), 1)
    return hist.ravel()


def shape_descriptors(mask):
    """Seven rotation- and scale-invariant moment descriptors of a silhouette.

    roundness (1 for a disc), normalised complex moments ``|c_k0|`` for
    k = 2..6, and the relative spread of the radial distance.
    """
    ys, xs = np.nonzero(mask)
    if xs.size < 3:
        return np.zeros(7)
    z = (xs - xs.mean()) + 1j * (ys - ys.mean())
    r = np.abs(z)
    mean_r2 = (r ** 2).mean()
    out = np.empty(7)
    out[0] = xs.size / (2.0 * np.pi * mean_r2) if mean_r2 > 0 else 1.0
    for i, k in enumerate(range(2, 7), start=1):
        denom = (r ** k).mean()
        out[i] = abs((z ** k).mean()) / denom if denom > 0 else 0.0
    out[6] = r.std() / r.mean() if r.mean() > 0 else 0.0
    return out


def chroma(crop):
    c = np.asarray(crop, dtype=np.float64)
    return c.max(axis=-1) - c.min(axis=-1)


def silhouette(crop):
    """Coloured-object pixels (the background is gray)."""
    return chroma(crop) > CHROMA_THRESHOLD


def color_core(crop):
    """Strongly saturated pixels, which skips anti-aliased rims; falls back to
    the silhouette for tiny objects."""
    core = chroma(crop) > CORE_CHROMA
    return core if core.sum() >= 3 else silhouette(crop)


@dataclass
class ToyEmbedder:
    """Centred colour histogram plus scaled shape moments, zero-padded to
    ``embed_dim`` and L2-normalised."""

    embed_dim: int = 64
    input_size: int = 32
    deterministic: bool = field(default=True, init=False)

    def __post_init__(self):
        if self.embed_dim < 3 * HIST_BINS + 7:
            raise ValueError(f"embed_dim must be >= {3 * HIST_BINS + 7}")

    def encode(self, crop):
        crop = np.asarray(crop)
        mask = silhouette(crop)
        vec = np.zeros(self.embed_dim)
        if mask.sum() < 3:
            # blank crop: uniform histogram, no shape signal
            vec[:3 * HIST_BINS] = 1.0 / HIST_BINS
        else:
            hist = color_histogram(crop[color_core(crop)])
            vec[:3 * HIST_BINS] = hist / np.linalg.norm(hist) - _COLOR_CENTER
            shape = (shape_descriptors(mask) - _SHAPE_CENTER) * _SHAPE_SCALE
            vec[3 * HIST_BINS:3 * HIST_BINS + 7] = SHAPE_WEIGHT * shape
        return vec / np.linalg.norm(vec)

    def encode_box(self, image, box):
        return self.encode(crop_and_pad(image, box, self.input_size))

    def encode_boxes(self, image, boxes):
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        if len(boxes) == 0:
            return np.zeros((0, self.embed_dim))
        return np.stack([self.encode_box(image, b) for b in boxes])

    def patch_features(self, image, patch_size):
        """Joint RGB histogram (4 levels per channel) of every patch, shape (h, w, 64).

        Distinct colours land in disjoint bins, so patch cosines separate object
        from background even when the two share a single channel value.
        """
        img = np.asarray(image, dtype=np.float64)
        H, W = img.shape[:2]
        gh, gw = H // patch_size, W // patch_size
        if gh < 2 or gw < 2:
            raise ValueError("image too small for the patch grid")
        q = np.clip((img[:gh * patch_size, :gw * patch_size] / 256.0 * PATCH_LEVELS).astype(np.int64),
                    0, PATCH_LEVELS - 1)
        code = (q[..., 0] * PATCH_LEVELS + q[..., 1]) * PATCH_LEVELS + q[..., 2]
        code = code.reshape(gh, patch_size, gw, patch_size).transpose(0, 2, 1, 3).reshape(gh, gw, -1)
        nbins = PATCH_LEVELS ** 3
        hist = np.zeros((gh * gw, nbins))
        flat = code.reshape(gh * gw, -1)
        np.add.at(hist, (np.repeat(np.arange(gh * gw), flat.shape[1]), flat.ravel()), 1.0)
        return (hist / flat.shape[1]).reshape(gh, gw, nbins)


# ---------------------------------------------------------------------------
# embedding cache
# ---------------------------------------------------------------------------

MAGIC = b"RFCD"
VERSION = 1
_HEADER = struct.Struct("<4sIIQ")
_KEY = struct.Struct("<QI")


@dataclass
class EmbeddingCache:
    embed_dim: int
    entries: dict = field(default_factory=dict)

    @property
    def count(self):
        return len(self.entries)

    def put(self, image_id, box_index, vector):
        key = (int(image_id), int(box_index))
        if key in self.entries:
            raise KeyError(f"duplicate cache key {key}")
        vec = np.asarray(vector, dtype=np.float32).ravel()
        if vec.shape[0] != self.embed_dim:
            raise ValueError(f"expected dim {self.embed_dim}, got {vec.shape[0]}")
        self.entries[key] = vec

    def get(self, image_id, box_index):
        return self.entries[(int(image_id), int(box_index))]

    def for_image(self, image_id):
        keys = sorted(k for k in self.entries if k[0] == int(image_id))
        if not keys:
            return np.zeros((0, self.embed_dim), dtype=np.float32)
        return np.stack([self.entries[k] for k in keys])

    def to_bytes(self):
        parts = [_HEADER.pack(MAGIC, VERSION, self.embed_dim, self.count)]
        for key in sorted(self.entries):
            parts.append(_KEY.pack(*key))
            parts.append(self.entries[key].astype("<f4").tobytes())
        return b"".join(parts)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def from_bytes(cls, data):
        magic, version, dim, count = _HEADER.unpack_from(data, 0)
        if magic != MAGIC:
            raise ValueError("not an embedding cache (bad magic)")
        if version != VERSION:
            raise ValueError(f"unsupported cache version {version}")
        cache = cls(dim)
        off = _HEADER.size
        rec = _KEY.size + 4 * dim
        if len(data) != off + count * rec:
            raise ValueError("truncated embedding cache")
        for _ in range(count):
            image_id, box_index = _KEY.unpack_from(data, off)
            vec = np.frombuffer(data, dtype="<f4", count=dim, offset=off + _KEY.size).astype(np.float32)
            cache.entries[(image_id, box_index)] = vec
            off += rec
        return cache

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def build_cache(images, pseudo_boxes, embedder):
    """Embed every pseudo box once.

    ``images`` maps image id to an array (or a callable returning one);
    ``pseudo_boxes`` maps image id to (K, 4) xyxy boxes. Returns the cache and a
    list of per-entry error records for images that could not be loaded.
    """
    cache = EmbeddingCache(embedder.embed_dim)
    errors = []
    for image_id in sorted(pseudo_boxes):
        boxes = np.asarray(pseudo_boxes[image_id], dtype=np.float64).reshape(-1, 4)
        try:
            img = images[image_id]
            if callable(img):
                img = img()
        except (KeyError, OSError) as exc:
            for k in range(len(boxes)):
                errors.append({"image_id": int(image_id), "box_index": k, "error": str(exc)})
            log.warning("skipping image %s: %s", image_id, exc)
            continue
        for k, box in enumerate(boxes):
            cache.put(image_id, k, embedder.encode_box(img, box))
    return cache, errors
