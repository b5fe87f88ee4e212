"""Synthetic scenes with hidden categories, mosaic tiling, reference sampling
and the weakly supervised box source.

Categories are shape x colour pairs. The category id of each object is kept on
:class:`SyntheticSample` for evaluation; training code only ever sees boxes.
"""
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import box_convert, iou_matrix

SHAPES = ("circle", "square", "triangle", "star")
COLORS = {
    # channel values sit at 8-bin histogram centres so jitter stays in-bin
    "red": (208, 48, 48),
    "green": (48, 176, 48),
    "blue": (48, 48, 208),
}
COLOR_NAMES = tuple(COLORS)
CATEGORY_NAMES = tuple(f"{c}_{s}" for s in SHAPES for c in COLOR_NAMES)
DEFAULT_HELD_OUT = ("red_star", "green_triangle", "blue_circle")

_SUPERSAMPLE = 4


def category_id(name):
    return CATEGORY_NAMES.index(name)


@dataclass
class SceneSpec:
    categories: tuple = tuple(range(len(CATEGORY_NAMES)))
    image_size: int = 64
    min_objects: int = 1
    max_objects: int = 3
    min_size: float = 14.0
    max_size: float = 26.0
    overlap_cap: float = 0.0
    color_jitter: int = 12
    background_range: tuple = (70, 180)
    noise_amplitude: float = 6.0
    max_retries: int = 200

    def __post_init__(self):
        if not 1 <= self.min_objects <= self.max_objects <= 6:
            raise ValueError("object count range must satisfy 1 <= min <= max <= 6")
        if not 0 < self.min_size <= self.max_size < self.image_size:
            raise ValueError("size range must fit the image")
        if not self.categories:
            raise ValueError("need at least one category")


@dataclass
class SyntheticSample:
    image: np.ndarray                     # H x W x 3 uint8
    boxes: np.ndarray                     # K x 4 xyxy pixels
    categories: np.ndarray = field(default=None)  # K hidden ids, evaluation only
    image_id: int = 0

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        if self.categories is None:
            self.categories = np.full(len(self.boxes), -1, dtype=np.int64)
        self.categories = np.asarray(self.categories, dtype=np.int64)

    @property
    def size(self):
        h, w = self.image.shape[:2]
        return w, h


# ---------------------------------------------------------------------------
# rasterisation
# ---------------------------------------------------------------------------


def _polygon_mask(xs, ys, verts):
    """Even-odd point-in-polygon test on sample grids."""
    inside = np.zeros(xs.shape, dtype=bool)
    n = len(verts)
    for i in range(n):
        x1, y1 = verts[i]
        x2, y2 = verts[(i + 1) % n]
        cond = (y1 > ys) != (y2 > ys)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = (x2 - x1) * (ys - y1) / (y2 - y1) + x1
        inside ^= cond & (xs < xint)
    return inside


def _shape_vertices(shape, size, angle):
    r = size / 2.0
    if shape == "square":
        s = r / math.sqrt(2.0)
        base = [(-s, -s), (s, -s), (s, s), (-s, s)]
        angle = angle % (math.pi / 2)
        # rotated square must still have extent ``size``; shrink accordingly
        scale = 1.0 / (abs(math.cos(angle)) + abs(math.sin(angle))) * math.sqrt(2.0)
        base = [(x * scale, y * scale) for x, y in base]
    elif shape == "triangle":
        base = [(r * math.cos(a), r * math.sin(a)) for a in (-math.pi / 2, math.pi / 6, 5 * math.pi / 6)]
    elif shape == "star":
        base = []
        for k in range(10):
            rad = r if k % 2 == 0 else r * 0.45
            a = -math.pi / 2 + k * math.pi / 5
            base.append((rad * math.cos(a), rad * math.sin(a)))
    else:
        raise ValueError(f"no polygon for {shape}")
    ca, sa = math.cos(angle), math.sin(angle)
    return [(x * ca - y * sa, x * sa + y * ca) for x, y in base]


def render_alpha(shape, size, angle=0.0):
    """Anti-aliased coverage mask of one shape on its own tight square canvas.

    Returns an ``(S, S)`` float array in [0, 1] where ``S = ceil(size) + 2``.
    The shape is centred on the canvas.
    """
    side = int(math.ceil(size)) + 2
    ss = _SUPERSAMPLE
    coords = (np.arange(side * ss) + 0.5) / ss - side / 2.0
    xs, ys = np.meshgrid(coords, coords)
    if shape == "circle":
        inside = xs ** 2 + ys ** 2 <= (size / 2.0) ** 2
    else:
        inside = _polygon_mask(xs, ys, _shape_vertices(shape, size, angle))
    return inside.reshape(side, ss, side, ss).mean(axis=(1, 3))


def _alpha_box(alpha, ox, oy):
    ys, xs = np.nonzero(alpha >= 0.5)
    if xs.size == 0:
        return None
    return np.array([ox + xs.min(), oy + ys.min(), ox + xs.max() + 1, oy + ys.max() + 1], dtype=np.float64)


def paint(image, alpha, ox, oy, color):
    """Alpha-blend ``color`` into ``image`` (float H x W x 3) at offset (ox, oy)."""
    h, w = image.shape[:2]
    ah, aw = alpha.shape
    x0, y0 = max(ox, 0), max(oy, 0)
    x1, y1 = min(ox + aw, w), min(oy + ah, h)
    if x0 >= x1 or y0 >= y1:
        return
    a = alpha[y0 - oy:y1 - oy, x0 - ox:x1 - ox, None]
    image[y0:y1, x0:x1] = image[y0:y1, x0:x1] * (1 - a) + np.asarray(color, dtype=np.float64) * a


def background(rng, h, w, spec):
    level = rng.uniform(*spec.background_range)
    img = np.full((h, w, 3), level, dtype=np.float64)
    img += rng.uniform(-spec.noise_amplitude, spec.noise_amplitude, size=(h, w, 3))
    return img


def object_color(rng, category, jitter):
    color_name = CATEGORY_NAMES[category].split("_")[0]
    base = np.asarray(COLORS[color_name], dtype=np.float64)
    return np.clip(base + rng.integers(-jitter, jitter + 1, size=3), 0, 255)


def generate_scene(rng_seed, spec=None, image_id=0):
    """Deterministic synthetic image for a given seed."""
    spec = spec or SceneSpec()
    rng = np.random.default_rng(rng_seed)
    H = W = spec.image_size
    img = background(rng, H, W, spec)
    n_obj = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    boxes, cats, layers = [], [], []
    retries = 0
    while len(boxes) < n_obj:
        if retries >= spec.max_retries:
            raise ValueError(f"could not place {n_obj} objects under overlap cap {spec.overlap_cap}")
        retries += 1
        cat = int(spec.categories[rng.integers(len(spec.categories))])
        shape = CATEGORY_NAMES[cat].split("_")[1]
        size = float(rng.uniform(spec.min_size, spec.max_size))
        angle = float(rng.uniform(0, 2 * math.pi))
        alpha = render_alpha(shape, size, angle)
        side = alpha.shape[0]
        ox = int(rng.integers(0, W - side + 1))
        oy = int(rng.integers(0, H - side + 1))
        box = _alpha_box(alpha, ox, oy)
        if box is None:
            continue
        if boxes:
            ious = iou_matrix(box[None], np.stack(boxes))[0]
            if spec.overlap_cap <= 0:
                if np.any(_intersects(box, np.stack(boxes))):
                    continue
            elif ious.max() > spec.overlap_cap:
                continue
        boxes.append(box)
        cats.append(cat)
        layers.append((alpha, ox, oy, object_color(rng, cat, spec.color_jitter)))
    for alpha, ox, oy, color in layers:
        paint(img, alpha, ox, oy, color)
    image = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return SyntheticSample(image, np.stack(boxes), np.asarray(cats), image_id)


def _intersects(box, others):
    # touching edges do not count; a one-pixel gap is enforced
    return ~((others[:, 0] >= box[2] + 1) | (others[:, 2] + 1 <= box[0])
             | (others[:, 1] >= box[3] + 1) | (others[:, 3] + 1 <= box[1]))


def mosaic_tile(samples, image_id=0):
    """Tile four equally sized samples into one 2H x 2W image.

    Order is top-left, top-right, bottom-left, bottom-right.
    """
    if len(samples) != 4:
        raise ValueError("mosaic needs exactly four samples")
    shapes = {s.image.shape for s in samples}
    if len(shapes) != 1:
        raise ValueError(f"mosaic inputs differ in size: {sorted(shapes)}")
    h, w = samples[0].image.shape[:2]
    out = np.zeros((2 * h, 2 * w, 3), dtype=samples[0].image.dtype)
    boxes, cats = [], []
    for k, s in enumerate(samples):
        oy, ox = (k // 2) * h, (k % 2) * w
        out[oy:oy + h, ox:ox + w] = s.image
        if len(s.boxes):
            boxes.append(s.boxes + np.array([ox, oy, ox, oy], dtype=np.float64))
            cats.append(s.categories)
    boxes = np.concatenate(boxes) if boxes else np.zeros((0, 4))
    cats = np.concatenate(cats) if cats else np.zeros(0, dtype=np.int64)
    return SyntheticSample(out, boxes, cats, image_id)


def quadrant_offsets(h, w):
    return [((k % 2) * w, (k // 2) * h) for k in range(4)]


def sample_reference(num_annotations, rng):
    """Uniform index in ``[0, M)``."""
    if num_annotations < 1:
        raise ValueError("no pseudo annotations to sample a reference from")
    return int(rng.integers(num_annotations))


# ---------------------------------------------------------------------------
# weak supervision: external box labels, categories ignored
# ---------------------------------------------------------------------------


def perturb_boxes(boxes, rng, box_ratio=1.0, noise_ratio=0.0, image_size=None):
    """Keep ``ceil(r * M)`` random boxes, then shift every coordinate by up to
    ``noise_ratio`` times the box width (x) or height (y)."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if not 0 < box_ratio <= 1:
        raise ValueError("box_ratio must lie in (0, 1]")
    if noise_ratio < 0:
        raise ValueError("noise_ratio must be non-negative")
    m = len(boxes)
    if m == 0:
        return boxes, np.zeros(0, dtype=np.int64)
    keep = np.sort(rng.choice(m, size=int(math.ceil(box_ratio * m)), replace=False))
    out = boxes[keep].copy()
    if noise_ratio > 0:
        wh = np.concatenate([out[:, 2:] - out[:, :2]] * 2, axis=1)
        wh = wh[:, [0, 1, 2, 3]]
        shift = rng.uniform(-noise_ratio, noise_ratio, size=out.shape) * wh
        out = out + shift
        x0 = np.minimum(out[:, 0], out[:, 2])
        x1 = np.maximum(out[:, 0], out[:, 2])
        y0 = np.minimum(out[:, 1], out[:, 3])
        y1 = np.maximum(out[:, 1], out[:, 3])
        out = np.stack([x0, y0, x1, y1], axis=1)
        if image_size is not None:
            w, h = image_size
            out[:, 0::2] = np.clip(out[:, 0::2], 0, w)
            out[:, 1::2] = np.clip(out[:, 1::2], 0, h)
        # keep at least one pixel of extent
        out[:, 2] = np.maximum(out[:, 2], out[:, 0] + 1)
        out[:, 3] = np.maximum(out[:, 3], out[:, 1] + 1)
    return out, keep


def weak_boxes_source(annotation_file):
    """Read a COCO-style file and return ``{image_id: xyxy boxes}``.

    Category fields are dropped on purpose.
    """
    text = open(annotation_file).read() if not isinstance(annotation_file, dict) else None
    try:
        data = json.loads(text) if text is not None else annotation_file
    except json.JSONDecodeError as exc:
        lines = text.splitlines()
        ctx = lines[exc.lineno - 1] if 0 < exc.lineno <= len(lines) else ""
        raise ValueError(f"malformed annotation JSON at line {exc.lineno}: {exc.msg}: {ctx!r}") from exc
    out = {int(img["id"]): [] for img in data.get("images", [])}
    for ann in data.get("annotations", []):
        x, y, w, h = ann["bbox"]
        out.setdefault(int(ann["image_id"]), []).append([x, y, x + w, y + h])
    return {k: np.asarray(v, dtype=np.float64).reshape(-1, 4) for k, v in out.items()}


# ---------------------------------------------------------------------------
# COCO manifests
# ---------------------------------------------------------------------------


def to_coco(samples, file_names=None):
    """Ground-truth manifest (single agnostic category) and eval-only sidecar."""
    images, annotations, sidecar = [], [], {}
    ann_id = 1
    for k, s in enumerate(samples):
        w, h = s.size
        images.append({
            "id": int(s.image_id), "width": int(w), "height": int(h),
            "file_name": file_names[k] if file_names else f"{int(s.image_id):06d}.png",
        })
        for box, cat in zip(s.boxes, s.categories):
            xywh = box_convert(box, "xyxy", "xywh")
            annotations.append({
                "id": ann_id, "image_id": int(s.image_id), "bbox": [float(v) for v in xywh],
                "area": float(xywh[2] * xywh[3]), "iscrowd": 0, "category_id": 1,
            })
            sidecar[str(ann_id)] = int(cat)
            ann_id += 1
    manifest = {"images": images, "annotations": annotations,
                "categories": [{"id": 1, "name": "object"}]}
    return manifest, {"category_names": list(CATEGORY_NAMES), "annotation_category": sidecar}


@dataclass
class Video:
    frames: list            # (H, W, 3) uint8 per frame
    boxes: np.ndarray       # (F, 4) xyxy ground truth of the tracked object
    category: int


def translating_video(rng_seed, category, num_frames=60, image_size=128, speed=5.0, size=24.0,
                      distractors=(), spec=None):
    """One object sliding ``speed`` px per frame, bouncing off the borders.

    ``distractors`` are category ids painted once at fixed positions away from
    the starting point; the moving object is drawn over them.
    """
    if num_frames < 2:
        raise ValueError("a video needs at least two frames")
    spec = spec or SceneSpec()
    rng = np.random.default_rng(rng_seed)
    H = W = image_size
    bg = background(rng, H, W, spec)
    shape = CATEGORY_NAMES[category].split("_")[1]
    alpha = render_alpha(shape, size, float(rng.uniform(0, 2 * math.pi)))
    side = alpha.shape[0]
    color = object_color(rng, category, spec.color_jitter)
    for d in distractors:
        d_alpha = render_alpha(CATEGORY_NAMES[d].split("_")[1], float(rng.uniform(spec.min_size, spec.max_size)),
                               float(rng.uniform(0, 2 * math.pi)))
        s = d_alpha.shape[0]
        paint(bg, d_alpha, int(rng.integers(0, W - s + 1)), int(rng.integers(0, H - s + 1)),
              object_color(rng, d, spec.color_jitter))
    theta = rng.uniform(0, 2 * math.pi)
    vel = speed * np.array([math.cos(theta), math.sin(theta)])
    pos = rng.uniform(0, [W - side, H - side])
    frames, boxes = [], []
    for _ in range(num_frames):
        ox, oy = (int(round(v)) for v in pos)
        img = bg.copy()
        paint(img, alpha, ox, oy, color)
        frames.append(np.clip(np.rint(img), 0, 255).astype(np.uint8))
        boxes.append(_alpha_box(alpha, ox, oy))
        pos = pos + vel
        for k, hi in enumerate((W - side, H - side)):
            if pos[k] < 0:
                pos[k], vel[k] = -pos[k], -vel[k]
            elif pos[k] > hi:
                pos[k], vel[k] = 2 * hi - pos[k], -vel[k]
    return Video(frames, np.stack(boxes), int(category))
