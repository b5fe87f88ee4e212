"""Box formats, overlap metrics and the box distance used by the matcher.

Boxes are plain float arrays with a trailing dimension of 4. Canonical storage
is absolute ``xyxy`` in pixels; the detector and its losses work on
``cxcywh`` normalised by the image size.
"""
import numpy as np

from .kernels import pairwise_iou_giou

FORMATS = ("xyxy", "xywh", "cxcywh", "xyxy_n", "cxcywh_n")

DEFAULT_W_L1 = 5.0
DEFAULT_W_GIOU = 2.0


def _to_xyxy(b, fmt, size):
    if fmt.endswith("_n"):
        w, h = size
        b = b * np.array([w, h, w, h], dtype=np.float64)
        fmt = fmt[:-2]
    if fmt == "xyxy":
        return b
    if fmt == "xywh":
        return np.concatenate([b[..., :2], b[..., :2] + b[..., 2:]], axis=-1)
    # cxcywh
    half = b[..., 2:] / 2.0
    return np.concatenate([b[..., :2] - half, b[..., :2] + half], axis=-1)


def _from_xyxy(b, fmt, size):
    base = fmt[:-2] if fmt.endswith("_n") else fmt
    if base == "xyxy":
        out = b
    elif base == "xywh":
        out = np.concatenate([b[..., :2], b[..., 2:] - b[..., :2]], axis=-1)
    else:
        out = np.concatenate([(b[..., :2] + b[..., 2:]) / 2.0, b[..., 2:] - b[..., :2]], axis=-1)
    if fmt.endswith("_n"):
        w, h = size
        out = out / np.array([w, h, w, h], dtype=np.float64)
    return out


def box_convert(boxes, src, dst, image_size=None):
    """Convert boxes between formats.

    ``image_size`` is ``(width, height)`` and is required whenever either
    format is normalised (suffix ``_n``).

    >>> box_convert([0, 0, 10, 10], "xyxy", "cxcywh_n", (100, 100)).tolist()
    [0.05, 0.05, 0.1, 0.1]
    """
    if src not in FORMATS or dst not in FORMATS:
        raise ValueError(f"unknown box format {src!r} -> {dst!r}")
    b = np.asarray(boxes, dtype=np.float64)
    if b.shape[-1] != 4:
        raise ValueError(f"boxes must have a trailing dim of 4, got {b.shape}")
    if src.endswith("_n") or dst.endswith("_n"):
        if image_size is None:
            raise ValueError("image_size required for normalised formats")
        w, h = image_size
        if not (np.isfinite(w) and np.isfinite(h)) or w <= 0 or h <= 0:
            raise ValueError(f"degenerate image size {image_size}")
    if not np.all(np.isfinite(b)):
        raise ValueError("non-finite box coordinates")
    return _from_xyxy(_to_xyxy(b, src, image_size), dst, image_size)


def validate_xyxy(boxes):
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if not np.all(np.isfinite(b)):
        raise ValueError("non-finite box coordinates")
    if np.any(b[:, 2] < b[:, 0]) or np.any(b[:, 3] < b[:, 1]):
        raise ValueError("box has max < min")
    return b


def area(boxes):
    b = np.asarray(boxes, dtype=np.float64)
    return (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])


def iou_matrix(a, b):
    return pairwise_iou_giou(validate_xyxy(a), validate_xyxy(b))[0]


def giou_matrix(a, b):
    a, b = validate_xyxy(a), validate_xyxy(b)
    g = pairwise_iou_giou(a, b)[1]
    if np.isnan(g).any() or ((area(a) <= 0)[:, None] & (area(b) <= 0)[None, :]).any():
        raise ValueError("GIoU undefined for two zero-area boxes")
    return g


def iou(a, b):
    """IoU of two xyxy boxes; zero-area boxes give 0."""
    return float(iou_matrix(a, b)[0, 0])


def giou(a, b):
    """Generalised IoU of two xyxy boxes, in [-1, 1]."""
    return float(giou_matrix(a, b)[0, 0])


def smooth_l1(x, delta=1.0):
    ax = np.abs(x)
    return np.where(ax < delta, 0.5 * ax * ax / delta, ax - 0.5 * delta)


def box_distance_matrix(a, b, w_l1=DEFAULT_W_L1, w_giou=DEFAULT_W_GIOU):
    """Pairwise D_box between normalised cxcywh boxes ``a`` (M) and ``b`` (N)."""
    if w_l1 < 0 or w_giou < 0:
        raise ValueError("box distance weights must be non-negative")
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    l1 = smooth_l1(a[:, None, :] - b[None, :, :]).sum(-1)
    g = giou_matrix(box_convert(a, "cxcywh", "xyxy"), box_convert(b, "cxcywh", "xyxy"))
    return w_l1 * l1 + w_giou * (1.0 - g)


def box_distance(a, b, w_l1=DEFAULT_W_L1, w_giou=DEFAULT_W_GIOU):
    return float(box_distance_matrix(a, b, w_l1, w_giou)[0, 0])


def clip_xyxy(boxes, image_size):
    w, h = image_size
    b = np.array(boxes, dtype=np.float64)
    b[..., 0::2] = np.clip(b[..., 0::2], 0, w)
    b[..., 1::2] = np.clip(b[..., 1::2], 0, h)
    return b
