"""Category-agnostic detection, reference matching and single-object tracking."""
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .geometry import box_convert, iou_matrix
from .similarity import DEFAULT_TEMPERATURE, activated_matrix


@dataclass
class Detection:
    box: np.ndarray          # xyxy pixels
    confidence: float
    content: np.ndarray


def detect_agnostic(image, model, score_threshold=0.5, nms_iou=0.0):
    """Queries whose foreground probability reaches ``score_threshold``,
    most confident first (stable on ties)."""
    image = np.asarray(image)
    logits, boxes, contents = model.predict(image)
    conf = expit(logits[0])
    h, w = image.shape[:2]
    xyxy = box_convert(boxes[0], "cxcywh_n", "xyxy", (w, h))
    keep = np.flatnonzero(conf >= score_threshold)
    keep = keep[np.argsort(-conf[keep], kind="stable")]
    if nms_iou > 0 and len(keep) > 1:
        keep = keep[nms(xyxy[keep], conf[keep], nms_iou)]
    return [Detection(xyxy[i], float(conf[i]), contents[0, i]) for i in keep]


def nms(boxes, scores, iou_threshold):
    """Greedy non-maximum suppression; returns kept indices in score order."""
    order = np.argsort(-np.asarray(scores), kind="stable")
    boxes = np.asarray(boxes, dtype=np.float64)
    ious = iou_matrix(boxes, boxes)
    kept, removed = [], np.zeros(len(boxes), dtype=bool)
    for i in order:
        if removed[i]:
            continue
        kept.append(i)
        removed |= ious[i] > iou_threshold
    return np.asarray(kept, dtype=np.int64)


def match_category_aware(detections, references, temperature=DEFAULT_TEMPERATURE, sim_threshold=0.3):
    """Assign every detection to at most one reference.

    Returns ``(ref_ids, similarities)`` where ``ref_ids[i]`` is the index of the
    most similar reference (lowest index on ties) or -1 when that similarity is
    below ``sim_threshold``.
    """
    refs = np.atleast_2d(np.asarray(references, dtype=np.float64))
    if refs.shape[0] == 0:
        raise ValueError("need at least one reference embedding")
    if not len(detections):
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    contents = np.stack([d.content if isinstance(d, Detection) else np.asarray(d) for d in detections])
    if contents.shape[1] != refs.shape[1]:
        raise ValueError(f"content dim {contents.shape[1]} != reference dim {refs.shape[1]}")
    sims = activated_matrix(contents, refs, temperature)
    best = np.argmax(sims, axis=1)
    best_sim = sims[np.arange(len(best)), best]
    ref_ids = np.where(best_sim >= sim_threshold, best, -1)
    return ref_ids.astype(np.int64), best_sim


def category_aware_predictions(image, image_id, model, references, ref_labels=None,
                               temperature=DEFAULT_TEMPERATURE, sim_threshold=0.3,
                               score_threshold=0.0, score_mode="sim", nms_iou=0.0):
    """COCO-style result records for one image.

    ``score_mode`` picks the detection score: the reference similarity alone
    (``"sim"``) or similarity times foreground confidence (``"sim_x_conf"``).
    ``ref_labels`` maps reference index to the id written in ``category_id``.
    """
    dets = detect_agnostic(image, model, score_threshold, nms_iou)
    ref_ids, sims = match_category_aware(dets, references, temperature, sim_threshold)
    out = []
    for d, r, s in zip(dets, ref_ids, sims):
        if r < 0:
            continue
        score = s if score_mode == "sim" else s * d.confidence
        rec = {"image_id": int(image_id), "bbox": [float(v) for v in box_convert(d.box, "xyxy", "xywh")],
               "score": float(score), "ref_id": int(r)}
        if ref_labels is not None:
            rec["category_id"] = int(ref_labels[r])
        out.append(rec)
    return out


def agnostic_predictions(image, image_id, model, score_threshold=0.0, nms_iou=0.0):
    return [{"image_id": int(image_id), "bbox": [float(v) for v in box_convert(d.box, "xyxy", "xywh")],
             "score": d.confidence, "ref_id": -1, "category_id": 1}
            for d in detect_agnostic(image, model, score_threshold, nms_iou)]


def track_sot(frames, first_box, model, embedder, temperature=DEFAULT_TEMPERATURE, score_threshold=0.0):
    """Follow the object in ``first_box`` (xyxy) through ``frames``.

    The first frame's crop is the reference. Each later frame keeps the single
    detection with the highest similarity x confidence; when a frame has no
    detection the previous box is carried over with confidence 0.
    Returns one ``(box, confidence)`` per frame.
    """
    if len(frames) < 2:
        raise ValueError("tracking needs at least two frames")
    first_box = np.asarray(first_box, dtype=np.float64)
    if not (first_box[2] > first_box[0] and first_box[3] > first_box[1]):
        raise ValueError(f"invalid first-frame box {first_box}")
    ref = embedder.encode_box(frames[0], first_box)
    out = [(first_box, 1.0)]
    prev = first_box
    for frame in frames[1:]:
        dets = detect_agnostic(frame, model, score_threshold)
        if not dets:
            out.append((prev, 0.0))
            continue
        _, sims = match_category_aware(dets, ref[None], temperature, sim_threshold=-np.inf)
        combined = sims * np.array([d.confidence for d in dets])
        best = int(np.argmax(combined))
        prev = dets[best].box
        out.append((prev, float(combined[best])))
    return out
