"""Self-contained COCO-style AP / AP50 / AR and the one-shot reference protocol.

Matching: at each IoU threshold, predictions are visited from the highest
score down and each takes the unmatched ground truth of highest IoU that
reaches the threshold. Precision is made monotone and read off at 101 evenly
spaced recall levels. AR is the recall with at most 100 detections per image,
averaged over the IoU thresholds.
"""
import csv
import json
from collections import defaultdict

import numpy as np

from .geometry import box_convert, iou_matrix
from .kernels import greedy_match

IOU_THRESHOLDS = np.round(np.arange(0.5, 0.951, 0.05), 2)
RECALL_GRID = np.linspace(0.0, 1.0, 101)
MAX_DETS = 100


def _xyxy(bbox):
    return box_convert(np.asarray(bbox, dtype=np.float64), "xywh", "xyxy")


def interpolated_ap(tp, n_gt):
    """101-point interpolated AP of a score-sorted true-positive sequence."""
    tp = np.asarray(tp, dtype=np.float64)
    if n_gt == 0:
        raise ValueError("AP is undefined without ground truth")
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_GRID, side="left")
    q = np.zeros_like(RECALL_GRID)
    ok = idx < len(recall)
    q[ok] = envelope[idx[ok]]
    return float(q.mean())


def _category_metrics(preds, gts, thresholds):
    """preds: list of (image_id, xyxy, score); gts: {image_id: (G, 4)}."""
    n_gt = sum(len(v) for v in gts.values())
    if n_gt == 0:
        return None
    by_image = defaultdict(list)
    for k, (img, _, score) in enumerate(preds):
        by_image[img].append(k)
    scores = np.array([p[2] for p in preds], dtype=np.float64)
    tp_all = np.zeros((len(thresholds), len(preds)), dtype=bool)
    in_top = np.zeros(len(preds), dtype=bool)
    for img, ks in by_image.items():
        ks = np.asarray(ks)
        ks = ks[np.argsort(-scores[ks], kind="stable")]
        in_top[ks[:MAX_DETS]] = True
        g = gts.get(img)
        if g is None or len(g) == 0:
            continue
        boxes = np.stack([preds[k][1] for k in ks])
        tp_all[:, ks] = greedy_match(iou_matrix(boxes, g), thresholds)
    order = np.argsort(-scores, kind="stable")
    aps = [interpolated_ap(tp_all[t, order], n_gt) for t in range(len(thresholds))]
    recalls = [tp_all[t, in_top].sum() / n_gt for t in range(len(thresholds))]
    return aps, recalls


def compute_ap(predictions, ground_truth, iou_thresholds=IOU_THRESHOLDS, categories=None):
    """AP over ``iou_thresholds``, AP50 and AR@100, averaged over categories.

    ``predictions``: records ``{image_id, bbox (xywh), score[, category_id]}``.
    ``ground_truth``: records ``{image_id, bbox (xywh)[, category_id]}`` or a
    COCO manifest dict. A missing ``category_id`` counts as category 1.
    Categories without ground truth are reported in ``missing`` and skipped.
    """
    if isinstance(ground_truth, dict):
        ground_truth = ground_truth["annotations"]
    thresholds = np.asarray(iou_thresholds, dtype=np.float64)
    gts = defaultdict(lambda: defaultdict(list))
    for g in ground_truth:
        gts[int(g.get("category_id", 1))][int(g["image_id"])].append(_xyxy(g["bbox"]))
    preds = defaultdict(list)
    for p in predictions:
        preds[int(p.get("category_id", 1))].append((int(p["image_id"]), _xyxy(p["bbox"]), float(p["score"])))
    cats = sorted(set(gts) | set(preds)) if categories is None else list(categories)
    per_cat, missing = {}, []
    i50 = int(np.argmin(np.abs(thresholds - 0.5)))
    for c in cats:
        g = {k: np.asarray(v).reshape(-1, 4) for k, v in gts.get(c, {}).items()}
        res = _category_metrics(preds.get(c, []), g, thresholds)
        if res is None:
            missing.append(c)
            continue
        aps, recalls = res
        per_cat[c] = {"AP": float(np.mean(aps)), "AP50": float(aps[i50]), "AR": float(np.mean(recalls))}
    if per_cat:
        summary = {k: float(np.mean([m[k] for m in per_cat.values()])) for k in ("AP", "AP50", "AR")}
    else:
        summary = {"AP": float("nan"), "AP50": float("nan"), "AR": float("nan")}
    summary["per_category"] = per_cat
    summary["missing"] = missing
    return summary


def ground_truth_records(samples, categories=None, agnostic=False):
    """COCO-style GT records from samples; ``categories`` restricts to those ids."""
    out = []
    for s in samples:
        for box, c in zip(s.boxes, s.categories):
            if categories is not None and int(c) not in categories:
                continue
            out.append({"image_id": int(s.image_id), "bbox": [float(v) for v in box_convert(box, "xyxy", "xywh")],
                        "category_id": 1 if agnostic else int(c)})
    return out


def one_shot_protocol(model, samples, reference_sets, categories, temperature=10.0, sim_threshold=0.3,
                      score_threshold=0.0, score_mode="sim", nms_iou=0.0):
    """Category-aware metrics per reference set and their arithmetic mean.

    Each set must hold exactly one reference for every category in
    ``categories``; a detection assigned to a reference is scored as that
    reference's hidden category.
    """
    from .inference import category_aware_predictions, detect_agnostic  # noqa: F401
    categories = [int(c) for c in categories]
    gt = ground_truth_records(samples, set(categories))
    per_set = {}
    for rs in reference_sets:
        labels = [int(c) for c in rs.categories]
        if sorted(labels) != sorted(categories):
            raise ValueError(f"reference set {rs.set_id} covers {labels}, expected one per {categories}")
        preds = []
        for s in samples:
            preds.extend(category_aware_predictions(s.image, s.image_id, model, rs.embeddings, labels,
                                                    temperature, sim_threshold, score_threshold,
                                                    score_mode, nms_iou))
        m = compute_ap(preds, gt, categories=categories)
        per_set[int(rs.set_id)] = {k: m[k] for k in ("AP", "AP50", "AR")}
    return summarise_sets(per_set)


def summarise_sets(per_set):
    mean = {k: float(np.mean([v[k] for v in per_set.values()])) for k in ("AP", "AP50", "AR")}
    return {"sets": per_set, "mean": mean}


def agnostic_metrics(model, samples, score_threshold=0.0, nms_iou=0.0):
    from .inference import agnostic_predictions
    preds = []
    for s in samples:
        preds.extend(agnostic_predictions(s.image, s.image_id, model, score_threshold, nms_iou))
    m = compute_ap(preds, ground_truth_records(samples, agnostic=True))
    return {k: m[k] for k in ("AP", "AP50", "AR")}


def write_report(report, json_path, csv_path=None):
    with open(json_path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    if csv_path:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["set_id", "AP", "AP50", "AR"])
            for sid, m in sorted(report["sets"].items(), key=lambda kv: int(kv[0])):
                w.writerow([sid, m["AP"], m["AP50"], m["AR"]])
            w.writerow(["mean", report["mean"]["AP"], report["mean"]["AP50"], report["mean"]["AR"]])
