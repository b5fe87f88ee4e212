"""Training losses.

All functions take torch tensors (numpy arrays are accepted and converted) and
stay differentiable with respect to the prediction side. Pseudo-annotation
embeddings are treated as constants.
"""
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .assignment import MatchIndexPairs
from .geometry import DEFAULT_W_GIOU, DEFAULT_W_L1
from .similarity import DEFAULT_TEMPERATURE, activated_matrix

EPS = 1e-7


@dataclass
class FSLossConfig:
    alpha: float = 2.0
    beta: float = 4.0
    tau: float = 0.0
    temperature: float = DEFAULT_TEMPERATURE
    top_k: int = 100
    lambda_fs: float = 1.0
    metric: str = "cos"

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if not 0.0 <= self.tau < 1.0:
            raise ValueError("tau must lie in [0, 1)")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.lambda_fs < 0:
            raise ValueError("lambda_fs must be non-negative")


@dataclass
class LossBreakdown:
    hungarian: float
    fs: float = 0.0
    cosine: float = 0.0
    total: float = 0.0

    def as_dict(self):
        return asdict(self)


def _t(x, dtype=None):
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype or torch.float64)


def predicted_similarity(reference, contents, temperature=DEFAULT_TEMPERATURE, metric="cos"):
    """Similarity of every query content (N, D) to the reference embedding (D,)."""
    contents = _t(contents)
    reference = _t(reference, contents.dtype).reshape(1, -1)
    if contents.shape[-1] != reference.shape[-1]:
        raise ValueError("dimension mismatch between reference and query contents")
    if metric == "cos" and (contents.detach().norm(dim=-1) == 0).any():
        raise ValueError("zero-norm query content")
    return activated_matrix(reference, contents, temperature, metric=metric)[0]


def pseudo_similarity_targets(reference_index, ann_embeddings, matches, num_queries,
                              tau=0.0, temperature=DEFAULT_TEMPERATURE, metric="cos"):
    """Per-query soft targets: similarity of the matched pseudo box to the
    reference, zeroed below ``tau`` and for unmatched queries."""
    emb = _t(ann_embeddings).detach()
    if not 0 <= reference_index < emb.shape[0]:
        raise ValueError(f"reference index {reference_index} out of range")
    sims = activated_matrix(emb[reference_index:reference_index + 1], emb, temperature, metric=metric)[0]
    p = torch.zeros(num_queries, dtype=emb.dtype)
    for m, n in matches.pairs:
        s = sims[m]
        if s >= tau:
            p[n] = s
    return p


def positive_mask(matches, reference_index, num_queries):
    pos = torch.zeros(num_queries, dtype=torch.bool)
    for m, n in matches.pairs:
        if m == reference_index:
            pos[n] = True
    return pos


def fs_loss(p_hat, p, matches, reference_index, config=None):
    """Penalty-reduced focal loss on reference similarities.

    The query matched to the reference pseudo box is pulled to 1 with
    ``-(1 - p_hat)^alpha log(p_hat)``; every other query is pushed towards 0
    with ``-(1 - p)^beta p_hat^alpha log(1 - p_hat)``. Averaged over the queries
    passed in.
    """
    config = config or FSLossConfig()
    p_hat = _t(p_hat)
    p = _t(p, p_hat.dtype)
    if p_hat.shape != p.shape:
        raise ValueError("p_hat and p must have the same length")
    n = p_hat.shape[0]
    if n == 0:
        return p_hat.sum() * 0.0
    ph = p_hat.clamp(EPS, 1.0 - EPS)
    pos = positive_mask(matches, reference_index, n)
    pos_term = (1.0 - ph) ** config.alpha * torch.log(ph)
    neg_term = (1.0 - p) ** config.beta * ph ** config.alpha * torch.log(1.0 - ph)
    return -torch.where(pos, pos_term, neg_term).sum() / n


def expected_fs_loss(ann_embeddings, contents, matches, config=None):
    """Mean of :func:`fs_loss` over every pseudo box taken in turn as the reference.

    Sampling the reference uniformly gives this value in expectation; using
    all of them at once removes the sampling noise.
    """
    config = config or FSLossConfig()
    contents = _t(contents)
    emb = _t(ann_embeddings, contents.dtype).detach()
    M, N = emb.shape[0], contents.shape[0]
    if M == 0:
        raise ValueError("FS loss needs at least one pseudo annotation")
    if N == 0:
        return contents.sum() * 0.0
    if config.metric == "cos" and (contents.detach().norm(dim=-1) == 0).any():
        raise ValueError("zero-norm query content")
    ph = activated_matrix(emb, contents, config.temperature, metric=config.metric).clamp(EPS, 1.0 - EPS)
    box_sim = activated_matrix(emb, emb, config.temperature, metric=config.metric)
    p = torch.zeros((M, N), dtype=ph.dtype)
    pos = torch.zeros((M, N), dtype=torch.bool)
    for m, n in matches.pairs:
        s = box_sim[:, m]
        p[:, n] = torch.where(s >= config.tau, s, torch.zeros_like(s))
        pos[m, n] = True
    pos_term = (1.0 - ph) ** config.alpha * torch.log(ph)
    neg_term = (1.0 - p) ** config.beta * ph ** config.alpha * torch.log(1.0 - ph)
    return -torch.where(pos, pos_term, neg_term).sum() / (M * N)


def cosine_loss(ann_embeddings, contents, matches, temperature=DEFAULT_TEMPERATURE, metric="cos"):
    """Baseline: matched queries maximise similarity to their pseudo box,
    unmatched ones minimise their best similarity to any pseudo box."""
    contents = _t(contents)
    emb = _t(ann_embeddings, contents.dtype).detach()
    if emb.shape[0] == 0:
        raise ValueError("cosine loss needs at least one pseudo annotation")
    sim = activated_matrix(emb, contents, temperature, metric=metric)  # (M, N)
    n = contents.shape[0]
    terms = sim.max(dim=0).values
    if matches.pairs:
        m_idx, n_idx = (torch.as_tensor(a) for a in matches.as_arrays())
        terms = terms.index_put((n_idx,), -sim[m_idx, n_idx])
    return terms.sum() / n


def sigmoid_focal_loss(logits, targets, alpha=0.25, gamma=2.0):
    """Element-wise binary focal loss."""
    prob = torch.sigmoid(logits)
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p_t = prob * targets + (1 - prob) * (1 - targets)
    loss = ce * (1 - p_t) ** gamma
    if alpha >= 0:
        loss = (alpha * targets + (1 - alpha) * (1 - targets)) * loss
    return loss


def _cxcywh_to_xyxy(b):
    cx, cy, w, h = b.unbind(-1)
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=-1)


def elementwise_giou(a, b):
    """GIoU between matching rows of two (K, 4) cxcywh tensors."""
    a, b = _cxcywh_to_xyxy(a), _cxcywh_to_xyxy(b)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = torch.max(a[:, :2], b[:, :2])
    rb = torch.min(a[:, 2:], b[:, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[:, 0] * wh[:, 1]
    union = area_a + area_b - inter
    iou = inter / union.clamp(min=1e-12)
    elt = torch.min(a[:, :2], b[:, :2])
    erb = torch.max(a[:, 2:], b[:, 2:])
    ewh = (erb - elt).clamp(min=0)
    enclose = ewh[:, 0] * ewh[:, 1]
    return iou - (enclose - union) / enclose.clamp(min=1e-12)


def box_loss(ann_boxes, pred_boxes, w_l1=DEFAULT_W_L1, w_giou=DEFAULT_W_GIOU):
    """Mean box distance over aligned rows (normalised cxcywh)."""
    pred_boxes = _t(pred_boxes)
    ann_boxes = _t(ann_boxes, pred_boxes.dtype)
    if pred_boxes.shape[0] == 0:
        return pred_boxes.sum() * 0.0
    l1 = F.smooth_l1_loss(pred_boxes, ann_boxes, reduction="none", beta=1.0).sum(-1)
    g = elementwise_giou(pred_boxes, ann_boxes)
    return (w_l1 * l1 + w_giou * (1.0 - g)).mean()


def hungarian_detection_loss(ann_boxes, pred_boxes, logits, matches,
                             w_l1=DEFAULT_W_L1, w_giou=DEFAULT_W_GIOU,
                             focal_alpha=0.25, focal_gamma=2.0, return_parts=False):
    """Binary foreground focal loss over all queries plus the matched box term.

    The focal sum is normalised by the number of matched pairs (at least 1), the
    usual DETR convention.
    """
    logits = _t(logits)
    n = logits.shape[0]
    target = torch.zeros(n, dtype=logits.dtype)
    m_idx, n_idx = (torch.as_tensor(a) for a in matches.as_arrays())
    target[n_idx] = 1.0
    cls = sigmoid_focal_loss(logits, target, focal_alpha, focal_gamma).sum() / max(len(matches), 1)
    ann_boxes = _t(ann_boxes, logits.dtype)
    box = box_loss(ann_boxes[m_idx], _t(pred_boxes, logits.dtype)[n_idx], w_l1, w_giou)
    if return_parts:
        return cls, box
    return cls + box


def filter_queries(logits, k, matched=()):
    """Indices of the ``k`` highest-logit queries plus any matched query outside them.

    Returned indices are ascending positions in the original query list.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    logits = _t(logits).detach()
    n = logits.shape[0]
    if k >= n:
        return torch.arange(n)
    top = torch.topk(logits, k).indices
    keep = torch.zeros(n, dtype=torch.bool)
    keep[top] = True
    for q in matched:
        keep[int(q)] = True
    return torch.nonzero(keep).flatten()


def remap_matches(matches, index_map):
    """Express ``matches`` in the index space of a filtered query list."""
    pos = {int(orig): i for i, orig in enumerate(index_map.tolist())}
    return MatchIndexPairs([(m, pos[n]) for m, n in matches.pairs if n in pos])


def total_loss(parts, lambda_fs=1.0, mode="fs"):
    """``hungarian + lambda * fs`` (``hungarian + lambda * cosine`` for the baseline)."""
    if mode == "cos":
        return parts.hungarian + lambda_fs * parts.cosine
    if mode == "hung":
        return parts.hungarian
    return parts.hungarian + lambda_fs * parts.fs
