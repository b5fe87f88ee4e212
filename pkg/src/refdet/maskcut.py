"""Pseudo boxes by repeated normalised-cut bipartition of a patch affinity graph.

Each stage solves the generalised eigenproblem ``(D - W) x = lam D x``,
thresholds the second eigenvector at its mean, orients the partition so the
foreground holds the strongest eigenvector entry and fewer than two image
corners, then masks those patches out of the graph for the next stage.
"""
import logging

import numpy as np
import scipy.linalg
import scipy.ndimage

from .kernels import threshold_affinity

log = logging.getLogger(__name__)

AFFINITY_EPS = 1e-5
DEFAULT_TAU = 0.15


class StageRejected(Exception):
    """A cut stage found no object."""


def build_affinity(features, tau=DEFAULT_TAU, eps=AFFINITY_EPS):
    """Binary cosine affinity between patch features: 1 if cos >= tau else eps.

    ``features`` is an ``(h, w, D)`` grid or an ``(n, D)`` array.
    """
    f = np.asarray(features, dtype=np.float64)
    f = f.reshape(-1, f.shape[-1])
    if f.shape[0] < 4:
        raise ValueError("need at least four patches")
    if not np.all(np.isfinite(f)):
        raise ValueError("non-finite patch features")
    if np.any(np.linalg.norm(f, axis=1) == 0):
        raise ValueError("zero-norm patch feature")
    return threshold_affinity(f, tau, eps)


def ncut_second_eigenvector(W, return_value=False):
    """Second-smallest generalised eigenvector of ``(D - W) x = lam D x``.

    Sign is fixed so the entry of largest magnitude is positive.
    """
    W = np.asarray(W, dtype=np.float64)
    deg = W.sum(axis=1)
    if np.any(deg <= 0):
        raise ValueError("affinity has an isolated node (zero degree)")
    L = np.diag(deg) - W
    vals, vecs = scipy.linalg.eigh(L, np.diag(deg), subset_by_index=[0, 1])
    x = vecs[:, 1]
    if x[np.argmax(np.abs(x))] < 0:
        x = -x
    if return_value:
        return x, float(vals[1])
    return x


def bipartition_to_mask(x, grid_shape=None, active=None):
    """Foreground where the eigenvector is at or above its mean over active nodes."""
    x = np.asarray(x, dtype=np.float64).ravel()
    if active is None:
        active = np.ones(x.shape, dtype=bool)
    mask = (x >= x[active].mean()) & active
    return mask.reshape(grid_shape) if grid_shape is not None else mask


def corner_count(mask):
    m = np.asarray(mask, dtype=bool)
    return int(m[0, 0]) + int(m[0, -1]) + int(m[-1, 0]) + int(m[-1, -1])


def _passes(mask, seed):
    return bool(mask.flat[seed]), corner_count(mask) < 2


def foreground_select(mask, x, active=None):
    """Orient a bipartition.

    A mask that holds ``argmax |x|`` and covers fewer than two corners is kept.
    Otherwise its complement is taken, provided the complement holds the seed
    patch; if it does not (or fails both tests) the stage is rejected.
    """
    mask = np.asarray(mask, dtype=bool)
    x = np.asarray(x, dtype=np.float64).ravel()
    if active is None:
        active = np.ones(mask.size, dtype=bool)
    active = np.asarray(active, dtype=bool).ravel()
    seed = int(np.flatnonzero(active)[np.argmax(np.abs(x[active]))])
    has_seed, few_corners = _passes(mask, seed)
    if has_seed and few_corners:
        return mask
    comp = (~mask.ravel() & active).reshape(mask.shape)
    c_seed, c_corners = _passes(comp, seed)
    if not c_seed or not comp.any():
        raise StageRejected("neither side of the cut holds the seed patch with < 2 corners")
    return comp


def seed_component(mask, x, active=None):
    """Restrict a foreground mask to the 4-connected component holding the seed.

    A single cut often groups several objects against the background; keeping
    only the seed's component leaves the others for later stages.
    """
    mask = np.asarray(mask, dtype=bool)
    x = np.asarray(x, dtype=np.float64).ravel()
    if active is None:
        active = np.ones(mask.size, dtype=bool)
    active = np.asarray(active, dtype=bool).ravel()
    seed = int(np.flatnonzero(active)[np.argmax(np.abs(x[active]))])
    labels, _ = scipy.ndimage.label(mask)
    lab = labels.flat[seed]
    if lab == 0:
        raise StageRejected("seed patch is not in the foreground")
    return labels == lab


def update_affinity(W, prior_masks, eps=AFFINITY_EPS):
    """Mask nodes that were foreground in any earlier stage.

    Zeroing a patch feature drops its cosine to every other patch, so its row
    and column fall to ``eps`` (which also keeps its degree positive).
    """
    W = np.array(W, dtype=np.float64)
    if not prior_masks:
        return W
    gone = np.zeros(W.shape[0], dtype=bool)
    for m in prior_masks:
        gone |= np.asarray(m, dtype=bool).ravel()
    if gone.all():
        raise ValueError("every patch has been masked out")
    W[gone, :] = eps
    W[:, gone] = eps
    return W


def mask_to_box(mask, patch_size):
    """xyxy pixel box covering every foreground patch (patch (i, j) spans
    columns ``[j * ps, (j + 1) * ps)`` and rows ``[i * ps, (i + 1) * ps)``)."""
    rows, cols = np.nonzero(np.asarray(mask, dtype=bool))
    if rows.size == 0:
        raise ValueError("empty mask has no box")
    ps = float(patch_size)
    return np.array([cols.min() * ps, rows.min() * ps, (cols.max() + 1) * ps, (rows.max() + 1) * ps])


def maskcut(features, n_objects=3, patch_size=1, tau=DEFAULT_TAU, eps=AFFINITY_EPS,
            min_patches=1, connected=True):
    """Up to ``n_objects`` disjoint (mask, xyxy box) pairs from an (h, w, D) grid.

    With ``connected`` each stage keeps only the seed's connected component.
    Stops at the first rejected stage.
    """
    if n_objects < 1:
        raise ValueError("n_objects must be >= 1")
    f = np.asarray(features, dtype=np.float64)
    grid = f.shape[:2]
    W0 = build_affinity(f, tau, eps)
    if np.ptp(W0) == 0:
        # uniform affinity, no structure to cut
        return []
    results, masks = [], []
    for _ in range(n_objects):
        W = update_affinity(W0, masks, eps) if masks else W0
        active = np.ones(W.shape[0], dtype=bool)
        for m in masks:
            active &= ~m.ravel()
        if active.sum() < 2:
            break
        x = ncut_second_eigenvector(W)
        xa = x[active]
        if np.ptp(xa) <= 1e-8 * max(np.abs(xa).max(), 1e-300):
            break
        mask = bipartition_to_mask(x, grid, active)
        try:
            mask = foreground_select(mask, x, active)
            if connected:
                mask = seed_component(mask, x, active)
        except StageRejected:
            break
        if mask.sum() < min_patches:
            break
        masks.append(mask)
        results.append((mask, mask_to_box(mask, patch_size)))
    return results


def self_train_filter(detections, gamma=0.9):
    """Keep detections whose confidence exceeds ``gamma``.

    ``detections`` is a sequence of ``(box, confidence)`` pairs.
    """
    return [(b, c) for b, c in detections if c > gamma]


def pseudo_boxes_for_image(image, embedder, patch_size=4, n_objects=3, tau=DEFAULT_TAU, min_patches=2):
    """Run maskcut on an RGB image using the embedder's patch features."""
    feats = embedder.patch_features(image, patch_size)
    return [box for _, box in maskcut(feats, n_objects, patch_size, tau, min_patches=min_patches)]
