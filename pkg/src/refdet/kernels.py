"""Hot numeric kernels.

Every kernel has a loop form compiled with numba and a vectorised numpy form.
The public wrappers at the bottom pick one according to
:data:`refdet._accel.USE_NUMBA`. Both forms are importable directly so tests
and the benchmark can compare them in one process.
"""
import numpy as np

from ._accel import USE_NUMBA, njit

# ---------------------------------------------------------------------------
# pairwise IoU / GIoU on xyxy boxes
# ---------------------------------------------------------------------------


@njit
def _iou_giou_loops(a, b):
    n = a.shape[0]
    m = b.shape[0]
    iou = np.zeros((n, m))
    giou = np.zeros((n, m))
    for i in range(n):
        area_a = (a[i, 2] - a[i, 0]) * (a[i, 3] - a[i, 1])
        for j in range(m):
            area_b = (b[j, 2] - b[j, 0]) * (b[j, 3] - b[j, 1])
            iw = min(a[i, 2], b[j, 2]) - max(a[i, 0], b[j, 0])
            ih = min(a[i, 3], b[j, 3]) - max(a[i, 1], b[j, 1])
            inter = 0.0
            if iw > 0.0 and ih > 0.0:
                inter = iw * ih
            union = area_a + area_b - inter
            ew = max(a[i, 2], b[j, 2]) - min(a[i, 0], b[j, 0])
            eh = max(a[i, 3], b[j, 3]) - min(a[i, 1], b[j, 1])
            enclose = ew * eh
            v = 0.0
            if union > 0.0:
                v = inter / union
            iou[i, j] = v
            if enclose > 0.0:
                giou[i, j] = v - (enclose - union) / enclose
            else:
                giou[i, j] = np.nan
    return iou, giou


def _iou_giou_numpy(a, b):
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
        elt = np.minimum(a[:, None, :2], b[None, :, :2])
        erb = np.maximum(a[:, None, 2:], b[None, :, 2:])
        ewh = erb - elt
        enclose = ewh[..., 0] * ewh[..., 1]
        giou = np.where(enclose > 0, iou - (enclose - union) / np.where(enclose > 0, enclose, 1.0), np.nan)
    return iou, giou


# ---------------------------------------------------------------------------
# rectangular linear sum assignment (minimisation, rows <= cols)
# shortest augmenting path with dual potentials
# ---------------------------------------------------------------------------


@njit
def _lsap_loops(cost):
    nr, nc = cost.shape
    u = np.zeros(nr)
    v = np.zeros(nc)
    col4row = -np.ones(nr, dtype=np.int64)
    row4col = -np.ones(nc, dtype=np.int64)
    path = -np.ones(nc, dtype=np.int64)
    shortest = np.empty(nc)
    remaining = np.empty(nc, dtype=np.int64)
    for cur_row in range(nr):
        sr = np.zeros(nr, dtype=np.bool_)
        sc = np.zeros(nc, dtype=np.bool_)
        for it in range(nc):
            remaining[it] = nc - it - 1
            shortest[it] = np.inf
        num_remaining = nc
        min_val = 0.0
        i = cur_row
        sink = -1
        while sink == -1:
            sr[i] = True
            index = -1
            lowest = np.inf
            for it in range(num_remaining):
                j = remaining[it]
                r = min_val + cost[i, j] - u[i] - v[j]
                if r < shortest[j]:
                    path[j] = i
                    shortest[j] = r
                if shortest[j] < lowest or (shortest[j] == lowest and row4col[j] == -1):
                    lowest = shortest[j]
                    index = it
            min_val = lowest
            if index == -1 or not np.isfinite(min_val):
                return col4row, u, v, False
            j = remaining[index]
            if row4col[j] == -1:
                sink = j
            else:
                i = row4col[j]
            sc[j] = True
            num_remaining -= 1
            remaining[index] = remaining[num_remaining]
        u[cur_row] += min_val
        for i in range(nr):
            if sr[i] and i != cur_row:
                u[i] += min_val - shortest[col4row[i]]
        for j in range(nc):
            if sc[j]:
                v[j] -= min_val - shortest[j]
        j = sink
        while True:
            i = path[j]
            row4col[j] = i
            tmp = col4row[i]
            col4row[i] = j
            j = tmp
            if i == cur_row:
                break
    return col4row, u, v, True


def _lsap_numpy(cost):
    nr, nc = cost.shape
    u = np.zeros(nr)
    v = np.zeros(nc)
    col4row = -np.ones(nr, dtype=np.int64)
    row4col = -np.ones(nc, dtype=np.int64)
    path = -np.ones(nc, dtype=np.int64)
    for cur_row in range(nr):
        shortest = np.full(nc, np.inf)
        sr = np.zeros(nr, dtype=bool)
        sc = np.zeros(nc, dtype=bool)
        min_val = 0.0
        i = cur_row
        sink = -1
        while sink == -1:
            sr[i] = True
            r = min_val + cost[i] - u[i] - v
            better = (~sc) & (r < shortest)
            path[better] = i
            shortest[better] = r[better]
            cand = np.where(sc, np.inf, shortest)
            lowest = cand.min()
            if not np.isfinite(lowest):
                return col4row, u, v, False
            # among ties prefer an unassigned column, mirroring the loop kernel
            ties = np.flatnonzero(cand == lowest)
            free = ties[row4col[ties] == -1]
            j = int(free[-1]) if free.size else int(ties[-1])
            min_val = lowest
            if row4col[j] == -1:
                sink = j
            else:
                i = row4col[j]
            sc[j] = True
        u[cur_row] += min_val
        rows = np.flatnonzero(sr)
        rows = rows[rows != cur_row]
        u[rows] += min_val - shortest[col4row[rows]]
        v[sc] -= min_val - shortest[sc]
        j = sink
        while True:
            i = path[j]
            row4col[j] = i
            col4row[i], j = j, col4row[i]
            if i == cur_row:
                break
    return col4row, u, v, True


# ---------------------------------------------------------------------------
# thresholded cosine affinity
# ---------------------------------------------------------------------------


@njit
def _affinity_loops(feats, tau, eps):
    n, d = feats.shape
    norms = np.empty(n)
    for i in range(n):
        s = 0.0
        for k in range(d):
            s += feats[i, k] * feats[i, k]
        norms[i] = np.sqrt(s)
    w = np.empty((n, n))
    for i in range(n):
        for j in range(i, n):
            s = 0.0
            for k in range(d):
                s += feats[i, k] * feats[j, k]
            c = s / (norms[i] * norms[j])
            val = 1.0 if c >= tau else eps
            w[i, j] = val
            w[j, i] = val
    return w


def _affinity_numpy(feats, tau, eps):
    unit = feats / np.linalg.norm(feats, axis=1, keepdims=True)
    cos = unit @ unit.T
    cos = 0.5 * (cos + cos.T)
    return np.where(cos >= tau, 1.0, eps)


# ---------------------------------------------------------------------------
# greedy score-ordered matching used by the AP evaluator
# ---------------------------------------------------------------------------


@njit
def _greedy_loops(iou, thresholds):
    # iou: (num_pred sorted by descending score, num_gt)
    n_pred, n_gt = iou.shape
    n_thr = thresholds.shape[0]
    tp = np.zeros((n_thr, n_pred), dtype=np.bool_)
    for t in range(n_thr):
        taken = np.zeros(n_gt, dtype=np.bool_)
        for p in range(n_pred):
            best = -1
            best_iou = thresholds[t]
            for g in range(n_gt):
                if taken[g]:
                    continue
                if iou[p, g] >= best_iou:
                    if best == -1 or iou[p, g] > iou[p, best]:
                        best = g
                        best_iou = iou[p, g]
            if best >= 0:
                taken[best] = True
                tp[t, p] = True
    return tp


def _greedy_numpy(iou, thresholds):
    n_pred, n_gt = iou.shape
    tp = np.zeros((len(thresholds), n_pred), dtype=bool)
    for t, thr in enumerate(thresholds):
        avail = np.ones(n_gt, dtype=bool)
        for p in range(n_pred):
            row = np.where(avail & (iou[p] >= thr), iou[p], -1.0)
            if n_gt and row.max() >= 0.0:
                g = int(row.argmax())
                avail[g] = False
                tp[t, p] = True
    return tp


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def pairwise_iou_giou(a, b):
    """IoU and GIoU matrices between two (n, 4) xyxy arrays.

    GIoU is NaN where both boxes are zero-area (empty enclosing box).
    """
    a = np.ascontiguousarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.ascontiguousarray(b, dtype=np.float64).reshape(-1, 4)
    if USE_NUMBA:
        return _iou_giou_loops(a, b)
    return _iou_giou_numpy(a, b)


def lsap_min(cost):
    """Minimum-cost assignment of every row to a distinct column.

    Requires ``rows <= cols``. Returns ``(col_for_row, u, v)`` where ``u``/``v``
    are optimal dual potentials: ``cost - u[:, None] - v[None, :] >= 0`` with
    equality on the chosen pairs, and ``v <= 0`` with ``v == 0`` on unused
    columns.
    """
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    if cost.shape[0] > cost.shape[1]:
        raise ValueError("lsap_min needs rows <= cols; transpose first")
    if cost.shape[0] == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros(cost.shape[1])
    fn = _lsap_loops if USE_NUMBA else _lsap_numpy
    col4row, u, v, ok = fn(cost)
    if not ok:
        raise ValueError("cost matrix is infeasible")
    return col4row, u, v


def threshold_affinity(features, tau, eps=1e-5):
    feats = np.ascontiguousarray(features, dtype=np.float64)
    if USE_NUMBA:
        return _affinity_loops(feats, float(tau), float(eps))
    return _affinity_numpy(feats, float(tau), float(eps))


def greedy_match(iou_sorted, thresholds):
    iou_sorted = np.ascontiguousarray(iou_sorted, dtype=np.float64)
    thresholds = np.ascontiguousarray(thresholds, dtype=np.float64)
    if USE_NUMBA:
        return _greedy_loops(iou_sorted, thresholds)
    return _greedy_numpy(iou_sorted, thresholds)
