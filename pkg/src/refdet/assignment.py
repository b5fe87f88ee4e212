"""Unsupervised matching cost and one-to-one assignment.

The cost rewards embedding agreement and penalises box distance::

    cost[m, n] = S(f_m, content_n) - D_box(b_m, box_n)

and :func:`hungarian_match` returns the matching that maximises the summed
cost. Among equal-total matchings the lexicographically smallest pair list
(sorted by annotation index) is returned.
"""
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .geometry import DEFAULT_W_GIOU, DEFAULT_W_L1, box_convert, box_distance_matrix
from .kernels import lsap_min
from .similarity import DEFAULT_TEMPERATURE, activated_matrix


@dataclass
class PseudoAnnotation:
    """A pseudo box in absolute xyxy pixels plus its reference embedding."""

    box: np.ndarray
    embedding: np.ndarray
    source_image_id: int = 0
    box_index: int = 0


@dataclass
class QueryPrediction:
    """One detector slot: content vector, normalised cxcywh box, foreground logit."""

    content: np.ndarray
    box: np.ndarray
    foreground_logit: float = 0.0


@dataclass
class MatchIndexPairs:
    pairs: list = field(default_factory=list)

    @property
    def matched_queries(self):
        return {n for _, n in self.pairs}

    def query_to_annotation(self):
        return {n: m for m, n in self.pairs}

    def as_arrays(self):
        if not self.pairs:
            return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
        m, n = zip(*self.pairs)
        return np.asarray(m, dtype=np.int64), np.asarray(n, dtype=np.int64)

    def total(self, cost):
        """Summed cost over the pairs, accumulated in annotation order."""
        cost = np.asarray(cost)
        return float(sum(float(cost[m, n]) for m, n in sorted(self.pairs)))

    def __len__(self):
        return len(self.pairs)


def cost_matrix(ann_boxes, ann_embeddings, query_boxes, query_contents,
                temperature=DEFAULT_TEMPERATURE, w_l1=DEFAULT_W_L1, w_giou=DEFAULT_W_GIOU,
                metric="cos"):
    """Array form of the cost. Boxes are normalised cxcywh on both sides."""
    ann_embeddings = np.atleast_2d(np.asarray(ann_embeddings, dtype=np.float64))
    query_contents = np.atleast_2d(np.asarray(query_contents, dtype=np.float64))
    if ann_embeddings.shape[0] == 0 or query_contents.shape[0] == 0:
        raise ValueError("cost matrix needs at least one annotation and one query")
    sim = activated_matrix(ann_embeddings, query_contents, temperature, metric=metric)
    return sim - box_distance_matrix(ann_boxes, query_boxes, w_l1, w_giou)


def unsupervised_cost(annotations, queries, image_size, temperature=DEFAULT_TEMPERATURE,
                      w_l1=DEFAULT_W_L1, w_giou=DEFAULT_W_GIOU):
    """M x N cost between pseudo annotations and query predictions.

    ``image_size`` is ``(width, height)`` of the image the annotation boxes live in.
    """
    if not annotations or not queries:
        raise ValueError("cost matrix needs at least one annotation and one query")
    ann_boxes = box_convert(np.stack([a.box for a in annotations]), "xyxy", "cxcywh_n", image_size)
    return cost_matrix(
        ann_boxes,
        np.stack([a.embedding for a in annotations]),
        np.stack([q.box for q in queries]),
        np.stack([q.content for q in queries]),
        temperature, w_l1, w_giou,
    )


def _tight_graph(cost):
    """Edges of the padded square problem that lie on some optimal matching.

    Returns ``(adj, match_row)`` over ``K = max(M, N)`` rows and columns where
    padded rows/columns carry zero cost, plus the solver's perfect matching.
    """
    M, N = cost.shape
    K = max(M, N)
    neg = -cost
    if M <= N:
        col4row, u, v = lsap_min(neg)
        u_full = np.concatenate([u, np.zeros(K - M)])
        v_full = v
        padded = np.zeros((K, K))
        padded[:M] = neg
        match_row = np.empty(K, dtype=np.int64)
        match_row[:M] = col4row
        free_cols = np.setdiff1d(np.arange(K), col4row)
        match_row[M:] = free_cols
    else:
        row4col, v, u = lsap_min(neg.T)
        u_full = u
        v_full = np.concatenate([v, np.zeros(K - N)])
        padded = np.zeros((K, K))
        padded[:, :N] = neg
        match_row = np.full(K, -1, dtype=np.int64)
        match_row[row4col] = np.arange(N)
        unmatched = np.flatnonzero(match_row < 0)
        match_row[unmatched] = np.arange(N, K)
    scale = max(1.0, float(np.abs(cost).max()))
    tol = 1e-9 * scale
    reduced = padded - u_full[:, None] - v_full[None, :]
    adj = np.abs(reduced) <= tol
    adj[np.arange(K), match_row] = True
    return adj, match_row


def _augment(adj, match_row, match_col, fixed, start_row, target_col):
    """Alternating BFS from ``start_row`` (currently unmatched) to the free
    ``target_col`` through rows that are not fixed. Applies the path on success."""
    parent = {}
    queue = deque([start_row])
    seen_rows = {start_row}
    while queue:
        x = queue.popleft()
        for y in np.flatnonzero(adj[x]):
            y = int(y)
            if y in parent:
                continue
            if y == target_col:
                parent[y] = x
                col = y
                while True:
                    row = parent[col]
                    old = int(match_row[row])
                    match_row[row] = col
                    match_col[col] = row
                    if row == start_row:
                        return True
                    col = old
            owner = int(match_col[y])
            if owner < 0 or fixed[owner] or owner in seen_rows:
                continue
            parent[y] = x
            seen_rows.add(owner)
            queue.append(owner)
    return False


def _lexicographic_refine(adj, match_row, n_real_rows, n_real_cols):
    """Row by row, move each row to its smallest column that still admits a
    perfect matching inside the optimal-edge graph ``adj``."""
    K = adj.shape[0]
    match_row = match_row.copy()
    match_col = np.empty(K, dtype=np.int64)
    match_col[match_row] = np.arange(K)
    fixed = np.zeros(K, dtype=bool)
    for r in range(n_real_rows):
        current = int(match_row[r])
        candidates = [int(c) for c in np.flatnonzero(adj[r, :n_real_cols])]
        if current >= n_real_cols:
            candidates.append(current)
        else:
            # padded columns are interchangeable; one representative is enough
            pads = [int(c) + n_real_cols for c in np.flatnonzero(adj[r, n_real_cols:])
                    if not fixed[match_col[int(c) + n_real_cols]]]
            candidates.extend(pads[:1])
        for c in candidates:
            if c == current:
                break
            owner = int(match_col[c])
            if fixed[owner]:
                continue
            saved_row, saved_col = match_row.copy(), match_col.copy()
            fixed[r] = True
            match_row[r] = c
            match_col[c] = r
            match_col[current] = -1
            match_row[owner] = -1
            if _augment(adj, match_row, match_col, fixed, owner, current):
                break
            match_row, match_col = saved_row, saved_col
            fixed[r] = False
        fixed[r] = True
    return match_row


def hungarian_match(cost):
    """Maximum-total one-to-one matching of size ``min(M, N)``.

    Ties between equal-total matchings resolve to the lexicographically
    smallest ``(m, n)`` pair list.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or 0 in cost.shape:
        raise ValueError(f"cost must be a non-empty 2-D matrix, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix has non-finite entries")
    M, N = cost.shape
    adj, match_row = _tight_graph(cost)
    match_row = _lexicographic_refine(adj, match_row, M, N)
    pairs = [(m, int(match_row[m])) for m in range(M) if match_row[m] < N]
    return MatchIndexPairs(pairs)


def brute_force_match(cost):
    """Exact maximum-total matching by exhaustive search over the smaller side.

    Dynamic programme over subsets of the smaller dimension (at most 8), so every
    injective assignment is accounted for. Test oracle only.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or 0 in cost.shape:
        raise ValueError("cost must be a non-empty 2-D matrix")
    transposed = cost.shape[0] > cost.shape[1]
    c = cost.T if transposed else cost
    S, L = c.shape  # S <= L
    if S > 8:
        raise ValueError(f"brute force limited to min(M, N) <= 8, got {S}")
    full = (1 << S) - 1
    neg_inf = -np.inf
    # best[j][mask]: best total using columns j.. with rows in mask still unassigned
    best = np.full((L + 1, full + 1), neg_inf)
    best[L, 0] = 0.0
    choice = np.full((L, full + 1), -1, dtype=np.int64)
    for j in range(L - 1, -1, -1):
        for mask in range(full + 1):
            # skip column j
            val = best[j + 1, mask]
            pick = -1
            m = mask
            while m:
                low = m & -m
                r = low.bit_length() - 1
                cand = c[r, j] + best[j + 1, mask ^ low]
                if cand > val:
                    val, pick = cand, r
                m ^= low
            best[j, mask] = val
            choice[j, mask] = pick
    # remaining columns must absorb every row when S <= L
    pairs = []
    mask = full
    for j in range(L):
        r = choice[j, mask]
        if r >= 0:
            pairs.append((j, int(r)) if transposed else (int(r), j))
            mask ^= 1 << r
    return MatchIndexPairs(sorted(pairs))
