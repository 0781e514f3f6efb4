"""Numba kernels for tree growth and traversal.

Trees are grown on pre-binned features (bin index per sample per feature,
with the sorted unique values kept per feature) using weighted Gini
impurity, where the weight of a row is the number of times it appears in
the tree's resample. Nodes are emitted into flat arrays; ``feature == -1``
marks a leaf.
"""

from __future__ import annotations

import numpy as np
from numba import njit

# Splits whose impurity-score improvement is below this are treated as
# zero-gain and rejected (guards float noise on duplicate-heavy nodes).
_MIN_GAIN = 1e-12


@njit(cache=True, nogil=True, inline="always")
def _rng_next(state):
    # xorshift64* step; state must be a nonzero uint64
    state ^= state >> np.uint64(12)
    state ^= state << np.uint64(25)
    state ^= state >> np.uint64(27)
    return state, state * np.uint64(2685821657736338717)


@njit(cache=True, nogil=True)
def build_tree(
    xb,  # (n, F) uint16 bin indices
    bin_vals,  # float64 concatenated unique values per feature
    bin_off,  # int64 (F+1) offsets into bin_vals
    y,  # uint8 labels
    w,  # float64 per-row resample counts
    idx0,  # int64 rows with w > 0
    d,  # features considered per split
    min_split,  # minimum (weighted) node size to attempt a split
    max_depth,  # maximum depth (root = 0)
    seed,  # uint64 feature-sampling seed
    node_feature,  # int32 out
    node_threshold,  # float64 out
    node_left,  # int32 out, tree-local child ids
    node_right,  # int32 out
    node_value,  # float64 out, leaf = fraction of positive resampled labels
):
    n_rows = idx0.shape[0]
    n_feat = bin_off.shape[0] - 1

    perm = idx0.copy()
    tmp = np.empty(n_rows, np.int64)
    feat_buf = np.empty(n_feat, np.int64)

    max_bins = 0
    for f in range(n_feat):
        nb = bin_off[f + 1] - bin_off[f]
        if nb > max_bins:
            max_bins = nb
    hist_w = np.empty(max_bins, np.float64)
    hist_o = np.empty(max_bins, np.float64)

    cap = node_feature.shape[0]
    stack_node = np.empty(cap, np.int64)
    stack_lo = np.empty(cap, np.int64)
    stack_hi = np.empty(cap, np.int64)
    stack_depth = np.empty(cap, np.int64)

    state = np.uint64(seed) ^ np.uint64(0x9E3779B97F4A7C15)
    if state == np.uint64(0):
        state = np.uint64(0x106689D45497FDB5)

    n_nodes = 1
    sp = 0
    stack_node[sp] = 0
    stack_lo[sp] = 0
    stack_hi[sp] = n_rows
    stack_depth[sp] = 0
    sp += 1

    while sp > 0:
        sp -= 1
        node = stack_node[sp]
        lo = stack_lo[sp]
        hi = stack_hi[sp]
        depth = stack_depth[sp]

        w_tot = 0.0
        o_tot = 0.0
        for k in range(lo, hi):
            s = perm[k]
            w_tot += w[s]
            o_tot += w[s] * y[s]
        node_value[node] = o_tot / w_tot
        node_feature[node] = -1

        if w_tot < min_split or o_tot == 0.0 or o_tot == w_tot:
            continue
        if depth >= max_depth:
            continue

        # Sample d distinct features (partial Fisher-Yates), then sort them
        # so ties resolve toward the lowest feature index.
        for f in range(n_feat):
            feat_buf[f] = f
        for j in range(d):
            state, r = _rng_next(state)
            k = j + np.int64(r % np.uint64(n_feat - j))
            t = feat_buf[j]
            feat_buf[j] = feat_buf[k]
            feat_buf[k] = t
        for j in range(1, d):
            key = feat_buf[j]
            i = j - 1
            while i >= 0 and feat_buf[i] > key:
                feat_buf[i + 1] = feat_buf[i]
                i -= 1
            feat_buf[i + 1] = key

        parent_score = (o_tot * o_tot + (w_tot - o_tot) * (w_tot - o_tot)) / w_tot
        best_gain = _MIN_GAIN
        best_f = -1
        best_cut = -1
        best_thr = 0.0

        for j in range(d):
            f = feat_buf[j]
            off = bin_off[f]
            nb = bin_off[f + 1] - off
            for b in range(nb):
                hist_w[b] = 0.0
                hist_o[b] = 0.0
            for k in range(lo, hi):
                s = perm[k]
                b = np.int64(xb[s, f])
                hist_w[b] += w[s]
                hist_o[b] += w[s] * y[s]

            cum_w = 0.0
            cum_o = 0.0
            prev_b = -1
            for b in range(nb):
                if hist_w[b] <= 0.0:
                    continue
                if prev_b >= 0:
                    w_l = cum_w
                    o_l = cum_o
                    w_r = w_tot - w_l
                    o_r = o_tot - o_l
                    score = (o_l * o_l + (w_l - o_l) * (w_l - o_l)) / w_l + (
                        o_r * o_r + (w_r - o_r) * (w_r - o_r)
                    ) / w_r
                    gain = score - parent_score
                    if gain > best_gain:
                        v_prev = bin_vals[off + prev_b]
                        v_cur = bin_vals[off + b]
                        thr = 0.5 * (v_prev + v_cur)
                        if thr >= v_cur:
                            # adjacent floats: fall back to the exact left value
                            thr = v_prev
                        best_gain = gain
                        best_f = f
                        best_cut = prev_b
                        best_thr = thr
                cum_w += hist_w[b]
                cum_o += hist_o[b]
                prev_b = b

        if best_f < 0:
            continue

        nl = 0
        for k in range(lo, hi):
            s = perm[k]
            if xb[s, best_f] <= best_cut:
                tmp[lo + nl] = s
                nl += 1
        pos = lo + nl
        for k in range(lo, hi):
            s = perm[k]
            if xb[s, best_f] > best_cut:
                tmp[pos] = s
                pos += 1
        for k in range(lo, hi):
            perm[k] = tmp[k]

        left_id = n_nodes
        right_id = n_nodes + 1
        n_nodes += 2
        node_feature[node] = best_f
        node_threshold[node] = best_thr
        node_left[node] = left_id
        node_right[node] = right_id

        stack_node[sp] = right_id
        stack_lo[sp] = lo + nl
        stack_hi[sp] = hi
        stack_depth[sp] = depth + 1
        sp += 1
        stack_node[sp] = left_id
        stack_lo[sp] = lo
        stack_hi[sp] = lo + nl
        stack_depth[sp] = depth + 1
        sp += 1

    return n_nodes


@njit(cache=True, nogil=True)
def forest_values(X, node_feature, node_threshold, node_left, node_right, node_value, tree_off, out):
    """Per-tree leaf values for every row of X; out has shape (n_trees, n_rows)."""
    n_trees = tree_off.shape[0] - 1
    m = X.shape[0]
    for b in range(n_trees):
        base = tree_off[b]
        for i in range(m):
            node = base
            while node_feature[node] >= 0:
                if X[i, node_feature[node]] <= node_threshold[node]:
                    node = base + node_left[node]
                else:
                    node = base + node_right[node]
            out[b, i] = node_value[node]
