"""Numba kernels for CART regression trees.

Trees are stored in flat parallel arrays (one block per tree, addressed
through ``offsets``): ``feat[i] >= 0`` marks an internal node splitting on
that feature at ``thr[i]`` (rows with value <= thr go left), ``feat[i] == -1``
marks a leaf predicting ``value[i]``.

All randomness comes from a splitmix64 stream seeded per tree, so fits are
bit-reproducible and independent of threading or scheduling. Split search
never sorts inside a node: each feature is argsorted once per forest and the
per-feature sorted row orders are partitioned stably at every split, so a
node can scan candidate thresholds in one linear pass per feature.
"""

from __future__ import annotations

import numpy as np
from numba import njit

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


@njit(cache=True)
def _mix64(state):
    state = state + _GAMMA
    z = state
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    z = z ^ (z >> np.uint64(31))
    return state, z


@njit(cache=True)
def _rand_below(state, n):
    # multiply-shift on the high 32 bits; bias is O(n / 2^32)
    state, z = _mix64(state)
    r = ((z >> np.uint64(32)) * np.uint64(n)) >> np.uint64(32)
    return state, np.int64(r)


@njit(cache=True)
def _splitmix_stream(seed, count):
    """First `count` raw outputs for a given seed (used by tests)."""
    out = np.empty(count, np.uint64)
    state = np.uint64(seed)
    for i in range(count):
        state, z = _mix64(state)
        out[i] = z
    return out


@njit(cache=True)
def build_forest(xt, y, tree_seeds, n_boot, min_leaf, max_depth, mtry):
    """Grow all trees of one forest.

    xt is the feature-major (p, n) training matrix. Returns flat node
    arrays plus per-tree offsets.
    """
    p, n = xt.shape
    n_trees = tree_seeds.shape[0]
    cap_tree = 2 * n_boot  # binary tree with <= n_boot leaves
    cap = n_trees * cap_tree

    feat = np.full(cap, -1, np.int32)
    thr = np.zeros(cap, np.float64)
    left = np.zeros(cap, np.int32)
    right = np.zeros(cap, np.int32)
    value = np.zeros(cap, np.float64)
    offsets = np.zeros(n_trees + 1, np.int64)

    # sorted row ids per feature, shared by every tree's bootstrap expansion
    global_order = np.empty((p, n), np.int64)
    for f in range(p):
        global_order[f] = np.argsort(xt[f])

    counts = np.empty(n, np.int64)
    order = np.empty((p, n_boot), np.int64)
    scratch = np.empty(n_boot, np.int64)
    side = np.empty(n, np.uint8)
    stack = np.empty((cap_tree, 4), np.int64)  # start, end, depth, node id
    perm = np.empty(p, np.int64)
    feats = np.empty(p, np.int64)

    for t in range(n_trees):
        state = tree_seeds[t]
        for i in range(n):
            counts[i] = 0
        for j in range(n_boot):
            state, r = _rand_below(state, n)
            counts[r] += 1
        # expand each presorted order into the bootstrap multiset
        for f in range(p):
            k = 0
            for i in range(n):
                row = global_order[f, i]
                for _ in range(counts[row]):
                    order[f, k] = row
                    k += 1

        base = offsets[t]
        n_nodes = 1
        stack[0, 0] = 0
        stack[0, 1] = n_boot
        stack[0, 2] = 0
        stack[0, 3] = 0
        top = 1
        while top > 0:
            top -= 1
            start = stack[top, 0]
            end = stack[top, 1]
            depth = stack[top, 2]
            node = base + stack[top, 3]
            m = end - start

            y0 = y[order[0, start]]
            s = 0.0
            all_eq = True
            for i in range(start, end):
                yv = y[order[0, i]]
                s += yv
                if yv != y0:
                    all_eq = False
            if all_eq:
                value[node] = y0  # exact, avoids sum/divide rounding
            else:
                value[node] = s / m

            if m < 2 * min_leaf or depth >= max_depth or all_eq:
                continue

            # mtry distinct features, tried in ascending index order so that
            # equal-gain ties resolve to the lowest feature index
            for i in range(p):
                perm[i] = i
            for i in range(mtry):
                state, r = _rand_below(state, p - i)
                j = i + r
                perm[i], perm[j] = perm[j], perm[i]
                feats[i] = perm[i]
            for i in range(1, mtry):
                f = feats[i]
                j = i - 1
                while j >= 0 and feats[j] > f:
                    feats[j + 1] = feats[j]
                    j -= 1
                feats[j + 1] = f

            best_gain = 0.0
            best_f = -1
            best_thr = 0.0
            for fi in range(mtry):
                f = feats[fi]
                if xt[f, order[f, start]] == xt[f, order[f, end - 1]]:
                    continue  # constant feature in this node
                sl = 0.0
                for i in range(m - 1):
                    row = order[f, start + i]
                    sl += y[row]
                    nl = i + 1
                    nr = m - nl
                    if nl < min_leaf:
                        continue
                    if nr < min_leaf:
                        break
                    vi = xt[f, row]
                    vj = xt[f, order[f, start + i + 1]]
                    if vi < vj:
                        sr = s - sl
                        gain = sl * sl / nl + sr * sr / nr
                        if gain > best_gain:
                            t_ = vi + 0.5 * (vj - vi)
                            if t_ >= vj:  # midpoint rounded onto vj
                                t_ = vi
                            best_gain = gain
                            best_f = f
                            best_thr = t_

            if best_f == -1:
                continue  # no gainful split on the tried features

            for i in range(start, end):
                row = order[0, i]
                side[row] = 1 if xt[best_f, row] <= best_thr else 0
            n_left = 0
            for f in range(p):
                nl = 0
                nr = 0
                for i in range(start, end):
                    row = order[f, i]
                    if side[row] == 1:
                        order[f, start + nl] = row
                        nl += 1
                    else:
                        scratch[nr] = row
                        nr += 1
                for j in range(nr):
                    order[f, start + nl + j] = scratch[j]
                n_left = nl

            feat[node] = best_f
            thr[node] = best_thr
            left[node] = n_nodes
            right[node] = n_nodes + 1
            stack[top, 0] = start
            stack[top, 1] = start + n_left
            stack[top, 2] = depth + 1
            stack[top, 3] = n_nodes
            stack[top + 1, 0] = start + n_left
            stack[top + 1, 1] = end
            stack[top + 1, 2] = depth + 1
            stack[top + 1, 3] = n_nodes + 1
            top += 2
            n_nodes += 2

        offsets[t + 1] = base + n_nodes

    total = offsets[n_trees]
    return (
        feat[:total].copy(),
        thr[:total].copy(),
        left[:total].copy(),
        right[:total].copy(),
        value[:total].copy(),
        offsets,
    )


@njit(cache=True)
def predict_mean(xq, feat, thr, left, right, value, offsets, n_trees_use):
    """Ensemble prediction: running mean over the first `n_trees_use` trees."""
    mq = xq.shape[0]
    out = np.zeros(mq, np.float64)
    for t in range(n_trees_use):
        base = offsets[t]
        # running mean: constant ensembles stay bit-exact for any tree count
        for r in range(mq):
            node = base
            while feat[node] >= 0:
                if xq[r, feat[node]] <= thr[node]:
                    node = base + left[node]
                else:
                    node = base + right[node]
            out[r] += (value[node] - out[r]) / (t + 1.0)
    return out


@njit(cache=True)
def predict_per_tree(xq, feat, thr, left, right, value, offsets, n_trees):
    """Per-tree predictions, shape (n_trees, m)."""
    mq = xq.shape[0]
    out = np.empty((n_trees, mq), np.float64)
    for t in range(n_trees):
        base = offsets[t]
        for r in range(mq):
            node = base
            while feat[node] >= 0:
                if xq[r, feat[node]] <= thr[node]:
                    node = base + left[node]
                else:
                    node = base + right[node]
            out[t, r] = value[node]
    return out
