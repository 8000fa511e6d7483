"""Numeric inner loops, each in a numba and a numpy flavour.

The public names (``grow_forest``, ``predict_forest``, ``knn_predict``,
``leverage_corrected_meat``) dispatch on ``_accel.USE_NUMBA``.  Both
flavours follow the same split-search order and tie-breaking so that a
forest grown by either path makes the same splits.
"""

from __future__ import annotations

import numpy as np

from . import _accel
from ._accel import njit

LEAF = -1
UNBOUNDED_DEPTH = 1_000_000


def tree_capacity(n_rows: int, max_depth: int) -> int:
    cap = 2 * max(n_rows, 1) - 1
    if max_depth < 40:
        cap = min(cap, 2 ** (max_depth + 1) - 1)
    return cap


# -- regression trees: numba path -----------------------------------------


@njit
def _best_split_loop(X, y, idx, start, end, min_leaf):
    count = end - start
    best_gain = -np.inf
    best_feat = -1
    best_thr = 0.0
    vals = np.empty(count)
    ys = np.empty(count)
    for f in range(X.shape[1]):
        for j in range(count):
            vals[j] = X[idx[start + j], f]
        order = np.argsort(vals, kind="mergesort")
        for j in range(count):
            ys[j] = y[idx[start + order[j]]]
        total = 0.0
        for j in range(count):
            total += ys[j]
        left = 0.0
        for k in range(1, count):
            left += ys[k - 1]
            if k < min_leaf or count - k < min_leaf:
                continue
            lo = vals[order[k - 1]]
            hi = vals[order[k]]
            if not lo < hi:
                continue
            right = total - left
            gain = left * left / k + right * right / (count - k)
            if gain > best_gain:
                best_gain = gain
                best_feat = f
                thr = lo + 0.5 * (hi - lo)
                if thr >= hi:
                    thr = lo
                best_thr = thr
    return best_feat, best_thr, best_gain


@njit
def _grow_tree_loop(X, y, rows, max_depth, min_leaf, feature, threshold, left, right, value):
    m = rows.shape[0]
    idx = rows.copy()
    buf = np.empty(m, dtype=np.int64)
    stack_node = np.empty(m * 2 + 1, dtype=np.int64)
    stack_start = np.empty(m * 2 + 1, dtype=np.int64)
    stack_end = np.empty(m * 2 + 1, dtype=np.int64)
    stack_depth = np.empty(m * 2 + 1, dtype=np.int64)
    top = 0
    stack_node[0] = 0
    stack_start[0] = 0
    stack_end[0] = m
    stack_depth[0] = 0
    top = 1
    n_nodes = 1
    while top > 0:
        top -= 1
        node = stack_node[top]
        start = stack_start[top]
        end = stack_end[top]
        depth = stack_depth[top]
        count = end - start
        s = 0.0
        for j in range(start, end):
            s += y[idx[j]]
        value[node] = s / count
        feature[node] = LEAF
        left[node] = LEAF
        right[node] = LEAF
        if depth >= max_depth or count < 2 * min_leaf:
            continue
        f, thr, gain = _best_split_loop(X, y, idx, start, end, min_leaf)
        parent = s * s / count
        if f < 0 or not gain > parent + 1e-12 * (abs(parent) + 1.0):
            continue
        nl = 0
        for j in range(start, end):
            if X[idx[j], f] <= thr:
                buf[nl] = idx[j]
                nl += 1
        nr = nl
        for j in range(start, end):
            if not X[idx[j], f] <= thr:
                buf[nr] = idx[j]
                nr += 1
        for j in range(count):
            idx[start + j] = buf[j]
        feature[node] = f
        threshold[node] = thr
        left[node] = n_nodes
        right[node] = n_nodes + 1
        stack_node[top] = n_nodes + 1
        stack_start[top] = start + nl
        stack_end[top] = end
        stack_depth[top] = depth + 1
        top += 1
        stack_node[top] = n_nodes
        stack_start[top] = start
        stack_end[top] = start + nl
        stack_depth[top] = depth + 1
        top += 1
        n_nodes += 2
    return n_nodes


@njit
def _grow_forest_numba(X, y, samples, max_depth, min_leaf, cap):
    n_trees = samples.shape[0]
    feature = np.full((n_trees, cap), LEAF, dtype=np.int64)
    threshold = np.zeros((n_trees, cap))
    left = np.full((n_trees, cap), LEAF, dtype=np.int64)
    right = np.full((n_trees, cap), LEAF, dtype=np.int64)
    value = np.zeros((n_trees, cap))
    for b in range(n_trees):
        _grow_tree_loop(X, y, samples[b], max_depth, min_leaf,
                        feature[b], threshold[b], left[b], right[b], value[b])
    return feature, threshold, left, right, value


@njit
def _predict_forest_numba(X, feature, threshold, left, right, value):
    m = X.shape[0]
    n_trees = feature.shape[0]
    out = np.zeros(m)
    for i in range(m):
        acc = 0.0
        for b in range(n_trees):
            node = 0
            while left[b, node] != LEAF:
                if X[i, feature[b, node]] <= threshold[b, node]:
                    node = left[b, node]
                else:
                    node = right[b, node]
            acc += value[b, node]
        out[i] = acc / n_trees
    return out


# -- regression trees: numpy path -----------------------------------------


def _best_split_numpy(X, y_seg, rows_seg, min_leaf):
    count = rows_seg.size
    best = (-1, 0.0, -np.inf)
    k = np.arange(1, count)
    size_ok = (k >= min_leaf) & (count - k >= min_leaf)
    for f in range(X.shape[1]):
        vals = X[rows_seg, f]
        order = np.argsort(vals, kind="mergesort")
        vs = vals[order]
        cs = np.cumsum(y_seg[order])
        total = cs[-1]
        lsum = cs[:-1]
        ok = size_ok & (vs[:-1] < vs[1:])
        if not ok.any():
            continue
        rsum = total - lsum
        gain = np.where(ok, lsum * lsum / k + rsum * rsum / (count - k), -np.inf)
        j = int(np.argmax(gain))
        if gain[j] > best[2]:
            lo, hi = vs[j], vs[j + 1]
            thr = lo + 0.5 * (hi - lo)
            if thr >= hi:
                thr = lo
            best = (f, float(thr), float(gain[j]))
    return best


def _grow_tree_numpy(X, y, rows, max_depth, min_leaf, cap):
    feature = np.full(cap, LEAF, dtype=np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, LEAF, dtype=np.int64)
    right = np.full(cap, LEAF, dtype=np.int64)
    value = np.zeros(cap)
    stack = [(0, rows.astype(np.int64), 0)]
    n_nodes = 1
    while stack:
        node, seg, depth = stack.pop()
        count = seg.size
        y_seg = y[seg]
        s = float(np.cumsum(y_seg)[-1])
        value[node] = s / count
        if depth >= max_depth or count < 2 * min_leaf:
            continue
        f, thr, gain = _best_split_numpy(X, y_seg, seg, min_leaf)
        parent = s * s / count
        if f < 0 or not gain > parent + 1e-12 * (abs(parent) + 1.0):
            continue
        go_left = X[seg, f] <= thr
        feature[node], threshold[node] = f, thr
        left[node], right[node] = n_nodes, n_nodes + 1
        stack.append((n_nodes + 1, seg[~go_left], depth + 1))
        stack.append((n_nodes, seg[go_left], depth + 1))
        n_nodes += 2
    return feature, threshold, left, right, value


def _grow_forest_numpy(X, y, samples, max_depth, min_leaf, cap):
    parts = [_grow_tree_numpy(X, y, s, max_depth, min_leaf, cap) for s in samples]
    return tuple(np.stack(arrs) for arrs in zip(*parts))


def _predict_forest_numpy(X, feature, threshold, left, right, value):
    m = X.shape[0]
    rows = np.arange(m)
    acc = np.zeros(m)
    for b in range(feature.shape[0]):
        node = np.zeros(m, dtype=np.int64)
        while True:
            internal = left[b, node] != LEAF
            if not internal.any():
                break
            go = X[rows, np.maximum(feature[b, node], 0)] <= threshold[b, node]
            node = np.where(internal, np.where(go, left[b, node], right[b, node]), node)
        acc += value[b, node]
    return acc / feature.shape[0]


# -- nearest neighbours -----------------------------------------------------


@njit
def _knn_numba(X_train, y_train, X_query, k):
    m = X_train.shape[0]
    d = X_train.shape[1]
    out = np.empty(X_query.shape[0])
    dist = np.empty(m)
    for q in range(X_query.shape[0]):
        for i in range(m):
            acc = 0.0
            for j in range(d):
                diff = X_train[i, j] - X_query[q, j]
                acc += diff * diff
            dist[i] = acc
        order = np.argsort(dist, kind="mergesort")
        s = 0.0
        for i in range(k):
            s += y_train[order[i]]
        out[q] = s / k
    return out


def _knn_numpy(X_train, y_train, X_query, k, chunk=512):
    out = np.empty(X_query.shape[0])
    for lo in range(0, X_query.shape[0], chunk):
        Q = X_query[lo:lo + chunk]
        diff = Q[:, None, :] - X_train[None, :, :]
        dist = np.einsum("qmd,qmd->qm", diff, diff)
        order = np.argsort(dist, axis=1, kind="stable")[:, :k]
        out[lo:lo + chunk] = y_train[order].mean(axis=1)
    return out


# -- leverage-corrected sandwich meat --------------------------------------


@njit
def _corrected_meat_numba(rows, resid, dresid, bread_inv, weights, n_total, max_cond):
    n, T, q = rows.shape
    meat = np.zeros((q, q))
    fallback = np.zeros(n, dtype=np.bool_)
    eye = np.eye(T)
    for i in range(n):
        H = (weights[i] / n_total) * (dresid[i] @ bread_inv @ rows[i].T)
        A = eye - H
        u = resid[i].copy()
        if np.linalg.cond(A) < max_cond:
            u = np.linalg.solve(A, resid[i])
        else:
            fallback[i] = True
        g = rows[i].T @ u
        for a in range(q):
            for b in range(q):
                meat[a, b] += weights[i] * g[a] * g[b]
    return meat / n_total, fallback


def _corrected_meat_numpy(rows, resid, dresid, bread_inv, weights, n_total, max_cond):
    n, T, q = rows.shape
    H = (weights / n_total)[:, None, None] * np.einsum("itq,qk,isk->its", dresid, bread_inv, rows)
    A = np.eye(T)[None] - H
    fallback = ~(np.linalg.cond(A) < max_cond)
    u = resid.copy()
    good = ~fallback
    if good.any():
        u[good] = np.linalg.solve(A[good], resid[good][..., None])[..., 0]
    g = np.einsum("itq,it->iq", rows, u)
    meat = np.einsum("i,ia,ib->ab", weights, g, g) / n_total
    return meat, fallback


# -- dispatch ---------------------------------------------------------------


def _pick(numba_fn, numpy_fn):
    return numba_fn if _accel.USE_NUMBA else numpy_fn


def grow_forest(X, y, samples, max_depth, min_leaf, backend=None):
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    samples = np.ascontiguousarray(samples, dtype=np.int64)
    cap = tree_capacity(samples.shape[1], max_depth)
    fn = _resolve(backend, _grow_forest_numba, _grow_forest_numpy)
    return fn(X, y, samples, int(max_depth), int(min_leaf), cap)


def predict_forest(X, forest, backend=None):
    X = np.ascontiguousarray(X, dtype=np.float64)
    fn = _resolve(backend, _predict_forest_numba, _predict_forest_numpy)
    return fn(X, *forest)


def knn_predict(X_train, y_train, X_query, k, backend=None):
    fn = _resolve(backend, _knn_numba, _knn_numpy)
    return fn(np.ascontiguousarray(X_train, dtype=np.float64),
              np.ascontiguousarray(y_train, dtype=np.float64),
              np.ascontiguousarray(X_query, dtype=np.float64), int(k))


def leverage_corrected_meat(rows, resid, dresid, bread_inv, weights, n_total, max_cond=1e12, backend=None):
    fn = _resolve(backend, _corrected_meat_numba, _corrected_meat_numpy)
    return fn(np.ascontiguousarray(rows, dtype=np.float64),
              np.ascontiguousarray(resid, dtype=np.float64),
              np.ascontiguousarray(dresid, dtype=np.float64),
              np.ascontiguousarray(bread_inv, dtype=np.float64),
              np.ascontiguousarray(weights, dtype=np.float64),
              float(n_total), float(max_cond))


def _resolve(backend, numba_fn, numpy_fn):
    if backend is None:
        return _pick(numba_fn, numpy_fn)
    if backend == "numba":
        if not _accel.NUMBA_AVAILABLE:
            raise RuntimeError("numba backend requested but numba is not installed")
        return numba_fn
    if backend == "numpy":
        return numpy_fn
    raise ValueError(f"unknown backend {backend!r}")
