"""Numba kernels for the epsilon-scaling forward auction.

Benefits are negated squared distances (per-dimension periodic wrap when
``period[d] > 0``). Rectangular problems are squared up with zero-benefit
dummy bidders, which only ever look at prices, so they are served by a
min-price segment tree instead of a full scan.

Each real bidder keeps a cached candidate window: all objects whose value was
within ``delta`` of its best value at the last full scan, and the cut-off
value itself. Prices only rise, so objects outside the window can never exceed
that cut-off; whenever the window's second-best value still beats the cut-off
the top two bids are exact and the full scan is skipped. Results are therefore
bit-identical to a plain full-scan Gauss-Seidel auction.
"""

import numpy as np
from numba import njit

STATUS_OK = 0
STATUS_STUCK = 1


@njit(inline="always")
def _pick(prices, a, b):
    if a < 0:
        return b
    if b < 0:
        return a
    if prices[b] < prices[a] or (prices[b] == prices[a] and b < a):
        return b
    return a


@njit(cache=True)
def _tree_build(prices, tree, size):
    n = prices.shape[0]
    for k in range(size):
        tree[size + k] = k if k < n else -1
    for k in range(size - 1, 0, -1):
        tree[k] = _pick(prices, tree[2 * k], tree[2 * k + 1])


@njit(cache=True)
def _tree_update(prices, tree, size, j):
    k = (size + j) >> 1
    while k >= 1:
        tree[k] = _pick(prices, tree[2 * k], tree[2 * k + 1])
        k >>= 1


@njit(cache=True)
def _tree_argmin(prices, tree, size, lo, hi):
    res = -1
    lo += size
    hi += size
    while lo < hi:
        if lo & 1:
            res = _pick(prices, res, tree[lo])
            lo += 1
        if hi & 1:
            hi -= 1
            res = _pick(prices, res, tree[hi])
        lo >>= 1
        hi >>= 1
    return res


@njit(cache=True)
def mean_periodic_sq(a, b, period):
    """Mean over all (i, j) of min(|a_i - b_j| mod P, P - ...)^2."""
    total = 0.0
    for i in range(a.shape[0]):
        x = a[i]
        for j in range(b.shape[0]):
            dd = abs(x - b[j]) % period
            dd = min(dd, period - dd)
            total += dd * dd
    return total / (a.shape[0] * b.shape[0])


@njit(cache=True)
def auction(src, tgt, period, eps_start, eps_scale, eps_final, max_bids_per_phase, window):
    """Returns (assignment of the m sources, final epsilon, total bids, status)."""
    m = src.shape[0]
    n = tgt.shape[0]
    dim = src.shape[1]
    tgt_t = np.ascontiguousarray(tgt.T)
    src_w = src.copy()
    for d in range(dim):
        if period[d] > 0.0:
            for i in range(m):
                src_w[i, d] = src_w[i, d] % period[d]
            for j in range(n):
                tgt_t[d, j] = tgt_t[d, j] % period[d]

    prices = np.zeros(n)
    size = 1
    while size < n:
        size *= 2
    tree = np.empty(2 * size, np.int64)
    _tree_build(prices, tree, size)

    owner = np.full(n, -1, np.int64)
    assign = np.full(n, -1, np.int64)
    queue = np.empty(n, np.int64)
    vals = np.empty(n)
    K = max(window, 2)
    cand = np.empty((max(m, 1), K), np.int64)
    ncand = np.zeros(max(m, 1), np.int64)
    cutoff = np.full(max(m, 1), np.inf)
    width = np.zeros(max(m, 1))

    eps = eps_start
    total_bids = 0
    while True:
        owner[:] = -1
        for i in range(n):
            assign[i] = -1
            queue[i] = i
        head = 0
        count = n
        phase_bids = 0
        while count > 0:
            i = queue[head]
            head += 1
            if head == n:
                head = 0
            count -= 1
            best = -1
            w1 = -np.inf
            w2 = -np.inf
            if i >= m:
                best = tree[1]
                w1 = -prices[best]
                if n > 1:
                    a = _tree_argmin(prices, tree, size, 0, best)
                    b = _tree_argmin(prices, tree, size, best + 1, n)
                    w2 = -prices[_pick(prices, a, b)]
            else:
                if cutoff[i] < np.inf:
                    for q in range(ncand[i]):
                        j = cand[i, q]
                        v = -prices[j]
                        for d in range(dim):
                            dd = abs(src_w[i, d] - tgt_t[d, j])
                            if period[d] > 0.0:
                                dd = min(dd, period[d] - dd)
                            v -= dd * dd
                        if v > w1:
                            w2 = w1
                            w1 = v
                            best = j
                        elif v > w2:
                            w2 = v
                if not (w2 > cutoff[i]):
                    for j in range(n):
                        vals[j] = -prices[j]
                    for d in range(dim):
                        x = src_w[i, d]
                        p = period[d]
                        row = tgt_t[d]
                        if p > 0.0:
                            for j in range(n):
                                dd = abs(x - row[j])
                                dd = min(dd, p - dd)
                                vals[j] -= dd * dd
                        else:
                            for j in range(n):
                                dd = x - row[j]
                                vals[j] -= dd * dd
                    best = 0
                    w1 = vals[0]
                    w2 = -np.inf
                    for j in range(1, n):
                        v = vals[j]
                        if v > w2:
                            if v > w1:
                                w2 = w1
                                w1 = v
                                best = j
                            else:
                                w2 = v
                    cutoff[i] = np.inf
                    if window >= 2 and n > 2:
                        gap = w1 - w2
                        delta = max(width[i], 2.0 * gap)
                        for _ in range(8):
                            cut = w1 - delta
                            q = 0
                            for j in range(n):
                                if vals[j] >= cut:
                                    if q < K:
                                        cand[i, q] = j
                                    q += 1
                            if q <= K:
                                if q >= 2:
                                    ncand[i] = q
                                    cutoff[i] = cut
                                    width[i] = 2.0 * delta if 4 * q < K else delta
                                break
                            delta *= 0.5
                            if delta <= gap:
                                break
            if w2 == -np.inf:
                w2 = w1
            prices[best] += w1 - w2 + eps
            if m < n:
                _tree_update(prices, tree, size, best)
            prev = owner[best]
            owner[best] = i
            assign[i] = best
            if prev >= 0:
                assign[prev] = -1
                t = head + count
                if t >= n:
                    t -= n
                queue[t] = prev
                count += 1
            total_bids += 1
            phase_bids += 1
            if phase_bids > max_bids_per_phase:
                return assign[:m].copy(), eps, total_bids, STATUS_STUCK
        if eps <= eps_final:
            break
        eps = max(eps * eps_scale, eps_final)
    return assign[:m].copy(), eps, total_bids, STATUS_OK
