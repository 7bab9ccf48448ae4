"""Hot inner loops with a numba path and a pure-numpy path.

Every public function here dispatches on :func:`cersdx._accel.numba_enabled`
unless ``backend`` is given explicitly (``"numba"`` or ``"numpy"``).  Both
paths must return identical results; the test-suite checks this.
"""

from __future__ import annotations

import numpy as np

from ._accel import HAVE_NUMBA, njit, numba_enabled


def _pick(backend: str | None) -> str:
    if backend is None:
        return "numba" if numba_enabled() else "numpy"
    if backend not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {backend!r}")
    if backend == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is not installed")
    return backend


# --------------------------------------------------------------------------
# Otsu: index k maximising between-class variance of {bins <= k} vs {bins > k}
# --------------------------------------------------------------------------

@njit
def _otsu_loop(hist, centers):
    nb = hist.shape[0]
    total = 0.0
    total_sum = 0.0
    for i in range(nb):
        total += hist[i]
        total_sum += hist[i] * centers[i]
    best = -1.0
    first = -1
    last = -1
    w0 = 0.0
    s0 = 0.0
    for k in range(nb - 1):
        w0 += hist[k]
        s0 += hist[k] * centers[k]
        w1 = total - w0
        if w0 <= 0.0 or w1 <= 0.0:
            continue
        m0 = s0 / w0
        m1 = (total_sum - s0) / w1
        var = w0 * w1 * (m0 - m1) * (m0 - m1)
        if var > best:
            best = var
            first = k
            last = k
        elif var == best:
            last = k
    return first, last


def _otsu_numpy(hist, centers):
    cw = np.cumsum(hist)
    cs = np.cumsum(hist * centers)
    w0, s0 = cw[:-1], cs[:-1]
    total, total_sum = cw[-1], cs[-1]
    w1 = total - w0
    valid = (w0 > 0) & (w1 > 0)
    if not valid.any():
        return -1, -1
    with np.errstate(divide="ignore", invalid="ignore"):
        m0 = s0 / w0
        m1 = (total_sum - s0) / w1
        var = np.where(valid, w0 * w1 * (m0 - m1) ** 2, -1.0)
    best = var.max()
    hits = np.flatnonzero(var == best)
    return int(hits[0]), int(hits[-1])


def otsu_split(hist, centers, backend=None) -> tuple[int, int]:
    """Split bins maximising between-class variance (class 0 = bins ``<= k``).

    Returns the first and last maximiser; they differ when the optimum is a
    plateau across empty bins.  ``(-1, -1)`` when the histogram occupies a
    single bin.
    """
    hist = np.ascontiguousarray(hist, dtype=np.float64)
    centers = np.ascontiguousarray(centers, dtype=np.float64)
    if _pick(backend) == "numba":
        first, last = _otsu_loop(hist, centers)
        return int(first), int(last)
    return _otsu_numpy(hist, centers)


# --------------------------------------------------------------------------
# Tissue fraction of square windows over a binary mask
# --------------------------------------------------------------------------

@njit
def _window_frac_loop(mask, ys, xs, win):
    h, w = mask.shape
    out = np.zeros(ys.shape[0])
    for n in range(ys.shape[0]):
        y0 = ys[n]
        x0 = xs[n]
        y1 = min(y0 + win, h)
        x1 = min(x0 + win, w)
        cnt = 0
        for y in range(y0, y1):
            for x in range(x0, x1):
                if mask[y, x]:
                    cnt += 1
        area = (y1 - y0) * (x1 - x0)
        out[n] = cnt / area if area > 0 else 0.0
    return out


def _window_frac_numpy(mask, ys, xs, win):
    h, w = mask.shape
    integral = np.zeros((h + 1, w + 1), dtype=np.int64)
    integral[1:, 1:] = np.cumsum(np.cumsum(mask.astype(np.int64), axis=0), axis=1)
    y1 = np.minimum(ys + win, h)
    x1 = np.minimum(xs + win, w)
    cnt = integral[y1, x1] - integral[ys, x1] - integral[y1, xs] + integral[ys, xs]
    area = (y1 - ys) * (x1 - xs)
    out = np.zeros(len(ys))
    ok = area > 0
    out[ok] = cnt[ok] / area[ok]
    return out


def window_fractions(mask, ys, xs, win: int, backend=None) -> np.ndarray:
    """Tissue fraction of ``win``-sized windows with top-left ``(ys, xs)``,
    clipped to the mask bounds."""
    mask = np.ascontiguousarray(mask, dtype=np.bool_)
    ys = np.ascontiguousarray(ys, dtype=np.int64)
    xs = np.ascontiguousarray(xs, dtype=np.int64)
    if _pick(backend) == "numba":
        return _window_frac_loop(mask, ys, xs, int(win))
    return _window_frac_numpy(mask, ys, xs, int(win))


# --------------------------------------------------------------------------
# Longest common subsequence length over integer token ids
# --------------------------------------------------------------------------

@njit
def _lcs_loop(a, b):
    m = b.shape[0]
    prev = np.zeros(m + 1, dtype=np.int64)
    cur = np.zeros(m + 1, dtype=np.int64)
    for i in range(a.shape[0]):
        for j in range(1, m + 1):
            if a[i] == b[j - 1]:
                cur[j] = prev[j - 1] + 1
            elif prev[j] >= cur[j - 1]:
                cur[j] = prev[j]
            else:
                cur[j] = cur[j - 1]
        for j in range(m + 1):
            prev[j] = cur[j]
    return prev[m]


def _lcs_numpy(a, b):
    prev = np.zeros(len(b) + 1, dtype=np.int64)
    for tok in a:
        match = b == tok
        cand = prev.copy()
        cand[1:] = np.where(match, np.maximum(prev[:-1] + 1, prev[1:]), prev[1:])
        prev = np.maximum.accumulate(cand)
    return prev[-1]


def lcs_length(a, b, backend=None) -> int:
    a = np.ascontiguousarray(a, dtype=np.int64)
    b = np.ascontiguousarray(b, dtype=np.int64)
    if len(a) == 0 or len(b) == 0:
        return 0
    if _pick(backend) == "numba":
        return int(_lcs_loop(a, b))
    return int(_lcs_numpy(a, b))


# --------------------------------------------------------------------------
# Mann-Whitney pair counting: 2 * #(p > n) + #(p == n)
# --------------------------------------------------------------------------

@njit
def _mw_loop(pos, neg):
    # both inputs sorted ascending; one merge pass counts smaller and equal
    # negatives for every positive
    acc = 0
    lo = 0
    hi = 0
    m = neg.shape[0]
    for i in range(pos.shape[0]):
        p = pos[i]
        while lo < m and neg[lo] < p:
            lo += 1
        if hi < lo:
            hi = lo
        while hi < m and neg[hi] <= p:
            hi += 1
        acc += 2 * lo + (hi - lo)
    return acc


def _mw_numpy(pos, neg):
    neg_sorted = np.sort(neg)
    lo = np.searchsorted(neg_sorted, pos, side="left")
    hi = np.searchsorted(neg_sorted, pos, side="right")
    return int(2 * lo.sum() + (hi - lo).sum())


def mann_whitney_twice_u(pos, neg, backend=None) -> int:
    """Twice the Mann-Whitney U statistic of ``pos`` over ``neg`` (ties count
    one half), kept integral so both backends agree exactly."""
    pos = np.ascontiguousarray(pos, dtype=np.float64)
    neg = np.ascontiguousarray(neg, dtype=np.float64)
    if _pick(backend) == "numba":
        return int(_mw_loop(np.sort(pos), np.sort(neg)))
    return _mw_numpy(pos, neg)


# --------------------------------------------------------------------------
# Euclidean distance matrix
# --------------------------------------------------------------------------

@njit
def _pdist_loop(x):
    n, d = x.shape
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            s = 0.0
            for k in range(d):
                t = x[i, k] - x[j, k]
                s += t * t
            s = np.sqrt(s)
            out[i, j] = s
            out[j, i] = s
    return out


def _pdist_numpy(x):
    diff = x[:, None, :] - x[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def pairwise_distances(x, backend=None) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float64)
    if _pick(backend) == "numba":
        return _pdist_loop(x)
    return _pdist_numpy(x)


# --------------------------------------------------------------------------
# Fused Adam update (in place on param, m, v)
# --------------------------------------------------------------------------

@njit
def _adam_loop(param, grad, m, v, lr, b1, b2, eps, c1, c2, wd):
    p = param.ravel()
    g = grad.ravel()
    mm = m.ravel()
    vv = v.ravel()
    for i in range(p.shape[0]):
        gi = g[i] + wd * p[i]
        mm[i] = b1 * mm[i] + (1.0 - b1) * gi
        vv[i] = b2 * vv[i] + (1.0 - b2) * gi * gi
        p[i] -= lr * (mm[i] / c1) / (np.sqrt(vv[i] / c2) + eps)


def _adam_numpy(param, grad, m, v, lr, b1, b2, eps, c1, c2, wd):
    g = grad + wd * param if wd else grad
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * g * g
    denom = np.sqrt(v / c2)
    denom += eps
    param -= lr * (m / c1) / denom


def adam_update(param, grad, m, v, lr, b1, b2, eps, c1, c2, wd=0.0, backend=None) -> None:
    """One Adam step with bias corrections ``c1 = 1 - b1**t``, ``c2 = 1 - b2**t``.

    ``param``, ``m`` and ``v`` must be contiguous float64 arrays; they are
    updated in place.
    """
    if _pick(backend) == "numba" and param.flags.c_contiguous:
        grad = np.ascontiguousarray(grad, dtype=np.float64)
        _adam_loop(param, grad, m, v, lr, b1, b2, eps, c1, c2, wd)
    else:
        _adam_numpy(param, grad, m, v, lr, b1, b2, eps, c1, c2, wd)
