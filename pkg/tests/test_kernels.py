import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cersdx import kernels
from cersdx._accel import HAVE_NUMBA, numba_enabled

needs_numba = pytest.mark.skipif(not HAVE_NUMBA, reason="numba not installed")


def brute_otsu(hist, centers):
    best, hits = -1.0, []
    for k in range(len(hist) - 1):
        w0, w1 = hist[: k + 1].sum(), hist[k + 1 :].sum()
        if w0 == 0 or w1 == 0:
            continue
        m0 = (hist[: k + 1] * centers[: k + 1]).sum() / w0
        m1 = (hist[k + 1 :] * centers[k + 1 :]).sum() / w1
        v = w0 * w1 * (m0 - m1) ** 2
        if v > best * (1 + 1e-12):
            best, hits = v, [k]
        elif abs(v - best) <= 1e-12 * best:
            hits.append(k)
    return (hits[0], hits[-1]) if hits else (-1, -1)


def brute_lcs(a, b):
    L = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(len(a)):
        for j in range(len(b)):
            L[i + 1][j + 1] = L[i][j] + 1 if a[i] == b[j] else max(L[i][j + 1], L[i + 1][j])
    return L[-1][-1]


def test_otsu_matches_brute_force(backend, rng):
    for _ in range(30):
        hist = rng.integers(0, 20, size=32).astype(float)
        hist[rng.random(32) < 0.3] = 0
        centers = np.arange(32.0)
        assert kernels.otsu_split(hist, centers, backend) == brute_otsu(hist, centers)


def test_otsu_single_bin(backend):
    hist = np.zeros(10)
    hist[4] = 7
    assert kernels.otsu_split(hist, np.arange(10.0), backend) == (-1, -1)


def test_otsu_plateau_over_empty_bins(backend):
    hist = np.zeros(256)
    hist[0], hist[135] = 5, 5
    assert kernels.otsu_split(hist, np.arange(256.0), backend) == (0, 134)


@given(st.lists(st.integers(0, 5), max_size=25), st.lists(st.integers(0, 5), max_size=25))
@settings(max_examples=200, deadline=None)
def test_lcs_matches_dp(a, b):
    expected = brute_lcs(a, b)
    assert kernels.lcs_length(a, b, "numpy") == expected
    if HAVE_NUMBA:
        assert kernels.lcs_length(a, b, "numba") == expected


def test_mann_whitney_pairs(backend, rng):
    for _ in range(20):
        pos = rng.integers(0, 6, size=rng.integers(1, 15)).astype(float)
        neg = rng.integers(0, 6, size=rng.integers(1, 15)).astype(float)
        expected = sum(2 if p > n else (1 if p == n else 0) for p in pos for n in neg)
        assert kernels.mann_whitney_twice_u(pos, neg, backend) == expected


def test_window_fractions_against_direct_sum(backend, rng):
    mask = rng.random((37, 23)) < 0.4
    ys = rng.integers(0, 37, size=50)
    xs = rng.integers(0, 23, size=50)
    got = kernels.window_fractions(mask, ys, xs, 6, backend)
    for y, x, f in zip(ys, xs, got):
        win = mask[y : y + 6, x : x + 6]
        assert f == pytest.approx(win.mean(), abs=1e-15)


def test_pairwise_distances(backend, rng):
    x = rng.standard_normal((12, 5))
    d = kernels.pairwise_distances(x, backend)
    for i in range(12):
        for j in range(12):
            assert d[i, j] == pytest.approx(np.sqrt(((x[i] - x[j]) ** 2).sum()), abs=1e-12)


@needs_numba
def test_adam_backends_agree(rng):
    p1 = rng.standard_normal(100)
    p2 = p1.copy()
    m1, v1 = np.zeros(100), np.zeros(100)
    m2, v2 = np.zeros(100), np.zeros(100)
    for t in range(1, 6):
        g = rng.standard_normal(100)
        c1, c2 = 1 - 0.9**t, 1 - 0.999**t
        kernels.adam_update(p1, g, m1, v1, 1e-3, 0.9, 0.999, 1e-8, c1, c2, 1e-5, backend="numpy")
        kernels.adam_update(p2, g, m2, v2, 1e-3, 0.9, 0.999, 1e-8, c1, c2, 1e-5, backend="numba")
    np.testing.assert_allclose(p1, p2, rtol=0, atol=1e-14)


def test_env_flag_disables_numba(monkeypatch):
    monkeypatch.setenv("CERS_DISABLE_NUMBA", "1")
    assert not numba_enabled()
    monkeypatch.setenv("CERS_DISABLE_NUMBA", "0")
    assert numba_enabled() == HAVE_NUMBA


def test_unknown_backend():
    with pytest.raises(ValueError):
        kernels.lcs_length([1], [1], backend="cuda")
