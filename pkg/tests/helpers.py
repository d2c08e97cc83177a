"""Independent oracles shared by the test modules."""

import time
from contextlib import contextmanager

import numpy as np


@contextmanager
def time_budget(seconds):
    start = time.perf_counter()
    yield
    elapsed = time.perf_counter() - start
    assert elapsed <= seconds, f"took {elapsed:.1f} s, budget {seconds} s"


def naive_nearest(q, X):
    """Double loop in binary64; first minimum wins."""
    best, best_d = 0, np.inf
    q = [float(v) for v in q]
    for i, row in enumerate(np.asarray(X, dtype=np.float64)):
        d = 0.0
        for a, b in zip(q, row):
            d += (a - b) * (a - b)
        if d < best_d:
            best, best_d = i, d
    return best, best_d


def naive_nearest_vec(Q, X):
    """Row-at-a-time scan (no norm expansion); argmin picks the first minimum."""
    X = np.asarray(X, dtype=np.float64)
    out_i, out_d = [], []
    for q in np.asarray(Q, dtype=np.float64):
        diff = X - q
        d = (diff * diff).sum(axis=1)
        i = int(np.argmin(d))
        out_i.append(i)
        out_d.append(d[i])
    return np.array(out_i), np.array(out_d)


def dft2_bruteforce(x):
    """O(N^2) 2-D DFT by explicit summation over every pixel for every bin."""
    H, W = x.shape
    m, n = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    out = np.zeros((H, W), dtype=np.complex128)
    for u in range(H):
        for v in range(W):
            phase = np.exp(-2j * np.pi * (u * m / H + v * n / W))
            out[u, v] = (x * phase).sum()
    return out


def fft_embedding_oracle(pixels, shape):
    """Centered log1p-magnitude spectrum per channel, via the brute-force DFT."""
    C, H, W = shape
    x = np.asarray(pixels, dtype=np.float64).reshape(C, H, W)
    parts = []
    for c in range(C):
        F = dft2_bruteforce(x[c])
        # centering: bin (u, v) moves to ((u + H//2) % H, (v + W//2) % W)
        centered = np.empty_like(F)
        for u in range(H):
            for v in range(W):
                centered[(u + H // 2) % H, (v + W // 2) % W] = F[u, v]
        parts.append(np.log1p(np.abs(centered)).ravel())
    return np.concatenate(parts)


def mutual_information_table(a, b):
    """MI and entropies straight from the contingency table (natural log)."""
    a = np.asarray(a)
    b = np.asarray(b)
    ua, ia = np.unique(a, return_inverse=True)
    ub, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ua.size, ub.size))
    for i, j in zip(ia, ib):
        table[i, j] += 1
    p = table / table.sum()
    pa = p.sum(axis=1)
    pb = p.sum(axis=0)
    mi = 0.0
    for i in range(ua.size):
        for j in range(ub.size):
            if p[i, j] > 0:
                mi += p[i, j] * np.log(p[i, j] / (pa[i] * pb[j]))
    ha = -sum(v * np.log(v) for v in pa if v > 0)
    hb = -sum(v * np.log(v) for v in pb if v > 0)
    return mi, ha, hb


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g
