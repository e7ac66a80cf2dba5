"""Independent reference implementations used as test oracles.

Everything here is written with explicit Python loops over scalars so it
shares no code path with the vectorised implementations under test.
"""

import math

import numpy as np


def central_difference(f, arrays, step=1e-5):
    """Gradient of scalar ``f(arrays)`` w.r.t. every entry of every array."""
    grads = {}
    for name, arr in arrays.items():
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + step
            up = f(arrays)
            arr[idx] = orig - step
            down = f(arrays)
            arr[idx] = orig
            g[idx] = (up - down) / (2 * step)
        grads[name] = g
    return grads


def max_relative_error(analytic, numeric, floor=1e-6):
    """Elementwise |a - f| / max(|a|, |f|, floor), maximised."""
    a, f = np.asarray(analytic), np.asarray(numeric)
    return float(np.max(np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), floor)))


def jaccard_loop(a, b):
    inter = sum(1 for x, y in zip(a, b) if x and y)
    union = sum(1 for x, y in zip(a, b) if x or y)
    return inter / union if union else 0.0


def attraction_loop(S, M, xi):
    n = len(S)
    pull = 0.0
    for i in range(n):
        for j in range(n):
            if i != j:
                pull += math.exp(xi - S[i][j]) * M[i][j]
    diag = sum(S[i][i] for i in range(n))
    return pull / n**2 - diag / n


def repulsion_loop(S, R, xi, m):
    n = len(S)
    acc = 0.0
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            for s_d in (S[i][j], S[j][i]):
                N = s_d - xi * max(0.0, (S[i][i] - m) - s_d)
                acc += math.exp(N * (1.0 - R[i][j]))
    return acc / (2 * n**2)


def cscc_loop(z1, z2, y, w, lo=1e-7, hi=1 - 1e-7):
    n, C = len(y), len(y[0])
    acc = 0.0
    for i in range(n):
        inner = 0.0
        for c in range(C):
            for z in (z1, z2):
                p = min(max(z[i][c], lo), hi)
                inner += y[i][c] * math.log(p) + (1 - y[i][c]) * math.log(1 - p)
        acc += w[i] * inner
    return -acc / (2 * n * C)


def quantization_loop(h1, h2, beta):
    n, L = len(h1), len(h1[0])
    acc = 0.0
    for h in (h1, h2):
        for i in range(n):
            for l in range(L):
                acc += 1.0 - abs(h[i][l])
    return beta / (n * L) * acc


def hamming_loop(a_bits, b_bits):
    return sum(1 for x, y in zip(a_bits, b_bits) if x != y)


def ap_loop(relevance):
    hits, total = 0, 0.0
    for k, r in enumerate(relevance, start=1):
        if r:
            hits += 1
            total += hits / k
    return total / hits if hits else 0.0
