"""Slow, obviously-correct reference implementations used by the tests."""
import itertools
import math

import numpy as np


def clamp(v, n):
    return min(max(v, 0), n - 1)


def naive_correlate(f, k):
    """Edge-replicated correlation by explicit loops (no kernel flip)."""
    h, w = f.shape
    ry, rx = k.shape[0] // 2, k.shape[1] // 2
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            acc = 0.0
            for j in range(-ry, ry + 1):
                for i in range(-rx, rx + 1):
                    acc += k[j + ry, i + rx] * f[clamp(y + j, h), clamp(x + i, w)]
            out[y, x] = acc
    return out


def naive_median(f, size):
    """Sort-based window median; even windows start at the pixel (top-left anchor)."""
    h, w = f.shape
    lo = -(size // 2) if size % 2 else 0
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            vals = sorted(f[clamp(y + j, h), clamp(x + i, w)]
                          for j in range(lo, lo + size) for i in range(lo, lo + size))
            out[y, x] = vals[(len(vals) - 1) // 2]
    return out


def _se(size):
    return [(j, i) for j in range(size) for i in range(size)] if size == 2 else \
        [(j, i) for j in (-1, 0, 1) for i in (-1, 0, 1)]


def naive_black_top_hat(f, size):
    """Closing (max of f(x - b), then min of g(x + b)) minus input, per pixel."""
    h, w = f.shape
    se = _se(size)
    dil = np.empty((h, w))
    for y in range(h):
        for x in range(w):
            dil[y, x] = max(f[clamp(y - j, h), clamp(x - i, w)] for j, i in se)
    clo = np.empty((h, w))
    for y in range(h):
        for x in range(w):
            clo[y, x] = min(dil[clamp(y + j, h), clamp(x + i, w)] for j, i in se)
    return clo - f


def naive_structure_eigs(f, grad_k_x, grad_k_y, win):
    """Per-pixel eigvalsh of the smoothed gradient outer product, largest first."""
    ix = naive_correlate(f, grad_k_x)
    iy = naive_correlate(f, grad_k_y)
    jxx = naive_correlate(ix * ix, win)
    jxy = naive_correlate(ix * iy, win)
    jyy = naive_correlate(iy * iy, win)
    l1 = np.empty(f.shape)
    l2 = np.empty(f.shape)
    for y in range(f.shape[0]):
        for x in range(f.shape[1]):
            ev = np.linalg.eigvalsh(np.array([[jxx[y, x], jxy[y, x]], [jxy[y, x], jyy[y, x]]]))
            l1[y, x], l2[y, x] = ev[1], ev[0]
    return l1, l2


def _bilinear(f, y, x):
    h, w = f.shape
    y0, x0 = math.floor(y), math.floor(x)
    fy, fx = y - y0, x - x0
    a = f[clamp(y0, h), clamp(x0, w)]
    b = f[clamp(y0, h), clamp(x0 + 1, w)]
    c = f[clamp(y0 + 1, h), clamp(x0, w)]
    d = f[clamp(y0 + 1, h), clamp(x0 + 1, w)]
    return (1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * c + fx * d)


def naive_lbp(f, points=16, radius=3):
    """riu2 code per pixel from a packed bit pattern and a popcount of its rotation xor."""
    h, w = f.shape
    out = np.zeros((h, w), dtype=int)
    full = (1 << points) - 1
    for y in range(h):
        for x in range(w):
            pattern = 0
            for p in range(points):
                a = 2 * math.pi * p / points
                dy, dx = -radius * math.sin(a), radius * math.cos(a)
                if abs(dy - round(dy)) < 1e-9:
                    dy = round(dy)
                if abs(dx - round(dx)) < 1e-9:
                    dx = round(dx)
                if _bilinear(f, y + dy, x + dx) >= f[y, x]:
                    pattern |= 1 << p
            rot = ((pattern << 1) | (pattern >> (points - 1))) & full
            transitions = bin(pattern ^ rot).count("1")
            out[y, x] = bin(pattern).count("1") if transitions <= 2 else points + 1
    return out


# ---------------------------------------------------------------- tensor factorization

def _lbeta(a, b):
    return math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)


def naive_log_evidence(X, y, d, k):
    """log p(y, z-summed | X, k) by looping over every allocation with plain dict counts.

    lam cells carry Beta(1/2, 1/2) priors and each pi row a symmetric Dirichlet(1/k_j);
    both are integrated out in closed form for each allocation.
    """
    n = len(y)
    active = [j for j in range(len(k)) if k[j] > 1]
    per_obs = list(itertools.product(*[range(k[j]) for j in active]))
    logs = []
    for assign in itertools.product(per_obs, repeat=n):
        lam_counts = {}
        pi_counts = {}
        for i in range(n):
            cell = assign[i]
            c = lam_counts.setdefault(cell, [0, 0])
            c[y[i]] += 1
            for a, j in enumerate(active):
                key = (j, X[i][j])
                row = pi_counts.setdefault(key, [0] * k[j])
                row[cell[a]] += 1
        lw = sum(_lbeta(0.5 + c0, 0.5 + c1) - _lbeta(0.5, 0.5) for c0, c1 in lam_counts.values())
        for (j, _), row in pi_counts.items():
            al = 1.0 / k[j]
            lw += math.lgamma(1.0) - math.lgamma(1.0 + sum(row))
            lw += sum(math.lgamma(al + c) - math.lgamma(al) for c in row)
        logs.append(lw)
    return _lse(logs)


def naive_log_prior(k, d, r, rbar):
    p = len(k)
    if sum(1 for v in k if v > 1) > rbar:
        return None
    return sum(math.log(1 - r / p) if v == 1 else math.log(r / ((dj - 1) * p))
               for v, dj in zip(k, d))


def naive_predictive(X, y, d, r, rbar, x_new):
    """P(Y=1 | x_new, data) as a ratio of evidences with (x_new, 1) appended.

    Independent of any posterior-mean algebra: the new observation's own
    allocation is summed out along with everyone else's.
    """
    num, den = [], []
    for k in itertools.product(*[range(1, dj + 1) for dj in d]):
        lp = naive_log_prior(k, d, r, rbar)
        if lp is None:
            continue
        den.append(lp + naive_log_evidence(X, y, d, k))
        num.append(lp + naive_log_evidence(list(X) + [tuple(x_new)], list(y) + [1], d, k))
    return math.exp(_lse(num) - _lse(den))


def _lse(v):
    m = max(v)
    return m + math.log(sum(math.exp(a - m) for a in v))


def oracle_instance(seed):
    """Random oracle-sized data set: p = 2, d = (2, 2), 4 <= n <= 12, both labels present."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, 13))
    X = rng.integers(1, 3, size=(n, 2))
    y = rng.integers(0, 2, size=n)
    if y.min() == y.max():
        y[0] = 1 - y[0]
    return X, y
