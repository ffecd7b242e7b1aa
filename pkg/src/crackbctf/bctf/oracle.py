"""Exact posterior of the tensor factorization by enumeration, for tiny instances.

Every k configuration and every joint allocation of the observations to
latent cells is visited.  Observations with equal (x, y) are exchangeable, so an
allocation is enumerated as per-type cell counts weighted by the multinomial
number of assignments it stands for.  With lam and pi integrated out analytically, each
(k, z) term has weight prior(k) * p(z | x, k) * p(y | z, k), and within a term
the posterior means of lam and pi are available in closed form, which gives
the exact predictive as a weighted average.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.special import betaln, gammaln, logsumexp

from ..errors import ParameterError
from .model import LAMBDA_PRIOR, Hyper, log_prior_k

MAX_P = 2
MAX_D = 2
MAX_N = 12
CHUNK = 1 << 17


@dataclass(frozen=True)
class OracleResult:
    k_configs: list  # tuples of k
    k_probs: np.ndarray  # exact posterior mass of each configuration
    predictive: np.ndarray  # shape tuple(d): P(Y = 1 | x), indexed by x - 1
    log_evidence: float

    def k_posterior(self) -> dict:
        return {k: float(q) for k, q in zip(self.k_configs, self.k_probs)}


def _compositions(m, parts):
    """All vectors of `parts` non-negative integers summing to m, one per row."""
    if parts == 1:
        return np.array([[m]], dtype=np.int64)
    rows = [np.column_stack([np.full(len(rest), h), rest])
            for h in range(m + 1) for rest in [_compositions(m - h, parts - 1)]]
    return np.concatenate(rows).astype(np.int64)


def _config_terms(X, y, d, k, chunk=CHUNK):
    """log weights and predictive grids for every allocation under one k, chunked."""
    n, p = X.shape
    active = [j for j in range(p) if k[j] > 1]
    kk = [k[j] for j in active]
    ncell = int(np.prod(kk)) if kk else 1
    strides = [int(np.prod(kk[a + 1:])) for a in range(len(kk))]
    grid = list(itertools.product(*[range(dj) for dj in d]))
    # per-observation features: y, 1, then indicators x_{i,a} == x for each active a and category x
    cols = [y.astype(float), np.ones(n)]
    for j in active:
        for x in range(d[j]):
            cols.append((X[:, j] == x + 1).astype(float))
    F = np.column_stack(cols) if n else np.zeros((0, len(cols)))
    # group exchangeable observations by identical feature rows
    if n:
        Ft, cnt = np.unique(F, axis=0, return_counts=True)
    else:
        Ft, cnt = np.zeros((0, F.shape[1])), np.zeros(0, np.int64)
    comps = [_compositions(int(c), ncell) for c in cnt]
    logmult = [gammaln(c + 1.0) - gammaln(cp + 1.0).sum(axis=1) for c, cp in zip(cnt, comps)]
    sizes = [cp.shape[0] for cp in comps]
    total = int(np.prod(sizes)) if sizes else 1
    a = LAMBDA_PRIOR
    for start in range(0, total, chunk):
        codes = np.arange(start, min(total, start + chunk), dtype=np.int64)
        stats = np.zeros((codes.size, ncell, F.shape[1]))
        logw = np.zeros(codes.size)
        if sizes:
            for t, it in enumerate(np.unravel_index(codes, sizes)):
                stats += comps[t][it][:, :, None] * Ft[t][None, None, :]
                logw += logmult[t][it]
        n1 = stats[:, :, 0]
        nt = stats[:, :, 1]
        n0 = nt - n1
        logw += np.sum(betaln(a + n0, a + n1) - betaln(a, a), axis=1)
        mean_lam = (a + n1) / (2 * a + nt)
        # pi counts: c[a][:, x, h] = sum over cells whose digit for a is h
        mean_pi = []
        off = 2
        for ai, j in enumerate(active):
            kj, dj = kk[ai], d[j]
            digit = (np.arange(ncell) // strides[ai]) % kj
            c = np.zeros((codes.size, dj, kj))
            for h in range(kj):
                c[:, :, h] = stats[:, digit == h, off:off + dj].sum(axis=1)
            off += dj
            alpha = 1.0 / kj
            row = c.sum(axis=2)
            logw += np.sum(gammaln(1.0) - gammaln(1.0 + row), axis=1)
            logw += np.sum(gammaln(alpha + c) - gammaln(alpha), axis=(1, 2))
            mean_pi.append(((alpha + c) / (1.0 + row[:, :, None]), digit))
        pred = np.empty((codes.size, len(grid)))
        for g, x in enumerate(grid):
            term = mean_lam.copy()
            for ai, j in enumerate(active):
                m, digit = mean_pi[ai]
                term *= m[:, x[j], :][:, digit]
            pred[:, g] = term.sum(axis=1)
        yield logw, pred


def exact_posterior_oracle(X, y, d, hyper: Hyper) -> OracleResult:
    """Exact posterior over k and exact predictive P(Y = 1 | x) on the full category grid."""
    X = np.asarray(X, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    d = [int(v) for v in d]
    p = len(d)
    if X.size == 0:
        X = X.reshape(y.size, p)
    n = y.size
    if p > MAX_P or max(d) > MAX_D or n > MAX_N:
        raise ParameterError(
            f"oracle refuses p={p}, max d={max(d)}, n={n}: limits are p<={MAX_P}, d<={MAX_D}, n<={MAX_N}")
    if X.shape != (n, p) or (n and (X.min() < 1 or np.any(X.max(axis=0) > d))):
        raise ParameterError("oracle inputs inconsistent with d")
    hyper.validate(p)
    configs, config_lz, preds = [], [], []
    for k in itertools.product(*[range(1, dj + 1) for dj in d]):
        lp = log_prior_k(np.array(k), hyper, np.array(d))
        if not np.isfinite(lp):
            continue
        lz_parts, weighted = [], []
        for logw, pred in _config_terms(X, y, d, k):
            m = logw.max()
            w = np.exp(logw - m)
            lz_parts.append(m + np.log(w.sum()))
            weighted.append((m, w @ pred))
        lz = logsumexp(lz_parts)
        pr = sum(np.exp(m - lz) * v for m, v in weighted)
        configs.append(k)
        config_lz.append(lp + lz)
        preds.append(pr)
    config_lz = np.array(config_lz)
    ev = logsumexp(config_lz)
    probs = np.exp(config_lz - ev)
    predictive = np.tensordot(probs, np.array(preds), axes=(0, 0)).reshape(d)
    return OracleResult(configs, probs, predictive, float(ev))
