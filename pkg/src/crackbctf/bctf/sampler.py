"""MCMC for the conditional tensor factorization.

The chain state holds k, the latent allocations z (0-based, zero for inactive
predictors), the pi matrices and the lam cells.  Cells are laid out
row-major over the active predictors in increasing index order, so the cell of
observation i is sum_j z[i, j] * stride[j] with stride[j] = 0 for inactive j.

One iteration is a Gibbs sweep over (z, lam, pi) followed by a
Metropolis-Hastings move on each k_j.  The k move proposes a new column
z[:, j] sequentially (in a random order) from the product of the
Dirichlet-multinomial predictive of the pi prior and the Beta-binomial
predictive of the lam prior.  For that proposal the target-over-proposal ratio
is the product of the normalizing sums, so the acceptance ratio only needs the
sums along the proposed column and along the current column.  On acceptance
lam and pi_j are redrawn from their full conditionals.

The inner loops are compiled with numba.  Numba keeps its own generator, which
is reseeded from the caller's numpy Generator on every call, so runs are
reproducible from ``Hyper.seed`` alone.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from ..errors import ContractError
from .model import BctfPosterior, Hyper, Sample, log_density

MAX_CELLS = 1 << 16


@njit(cache=True)
def _seed(s):
    np.random.seed(s)


@njit(cache=True)
def _dirichlet(alpha, out):
    """Dirichlet draw computed in log space, safe for very small shapes."""
    m = -np.inf
    for h in range(alpha.size):
        g = np.random.gamma(alpha[h] + 1.0, 1.0)
        v = np.log(g) + np.log(1.0 - np.random.random()) / alpha[h]
        out[h] = v
        if v > m:
            m = v
    s = 0.0
    for h in range(alpha.size):
        out[h] = np.exp(out[h] - m)
        s += out[h]
    for h in range(alpha.size):
        out[h] /= s


@njit(cache=True)
def _strides(k, out):
    s = 1
    for j in range(k.size - 1, -1, -1):
        if k[j] > 1:
            out[j] = s
            s *= k[j]
        else:
            out[j] = 0
    return s


@njit(cache=True)
def _draw_lambda(cell, y, ncells, lam1):
    cnt = np.zeros((ncells, 2))
    for i in range(cell.size):
        cnt[cell[i], y[i]] += 1.0
    a = np.empty(2)
    out = np.empty(2)
    for c in range(ncells):
        a[0] = 0.5 + cnt[c, 0]
        a[1] = 0.5 + cnt[c, 1]
        _dirichlet(a, out)
        lam1[c] = out[1]


@njit(cache=True)
def _draw_pi(X, z, j, dj, kj, pi):
    cnt = np.zeros((dj, kj))
    for i in range(X.shape[0]):
        cnt[X[i, j] - 1, z[i, j]] += 1.0
    a = np.empty(kj)
    out = np.empty(kj)
    for x in range(dj):
        for h in range(kj):
            a[h] = 1.0 / kj + cnt[x, h]
        _dirichlet(a, out)
        for h in range(kj):
            pi[j, x, h] = out[h]


@njit(cache=True)
def _gibbs(X, y, d, k, z, strides, cell, pi, lam1, ncells):
    n, p = X.shape
    w = np.empty(pi.shape[2])
    for i in range(n):
        yi = y[i]
        for j in range(p):
            kj = k[j]
            if kj == 1:
                continue
            s = strides[j]
            base = cell[i] - z[i, j] * s
            xv = X[i, j] - 1
            tot = 0.0
            for h in range(kj):
                lv = lam1[base + h * s]
                w[h] = pi[j, xv, h] * (lv if yi == 1 else 1.0 - lv)
                tot += w[h]
            if not tot > 0.0:
                continue
            u = np.random.random() * tot
            h = 0
            acc = w[0]
            while acc <= u and h < kj - 1:
                h += 1
                acc += w[h]
            z[i, j] = h
            cell[i] = base + h * s
    _draw_lambda(cell, y, ncells, lam1)
    for j in range(p):
        if k[j] > 1:
            _draw_pi(X, z, j, d[j], k[j], pi)


@njit(cache=True)
def _collapsed(cell, y, ncells):
    """Beta-binomial log marginal of y given the cell assignment."""
    cnt = np.zeros((ncells, 2))
    for i in range(cell.size):
        cnt[cell[i], y[i]] += 1.0
    out = 0.0
    for c in range(ncells):
        if cnt[c, 0] + cnt[c, 1] > 0:
            out += (math.lgamma(0.5 + cnt[c, 0]) + math.lgamma(0.5 + cnt[c, 1])
                    - math.lgamma(1.0 + cnt[c, 0] + cnt[c, 1]) - math.lgamma(0.5) * 2.0)
    return out


@njit(cache=True)
def _sequential(perm, base, stride, kk, xcol, dj, y, nc, forced, zin, zout):
    """Sequential allocation pass; returns the sum of log normalizers."""
    cnt = np.zeros((nc, 2))
    # Beta-binomial predictive of each label per cell, refreshed when a cell grows
    pred = np.full((nc, 2), 0.5)
    dm = np.full((dj, kk), 1.0 / kk)
    dmt = np.ones(dj)
    w = np.empty(kk)
    lw = 0.0
    prod = 1.0  # running product of normalizers, folded into lw before it underflows
    for t in range(perm.size):
        i = perm[t]
        xv = xcol[i] - 1
        yi = y[i]
        b = base[i]
        tot = 0.0
        for h in range(kk):
            w[h] = pred[b + h * stride, yi] * dm[xv, h]
            tot += w[h]
        prod *= tot / dmt[xv]
        if prod < 1e-250:
            lw += np.log(prod)
            prod = 1.0
        if forced:
            h = zin[i]
        else:
            u = np.random.random() * tot
            h = 0
            acc = w[0]
            while acc <= u and h < kk - 1:
                h += 1
                acc += w[h]
        c = b + h * stride
        cnt[c, yi] += 1.0
        den = 1.0 / (cnt[c, 0] + cnt[c, 1] + 1.0)
        pred[c, 0] = (cnt[c, 0] + 0.5) * den
        pred[c, 1] = (cnt[c, 1] + 0.5) * den
        dm[xv, h] += 1.0
        dmt[xv] += 1.0
        zout[i] = h
    return lw + np.log(prod)


@njit(cache=True)
def _cell_tables(k, cell, suffix, sprod, hi_tab, lo_tab):
    """Split every cell id at each active-predictor boundary.

    suffix[j] counts active predictors after j; sprod[m] is the product of the
    last m active k values; cell = hi_tab[m] * sprod[m] + lo_tab[m].
    """
    p = k.size
    m = 0
    sprod[0] = 1
    for j in range(p - 1, -1, -1):
        suffix[j] = m
        if k[j] > 1:
            sprod[m + 1] = sprod[m] * k[j]
            m += 1
    sprod[m + 1] = sprod[m]
    for q in range(m + 2):
        for i in range(cell.size):
            hi_tab[q, i] = cell[i] // sprod[q]
            lo_tab[q, i] = cell[i] - hi_tab[q, i] * sprod[q]


@njit(cache=True)
def _update_k(X, y, d, k, z, strides, cell, pi, lam1, info, r, rbar, max_cells):
    """One MH pass over all predictors in random order.  info = [ncells, accepted, rejected_sparsity]."""
    n, p = X.shape
    ncells = info[0]
    nact = 0
    for j in range(p):
        if k[j] > 1:
            nact += 1
    log_off = np.log1p(-r / p) if r < p else 0.0
    newk = k.copy()
    newstr = np.empty(p, dtype=np.int64)
    base_new = np.empty(n, dtype=np.int64)
    base_old = np.empty(n, dtype=np.int64)
    zprop = np.empty(n, dtype=np.int64)
    scratch = np.empty(n, dtype=np.int64)
    zold = np.empty(n, dtype=np.int64)
    # with k_j = 1 the reverse pass is the collapsed likelihood, whatever the order
    cl_now = _collapsed(cell, y, ncells)
    XT = np.ascontiguousarray(X.T)
    suffix = np.empty(p, dtype=np.int64)
    sprod = np.empty(p + 2, dtype=np.int64)
    hi_tab = np.empty((p + 2, n), dtype=np.int64)
    lo_tab = np.empty((p + 2, n), dtype=np.int64)
    _cell_tables(k, cell, suffix, sprod, hi_tab, lo_tab)
    order = np.random.permutation(p)
    for t in range(p):
        j = order[t]
        dj = d[j]
        if dj <= 1:
            continue
        kj = k[j]
        u = np.random.randint(1, dj)
        kn = u if u < kj else u + 1
        nact_new = nact - (1 if kj > 1 else 0) + (1 if kn > 1 else 0)
        if nact_new > rbar:
            info[2] += 1
            continue
        # prior ratio; when r == p the excluded state has zero prior mass
        if r >= p and kn == 1:
            continue
        log_on = np.log(r / ((dj - 1) * p))
        forced_accept = r >= p and kj == 1
        lpr = (log_off if kn == 1 else log_on) - (log_off if kj == 1 else log_on)
        for a in range(p):
            newk[a] = k[a]
        newk[j] = kn
        nc_new = _strides(newk, newstr)
        if nc_new > max_cells:
            continue
        # cell = hi * (sj * kj) + z_j * sj + lo with lo < sj, so only the high part rescales
        m = suffix[j]
        sj = sprod[m]
        hi = hi_tab[m + 1] if kj > 1 else hi_tab[m]
        lo = lo_tab[m]
        step = sj * kn
        for i in range(n):
            base_new[i] = hi[i] * step + lo[i]
        if kj > 1:
            for i in range(n):
                base_old[i] = hi[i] * sj * kj + lo[i]
                zold[i] = z[i, j]
        perm = np.random.permutation(n)
        lw_new = _sequential(perm, base_new, sj, kn, XT[j], dj, y, nc_new, False, zold, zprop)
        if kj == 1:
            lw_old = cl_now
        else:
            lw_old = _sequential(perm, base_old, sj, kj, XT[j], dj, y, ncells, True, zold, scratch)
        log_alpha = lpr + lw_new - lw_old
        if forced_accept or np.log(1.0 - np.random.random()) < log_alpha:
            k[j] = kn
            nact = nact_new
            ncells = nc_new
            for a in range(p):
                strides[a] = newstr[a]
            for i in range(n):
                z[i, j] = zprop[i]
                cell[i] = base_new[i] + zprop[i] * sj
            if kn > 1:
                _draw_pi(X, z, j, dj, kn, pi)
            else:
                for x in range(pi.shape[1]):
                    for h in range(pi.shape[2]):
                        pi[j, x, h] = 0.0
            _draw_lambda(cell, y, ncells, lam1)
            cl_now = _collapsed(cell, y, ncells)
            _cell_tables(k, cell, suffix, sprod, hi_tab, lo_tab)
            info[1] += 1
    info[0] = ncells


@dataclass(eq=False)
class SamplerState:
    """Mutable chain state; arrays are updated in place by the kernels."""

    k: np.ndarray  # (p,) int64
    z: np.ndarray  # (n, p) int64, 0-based, 0 when inactive
    strides: np.ndarray  # (p,) int64
    cell: np.ndarray  # (n,) int64
    pi: np.ndarray  # (p, dmax, dmax)
    lam1: np.ndarray  # (MAX_CELLS,) P(Y = 1) per cell, first ncells used
    info: np.ndarray  # [ncells, accepted k moves, sparsity rejections]
    d: np.ndarray  # (p,) int64

    @property
    def ncells(self) -> int:
        return int(self.info[0])

    @property
    def active_count(self) -> int:
        return int(np.count_nonzero(self.k > 1))

    def to_sample(self) -> Sample:
        active = np.flatnonzero(self.k > 1)
        pi = {int(j): self.pi[j, :self.d[j], :self.k[j]].copy() for j in active}
        lam1 = self.lam1[:self.ncells].reshape(tuple(self.k[active]))
        lam = np.stack([1.0 - lam1, lam1], axis=-1)
        return Sample(self.k.copy(), pi, lam)

    def copy(self) -> "SamplerState":
        return SamplerState(*(getattr(self, f).copy() for f in
                              ("k", "z", "strides", "cell", "pi", "lam1", "info", "d")))


def _prepare(X, y, d=None):
    values = getattr(X, "values", X)
    X = np.ascontiguousarray(values, dtype=np.int64)
    y = np.ascontiguousarray(y, dtype=np.int64).reshape(-1)
    if X.ndim != 2 or X.shape[0] != y.size:
        raise ContractError(f"design matrix {X.shape} does not match {y.size} labels")
    if d is None:
        d = getattr(values, "d", None)
    if d is None:
        d = X.max(axis=0) if X.size else np.ones(X.shape[1], dtype=np.int64)
    d = np.ascontiguousarray(d, dtype=np.int64).reshape(-1)
    if d.size != X.shape[1]:
        raise ContractError(f"d has {d.size} entries for {X.shape[1]} predictors")
    if np.any(d < 1):
        raise ContractError("category counts must be positive")
    if X.size and (X.min() < 1 or np.any(X.max(axis=0) > d)):
        raise ContractError("categories must lie in 1..d_j")
    if np.any((y != 0) & (y != 1)):
        raise ContractError("labels must be 0 or 1")
    return X, y, d


def _numba_seed(rng: np.random.Generator) -> None:
    _seed(int(rng.integers(0, 2 ** 32 - 1)))


def init_state(X, y, hyper: Hyper, rng: np.random.Generator, d=None) -> SamplerState:
    """Empty model (all k_j = 1) with the single lam cell drawn from its prior."""
    X, y, d = _prepare(X, y, d)
    n, p = X.shape
    hyper.validate(p)
    dmax = int(d.max()) if p else 1
    state = SamplerState(
        k=np.ones(p, dtype=np.int64),
        z=np.zeros((n, p), dtype=np.int64),
        strides=np.zeros(p, dtype=np.int64),
        cell=np.zeros(n, dtype=np.int64),
        pi=np.zeros((p, dmax, dmax)),
        lam1=np.zeros(MAX_CELLS),
        info=np.array([1, 0, 0], dtype=np.int64),
        d=d,
    )
    _numba_seed(rng)
    _draw_lambda(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), 1, state.lam1)
    return state


def gibbs_sweep(state: SamplerState, X, y, hyper: Hyper, rng: np.random.Generator) -> SamplerState:
    """Resample z, then every lam cell, then every pi row, in place."""
    X, y, _ = _prepare(X, y, state.d)
    _gibbs_step(state, X, y, rng)
    return state


def _gibbs_step(state, X, y, rng):
    _numba_seed(rng)
    _gibbs(X, y, state.d, state.k, state.z, state.strides, state.cell, state.pi, state.lam1, state.ncells)


def update_k(state: SamplerState, X, y, hyper: Hyper, rng: np.random.Generator,
             max_cells: int = MAX_CELLS) -> SamplerState:
    """One Metropolis-Hastings move on each k_j, visiting predictors in random order."""
    X, y, _ = _prepare(X, y, state.d)
    _k_step(state, X, y, hyper, rng, max_cells)
    return state


def _k_step(state, X, y, hyper, rng, max_cells=MAX_CELLS):
    _numba_seed(rng)
    _update_k(X, y, state.d, state.k, state.z, state.strides, state.cell, state.pi, state.lam1,
              state.info, float(hyper.r), int(hyper.rbar), min(int(max_cells), MAX_CELLS))


def fit(X, y, hyper: Hyper, d=None, feature_ids=(), log_post: bool = True,
        callback=None) -> BctfPosterior:
    """Run the chain and keep every thin-th state after burn-in.

    ``callback(iteration, state)`` is called after every iteration when given.
    ``log_post=False`` skips the per-sample log density (stored as NaN).
    """
    X, y, d = _prepare(X, y, d)
    n, p = X.shape
    hyper.validate(p)
    if n < 2 or y.min() == y.max():
        raise ContractError("training data needs at least two observations and both classes")
    rng = np.random.default_rng(hyper.seed)
    state = init_state(X, y, hyper, rng, d)
    samples = []
    for it in range(1, hyper.iterations + 1):
        # same as gibbs_sweep then update_k, minus the per-call input checks
        _gibbs_step(state, X, y, rng)
        _k_step(state, X, y, hyper, rng)
        if state.active_count > hyper.rbar:
            raise ContractError(f"sampler reached {state.active_count} active predictors at iteration {it}")
        if callback is not None:
            callback(it, state)
        if it > hyper.burn_in and (it - hyper.burn_in) % hyper.thin == 0:
            s = state.to_sample()
            if log_post:
                s = Sample(s.k, s.pi, s.lam, log_density(s, X, y, hyper, d))
            samples.append(s)
    return BctfPosterior(samples, d, hyper, tuple(feature_ids))


def empirical_k_posterior(posterior: BctfPosterior) -> dict:
    """Relative frequency of each distinct k vector among the retained samples."""
    km = posterior.k_matrix()
    keys, counts = np.unique(km, axis=0, return_counts=True)
    return {tuple(int(v) for v in key): c / km.shape[0] for key, c in zip(keys, counts)}

