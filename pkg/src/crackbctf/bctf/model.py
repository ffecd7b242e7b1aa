"""Conditional tensor factorization: parameters, priors and evaluation.

The model for a binary response y and categorical predictors x_1..x_p is

    P(Y = y | x) = sum over cells (h_1..h_p) of lam[h_1..h_p](y) * prod_j pi_j[x_j, h_j]

with h_j in 1..k_j.  A predictor with k_j = 1 contributes a factor of one and
is therefore excluded.  Only active predictors (k_j > 1) are stored; the
response tensor ``lam`` has shape ``(k_a1, ..., k_am, 2)`` over the active
predictors a1 < ... < am.

Priors: each lam cell ~ Dirichlet(1/2, 1/2); each row of pi_j ~
Dirichlet(1/k_j, ..., 1/k_j); P(k_j = 1) = 1 - r/p and P(k_j = k) =
r / ((d_j - 1) p) for k >= 2, truncated to at most ``rbar`` active predictors.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from numba import njit
from scipy.special import betaln, gammaln

from ..errors import ContractError, FormatError, ParameterError

POSTERIOR_VERSION = "bctf-1"
LAMBDA_PRIOR = 0.5


@dataclass(frozen=True)
class Hyper:
    """Sampler hyperparameters."""

    r: float = 5.0
    rbar: int = 20
    iterations: int = 5000
    burn_in: int = 2000
    thin: int = 5
    seed: int = 0

    def validate(self, p: int) -> None:
        if self.r > p:
            raise ParameterError(f"expected active count r={self.r} exceeds p={p}")
        if not (1 <= self.r <= self.rbar <= p):
            raise ParameterError(f"need 1 <= r <= rbar <= p, got r={self.r}, rbar={self.rbar}, p={p}")
        if self.iterations < 1 or self.thin < 1 or not (0 <= self.burn_in < self.iterations):
            raise ParameterError(
                f"need 0 <= burn_in < iterations and thin >= 1, got iterations={self.iterations}, "
                f"burn_in={self.burn_in}, thin={self.thin}")

    @property
    def retained(self) -> int:
        return (self.iterations - self.burn_in) // self.thin


@dataclass(frozen=True, eq=False)
class Sample:
    """One posterior draw of (k, pi, lam)."""

    k: np.ndarray  # (p,) int
    pi: dict  # active j -> (d_j, k_j) array, rows on the simplex
    lam: np.ndarray  # (*k_active, 2)
    log_post: float = float("nan")

    @property
    def active(self) -> np.ndarray:
        return np.flatnonzero(self.k > 1)

    def check(self, d, rbar: int | None = None, tol: float = 1e-12) -> None:
        """Raise ContractError unless every structural invariant holds."""
        k = np.asarray(self.k)
        d = np.asarray(d)
        if np.any(k < 1) or np.any(k > d):
            raise ContractError("k_j outside 1..d_j")
        active = self.active
        if rbar is not None and active.size > rbar:
            raise ContractError(f"{active.size} active predictors exceed rbar={rbar}")
        if set(self.pi) != set(int(j) for j in active):
            raise ContractError("pi must be stored for exactly the active predictors")
        for j in active:
            m = self.pi[int(j)]
            if m.shape != (d[j], k[j]) or np.any(m < 0) or np.any(np.abs(m.sum(axis=1) - 1) > tol):
                raise ContractError(f"pi for predictor {j} violates the simplex constraint")
        if self.lam.shape != tuple(k[active]) + (2,):
            raise ContractError(f"lam shape {self.lam.shape} does not match active k {tuple(k[active])}")
        if np.any(self.lam < 0) or np.any(np.abs(self.lam.sum(axis=-1) - 1) > tol):
            raise ContractError("lam cells must lie on the simplex")


def _check_categories(x, k_len, d=None):
    x = np.asarray(x, dtype=np.int64)
    if x.shape != (k_len,):
        raise ContractError(f"predictor vector must have length {k_len}")
    if np.any(x < 1) or (d is not None and np.any(x > np.asarray(d))):
        raise ContractError("category out of range")
    return x


def eval_conditional(lam: np.ndarray, pi: dict, k, x, y: int = 1) -> float:
    """P(Y = y | X = x) for 1-based categories x, summing over active cells only."""
    k = np.asarray(k)
    x = _check_categories(x, k.size)
    t = np.asarray(lam)[..., y]
    for j in np.flatnonzero(k > 1):
        m = pi[int(j)]
        if x[j] > m.shape[0]:
            raise ContractError(f"category {x[j]} out of range for predictor {j}")
        t = np.tensordot(m[x[j] - 1], t, axes=(0, 0))
    return float(t)


def sample_conditional(sample: Sample, X: np.ndarray) -> np.ndarray:
    """P(Y = 1 | x) for every row of the (n, p) 1-based category matrix X."""
    X = np.asarray(X)
    active = sample.active
    lam1 = sample.lam[..., 1]
    if active.size == 0:
        return np.full(X.shape[0], float(lam1))
    cols = X[:, active].astype(np.int64) - 1
    return _contract(lam1, [sample.pi[int(j)] for j in active], cols)


TENSOR_BUDGET = 1 << 23  # entries of the partially contracted table


def _split_axes(d, k, n: int) -> list:
    """Axes to contract in category space, chosen greedily to cut table plus per-row work."""
    m = len(k)
    inside = []

    def cost(a):
        table = np.prod([d[j] if j in a else k[j] for j in range(m)], dtype=float)
        rows = np.prod([k[j] for j in range(m) if j not in a], dtype=float)
        return 4.0 * table + 2.0 * n * rows, table

    best, _ = cost(inside)
    while len(inside) < m:
        trials = [(cost(inside + [j]), j) for j in range(m) if j not in inside]
        (c, table), j = min(trials)
        if c >= best or table > TENSOR_BUDGET:
            break
        best = c
        inside.append(j)
    return sorted(inside)


def _contract(lam1: np.ndarray, pis: list, cols: np.ndarray, A=None) -> np.ndarray:
    """Sum over cells of lam1 times the pi entries selected by each row of cols (0-based).

    Axes in A are contracted once against the full pi matrices, giving a table over
    (categories of A, classes of the rest); each row then gathers its table row and
    dots it with the outer product of its remaining pi rows.  Callers evaluating
    many samples of one shape pass A from :func:`_split_axes` once.
    """
    n = cols.shape[0]
    d = [m.shape[0] for m in pis]
    k = [m.shape[1] for m in pis]
    if A is None:
        A = _split_axes(d, k, n)
    B = [j for j in range(len(pis)) if j not in A]
    kb = math.prod(k[b] for b in B)
    # lam axes are lowercase letters; contracting axis a swaps in its uppercase category letter
    t = lam1
    cur = "".join(chr(97 + j) for j in range(len(pis)))
    for a in A:
        c = cur[a]
        nxt = cur.replace(c, c.upper())
        t = np.einsum(f"{cur},{c.upper()}{c}->{nxt}", t, pis[a])
        cur = nxt
    t = t.transpose(A + B).reshape(-1, kb)
    idx = np.ravel_multi_index(tuple(cols[:, a] for a in A), [d[a] for a in A]) if A else np.zeros(n, np.int64)
    if not B:
        return t[idx, 0]
    kmax = max(k[b] for b in B)
    stack = np.zeros((len(B), max(d[b] for b in B), kmax))
    for i, b in enumerate(B):
        stack[i, :d[b], :k[b]] = pis[b]
    return _rows_dot(np.ascontiguousarray(t), idx.astype(np.int64), stack,
                     np.ascontiguousarray(cols[:, B], dtype=np.int64), np.array([k[b] for b in B], np.int64))


@njit(cache=True)
def _rows_dot(table, idx, stack, cols, k):
    """Per row: table[idx] contracted with the row's pi entries, last axis first."""
    n = cols.shape[0]
    kb = table.shape[1]
    m = k.size
    out = np.empty(n)
    buf = np.empty(kb)
    for r in range(n):
        t = table[idx[r]]
        kk = k[m - 1]
        row = stack[m - 1, cols[r, m - 1]]
        size = kb // kk
        for i in range(size):
            acc = 0.0
            for c in range(kk):
                acc += t[i * kk + c] * row[c]
            buf[i] = acc
        for b in range(m - 2, -1, -1):
            kk = k[b]
            row = stack[b, cols[r, b]]
            size //= kk
            for i in range(size):
                acc = 0.0
                for c in range(kk):
                    acc += buf[i * kk + c] * row[c]
                buf[i] = acc
        out[r] = buf[0]
    return out


def log_prior_k_terms(k, d, r: float, p: int) -> np.ndarray:
    """Per-predictor log P(k_j) before truncation."""
    k = np.asarray(k)
    d = np.asarray(d)
    with np.errstate(divide="ignore"):
        off = math.log1p(-r / p) if r < p else -math.inf
        on = np.log(r / (np.maximum(d - 1, 1) * p))
    return np.where(k == 1, off, on)


def log_prior_k(k, hyper: Hyper, d) -> float:
    """Unnormalized log prior of a k vector; -inf when more than rbar are active."""
    k = np.asarray(k)
    p = k.size
    if hyper.r > p:
        raise ParameterError(f"expected active count r={hyper.r} exceeds p={p}")
    if np.count_nonzero(k > 1) > hyper.rbar:
        return -math.inf
    return float(log_prior_k_terms(k, d, hyper.r, p).sum())


def cell_index(z: np.ndarray, k) -> np.ndarray:
    """Row-major cell id over the active predictors for 1-based allocations z (n, p)."""
    k = np.asarray(k)
    active = np.flatnonzero(k > 1)
    z = np.asarray(z, dtype=np.int64)
    if active.size == 0:
        return np.zeros(z.shape[0], dtype=np.int64)
    return np.ravel_multi_index(tuple((z[:, active] - 1).T), tuple(k[active]))


def collapsed_log_lik(z: np.ndarray, y, k) -> float:
    """log p(y | z, k) with every lam cell integrated against its Beta(1/2, 1/2) prior."""
    y = np.asarray(y, dtype=np.int64)
    if y.size == 0:
        return 0.0
    k = np.asarray(k)
    cells = cell_index(np.asarray(z).reshape(y.size, k.size), k)
    ncell = int(np.prod(k[k > 1])) if np.any(k > 1) else 1
    n1 = np.bincount(cells, weights=y, minlength=ncell)
    n0 = np.bincount(cells, weights=1 - y, minlength=ncell)
    a = LAMBDA_PRIOR
    return float(np.sum(betaln(a + n0, a + n1) - betaln(a, a)))


def pi_log_marginal(z: np.ndarray, X: np.ndarray, k, d) -> float:
    """log p(z | x, k) with every pi row integrated against Dirichlet(1/k_j, ...)."""
    k = np.asarray(k)
    z = np.asarray(z, dtype=np.int64)
    X = np.asarray(X, dtype=np.int64)
    total = 0.0
    for j in np.flatnonzero(k > 1):
        kj, dj = int(k[j]), int(d[j])
        alpha = 1.0 / kj
        counts = np.zeros((dj, kj))
        np.add.at(counts, (X[:, j] - 1, z[:, j] - 1), 1.0)
        row = counts.sum(axis=1)
        total += float(np.sum(gammaln(kj * alpha) - gammaln(kj * alpha + row)))
        total += float(np.sum(gammaln(alpha + counts) - gammaln(alpha)))
    return total


def log_density(sample: Sample, X: np.ndarray, y: np.ndarray, hyper: Hyper, d) -> float:
    """Unnormalized log posterior of (k, lam, pi) with allocations summed out."""
    lp = log_prior_k(sample.k, hyper, d)
    if lp == -math.inf:
        return lp
    tiny = np.finfo(float).tiny
    a = LAMBDA_PRIOR
    lam = np.maximum(sample.lam, tiny)
    lp += float(np.sum((a - 1) * np.log(lam).sum(axis=-1) - betaln(a, a)))
    for j, m in sample.pi.items():
        kj = m.shape[1]
        alpha = 1.0 / kj
        lp += float(np.sum((alpha - 1) * np.log(np.maximum(m, tiny)).sum(axis=1)
                           + gammaln(1.0) - kj * gammaln(alpha)))
    if len(y):
        p1 = np.clip(sample_conditional(sample, X), tiny, 1.0)
        p0 = np.clip(1.0 - p1, tiny, 1.0)
        lp += float(np.sum(np.where(np.asarray(y) == 1, np.log(p1), np.log(p0))))
    return lp


# ---------------------------------------------------------------------------
# posterior
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class BctfPosterior:
    samples: list
    d: np.ndarray
    hyper: Hyper
    feature_ids: tuple = field(default=())

    @property
    def p(self) -> int:
        return int(np.asarray(self.d).size)

    def k_matrix(self) -> np.ndarray:
        return np.array([s.k for s in self.samples], dtype=np.int64).reshape(len(self.samples), self.p)

    def to_json(self) -> str:
        samples = []
        for s in self.samples:
            active = s.active
            cells = {}
            for idx in np.ndindex(*s.lam.shape[:-1]):
                key = ",".join(str(i + 1) for i in idx)
                cells[key] = [float(s.lam[idx + (0,)]), float(s.lam[idx + (1,)])]
            samples.append({
                "k": [int(v) for v in s.k],
                "pi": {str(int(j) + 1): s.pi[int(j)].tolist() for j in active},
                "lambda": cells,
                "log_post": None if not np.isfinite(s.log_post) else float(s.log_post),
            })
        doc = {
            "version": POSTERIOR_VERSION,
            "hyper": asdict(self.hyper),
            "d": [int(v) for v in self.d],
            "feature_ids": list(self.feature_ids),
            "samples": samples,
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "BctfPosterior":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"posterior is not valid JSON: {exc.msg}", offset=exc.pos) from exc
        if not isinstance(doc, dict) or doc.get("version") != POSTERIOR_VERSION:
            raise FormatError(f"posterior version must be {POSTERIOR_VERSION!r}")
        hyper = Hyper(**doc["hyper"])
        d = np.asarray(doc["d"], dtype=np.int64)
        samples = []
        for s in doc["samples"]:
            k = np.asarray(s["k"], dtype=np.int64)
            active = np.flatnonzero(k > 1)
            shape = tuple(k[active])
            lam = np.empty(shape + (2,))
            for key, pair in s["lambda"].items():
                idx = tuple(int(v) - 1 for v in key.split(",")) if key else ()
                lam[idx] = pair
            pi = {int(j) - 1: np.asarray(m, dtype=np.float64) for j, m in s["pi"].items()}
            lp = s.get("log_post")
            samples.append(Sample(k, pi, lam, float("nan") if lp is None else float(lp)))
        return cls(samples, d, hyper, tuple(doc.get("feature_ids", ())))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "BctfPosterior":
        try:
            return cls.from_json(Path(path).read_text())
        except FormatError as exc:
            raise FormatError(str(exc), path=path) from exc


def _unique_rows(cols: np.ndarray):
    """Unique rows of a small-integer matrix and the inverse index."""
    m = cols.shape[1]
    radix = int(cols.max()) + 1 if cols.size else 1
    if m * math.log2(max(radix, 2)) < 62:
        key = np.zeros(cols.shape[0], dtype=np.int64)
        for a in range(m):
            key = key * radix + cols[:, a]
        _, first, inv = np.unique(key, return_index=True, return_inverse=True)
        return cols[first], inv
    uniq, inv = np.unique(cols, axis=0, return_inverse=True)
    return uniq, inv.reshape(-1)


def predict(posterior: BctfPosterior, X) -> np.ndarray:
    """Posterior-mean crack probability for every row of X (n, p) or a FeatureMatrix."""
    values = getattr(X, "values", X)
    values = np.asarray(values, dtype=np.int64)
    d = np.asarray(posterior.d)
    if values.ndim != 2 or values.shape[1] != d.size:
        raise ContractError(f"matrix has {values.shape[-1]} columns, posterior expects {d.size}")
    mat_d = getattr(X, "d", None)
    if mat_d is not None and not np.array_equal(np.asarray(mat_d), d):
        raise ContractError("feature matrix category counts differ from the trained model")
    if values.size and (values.min() < 1 or np.any(values.max(axis=0) > d)):
        raise ContractError("feature matrix categories exceed the trained bounds")
    if not posterior.samples:
        raise ContractError("posterior has no samples")
    n = values.shape[0]
    total = np.zeros(n)
    groups = {}
    for s in posterior.samples:
        groups.setdefault(tuple(s.active), []).append(s)
    for active, members in groups.items():
        if not active:
            total += sum(float(s.lam[..., 1]) for s in members)
            continue
        uniq, inv = _unique_rows(values[:, list(active)] - 1)
        acc = np.zeros(uniq.shape[0])
        splits = {}
        for s in members:
            shape = s.lam.shape[:-1]
            if shape not in splits:
                splits[shape] = _split_axes([int(d[j]) for j in active], list(shape), uniq.shape[0])
            acc += _contract(s.lam[..., 1], [s.pi[j] for j in active], uniq, splits[shape])
        total += acc[inv]
    return np.clip(total / len(posterior.samples), 0.0, 1.0)


def threshold_map(probabilities, t: float = 0.5) -> np.ndarray:
    """Binary crack map: 1 where the crack probability is at least t."""
    if not 0.0 <= t <= 1.0:
        raise ParameterError(f"threshold must lie in [0, 1], got {t}")
    return (np.asarray(probabilities) >= t).astype(np.uint8)


def inclusion_probabilities(posterior: BctfPosterior) -> np.ndarray:
    """Fraction of retained samples in which each predictor is active."""
    if not posterior.samples:
        raise ContractError("posterior has no samples")
    return (posterior.k_matrix() > 1).mean(axis=0)


def modal_k(posterior: BctfPosterior) -> np.ndarray:
    """Most frequent k_j > 1 among samples where j is active (1 if never active)."""
    km = posterior.k_matrix()
    out = np.ones(km.shape[1], dtype=np.int64)
    for j in range(km.shape[1]):
        on = km[:, j][km[:, j] > 1]
        if on.size:
            out[j] = int(np.bincount(on).argmax())
    return out


@dataclass(frozen=True)
class SelectionRow:
    index: int  # 1-based predictor number
    k: int
    inclusion: float
    feature_id: str
    description: str


def selection_report(posterior: BctfPosterior, manifest=None, cutoff: float = 0.5) -> list:
    """Predictors included in more than `cutoff` of the samples, with their modal k."""
    incl = inclusion_probabilities(posterior)
    mk = modal_k(posterior)
    rows = []
    for j in np.flatnonzero(incl > cutoff):
        fid = posterior.feature_ids[j] if j < len(posterior.feature_ids) else ""
        desc = manifest[int(j)].describe() if manifest is not None else fid
        rows.append(SelectionRow(int(j) + 1, int(mk[j]), float(incl[j]), fid, desc))
    return rows


def format_selection(rows) -> str:
    lines = ["X_j\tk_j\tP(incl)\tDescription"]
    for r in rows:
        lines.append(f"X_{r.index}\t{r.k}\t{r.inclusion:.3f}\t{r.description}")
    return "\n".join(lines) + "\n"
