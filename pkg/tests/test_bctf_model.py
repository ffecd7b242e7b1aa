import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crackbctf.bctf import (BctfPosterior, Hyper, Sample, collapsed_log_lik, eval_conditional,
                            format_selection, inclusion_probabilities, log_prior_k, modal_k, predict,
                            selection_report, threshold_map)
from crackbctf.bctf.model import (_contract, _split_axes, cell_index, log_density, pi_log_marginal,
                                  sample_conditional)
from crackbctf.errors import ContractError, FormatError, ParameterError
from crackbctf.features import default_manifest
from crackbctf.quantize import FeatureMatrix


def random_sample(rng, d, k):
    k = np.asarray(k)
    active = np.flatnonzero(k > 1)
    pi = {int(j): rng.dirichlet(np.ones(k[j]), size=d[j]) for j in active}
    lam1 = rng.random(tuple(k[active]))
    return Sample(k, pi, np.stack([1 - lam1, lam1], axis=-1))


def brute_conditional(sample, x):
    """Explicit sum over every active cell of lam(1) times the product of pi entries."""
    active = sample.active
    total = 0.0
    for cell in itertools.product(*[range(sample.k[j]) for j in active]):
        w = sample.lam[cell + (1,)] if cell else sample.lam[1]
        for a, j in enumerate(active):
            w *= sample.pi[int(j)][x[j] - 1, cell[a]]
        total += w
    return total


# ---------------------------------------------------------------- eval_conditional

def test_hand_evaluated_example():
    pi = {0: np.array([[0.7, 0.3], [0.2, 0.8]])}
    lam = np.array([[0.1, 0.9], [0.9, 0.1]])
    assert eval_conditional(lam, pi, [2], [1]) == pytest.approx(0.66, abs=1e-15)
    assert eval_conditional(lam, pi, [2], [2]) == pytest.approx(0.26, abs=1e-15)
    assert eval_conditional(lam, pi, [2], [1], y=0) == pytest.approx(0.34, abs=1e-15)


def test_empty_model_is_constant():
    lam = np.array([0.7, 0.3])
    for x in itertools.product((1, 2, 3), repeat=3):
        assert eval_conditional(lam, {}, [1, 1, 1], x) == 0.3


def test_eval_category_errors():
    pi = {0: np.array([[0.5, 0.5], [0.5, 0.5]])}
    lam = np.full((2, 2), 0.5)
    with pytest.raises(ContractError):
        eval_conditional(lam, pi, [2], [3])
    with pytest.raises(ContractError):
        eval_conditional(lam, pi, [2], [0])
    with pytest.raises(ContractError):
        eval_conditional(lam, pi, [2], [1, 1])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 3), min_size=1, max_size=4), st.integers(0, 2 ** 31))
def test_eval_matches_brute_force_and_normalizes(k, seed):
    rng = np.random.default_rng(seed)
    d = [3] * len(k)
    s = random_sample(rng, d, k)
    grid = np.array(list(itertools.product(*[range(1, dj + 1) for dj in d])))
    vec = sample_conditional(s, grid)
    for x, v in zip(grid, vec):
        p1 = eval_conditional(s.lam, s.pi, s.k, x, 1)
        p0 = eval_conditional(s.lam, s.pi, s.k, x, 0)
        assert abs(p0 + p1 - 1) <= 1e-12
        assert p1 == pytest.approx(brute_conditional(s, x), abs=1e-12)
        assert v == pytest.approx(p1, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_excluded_predictor_has_no_effect(seed):
    rng = np.random.default_rng(seed)
    d = [4, 4, 4]
    k = [2, 1, 3]
    s = random_sample(rng, d, k)
    for x0, x2 in itertools.product(range(1, 5), repeat=2):
        vals = {eval_conditional(s.lam, s.pi, k, [x0, x1, x2]) for x1 in range(1, 5)}
        assert len(vals) == 1


@settings(max_examples=20, deadline=None)
@given(st.lists(st.integers(2, 3), min_size=1, max_size=4), st.integers(0, 2 ** 31))
def test_contraction_is_split_independent(k, seed):
    rng = np.random.default_rng(seed)
    d = [int(v) for v in rng.integers(2, 6, size=len(k))]
    s = random_sample(rng, d, k)
    X = np.column_stack([rng.integers(1, dj + 1, size=30) for dj in d])
    expect = np.array([brute_conditional(s, x) for x in X])
    pis = [s.pi[j] for j in range(len(k))]
    for r in range(len(k) + 1):
        for A in itertools.combinations(range(len(k)), r):
            got = _contract(s.lam[..., 1], pis, X - 1, list(A))
            np.testing.assert_allclose(got, expect, atol=1e-12)
    assert _split_axes(d, k, 30) == sorted(_split_axes(d, k, 30))


# ---------------------------------------------------------------- priors and likelihood

def test_log_prior_examples():
    hyper = Hyper(r=5, rbar=20)
    d = np.full(208, 11)
    assert log_prior_k(np.ones(208, int), hyper, d) == pytest.approx(208 * math.log(203 / 208), abs=1e-10)
    assert log_prior_k([2, 1], Hyper(r=1, rbar=2), [3, 3]) == pytest.approx(
        math.log(1 / 4) + math.log(1 / 2), abs=1e-15)


def test_log_prior_rbar_flag_and_r_error():
    k = np.ones(10, int)
    k[:4] = 2
    assert log_prior_k(k, Hyper(r=2, rbar=3), np.full(10, 3)) == -math.inf
    assert np.isfinite(log_prior_k(k, Hyper(r=2, rbar=4), np.full(10, 3)))
    with pytest.raises(ParameterError):
        log_prior_k([1, 1], Hyper(r=3, rbar=3), [2, 2])


def test_hyper_validation():
    Hyper(r=1, rbar=2, iterations=10, burn_in=5).validate(2)
    for bad in (Hyper(r=3, rbar=3), Hyper(r=2, rbar=1), Hyper(r=1, rbar=2, iterations=5, burn_in=5),
                Hyper(r=1, rbar=2, thin=0)):
        with pytest.raises(ParameterError):
            bad.validate(2)
    assert Hyper(iterations=5000, burn_in=2000, thin=5).retained == 600
    assert Hyper(iterations=10, burn_in=3, thin=3).retained == 2


def test_collapsed_log_lik_examples():
    assert collapsed_log_lik(np.zeros((0, 1)), [], [1]) == 0.0
    assert collapsed_log_lik(np.ones((1, 1)), [1], [1]) == pytest.approx(math.log(0.5), abs=1e-15)
    # separated cells (5, 0) and (0, 5) vs the merged (5, 5)
    z = np.array([[1]] * 5 + [[2]] * 5)
    y = [1] * 5 + [0] * 5
    separated = collapsed_log_lik(z, y, [2])
    merged = collapsed_log_lik(np.ones((10, 1)), y, [1])
    assert separated > merged


def test_cell_index_row_major_last_fastest():
    z = np.array([[1, 5, 1], [2, 5, 3], [1, 5, 2]])
    np.testing.assert_array_equal(cell_index(z, [2, 1, 3]), [0, 5, 1])


def test_pi_log_marginal_single_row():
    # one category, k = 2, counts (2, 1): DM(1/2) = G(1)/G(4) * G(5/2) G(3/2) / G(1/2)^2
    X = np.array([[1], [1], [1]])
    z = np.array([[1], [1], [2]])
    expect = (math.lgamma(1) - math.lgamma(4) + math.lgamma(2.5) + math.lgamma(1.5)
              - 2 * math.lgamma(0.5))
    assert pi_log_marginal(z, X, [2], [1]) == pytest.approx(expect, abs=1e-12)


def test_log_density_flags_rbar():
    s = Sample(np.array([2, 2]), {0: np.full((2, 2), 0.5), 1: np.full((2, 2), 0.5)},
               np.full((2, 2, 2), 0.5))
    X = np.array([[1, 1]])
    assert log_density(s, X, np.array([1]), Hyper(r=1, rbar=1), [2, 2]) == -math.inf
    assert np.isfinite(log_density(s, X, np.array([1]), Hyper(r=1, rbar=2), [2, 2]))


# ---------------------------------------------------------------- posterior objects

def constant_posterior(values, d=(3, 3)):
    samples = [Sample(np.ones(len(d), int), {}, np.array([1 - v, v])) for v in values]
    return BctfPosterior(samples, np.array(d), Hyper(r=1, rbar=2, iterations=2, burn_in=0))


def test_predict_constant_and_average():
    X = np.array([[1, 1], [3, 2]])
    np.testing.assert_allclose(predict(constant_posterior([0.3]), X), 0.3, atol=1e-15)
    np.testing.assert_allclose(predict(constant_posterior([0.2, 0.8]), X), 0.5, atol=1e-15)


def test_predict_matches_per_sample_mean():
    rng = np.random.default_rng(7)
    d = np.array([3, 4, 2])
    samples = [random_sample(rng, d, k) for k in ([1, 1, 1], [2, 1, 1], [2, 3, 1], [2, 3, 1], [1, 4, 2])]
    post = BctfPosterior(samples, d, Hyper(r=1, rbar=3, iterations=6, burn_in=1))
    grid = np.array(list(itertools.product(*[range(1, v + 1) for v in d])))
    expect = np.mean([[eval_conditional(s.lam, s.pi, s.k, x) for x in grid] for s in samples], axis=0)
    np.testing.assert_allclose(predict(post, grid), expect, atol=1e-12)
    fm = FeatureMatrix(grid.astype(np.uint16), d)
    np.testing.assert_allclose(predict(post, fm), expect, atol=1e-12)


def test_predict_errors():
    post = constant_posterior([0.3])
    with pytest.raises(ContractError):
        predict(post, np.array([[1, 4]]))
    with pytest.raises(ContractError):
        predict(post, np.array([[1, 1, 1]]))
    with pytest.raises(ContractError):
        predict(post, FeatureMatrix(np.ones((1, 2), np.uint16), [3, 5]))
    with pytest.raises(ContractError):
        predict(BctfPosterior([], np.array([2]), Hyper(r=1, rbar=1)), np.array([[1]]))


def test_threshold_map():
    p = np.array([0.0, 0.49, 0.5, 1.0])
    assert threshold_map(p).tolist() == [0, 0, 1, 1]
    assert not threshold_map(np.zeros(5)).any()
    assert threshold_map(p, 0.0).all()
    with pytest.raises(ParameterError):
        threshold_map(p, 1.5)


def test_inclusion_modal_and_report():
    d = np.full(208, 11)
    ks = []
    for i in range(4):
        k = np.ones(208, int)
        k[0] = 3  # always active
        if i < 3:
            k[5] = 2 if i < 2 else 4
        ks.append(k)
    samples = []
    rng = np.random.default_rng(0)
    for k in ks:
        samples.append(random_sample(rng, d, k))
    m = default_manifest()
    post = BctfPosterior(samples, d, Hyper(), tuple(e.feature_id for e in m))
    inc = inclusion_probabilities(post)
    assert inc[0] == 1 and inc[5] == 0.75 and inc[1] == 0
    assert modal_k(post)[5] == 2 and modal_k(post)[0] == 3
    rows = selection_report(post, m)
    assert [r.index for r in rows] == [1, 6]
    text = format_selection(rows)
    assert text.splitlines()[0] == "X_j\tk_j\tP(incl)\tDescription"
    assert text.splitlines()[1] == f"X_1\t3\t1.000\t{m[0].describe()}"


def test_posterior_json_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    d = np.array([3, 2, 4])
    samples = [random_sample(rng, d, k) for k in ([1, 1, 1], [3, 1, 2], [2, 2, 4])]
    post = BctfPosterior(samples, d, Hyper(r=1, rbar=3, seed=9), ("a", "b", "c"))
    path = tmp_path / "post.json"
    post.save(path)
    back = BctfPosterior.load(path)
    assert back.hyper == post.hyper and back.feature_ids == post.feature_ids
    grid = np.array(list(itertools.product(*[range(1, v + 1) for v in d])))
    np.testing.assert_array_equal(predict(back, grid), predict(post, grid))
    assert back.to_json() == post.to_json()
    with pytest.raises(FormatError):
        BctfPosterior.from_json(post.to_json().replace("bctf-1", "bctf-0"))


def test_sample_check():
    s = Sample(np.array([2]), {0: np.array([[0.5, 0.5], [0.9, 0.2]])}, np.full((2, 2), 0.5))
    with pytest.raises(ContractError):
        s.check([2])
    s = Sample(np.array([2, 2]), {0: np.full((2, 2), 0.5), 1: np.full((2, 2), 0.5)}, np.full((2, 2, 2), 0.5))
    s.check([2, 2], rbar=2)
    with pytest.raises(ContractError):
        s.check([2, 2], rbar=1)
