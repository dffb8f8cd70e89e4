import itertools

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import multivariate_normal, norm

from enrollmix.errors import DataError, NumericalError
from enrollmix.gaussian_core import (
    BinaryPattern,
    MvnParams,
    condition,
    logpdf,
    marginal,
    orthant_prob_exact_small,
    orthant_prob_mc,
    regularize_cov,
    sample_mvn,
    smoothed_orthant_reward,
    std_normal_cdf,
)


def random_spd(rng, m, jitter=0.3):
    a = rng.standard_normal((m, m))
    return a @ a.T / m + jitter * np.eye(m)


def equicorrelated(m, rho):
    return MvnParams(np.zeros(m), (1 - rho) * np.eye(m) + rho * np.ones((m, m)))


# ---------------------------------------------------------------- Phi


@pytest.mark.parametrize("x", [0.0, 1.0, -1.0, 2.0, -2.0, 6.0, -6.0])
def test_phi_matches_high_precision_reference(x):
    mpmath.mp.dps = 40
    ref = float(mpmath.ncdf(x))
    assert abs(std_normal_cdf(x) - ref) <= 1e-10


# ---------------------------------------------------------------- params


def test_mvn_params_are_immutable_copies():
    mean = np.zeros(2)
    p = MvnParams(mean, np.eye(2))
    mean[0] = 5.0
    assert p.mean[0] == 0.0
    with pytest.raises(ValueError):
        p.mean[0] = 1.0


def test_mvn_params_reject_asymmetric_and_misshapen():
    with pytest.raises(DataError):
        MvnParams(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(DataError):
        MvnParams(np.zeros(3), np.eye(2))


def test_binary_pattern_partition():
    b = BinaryPattern([1, 0, 1, 0])
    assert list(b.positive) == [0, 2]
    assert list(b.negative) == [1, 3]
    with pytest.raises(DataError):
        BinaryPattern([0, 2])


# ---------------------------------------------------------------- logpdf


def test_logpdf_standard_mode_1d():
    assert logpdf(np.zeros(1), MvnParams([0.0], [[1.0]])) == pytest.approx(-0.5 * np.log(2 * np.pi), abs=1e-14)


def test_logpdf_standard_mode_2d():
    assert logpdf(np.zeros(2), MvnParams(np.zeros(2), np.eye(2))) == pytest.approx(-np.log(2 * np.pi), abs=1e-14)


def test_logpdf_matches_dense_formula():
    rng = np.random.default_rng(3)
    cov = random_spd(rng, 3)
    mean = rng.standard_normal(3)
    x = rng.standard_normal(3)
    d = x - mean
    dense = -0.5 * (3 * np.log(2 * np.pi) + np.log(np.linalg.det(cov)) + d @ np.linalg.inv(cov) @ d)
    assert logpdf(x, MvnParams(mean, cov)) == pytest.approx(dense, abs=1e-10)


def test_logpdf_batch_equals_rowwise():
    rng = np.random.default_rng(4)
    p = MvnParams(rng.standard_normal(4), random_spd(rng, 4))
    x = rng.standard_normal((5, 4))
    batch = logpdf(x, p)
    assert np.allclose(batch, [logpdf(row, p) for row in x], atol=1e-12)


def test_logpdf_rejects_non_pd():
    with pytest.raises(NumericalError):
        logpdf(np.zeros(2), MvnParams(np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]])))


# ---------------------------------------------------------------- sampling


def test_sample_mvn_near_singular_collapses_to_mean():
    mean = np.array([1.0, -2.0, 0.5])
    y = sample_mvn(MvnParams(mean, 1e-12 * np.eye(3)), 100, seed=0)
    assert np.allclose(y, mean, atol=1e-4)


def test_sample_mvn_mean_clt_scale():
    y = sample_mvn(MvnParams(np.zeros(2), np.eye(2)), 1_000_000, seed=11)
    assert np.all(np.abs(y.mean(axis=0)) < 4e-3)


def test_sample_mvn_deterministic_and_covariance():
    rng = np.random.default_rng(5)
    p = MvnParams(rng.standard_normal(3), random_spd(rng, 3))
    a = sample_mvn(p, 200_000, seed=9)
    assert np.array_equal(a, sample_mvn(p, 200_000, seed=9))
    assert np.allclose(np.cov(a.T), p.cov, atol=0.02)


# ---------------------------------------------------------------- conditioning


def test_condition_diagonal_is_independent_of_observation():
    p = MvnParams([1.0, 2.0, 3.0], np.diag([1.0, 2.0, 3.0]))
    a = condition(p, [0], [5.0])
    b = condition(p, [0], [-5.0])
    assert np.allclose(a.mean, [2.0, 3.0]) and np.allclose(b.mean, a.mean)
    assert np.allclose(a.cov, np.diag([2.0, 3.0]))


def test_condition_bivariate_textbook():
    p = MvnParams(np.zeros(2), np.array([[1.0, 0.5], [0.5, 1.0]]))
    c = condition(p, [0], [1.0])
    assert c.mean[0] == pytest.approx(0.5, abs=1e-14)
    assert c.cov[0, 0] == pytest.approx(0.75, abs=1e-14)


@pytest.mark.parametrize("m", [4, 6, 8])
def test_condition_matches_dense_formula(m):
    rng = np.random.default_rng(m)
    cov = random_spd(rng, m)
    mean = rng.standard_normal(m)
    obs = np.sort(rng.choice(m, size=m // 2, replace=False))
    rest = np.setdiff1d(np.arange(m), obs)
    vals = rng.standard_normal(obs.size)
    inv = np.linalg.inv(cov[np.ix_(obs, obs)])
    mu = mean[rest] + cov[np.ix_(rest, obs)] @ inv @ (vals - mean[obs])
    sig = cov[np.ix_(rest, rest)] - cov[np.ix_(rest, obs)] @ inv @ cov[np.ix_(obs, rest)]
    c = condition(MvnParams(mean, cov), obs, vals)
    assert np.allclose(c.mean, mu, atol=1e-10)
    assert np.allclose(c.cov, sig, atol=1e-10)


def test_condition_without_values_is_marginal():
    rng = np.random.default_rng(1)
    p = MvnParams(rng.standard_normal(4), random_spd(rng, 4))
    c = condition(p, [1, 3])
    assert np.array_equal(c.mean, p.mean[[1, 3]])
    assert np.array_equal(c.cov, p.cov[np.ix_([1, 3], [1, 3])])
    assert np.array_equal(marginal(p, [1, 3]).cov, c.cov)


# ---------------------------------------------------------------- regularization


def test_regularize_zero_matrix():
    assert np.array_equal(regularize_cov(np.zeros((3, 3)), 1e-4), 1e-4 * np.eye(3))


def test_regularize_shifts_eigenvalues_exactly():
    rng = np.random.default_rng(2)
    cov = random_spd(rng, 4)
    before = np.linalg.eigvalsh(cov)
    after = np.linalg.eigvalsh(regularize_cov(cov, 0.25))
    assert np.allclose(after - before, 0.25, atol=1e-12)


def test_regularize_rank_deficient_two_points():
    pts = np.array([[1.0, -1.0, 1.0], [-1.0, 1.0, 1.0]])
    cov = np.cov(pts.T, bias=True)
    assert np.linalg.matrix_rank(cov) < 3
    np.linalg.cholesky(regularize_cov(cov))


# ---------------------------------------------------------------- orthant oracle


def test_oracle_one_dimension():
    assert orthant_prob_exact_small(MvnParams([0.0], [[1.0]]), [1]) == pytest.approx(0.5, abs=1e-6)


def test_oracle_independent_quadrant():
    assert orthant_prob_exact_small(MvnParams(np.zeros(2), np.eye(2)), [1, 1]) == pytest.approx(0.25, abs=1e-6)


def test_oracle_arcsin_identity():
    ref = 0.25 + np.arcsin(0.5) / (2 * np.pi)
    assert orthant_prob_exact_small(equicorrelated(2, 0.5), [1, 1]) == pytest.approx(ref, abs=1e-6)


@pytest.mark.parametrize("m", [2, 3, 4])
def test_oracle_patterns_sum_to_one(m):
    rng = np.random.default_rng(20 + m)
    p = MvnParams(0.5 * rng.standard_normal(m), random_spd(rng, m, jitter=0.5))
    total = sum(orthant_prob_exact_small(p, bits) for bits in itertools.product([0, 1], repeat=m))
    assert total == pytest.approx(1.0, abs=1e-5)


def test_oracle_matches_scipy_mvn_cdf():
    rng = np.random.default_rng(8)
    cov = random_spd(rng, 3, jitter=0.5)
    mean = 0.3 * rng.standard_normal(3)
    # P(x_0 > 0, x_1 < 0, x_2 > 0) is the CDF at zero of the sign-flipped vector
    s = np.array([-1.0, 1.0, -1.0])
    cdf = multivariate_normal(s * mean, cov * np.outer(s, s)).cdf(np.zeros(3))
    assert orthant_prob_exact_small(MvnParams(mean, cov), [1, 0, 1]) == pytest.approx(cdf, abs=2e-5)


def test_oracle_rejects_large_dimension():
    with pytest.raises(ValueError):
        orthant_prob_exact_small(MvnParams(np.zeros(5), np.eye(5)), [1] * 5)


# ---------------------------------------------------------------- orthant MC


def test_mc_one_dimension_symmetry():
    est = orthant_prob_mc(MvnParams([0.0], [[1.0]]), [1], 100_000, seed=1)
    lo, hi = est.interval()
    assert lo <= 0.5 <= hi


def test_mc_independent_quadrant():
    est = orthant_prob_mc(MvnParams(np.zeros(2), np.eye(2)), [1, 0], 100_000, seed=2)
    assert abs(est.value - 0.25) <= 3 * est.std_error + 1e-12


def test_mc_nested_consistency_rate():
    p = equicorrelated(3, 0.5)
    oracle = orthant_prob_exact_small(p, [1, 1, 0])
    hits = 0
    for seed in range(200):
        est = orthant_prob_mc(p, [1, 1, 0], 2000, seed, tail_mode="nested_mc")
        hits += abs(est.value - oracle) <= 3 * est.std_error
    assert hits >= 198


def test_mc_product_cdf_exact_for_single_negative():
    # with one negative coordinate the product of conditional CDFs is exact
    p = equicorrelated(3, 0.5)
    oracle = orthant_prob_exact_small(p, [1, 1, 0])
    est = orthant_prob_mc(p, [1, 1, 0], 100_000, seed=4, tail_mode="product_cdf")
    assert abs(est.value - oracle) <= 3 * est.std_error


def test_mc_all_patterns_sum_to_one():
    p = equicorrelated(3, 0.3)
    ests = [orthant_prob_mc(p, bits, 20_000, seed=i) for i, bits in enumerate(itertools.product([0, 1], repeat=3))]
    total = sum(e.value for e in ests)
    se = np.sqrt(sum(e.std_error ** 2 for e in ests))
    assert abs(total - 1.0) <= 3 * se


def test_mc_degenerate_partitions():
    p = equicorrelated(3, 0.5)
    ones = orthant_prob_mc(p, [1, 1, 1], 50_000, seed=5)
    zeros = orthant_prob_mc(p, [0, 0, 0], 50_000, seed=6)
    ref = orthant_prob_exact_small(p, [1, 1, 1])
    assert abs(ones.value - ref) <= 3 * ones.std_error
    assert abs(zeros.value - ref) <= 3 * zeros.std_error  # symmetric at zero mean


def test_mc_errors_and_determinism():
    p = equicorrelated(2, 0.2)
    with pytest.raises(ValueError):
        orthant_prob_mc(p, [1, 0], 0, seed=0)
    with pytest.raises(DataError):
        orthant_prob_mc(p, [1, 0, 1], 10, seed=0)
    a = orthant_prob_mc(p, [1, 0], 1000, seed=3)
    assert a == orthant_prob_mc(p, [1, 0], 1000, seed=3)
    assert a.sample_count == 1000


# ---------------------------------------------------------------- smoothed reward


def test_reward_all_positive_no_negatives():
    p = MvnParams(np.zeros(3), np.eye(3))
    assert smoothed_orthant_reward(np.array([0.3, 1.0, 2.0]), p, [1, 1, 1]) == pytest.approx(1.0)


def test_reward_half_positive():
    p = MvnParams(np.zeros(4), np.eye(4))
    assert smoothed_orthant_reward(np.array([0.3, -1.0, 2.0, -0.1]), p, [1, 1, 1, 1]) == pytest.approx(0.5)


def test_reward_matches_hand_composition():
    rng = np.random.default_rng(12)
    cov = random_spd(rng, 3)
    mean = rng.standard_normal(3)
    y = np.array([0.7, -0.2])
    g, l = [0, 2], 1
    inv = np.linalg.inv(cov[np.ix_(g, g)])
    mu = mean[l] + cov[l, g] @ inv @ (y - mean[g])
    var = cov[l, l] - cov[l, g] @ inv @ cov[g, l]
    hand = norm.cdf(-mu / np.sqrt(var)) * 0.5
    got = smoothed_orthant_reward(y, MvnParams(mean, cov), [1, 0, 1])
    assert got == pytest.approx(hand, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(
    seed=st.integers(0, 10_000),
    j=st.integers(0, 1),
    delta=st.floats(0.01, 2.0),
)
def test_reward_bounded_and_monotone_in_positive_means(seed, j, delta):
    # draws are reparametrized as y = mu_G + chol z with z frozen, so raising
    # mu_j (j in G) leaves the tail's conditional mean unchanged and can only
    # add positive coordinates
    rng = np.random.default_rng(seed)
    cov = random_spd(rng, 3)
    mean = rng.standard_normal(3)
    bumped = mean.copy()
    bumped[j] += delta
    pattern = [1, 1, 0]
    z = rng.standard_normal((500, 2))
    chol = np.linalg.cholesky(cov[:2, :2])
    r0 = smoothed_orthant_reward(mean[:2] + z @ chol.T, MvnParams(mean, cov), pattern)
    r1 = smoothed_orthant_reward(bumped[:2] + z @ chol.T, MvnParams(bumped, cov), pattern)
    assert np.all((r0 >= 0) & (r0 <= 1))
    assert np.all(r1 >= r0 - 1e-12)
