import numpy as np
import pytest
from scipy.special import ndtr

from oracles import enumerate_paths, frozen_objective, naive_forward_backward

from enrollmix import cmm
from enrollmix.cmm import (
    CmmParams,
    ObservationMask,
    decode_path,
    em_fit_pm1,
    emission_loglik,
    forward_backward,
    infer_intermediate,
    pattern_reward_gradient,
    posteriors,
    refine_policy_gradient,
    sample_students,
    sankey_json,
    student_loglik,
    transition_flows,
)
from enrollmix.data_model import Cohort, CourseVocabulary, shift_to_pm1
from enrollmix.errors import DataError, NumericalError
from enrollmix.gaussian_core import MvnParams, logpdf, orthant_prob_exact_small, sample_mvn
from enrollmix.scenarios import coupled_params


def random_params(seed, k, t_count, m, scale=1.0):
    rng = np.random.default_rng(seed)
    means = rng.normal(0, scale, size=(t_count, k, m))
    covs = np.empty((t_count, k, m, m))
    for t in range(t_count):
        for kk in range(k):
            a = rng.standard_normal((m, m))
            covs[t, kk] = a @ a.T / m + 0.5 * np.eye(m)
    theta = rng.dirichlet(np.ones(k))
    phi = rng.dirichlet(np.ones(k), size=(t_count - 1, k))
    return CmmParams(theta, phi, means, covs)


def as_cohort(data):
    data = np.asarray(data, dtype=np.int8)
    return Cohort(CourseVocabulary.generic(data.shape[2]), data, [f"s{i}" for i in range(data.shape[0])])


# ---------------------------------------------------------------- params


def test_params_validation():
    good = random_params(0, 2, 2, 2)
    with pytest.raises(DataError):
        CmmParams([0.5, 0.6], good.phi, good.means, good.covs)
    bad_phi = np.array(good.phi)
    bad_phi[0, 0] = [0.7, 0.7]
    with pytest.raises(DataError):
        CmmParams(good.theta, bad_phi, good.means, good.covs)
    bad_cov = np.array(good.covs)
    bad_cov[0, 0] = [[1.0, 2.0], [2.0, 1.0]]
    with pytest.raises(DataError):
        CmmParams(good.theta, good.phi, good.means, bad_cov)


# ---------------------------------------------------------------- forward-backward


def test_fb_single_state():
    like = np.array([[-1.0], [-2.5], [0.3]])
    p = CmmParams([1.0], np.ones((2, 1, 1)), np.zeros((3, 1, 1)), np.ones((3, 1, 1, 1)))
    post = forward_backward(p, like)
    assert np.allclose(post.gamma, 1.0) and np.allclose(post.xi, 1.0)
    assert post.loglik[0] == pytest.approx(like.sum(), abs=1e-12)


def test_fb_symmetric_gives_uniform():
    k = 3
    p = CmmParams(np.full(k, 1 / k), np.full((2, k, k), 1 / k), np.zeros((3, k, 1)), np.ones((3, k, 1, 1)))
    post = forward_backward(p, np.tile([[-0.7, -0.7, -0.7]], (3, 1)))
    assert np.allclose(post.gamma, 1 / k, atol=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_fb_matches_path_enumeration(seed):
    rng = np.random.default_rng(seed)
    k, t_count = int(rng.integers(1, 4)), int(rng.integers(1, 5))
    p = random_params(seed, k, t_count, 1)
    like = rng.normal(-2, 2, size=(t_count, k))
    total, gamma, xi = enumerate_paths(p.theta, p.phi, like)
    post = forward_backward(p, like)
    assert post.loglik[0] == pytest.approx(total, abs=1e-8)
    assert np.allclose(post.gamma[0], gamma, atol=1e-8)
    assert np.allclose(post.xi[0], xi, atol=1e-8)


def test_fb_matches_naive_unscaled_recursion():
    for seed in range(5):
        rng = np.random.default_rng(100 + seed)
        p = random_params(seed, 2, 2, 1)
        lik = rng.uniform(1e-3, 1.0, size=(2, 2))
        z, gamma, xi = naive_forward_backward(p.theta, p.phi, lik)
        post = forward_backward(p, np.log(lik))
        assert post.loglik[0] == pytest.approx(z, abs=1e-10)
        assert np.allclose(post.gamma[0], gamma, atol=1e-10)
        assert np.allclose(post.xi[0], xi, atol=1e-10)


def test_fb_posterior_invariants_batched():
    p = random_params(4, 3, 4, 2)
    like = np.random.default_rng(4).normal(-3, 3, size=(7, 4, 3))
    post = forward_backward(p, like)
    assert np.allclose(post.gamma.sum(axis=2), 1.0, atol=1e-9)
    assert np.allclose(post.xi.sum(axis=3), post.gamma[:, :-1], atol=1e-8)
    assert np.allclose(post.xi.sum(axis=(2, 3)), 1.0, atol=1e-9)


def test_fb_impossible_observation():
    p = random_params(0, 2, 2, 1)
    like = np.array([[-1.0, -1.0], [-np.inf, -np.inf]])
    with pytest.raises(NumericalError, match="impossible"):
        forward_backward(p, like)


def test_fb_handles_extreme_log_likelihoods():
    p = random_params(1, 2, 3, 1)
    like = np.array([[-5000.0, -5001.0], [-4000.0, -np.inf], [-7000.0, -6999.0]])
    total, gamma, _ = enumerate_paths(p.theta, p.phi, like)
    post = forward_backward(p, like)
    assert post.loglik[0] == pytest.approx(total, rel=1e-12)
    assert np.allclose(post.gamma[0], gamma, atol=1e-9)


# ---------------------------------------------------------------- EM


def test_em_single_state_closed_form():
    rng = np.random.default_rng(2)
    c = as_cohort(rng.integers(0, 2, size=(50, 1, 3)))
    fit = em_fit_pm1(c, 1, restarts=1, epsilon=1e-4)
    x = shift_to_pm1(c).data[:, 0]
    assert np.allclose(fit.params.means[0, 0], x.mean(axis=0), atol=1e-12)
    assert np.allclose(fit.params.covs[0, 0], np.cov(x.T, bias=True) + 1e-4 * np.eye(3), atol=1e-12)


def test_em_trace_monotone_per_restart():
    p = random_params(7, 3, 3, 4, scale=1.5)
    c = sample_students(p, 600, seed=1)
    fit = em_fit_pm1(c, 3, max_iters=60, tol=1e-10, seed=3, restarts=3)
    for trace in fit.restart_traces:
        diffs = np.diff(trace)
        assert np.all(diffs >= -1e-7 * np.abs(np.asarray(trace[:-1])))
    assert fit.trace == fit.restart_traces[fit.best_restart]


def test_em_deterministic_and_thread_independent():
    c = sample_students(random_params(8, 2, 2, 3), 200, seed=0)
    a = em_fit_pm1(c, 2, max_iters=30, seed=5, restarts=3, n_jobs=1)
    b = em_fit_pm1(c, 2, max_iters=30, seed=5, restarts=3, n_jobs=3)
    assert np.array_equal(a.params.means, b.params.means)
    assert np.array_equal(a.params.covs, b.params.covs)
    assert a.trace == b.trace


def test_em_errors():
    c = as_cohort(np.zeros((2, 1, 2)))
    with pytest.raises(DataError):
        em_fit_pm1(c, 3)
    with pytest.raises(DataError):
        em_fit_pm1(c, 0)


def test_em_reseeds_degenerate_state():
    # every student identical: extra states receive no weight after the first E-step
    c = as_cohort(np.ones((30, 2, 2)))
    fit = em_fit_pm1(c, 3, max_iters=5, restarts=1, seed=0)
    assert np.all(np.isfinite(fit.params.means))
    assert all(e["event"] == "reseed" for e in fit.events)


# ---------------------------------------------------------------- sampling


def test_sample_students_saturated_and_deterministic():
    p = CmmParams([1.0], np.zeros((0, 1, 1)), [[[10.0, -10.0, 10.0]]], [[0.01 * np.eye(3)]])
    c = sample_students(p, 20, seed=1)
    assert np.all(c.data[:, 0] == [1, 0, 1])
    p2 = random_params(3, 2, 3, 2)
    assert np.array_equal(sample_students(p2, 40, 9).data, sample_students(p2, 40, 9).data)


# ---------------------------------------------------------------- likelihoods


def test_pm1_exact_single_state_is_logpdf():
    p = random_params(5, 1, 1, 3)
    student = np.array([[1, 0, 1]])
    expected = logpdf(np.array([1.0, -1.0, 1.0]), p.emission(0, 0))
    assert student_loglik(p, student) == pytest.approx(expected, abs=1e-12)


def test_binary_mc_diagonal_is_product():
    mean = np.array([0.4, -0.3, 1.1])
    sd = np.array([1.0, 0.5, 2.0])
    p = CmmParams([1.0], np.zeros((0, 1, 1)), [[mean]], [[np.diag(sd**2)]])
    bits = np.array([1, 0, 1])
    z = mean / sd
    exact = np.sum(np.log(np.where(bits == 1, ndtr(z), ndtr(-z))))
    est = student_loglik(p, bits[None], mode="binary_mc", k_mc=100_000, seed=3)
    assert abs(est.value - exact) <= 3 * est.std_error + 1e-9


def test_binary_mc_matches_enumeration_times_oracle():
    p = random_params(11, 2, 2, 2)
    student = np.array([[1, 0], [1, 1]])
    like = np.array([[np.log(orthant_prob_exact_small(p.emission(t, k), student[t])) for k in range(2)] for t in range(2)])
    exact, _, _ = enumerate_paths(p.theta, p.phi, like)
    est = student_loglik(p, student, mode="binary_mc", k_mc=400_000, seed=2)
    assert abs(est.value - exact) <= 3 * est.std_error


def test_student_loglik_rejects_bad_shape():
    p = random_params(0, 2, 2, 2)
    with pytest.raises(DataError):
        student_loglik(p, np.zeros((3, 2)))


# ---------------------------------------------------------------- decoding and flows


def test_decode_single_state():
    p = random_params(0, 1, 4, 2)
    assert decode_path(p, np.zeros((4, 2), dtype=int)).tolist() == [0, 0, 0, 0]


def test_decode_saturated_dominance():
    p = coupled_params(switch=0.2, n_timesteps=3, n_courses=4, noise_courses=0)
    student = np.tile([0, 0, 1, 1], (3, 1))  # state 1's courses
    assert decode_path(p, student).tolist() == [1, 1, 1]


def test_decode_matches_enumeration_argmax():
    import itertools

    p = random_params(21, 2, 3, 2)
    student = np.array([[1, 0], [0, 0], [1, 1]])
    like = emission_loglik(p, 2.0 * student - 1.0)[0]
    best, best_path = -np.inf, None
    for path in itertools.product(range(2), repeat=3):
        s = np.log(p.theta[path[0]]) + like[0, path[0]]
        for t in range(1, 3):
            s += np.log(p.phi[t - 1, path[t - 1], path[t]]) + like[t, path[t]]
        if s > best:
            best, best_path = s, list(path)
    assert decode_path(p, student).tolist() == best_path


def test_flows_single_student_single_state():
    p = random_params(0, 1, 3, 2)
    p = CmmParams(p.theta, p.phi, p.means, p.covs, CourseVocabulary.generic(2).fingerprint())
    flows = transition_flows(p, as_cohort(np.zeros((1, 3, 2))))
    assert np.allclose(flows, 1.0)


def test_flows_normalization_and_sankey():
    p = random_params(2, 3, 3, 2)
    c = sample_students(p, 50, seed=0)
    flows = transition_flows(p, c)
    assert np.allclose(flows.sum(axis=(1, 2)), 50)
    doc = sankey_json(flows)
    assert doc["nodes"][0] == {"id": "t0_k0"} and len(doc["nodes"]) == 9
    assert {"source", "target", "value"} == set(doc["links"][0])
    assert sum(l["value"] for l in doc["links"]) == pytest.approx(100)


def test_flows_recover_near_deterministic_phi():
    m = 6
    means = np.full((3, 2, m), -3.0)
    means[:, 0, :3] = 3.0
    means[:, 1, 3:] = 3.0
    covs = np.broadcast_to(np.eye(m), (3, 2, m, m))
    phi = np.array([[[0.95, 0.05], [0.1, 0.9]], [[0.9, 0.1], [0.05, 0.95]]])
    p = CmmParams([0.5, 0.5], phi, means, covs)
    c = sample_students(p, 20_000, seed=4)
    flows = transition_flows(p, c)
    est = flows / flows.sum(axis=2, keepdims=True)
    assert np.max(np.abs(est - phi)) <= 0.05


def test_fingerprint_mismatch_is_rejected():
    p = random_params(0, 2, 2, 2)
    p = CmmParams(p.theta, p.phi, p.means, p.covs, "deadbeef")
    with pytest.raises(DataError):
        posteriors(p, as_cohort(np.zeros((1, 2, 2))))


# ---------------------------------------------------------------- inference


def test_infer_empty_mask_is_prior_marginal():
    p = random_params(6, 3, 3, 4)
    res = infer_intermediate(p, ObservationMask.empty(3), 2, [0, 3], k_mc=1000)
    prior = p.state_marginals()[2] @ p.course_probabilities()[2][:, [0, 3]]
    assert np.allclose(res.probabilities, prior, atol=1e-12)


def test_infer_single_state_ignores_mask():
    p = random_params(6, 1, 3, 3)
    a = infer_intermediate(p, ObservationMask.empty(3), 1, [0, 1, 2])
    mask = ObservationMask.from_record(np.array([[1, 0, 1], [0, 0, 0], [1, 1, 1]]), [0, 2])
    b = infer_intermediate(p, mask, 1, [0, 1, 2], k_mc=2000)
    assert np.allclose(a.probabilities, b.probabilities, atol=1e-12)


def test_infer_coupled_same_state_course():
    p = coupled_params(switch=0.0, n_timesteps=3, n_courses=3, noise_courses=1)
    # state 0 takes course 0, state 1 takes course 1, course 2 is a coin flip
    mask = ObservationMask(({0: 1, 1: 0, 2: 1}, None, None))
    res = infer_intermediate(p, mask, 1, [0, 1], k_mc=20_000, seed=1)
    assert res.probabilities[0] > 0.95
    assert res.probabilities[1] < 0.05
    # enumeration check: P(h^1 = 0 | x^0) from exact evidence
    like = np.array([[np.log(orthant_prob_exact_small(p.emission(0, k), [1, 0, 1])) for k in range(2)], [0, 0], [0, 0]])
    _, gamma, _ = enumerate_paths(p.theta, p.phi, like)
    expected = gamma[1] @ p.course_probabilities()[1][:, 0]
    assert abs(res.probabilities[0] - expected) <= 3 * res.std_errors[0] + 1e-6


def test_infer_partial_assignment_at_query():
    p = random_params(9, 2, 2, 3)
    mask = ObservationMask(({0: 1, 2: 0}, {1: 1}))
    res = infer_intermediate(p, mask, 1, [0, 2], k_mc=50_000, seed=2)
    assert np.all((res.probabilities >= 0) & (res.probabilities <= 1))
    with pytest.raises(DataError):
        infer_intermediate(p, mask, 1, [1])


def test_infer_probabilities_in_unit_interval():
    p = random_params(12, 3, 4, 3, scale=2.0)
    c = sample_students(p, 5, seed=1)
    for i in range(5):
        res = infer_intermediate(p, ObservationMask.from_record(c.data[i], [0, 3]), 1, [0, 1, 2], k_mc=500, seed=i)
        assert np.all((res.probabilities >= 0) & (res.probabilities <= 1))
        assert np.all(res.std_errors >= 0)


# ---------------------------------------------------------------- policy gradient


@pytest.mark.parametrize("bits", [[1, 1, 0], [1, 0, 0], [0, 0, 0], [1, 1, 1]])
def test_pattern_gradient_matches_frozen_finite_differences(bits):
    rng = np.random.default_rng(3)
    a = rng.normal(size=(3, 3))
    base = MvnParams(0.5 * rng.normal(size=3), a @ a.T + 0.5 * np.eye(3))
    bits = np.array(bits)
    pos = np.flatnonzero(bits)
    g = pattern_reward_gradient(base, bits, 5000, seed=11)
    y = sample_mvn(MvnParams(base.mean[pos], base.cov[np.ix_(pos, pos)]), 5000, 11) if pos.size else np.zeros((1, 0))
    f = frozen_objective(y, base, bits)
    chol = np.linalg.cholesky(base.cov)
    h = 1e-5
    assert f(base.mean, chol) == pytest.approx(g.value, abs=1e-12)
    for j, e in enumerate(np.eye(3)):
        fd = (f(base.mean + h * e, chol) - f(base.mean - h * e, chol)) / (2 * h)
        assert g.grad_mean[j] == pytest.approx(fd, abs=1e-7)
    for i in range(3):
        for j in range(i + 1):
            e = np.zeros((3, 3))
            e[i, j] = h
            fd = (f(base.mean, chol + e) - f(base.mean, chol - e)) / (2 * h)
            assert g.grad_chol[i, j] == pytest.approx(fd, abs=1e-7)


def test_refine_zero_learning_rate_is_identity():
    p = random_params(1, 2, 2, 3)
    p = CmmParams(p.theta, p.phi, p.means, p.covs, CourseVocabulary.generic(3).fingerprint())
    c = sample_students(p, 30, seed=0)
    res = refine_policy_gradient(p, c, steps=2, learning_rate=0.0, k_mc=200, seed=0)
    assert np.array_equal(res.params.means, p.means)
    assert np.array_equal(res.params.covs, p.covs)
    assert len(res.objective_trace) == 2 and not res.aborted


def test_refine_moves_means_toward_observed_pattern():
    p = CmmParams([1.0], np.zeros((0, 1, 1)), [[np.zeros(3)]], [[np.eye(3)]])
    c = as_cohort(np.ones((1, 1, 3)))
    deltas = []
    for seed in range(20):
        res = refine_policy_gradient(p, c, steps=1, learning_rate=0.1, k_mc=2000, seed=seed)
        deltas.append(res.params.means[0, 0] - p.means[0, 0])
    mean_delta = np.mean(deltas, axis=0)
    assert np.all(mean_delta > 0)


def test_refine_rejects_zero_steps():
    p = random_params(1, 1, 1, 2)
    with pytest.raises(DataError):
        refine_policy_gradient(p, as_cohort(np.zeros((1, 1, 2))), 0, 0.1, 10, 0)


def test_policy_objective_shares_pattern_estimates():
    p = random_params(2, 2, 2, 3)
    p = CmmParams(p.theta, p.phi, p.means, p.covs, CourseVocabulary.generic(3).fingerprint())
    c = as_cohort(np.tile(np.array([[1, 0, 1], [0, 1, 1]], dtype=np.int8), (4, 1, 1)))
    obj_a, _ = cmm.policy_objective(p, c, 500, seed=1)
    obj_b, _ = cmm.policy_objective(p, c.subset([0]), 500, seed=1)
    assert obj_a == pytest.approx(obj_b, abs=1e-12)
