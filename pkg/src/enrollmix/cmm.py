"""Contextual mixture model (CMM).

A time-indexed chain of discrete hidden states with its own transition
matrix between every pair of adjacent timesteps and its own Gaussian
emission per (timestep, state).  Binary enrollment vectors are modelled
through their -1/+1 relaxation: a course is taken iff the latent Gaussian
coordinate is positive.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg
from scipy.special import log_ndtr, logsumexp, ndtr

from ._random import as_generator, derive_seed
from .data_model import Cohort, CourseVocabulary, shift_to_pm1
from .errors import DataError, NumericalError
from .gaussian_core import (
    DEFAULT_EPSILON,
    LOG_2PI,
    MvnParams,
    ProbEstimate,
    _sampling_factor,
    conditional_map,
    marginal,
    orthant_prob_mc,
    sample_mvn,
)

log = logging.getLogger(__name__)

PROB_ATOL = 1e-9


def _frozen(a):
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class CmmParams:
    """Parameters of a contextual mixture model.

    Attributes
    ----------
    theta : ndarray, shape (K,)
        Distribution of the hidden state at timestep 0.
    phi : ndarray, shape (T-1, K, K)
        ``phi[t, k, k2] = P(h^{t+1} = k2 | h^t = k)``.
    means : ndarray, shape (T, K, M)
    covs : ndarray, shape (T, K, M, M)
    vocab_fingerprint : str
        Fingerprint of the course vocabulary the model was trained on;
        empty when the model is not tied to a vocabulary.
    """

    theta: np.ndarray
    phi: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    vocab_fingerprint: str = ""

    def __post_init__(self):
        theta, phi = _frozen(self.theta), _frozen(self.phi)
        means, covs = _frozen(self.means), _frozen(self.covs)
        if theta.ndim != 1 or theta.size < 1:
            raise DataError("theta must be a non-empty vector")
        k = theta.size
        if means.ndim != 3 or means.shape[1] != k:
            raise DataError(f"means must have shape (T, {k}, M), got {means.shape}")
        t, _, m = means.shape
        if t < 1:
            raise DataError("need at least one timestep")
        if phi.shape != (t - 1, k, k):
            raise DataError(f"phi must have shape {(t - 1, k, k)}, got {phi.shape}")
        if covs.shape != (t, k, m, m):
            raise DataError(f"covs must have shape {(t, k, m, m)}, got {covs.shape}")
        for name, arr in (("theta", theta), ("phi", phi), ("means", means), ("covs", covs)):
            if not np.all(np.isfinite(arr)):
                raise DataError(f"{name} has non-finite entries")
        if np.any(theta < 0) or abs(theta.sum() - 1.0) > PROB_ATOL:
            raise DataError("theta must be a probability vector")
        if phi.size and (np.any(phi < 0) or np.max(np.abs(phi.sum(axis=2) - 1.0)) > PROB_ATOL):
            raise DataError("every phi row must be a probability vector")
        if not np.allclose(covs, np.swapaxes(covs, -1, -2), rtol=0.0, atol=1e-10):
            raise DataError("emission covariances must be symmetric")
        for tt in range(t):
            for kk in range(k):
                try:
                    np.linalg.cholesky(covs[tt, kk])
                except np.linalg.LinAlgError:
                    raise DataError(f"emission covariance ({tt}, {kk}) is not positive definite") from None
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covs", covs)

    @property
    def k_states(self):
        return self.theta.shape[0]

    @property
    def n_timesteps(self):
        return self.means.shape[0]

    @property
    def n_courses(self):
        return self.means.shape[2]

    def emission(self, t, k):
        return MvnParams(self.means[t, k], self.covs[t, k])

    def state_marginals(self):
        """Prior ``P(h^t = k)`` for every timestep, shape (T, K)."""
        out = [self.theta]
        for t in range(self.n_timesteps - 1):
            out.append(out[-1] @ self.phi[t])
        return np.array(out)

    def course_probabilities(self):
        """``P(x^t_j = 1 | h^t = k) = Phi(mu / sigma)``, shape (T, K, M)."""
        sd = np.sqrt(np.diagonal(self.covs, axis1=2, axis2=3))
        return ndtr(self.means / sd)


@dataclass(frozen=True)
class PosteriorSet:
    """Smoothed posteriors for a batch of students.

    ``gamma[i, t, k] = Q(h^t = k | X_i)``,
    ``xi[i, t, k, k2] = Q(h^t = k, h^{t+1} = k2 | X_i)`` and ``loglik[i]``
    is the log marginal likelihood of student ``i``.
    """

    gamma: np.ndarray
    xi: np.ndarray
    loglik: np.ndarray


def _log(a):
    with np.errstate(divide="ignore"):
        return np.log(a)


def forward_backward(p, like):
    """Scaled (log-space) forward-backward recursions.

    Parameters
    ----------
    p : CmmParams
    like : ndarray, shape (T, K) or (N, T, K)
        Per-state observation log-likelihoods; ``-inf`` marks impossible
        states.

    Returns
    -------
    PosteriorSet
        Always batched, with a leading student axis.
    """
    like = np.asarray(like, dtype=float)
    if like.ndim == 2:
        like = like[None]
    n, t_count, k = like.shape
    if (t_count, k) != (p.n_timesteps, p.k_states):
        raise DataError(f"likelihood shape {like.shape[1:]} does not match model {(p.n_timesteps, p.k_states)}")
    if np.any(np.isnan(like)) or np.any(like == np.inf):
        raise NumericalError("likelihood has NaN or +inf entries")
    dead = np.all(like == -np.inf, axis=2)
    if dead.any():
        i, t = np.argwhere(dead)[0]
        raise NumericalError(f"impossible observation: student {i} has zero likelihood for every state at timestep {t}")

    log_theta = _log(p.theta)
    log_phi = _log(p.phi)
    alpha = np.empty_like(like)
    beta = np.zeros_like(like)
    alpha[:, 0] = log_theta + like[:, 0]
    for t in range(t_count - 1):
        alpha[:, t + 1] = like[:, t + 1] + logsumexp(alpha[:, t, :, None] + log_phi[t], axis=1)
    for t in range(t_count - 2, -1, -1):
        beta[:, t] = logsumexp(log_phi[t] + (like[:, t + 1] + beta[:, t + 1])[:, None, :], axis=2)
    loglik = logsumexp(alpha[:, -1], axis=1)
    if np.any(~np.isfinite(loglik)):
        i = int(np.flatnonzero(~np.isfinite(loglik))[0])
        raise NumericalError(f"impossible observation: student {i} has zero probability under the model")

    gamma = np.exp(alpha + beta - loglik[:, None, None])
    xi = np.exp(
        alpha[:, :-1, :, None]
        + log_phi[None]
        + (like[:, 1:] + beta[:, 1:])[:, :, None, :]
        - loglik[:, None, None, None]
    )
    return PosteriorSet(gamma=gamma, xi=xi, loglik=loglik)


def emission_loglik(p, relaxed):
    """Gaussian log-density of each relaxed vector under each emission.

    ``relaxed`` has shape (N, T, M) (or (T, M)); returns (N, T, K).
    """
    x = np.asarray(relaxed, dtype=float)
    if x.ndim == 2:
        x = x[None]
    n, t_count, m = x.shape
    if (t_count, m) != (p.n_timesteps, p.n_courses):
        raise DataError(f"data shape {(t_count, m)} does not match model {(p.n_timesteps, p.n_courses)}")
    out = np.empty((n, t_count, p.k_states))
    for t in range(t_count):
        for k in range(p.k_states):
            try:
                chol = np.linalg.cholesky(p.covs[t, k])
            except np.linalg.LinAlgError as exc:
                raise NumericalError(f"emission ({t}, {k}) covariance is not positive definite") from exc
            z = linalg.solve_triangular(chol, (x[:, t] - p.means[t, k]).T, lower=True)
            out[:, t, k] = -0.5 * (m * LOG_2PI + np.sum(z * z, axis=0)) - np.sum(np.log(np.diag(chol)))
    return out


def _check_fingerprint(p, cohort):
    if p.vocab_fingerprint and p.vocab_fingerprint != cohort.vocab.fingerprint():
        raise DataError("cohort vocabulary does not match the model's training vocabulary")


def posteriors(p, cohort):
    """pm1-exact posteriors for every student of ``cohort``."""
    _check_fingerprint(p, cohort)
    return forward_backward(p, emission_loglik(p, shift_to_pm1(cohort).data))


# ---------------------------------------------------------------------------
# EM on the -1/+1 relaxation


@dataclass
class CmmFit:
    """Result of :func:`em_fit_pm1`.

    ``trace`` is the per-iteration objective of the returned restart: the
    log-likelihood plus the covariance penalty (see :func:`em_fit_pm1`).
    ``loglik_trace`` is the plain log-likelihood of the same iterates.
    """

    params: CmmParams
    trace: list
    loglik_trace: list
    restart_traces: list
    best_restart: int
    events: list = field(default_factory=list)

    @property
    def loglik(self):
        return self.loglik_trace[-1]


def _penalty(covs, strength):
    inv_trace = 0.0
    for cov in covs.reshape(-1, covs.shape[-2], covs.shape[-1]):
        chol = np.linalg.cholesky(cov)
        inv = linalg.cho_solve((chol, True), np.eye(cov.shape[0]))
        inv_trace += np.trace(inv)
    return -0.5 * strength * inv_trace


def _init_responsibilities(x, k, rng):
    """One nearest-centre assignment per timestep.

    Centres are drawn from the students' vectors by D^2 sampling (first
    uniformly, then proportionally to squared distance from the nearest
    centre so far).  If fewer than ``k`` distinct vectors exist the
    assignment is uniform at random.
    """
    n, t_count, _ = x.shape
    gamma = np.zeros((n, t_count, k))
    for t in range(t_count):
        xt = x[:, t]
        centres = [xt[rng.integers(n)]]
        d2 = ((xt - centres[0]) ** 2).sum(axis=1)
        for _ in range(k - 1):
            total = d2.sum()
            if total <= 0:
                break
            i = min(int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right")), n - 1)
            centres.append(xt[i])
            d2 = np.minimum(d2, ((xt - xt[i]) ** 2).sum(axis=1))
        if len(centres) == k:
            dist = ((xt[:, None, :] - np.array(centres)[None]) ** 2).sum(axis=2)
            labels = np.argmin(dist, axis=1)
        else:
            labels = rng.integers(0, k, size=n)
        gamma[np.arange(n), t, labels] = 1.0
    xi = gamma[:, :-1, :, None] * gamma[:, 1:, None, :]
    return gamma, xi


def _m_step(x, gamma, xi, strength, rng, prev, events, iteration):
    n, t_count, m = x.shape
    k = gamma.shape[2]
    theta = gamma[:, 0].sum(axis=0)
    theta = theta / theta.sum()
    phi = np.empty((t_count - 1, k, k))
    for t in range(t_count - 1):
        counts = xi[:, t].sum(axis=0)
        rows = counts.sum(axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            phi[t] = np.where(rows > 0, counts / rows, 1.0 / k)
    means = np.empty((t_count, k, m))
    covs = np.empty((t_count, k, m, m))
    eye = np.eye(m)
    for t in range(t_count):
        w = gamma[:, t]  # (N, K)
        weight = w.sum(axis=0)
        for kk in range(k):
            if weight[kk] < 1e-8:
                i = int(rng.integers(n))
                means[t, kk] = x[i, t]
                pooled = np.cov(x[:, t].T, bias=True).reshape(m, m)
                covs[t, kk] = pooled + (strength / max(n / k, 1.0)) * eye
                events.append({"iteration": iteration, "event": "reseed", "timestep": t, "state": kk, "student": i})
                log.info("iteration %d: state %d at timestep %d re-seeded from student %d", iteration, kk, t, i)
                continue
            mu = w[:, kk] @ x[:, t] / weight[kk]
            d = x[:, t] - mu
            scatter = (d * w[:, kk, None]).T @ d / weight[kk]
            means[t, kk] = mu
            covs[t, kk] = 0.5 * (scatter + scatter.T) + (strength / weight[kk]) * eye
    return theta, phi, means, covs


def _run_em(x, k, max_iters, tol, epsilon, seed, fingerprint):
    rng = as_generator(seed)
    n = x.shape[0]
    # penalty -strength/2 * tr(cov^-1) per emission; for a state holding
    # N/K students this is exactly a ridge of epsilon on the covariance
    strength = epsilon * n / k
    events = []
    gamma, xi = _init_responsibilities(x, k, rng)
    theta, phi, means, covs = _m_step(x, gamma, xi, strength, rng, None, events, 0)
    trace, ll_trace = [], []
    params = None
    for it in range(max_iters):
        params = CmmParams(theta, phi, means, covs, fingerprint)
        post = forward_backward(params, emission_loglik(params, x))
        ll = float(post.loglik.sum())
        obj = ll + _penalty(covs, strength)
        trace.append(obj)
        ll_trace.append(ll)
        if len(trace) > 1 and trace[-1] - trace[-2] <= tol * abs(trace[-2]):
            break
        if it == max_iters - 1:
            break
        theta, phi, means, covs = _m_step(x, post.gamma, post.xi, strength, rng, params, events, it + 1)
    return params, trace, ll_trace, events


def em_fit_pm1(c, k_states, max_iters=200, tol=1e-6, seed=0, restarts=5,
               epsilon=DEFAULT_EPSILON, n_jobs=1):
    """Fit a CMM by EM on the -1/+1 relaxation of ``c``.

    Emission likelihoods are exact Gaussian densities of the relaxed
    vectors.  The M-step uses the weighted closed forms for the initial
    distribution, transitions, means and covariances.  Covariances carry a
    fixed penalty ``-lambda/2 * tr(Sigma^-1)`` with
    ``lambda = epsilon * N / K``, whose maximizer is the weighted scatter
    plus ``lambda / W`` times the identity (``W`` the state's total
    responsibility); with ``K = 1`` this is exactly ``scatter + epsilon*I``.
    The traced objective is the penalized log-likelihood, which EM never
    decreases except at logged re-seed events.

    Each restart starts from a nearest-centre assignment around randomly
    chosen observed vectors at every timestep.  The restart with the best
    final objective is returned (ties go to the lower restart index).

    Parameters
    ----------
    c : Cohort
    k_states : int
    max_iters : int
    tol : float
        Stop when the relative objective improvement drops to ``tol``.
    seed : int
        Restart ``r`` uses ``derive_seed(seed, r)``.
    restarts : int
    epsilon : float
    n_jobs : int
        Restarts run in this many threads; results do not depend on it.

    Returns
    -------
    CmmFit
    """
    if k_states < 1:
        raise DataError("k_states must be >= 1")
    if c.n_students < k_states:
        raise DataError(f"need at least k_states={k_states} students, got {c.n_students}")
    if restarts < 1 or max_iters < 1:
        raise DataError("restarts and max_iters must be >= 1")
    x = shift_to_pm1(c).data
    fingerprint = c.vocab.fingerprint()
    seeds = [derive_seed(seed, r) for r in range(restarts)]

    def one(s):
        return _run_em(x, k_states, max_iters, tol, epsilon, s, fingerprint)

    if n_jobs > 1 and restarts > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(one, seeds))
    else:
        results = [one(s) for s in seeds]
    best = max(range(restarts), key=lambda r: (results[r][1][-1], -r))
    params, trace, ll_trace, events = results[best]
    return CmmFit(
        params=params,
        trace=trace,
        loglik_trace=ll_trace,
        restart_traces=[r[1] for r in results],
        best_restart=best,
        events=events,
    )


# ---------------------------------------------------------------------------
# sampling


def sample_students(p, n, seed, vocab=None):
    """Ancestral sampling of ``n`` students from ``p``.

    Hidden states follow theta and the per-timestep transitions; each
    relaxed vector is drawn from its state's emission and thresholded at 0.
    """
    if n < 1:
        raise DataError("n must be >= 1")
    if vocab is None:
        vocab = CourseVocabulary.generic(p.n_courses)
    if len(vocab) != p.n_courses:
        raise DataError("vocabulary size does not match the model")
    rng = as_generator(seed)
    t_count, k, m = p.n_timesteps, p.k_states, p.n_courses
    factors = [[_sampling_factor(p.covs[t, kk]) for kk in range(k)] for t in range(t_count)]
    data = np.zeros((n, t_count, m), dtype=np.int8)
    state = _categorical(rng, np.broadcast_to(p.theta, (n, k)))
    for t in range(t_count):
        z = rng.standard_normal((n, m))
        for kk in range(k):
            rows = state == kk
            if rows.any():
                xbar = p.means[t, kk] + z[rows] @ factors[t][kk].T
                data[rows, t] = xbar > 0.0
        if t < t_count - 1:
            state = _categorical(rng, p.phi[t][state])
    width = len(str(n - 1))
    return Cohort(vocab, data, [f"s{i:0{width}d}" for i in range(n)])


def _categorical(rng, probs):
    u = rng.random(probs.shape[0])
    cdf = np.cumsum(probs, axis=1)
    return np.minimum((u[:, None] >= cdf).sum(axis=1), probs.shape[1] - 1)


# ---------------------------------------------------------------------------
# likelihoods, decoding and flows


@dataclass(frozen=True)
class LogLikEstimate:
    """Log-likelihood with a delta-method standard error."""

    value: float
    std_error: float
    sample_count: int


def _check_student(p, student):
    student = np.asarray(student)
    if student.shape != (p.n_timesteps, p.n_courses):
        raise DataError(f"student record shape {student.shape} does not match model {(p.n_timesteps, p.n_courses)}")
    if not np.all((student == 0) | (student == 1)):
        raise DataError("student record must be binary")
    return student


def _pattern_prob(mvn, bits, k_mc, seed, tail_mode="nested_mc"):
    """Binary-pattern probability; closed form in one dimension."""
    if mvn.dim == 0:
        return ProbEstimate(1.0, 0.0, k_mc)
    if mvn.dim == 1:
        z = mvn.mean[0] / np.sqrt(mvn.cov[0, 0])
        return ProbEstimate(float(ndtr(z if bits[0] else -z)), 0.0, k_mc)
    return orthant_prob_mc(mvn, bits, k_mc, seed, tail_mode=tail_mode)


def student_loglik(p, student, mode="pm1_exact", k_mc=10_000, seed=0, tail_mode="nested_mc"):
    """Log-likelihood of one student's binary record.

    ``pm1_exact`` scores the -1/+1 vector with the Gaussian densities and
    returns a float.  ``binary_mc`` uses the Monte-Carlo probability of each
    timestep's binary pattern under each state, combines them with the
    forward recursion and returns a :class:`LogLikEstimate`; the standard
    error propagates the per-(t, k) errors through
    ``d loglik / d like[t, k] = gamma[t, k] / like[t, k]``.
    """
    student = _check_student(p, student)
    if mode == "pm1_exact":
        like = emission_loglik(p, 2.0 * student - 1.0)
        return float(forward_backward(p, like).loglik[0])
    if mode != "binary_mc":
        raise ValueError(f"unknown mode {mode!r}")
    prob = np.empty((p.n_timesteps, p.k_states))
    se = np.empty_like(prob)
    for t in range(p.n_timesteps):
        for k in range(p.k_states):
            est = _pattern_prob(p.emission(t, k), student[t], k_mc, derive_seed(seed, t, k), tail_mode)
            prob[t, k], se[t, k] = est.value, est.std_error
    post = forward_backward(p, _log(prob))
    gamma = post.gamma[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(prob > 0, gamma * se / prob, 0.0)
    return LogLikEstimate(float(post.loglik[0]), float(np.sqrt(np.sum(rel**2))), k_mc)


def decode_path(p, student):
    """Most probable hidden path under the pm1-exact likelihoods (Viterbi).

    Ties go to the lower state index.
    """
    student = _check_student(p, student)
    like = emission_loglik(p, 2.0 * student - 1.0)[0]
    log_phi = _log(p.phi)
    t_count, k = like.shape
    score = _log(p.theta) + like[0]
    back = np.zeros((t_count, k), dtype=int)
    for t in range(1, t_count):
        cand = score[:, None] + log_phi[t - 1]
        back[t] = np.argmax(cand, axis=0)
        score = cand[back[t], np.arange(k)] + like[t]
    if not np.any(np.isfinite(score)):
        raise NumericalError("impossible observation: no path has positive probability")
    path = np.empty(t_count, dtype=int)
    path[-1] = int(np.argmax(score))
    for t in range(t_count - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path


def transition_flows(p, c):
    """Expected transition counts between adjacent timesteps, shape (T-1, K, K)."""
    post = posteriors(p, c)
    return post.xi.sum(axis=0)


def sankey_json(flows):
    """Sankey-ready dict: nodes ``t{t}_k{k}`` and links with expected counts."""
    flows = np.asarray(flows, dtype=float)
    n_steps, k, _ = flows.shape
    nodes = [{"id": f"t{t}_k{s}"} for t in range(n_steps + 1) for s in range(k)]
    links = [
        {"source": f"t{t}_k{a}", "target": f"t{t + 1}_k{b}", "value": float(flows[t, a, b])}
        for t in range(n_steps)
        for a in range(k)
        for b in range(k)
    ]
    return {"schema_version": 1, "nodes": nodes, "links": links}


# ---------------------------------------------------------------------------
# conditional inference


@dataclass(frozen=True)
class ObservationMask:
    """What is known about one student.

    ``assignments[t]`` is ``None`` when timestep ``t`` is unobserved, or a
    dict mapping course index to 0/1 for the courses known at ``t``.
    """

    assignments: tuple

    def __post_init__(self):
        clean = []
        for a in self.assignments:
            if a is None:
                clean.append(None)
                continue
            d = {int(j): int(v) for j, v in dict(a).items()}
            if any(v not in (0, 1) for v in d.values()):
                raise DataError("assignment values must be 0 or 1")
            clean.append(d)
        object.__setattr__(self, "assignments", tuple(clean))

    @classmethod
    def empty(cls, n_timesteps):
        return cls((None,) * n_timesteps)

    @classmethod
    def from_record(cls, record, observed_timesteps):
        """Fully observe ``record`` (T x M binary) at the given timesteps."""
        record = np.asarray(record)
        observed = set(int(t) for t in observed_timesteps)
        return cls(tuple(
            {j: int(v) for j, v in enumerate(record[t])} if t in observed else None
            for t in range(record.shape[0])
        ))


EVIDENCE_FLOOR = 0.5


@dataclass(frozen=True)
class IntermediateInference:
    """Per-course probabilities of enrollment at the queried timestep."""

    probabilities: np.ndarray
    std_errors: np.ndarray
    state_posterior: np.ndarray


def _evidence(p, mask, k_mc, seed):
    t_count, k = p.n_timesteps, p.k_states
    prob = np.ones((t_count, k))
    se = np.zeros((t_count, k))
    for t, a in enumerate(mask.assignments):
        if not a:
            continue
        idx = np.array(sorted(a))
        bits = np.array([a[j] for j in idx])
        for kk in range(k):
            est = _pattern_prob(marginal(p.emission(t, kk), idx), bits, k_mc, derive_seed(seed, t, kk))
            prob[t, kk], se[t, kk] = est.value, est.std_error
    # A zero estimate only says the probability is below the Monte-Carlo
    # resolution; floor it there so one rare pattern cannot veto every state.
    zero = prob <= 0
    if zero.any():
        floor = EVIDENCE_FLOOR / k_mc
        log.debug("flooring %d zero evidence estimates at %.3g", int(zero.sum()), floor)
        prob[zero] = floor
        se[zero] = floor
    return prob, se


def infer_intermediate(p, mask, query_t, query_courses, k_mc=20_000, seed=0):
    """Probability of taking each query course at ``query_t`` given evidence.

    Evidence at each observed timestep is the probability of its partial
    assignment under each state, with unmentioned courses marginalized out
    of the emission.  Forward-backward turns the evidence into
    ``P(h^query_t = k | evidence)``.  The answer for course ``j`` is
    ``sum_k P(h = k | evidence) * P(x_j = 1 | h = k, A)``, where ``A`` is any
    partial assignment at ``query_t`` itself (with no ``A`` this is
    ``Phi(mu_kj / sigma_kj)``).

    Standard errors combine the Monte-Carlo errors of the evidence terms
    (delta method, using posterior covariances of state indicators) and of
    the per-state conditional probabilities.

    An evidence estimate of exactly zero means the pattern is rarer than
    the Monte-Carlo resolution allows to see; it is replaced by
    ``EVIDENCE_FLOOR / k_mc``.  When every state hits the floor the
    timestep becomes uninformative instead of making the query impossible.
    """
    t_count, k = p.n_timesteps, p.k_states
    if len(mask.assignments) != t_count:
        raise DataError("mask length does not match the model's timesteps")
    if not 0 <= query_t < t_count:
        raise DataError("query_t out of range")
    query = np.asarray(query_courses, dtype=int).reshape(-1)
    if query.size == 0 or query.min() < 0 or query.max() >= p.n_courses:
        raise DataError("query courses out of range")
    for a in mask.assignments:
        if a and max(a) >= p.n_courses:
            raise DataError("mask refers to a course index out of range")
    at_query = mask.assignments[query_t] or {}
    clash = [int(j) for j in query if j in at_query]
    if clash:
        raise DataError(f"query courses {clash} are already observed at timestep {query_t}")

    prob, se = _evidence(p, mask, k_mc, seed)
    like = _log(prob)
    post = forward_backward(p, like)
    gamma = post.gamma[0]
    gq = gamma[query_t]

    # per-state conditional probabilities at the query timestep
    cond = np.empty((k, query.size))
    cond_se = np.zeros_like(cond)
    base_idx = np.array(sorted(at_query), dtype=int)
    base_bits = np.array([at_query[j] for j in base_idx], dtype=int)
    for kk in range(k):
        em = p.emission(query_t, kk)
        for q, j in enumerate(query):
            if base_idx.size == 0:
                cond[kk, q] = ndtr(em.mean[j] / np.sqrt(em.cov[j, j]))
                continue
            idx = np.concatenate([base_idx, [j]])
            bits = np.concatenate([base_bits, [1]])
            s = derive_seed(seed, t_count + 1, kk, int(j))
            joint = _pattern_prob(marginal(em, idx), bits, k_mc, s)
            denom = prob[query_t, kk]
            if denom <= 0:
                cond[kk, q] = 0.0
                continue
            r = min(1.0, joint.value / denom)
            cond[kk, q] = r
            rel = np.hypot(joint.std_error / joint.value if joint.value > 0 else 0.0,
                           se[query_t, kk] / denom)
            cond_se[kk, q] = r * rel

    answer = gq @ cond

    # sensitivity of the answer to each evidence term, via clamped runs
    var = (gq[:, None] ** 2 * cond_se**2).sum(axis=0)
    for t in range(t_count):
        if not np.any(se[t] > 0):
            continue
        for kk in range(k):
            if gamma[t, kk] <= 0 or se[t, kk] == 0:
                continue
            if t == query_t:
                joint_q = np.zeros(k)
                joint_q[kk] = gamma[t, kk]
            else:
                clamped = like.copy()
                keep = np.full(k, -np.inf)
                keep[kk] = like[t, kk]
                clamped[t] = keep
                joint_q = gamma[t, kk] * forward_backward(p, clamped).gamma[0, query_t]
            sens = (joint_q - gamma[t, kk] * gq) @ cond
            var += (sens * se[t, kk] / prob[t, kk]) ** 2
    return IntermediateInference(
        probabilities=np.clip(answer, 0.0, 1.0),
        std_errors=np.sqrt(var),
        state_posterior=gq,
    )


# ---------------------------------------------------------------------------
# policy-gradient refinement

REWARD_FLOOR = 1e-12


@dataclass(frozen=True)
class PatternGradient:
    """Smoothed pattern probability and its gradient for one emission.

    ``grad_cov`` is the symmetric gradient with respect to the covariance;
    ``grad_chol`` the gradient with respect to its lower Cholesky factor.
    """

    value: float
    grad_mean: np.ndarray
    grad_cov: np.ndarray
    grad_chol: np.ndarray


def _norm_hazard(a):
    # phi(a) / Phi(a), stable for very negative a
    return np.exp(-0.5 * a * a - 0.5 * LOG_2PI - log_ndtr(a))


def pattern_reward_gradient(mvn, pattern, k_mc, seed, chol=None):
    """Monte-Carlo smoothed probability of ``pattern`` and its gradient.

    Samples ``y ~ N(mu_G, Sigma_GG)`` over the positive coordinates (drawn
    with :func:`sample_mvn` on the marginal, so a fixed ``seed`` reproduces
    them).  The reward of each sample is
    :func:`enrollmix.gaussian_core.smoothed_orthant_reward`.  The gradient
    is the score-function term, with the batch-mean reward as baseline,
    plus the direct dependence of the reward on the conditional moments of
    the negative coordinates.  With ``G`` empty there is nothing to sample
    and the reward is a deterministic CDF product.
    """
    bits = np.asarray(pattern)
    m = mvn.dim
    if bits.shape != (m,):
        raise DataError("pattern length does not match emission dimension")
    pos = np.flatnonzero(bits == 1)
    neg = np.flatnonzero(bits == 0)
    if chol is None:
        chol = np.linalg.cholesky(mvn.cov)
    cmap = conditional_map(mvn, pos)

    if pos.size:
        y = sample_mvn(marginal(mvn, pos), k_mc, seed)
        soft = np.mean(y > 0.0, axis=1)
        s_gg = mvn.cov[np.ix_(pos, pos)]
        factor = linalg.cho_factor(s_gg, lower=True)
        u = linalg.cho_solve(factor, (y - mvn.mean[pos]).T).T  # (n, |G|)
        s_gg_inv = linalg.cho_solve(factor, np.eye(pos.size))
    else:
        y = np.zeros((1, 0))
        soft = np.ones(1)
        u = np.zeros((1, 0))
    n = y.shape[0]

    if neg.size:
        var = np.diag(cmap.cov)
        if np.any(var <= 0):
            raise NumericalError("conditional variance is not positive")
        sigma = np.sqrt(var)
        mu_l = cmap.mean(y)  # (n, |L|)
        a = -mu_l / sigma
        reward = np.exp(np.sum(log_ndtr(a), axis=1)) * soft
    else:
        reward = soft
    value = float(reward.mean())

    grad_mean = np.zeros(m)
    g_cov = np.zeros((m, m))
    if pos.size:
        c = (reward - value) / n
        grad_mean[pos] += c @ u
        g_cov[np.ix_(pos, pos)] += 0.5 * ((u * c[:, None]).T @ u - c.sum() * s_gg_inv)
    if neg.size:
        lam = _norm_hazard(a)  # (n, |L|)
        d_m = reward[:, None] * lam * (-1.0 / sigma) / n  # dr / d mean_l(y)
        d_v = reward[:, None] * lam * mu_l / (2.0 * sigma**3) / n  # dr / d var_l
        gain = cmap.gain  # (|L|, |G|), row l is b_l
        dm_sum = d_m.sum(axis=0)
        dv_sum = d_v.sum(axis=0)
        grad_mean[neg] += dm_sum
        if pos.size:
            grad_mean[pos] -= dm_sum @ gain
            mu_w = d_m.T @ u  # (|L|, |G|): sum_n dm[n,l] u_n
            g_cov[np.ix_(neg, pos)] += mu_w - 2.0 * dv_sum[:, None] * gain
            g_cov[np.ix_(pos, pos)] += -gain.T @ mu_w + (gain.T * dv_sum) @ gain
        g_cov[neg, neg] += dv_sum
    g_sym = 0.5 * (g_cov + g_cov.T)
    grad_chol = np.tril(2.0 * g_sym @ chol)
    return PatternGradient(value=value, grad_mean=grad_mean, grad_cov=g_sym, grad_chol=grad_chol)


@dataclass
class RefineResult:
    params: CmmParams
    objective_trace: list
    aborted: bool = False
    message: str = ""


def policy_objective(p, c, k_mc, seed, gamma=None):
    """Smoothed-probability objective and its gradients at ``p``.

    The objective is ``(1/N) sum_i sum_{t,k} gamma_i[t,k] * log R_tk(x_i^t)``
    where ``R_tk`` is the Monte-Carlo smoothed probability of the binary
    pattern ``x_i^t`` under emission (t, k).  Students sharing a pattern at a
    timestep share one estimate; the estimate for pattern number ``u`` of
    (t, k) uses ``derive_seed(seed, t, k, u)``.

    Returns
    -------
    objective : float
    grads : dict
        ``(t, k) -> (grad_mean, grad_chol)``.
    """
    _check_fingerprint(p, c)
    if gamma is None:
        gamma = posteriors(p, c).gamma
    n = c.n_students
    total = 0.0
    grads = {}
    for t in range(p.n_timesteps):
        pats, inverse = np.unique(c.data[:, t], axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        for k in range(p.k_states):
            weights = np.bincount(inverse, weights=gamma[:, t, k], minlength=pats.shape[0]) / n
            mvn = p.emission(t, k)
            chol = np.linalg.cholesky(mvn.cov)
            g_mean = np.zeros(p.n_courses)
            g_chol = np.zeros((p.n_courses, p.n_courses))
            for u, bits in enumerate(pats):
                if weights[u] == 0:
                    continue
                pg = pattern_reward_gradient(mvn, bits, k_mc, derive_seed(seed, t, k, u), chol=chol)
                if pg.value <= REWARD_FLOOR:
                    total += weights[u] * np.log(REWARD_FLOOR)
                    continue
                total += weights[u] * np.log(pg.value)
                g_mean += weights[u] * pg.grad_mean / pg.value
                g_chol += weights[u] * pg.grad_chol / pg.value
            grads[(t, k)] = (g_mean, g_chol)
    return float(total), grads


def refine_policy_gradient(p, c, steps, learning_rate, k_mc, seed):
    """Refine emission parameters by stochastic gradient ascent.

    Each step recomputes pm1-exact responsibilities, estimates
    :func:`policy_objective` and its gradient with fresh samples
    (step ``s`` uses ``derive_seed(seed, s)``), and moves each emission mean
    and lower Cholesky factor along the gradient.  Transition parameters
    are left untouched.  The objective is noisy and not guaranteed to
    increase.  A non-finite gradient stops the run and the last finite
    iterate is returned with ``aborted=True``.
    """
    if steps < 1:
        raise DataError("steps must be >= 1")
    means = np.array(p.means)
    covs = np.array(p.covs)
    chols = np.linalg.cholesky(covs)
    current = p
    trace = []
    for s in range(steps):
        obj, grads = policy_objective(current, c, k_mc, derive_seed(seed, s))
        trace.append(obj)
        bad = [key for key, (gm, gl) in grads.items() if not (np.all(np.isfinite(gm)) and np.all(np.isfinite(gl)))]
        if bad or not np.isfinite(obj):
            msg = f"step {s}: non-finite objective or gradient for emissions {bad}"
            log.warning(msg)
            return RefineResult(current, trace, aborted=True, message=msg)
        new_means, new_covs = means.copy(), covs.copy()
        for (t, k), (gm, gl) in grads.items():
            step_m = learning_rate * gm
            step_l = learning_rate * gl
            if np.any(step_m != 0):
                new_means[t, k] = means[t, k] + step_m
            if np.any(step_l != 0):
                chols[t, k] = chols[t, k] + step_l
                cov = chols[t, k] @ chols[t, k].T
                new_covs[t, k] = 0.5 * (cov + cov.T)
        try:
            current = replace(current, means=new_means, covs=new_covs)
        except DataError as exc:
            msg = f"step {s}: update produced invalid parameters ({exc})"
            log.warning(msg)
            return RefineResult(current, trace, aborted=True, message=msg)
        means, covs = new_means, new_covs
    return RefineResult(current, trace)
