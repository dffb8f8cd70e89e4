"""Discrete mixture baselines over the flattened T*M enrollment vector.

Both models treat a student as one binary vector of length ``D = T*M``
(timestep-major) with a single latent class.  Naive Bayes makes every
variable independent given the class; tree-augmented naive Bayes (TAN)
adds, per class, a directed tree of dependencies learned Chow-Liu style.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from ._random import as_generator
from .data_model import Cohort, CourseVocabulary
from .errors import DataError

DELTA = 1e-4


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.flags.writeable = False
    return a


def _check_theta(theta):
    if theta.ndim != 1 or theta.size < 1 or np.any(theta < 0) or abs(theta.sum() - 1.0) > 1e-9:
        raise DataError("theta must be a non-empty probability vector")


@dataclass(frozen=True)
class NaiveBayesParams:
    """Bernoulli mixture: ``theta`` (K,) and ``phi`` (K, T*M) in [delta, 1-delta]."""

    theta: np.ndarray
    phi: np.ndarray
    n_timesteps: int
    n_courses: int
    vocab_fingerprint: str = ""

    def __post_init__(self):
        theta, phi = _frozen(self.theta), _frozen(self.phi)
        _check_theta(theta)
        if phi.shape != (theta.size, self.n_timesteps * self.n_courses):
            raise DataError(f"phi shape {phi.shape} inconsistent with K={theta.size}, T*M={self.n_timesteps * self.n_courses}")
        if np.any(phi < 0) or np.any(phi > 1):
            raise DataError("phi entries must lie in [0, 1]")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "phi", phi)

    @property
    def k_states(self):
        return self.theta.size


@dataclass(frozen=True)
class TanParams:
    """Mixture of per-class directed trees over the T*M variables.

    ``parents[k, j]`` is the parent of variable ``j`` in class ``k`` (-1 for
    the root, variable 0).  ``cpt[k, j, a, b] = P(x_j = b | x_parent = a, k)``;
    for the root both rows hold its marginal.  ``order[k]`` lists the
    variables parents-first.
    """

    theta: np.ndarray
    parents: np.ndarray
    cpt: np.ndarray
    n_timesteps: int
    n_courses: int
    vocab_fingerprint: str = ""
    order: np.ndarray = field(default=None, compare=False)

    def __post_init__(self):
        theta = _frozen(self.theta)
        parents = _frozen(self.parents, int)
        cpt = _frozen(self.cpt)
        _check_theta(theta)
        k, d = theta.size, self.n_timesteps * self.n_courses
        if parents.shape != (k, d) or cpt.shape != (k, d, 2, 2):
            raise DataError("parents/cpt shapes inconsistent with K and T*M")
        if not np.allclose(cpt.sum(axis=3), 1.0, atol=1e-9):
            raise DataError("CPT rows must sum to 1")
        order = np.array([_topological_order(parents[kk]) for kk in range(k)], dtype=int)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "cpt", cpt)
        object.__setattr__(self, "order", _frozen(order, int))

    @property
    def k_states(self):
        return self.theta.size

    def edges(self, k):
        """Undirected edges ``(min, max)`` of class ``k``'s tree."""
        return sorted(
            (min(j, int(a)), max(j, int(a))) for j, a in enumerate(self.parents[k]) if a >= 0
        )


def _topological_order(parents):
    d = parents.size
    roots = np.flatnonzero(parents < 0)
    if roots.size != 1:
        raise DataError(f"tree must have exactly one root, found {roots.size}")
    children = [[] for _ in range(d)]
    for j, a in enumerate(parents):
        if a >= 0:
            if a >= d:
                raise DataError("parent index out of range")
            children[a].append(j)
    order = [int(roots[0])]
    for j in order:
        order.extend(children[j])
    if len(order) != d:
        raise DataError("parent map is not a single spanning tree (cycle or disconnected)")
    return order


@dataclass
class BaselineFit:
    params: object
    trace: list

    @property
    def loglik(self):
        return self.trace[-1]


def _flat(c):
    return c.flat().astype(float)


def _check_cohort(params, c):
    if (c.n_timesteps, c.n_courses) != (params.n_timesteps, params.n_courses):
        raise DataError(
            f"cohort shape (T={c.n_timesteps}, M={c.n_courses}) does not match model "
            f"(T={params.n_timesteps}, M={params.n_courses})"
        )
    if params.vocab_fingerprint and params.vocab_fingerprint != c.vocab.fingerprint():
        raise DataError("cohort vocabulary does not match the model's training vocabulary")


# ---------------------------------------------------------------------------
# naive Bayes


def _nb_class_loglik(phi, x):
    return x @ np.log(phi).T + (1.0 - x) @ np.log1p(-phi).T


def _nb_m_step(x, resp):
    weight = resp.sum(axis=0)
    theta = weight / weight.sum()
    with np.errstate(invalid="ignore", divide="ignore"):
        phi = np.where(weight[:, None] > 0, resp.T @ x / weight[:, None], 0.5)
    return theta, np.clip(phi, DELTA, 1.0 - DELTA)


def _check_fit_args(c, k_states):
    if k_states < 1:
        raise DataError("k_states must be >= 1")
    if c.n_students == 0:
        raise DataError("cohort is empty")
    if k_states > c.n_students:
        raise DataError(f"k_states={k_states} exceeds the number of students ({c.n_students})")


def nb_fit_em(c, k_states, max_iters=200, tol=1e-6, seed=0):
    """Fit a Bernoulli mixture by EM.

    Responsibilities start from seeded Dirichlet(1) rows.  Bernoulli
    parameters are clamped to ``[DELTA, 1 - DELTA]``; since the clamped
    value is the constrained maximizer, EM stays monotone.  Stops when the
    relative log-likelihood improvement falls to ``tol`` or after
    ``max_iters`` evaluations.
    """
    _check_fit_args(c, k_states)
    x = _flat(c)
    rng = as_generator(seed)
    resp = rng.dirichlet(np.ones(k_states), size=x.shape[0])
    trace = []
    for it in range(max_iters):
        theta, phi = _nb_m_step(x, resp)
        joint = np.log(theta)[None] + _nb_class_loglik(phi, x)
        ll = logsumexp(joint, axis=1)
        trace.append(float(ll.sum()))
        if len(trace) > 1 and trace[-1] - trace[-2] <= tol * abs(trace[-2]):
            break
        resp = np.exp(joint - ll[:, None])
    params = NaiveBayesParams(theta, phi, c.n_timesteps, c.n_courses, c.vocab.fingerprint())
    return BaselineFit(params, trace)


# ---------------------------------------------------------------------------
# tree-augmented naive Bayes


def _pair_counts(x, w):
    """Weighted joint counts ``n[a, b, va, vb]`` for every variable pair."""
    xw = x * w[:, None]
    n11 = xw.T @ x
    n1 = xw.sum(axis=0)
    total = w.sum()
    n10 = n1[:, None] - n11
    n01 = n1[None, :] - n11
    n00 = total - n1[:, None] - n1[None, :] + n11
    counts = np.stack([np.stack([n00, n01], axis=-1), np.stack([n10, n11], axis=-1)], axis=-2)
    return np.clip(counts, 0.0, None), n1, total


def mutual_information(counts, total):
    """Pairwise mutual information from joint counts ``(D, D, 2, 2)``."""
    p = counts / total
    pa = p.sum(axis=3, keepdims=True)
    pb = p.sum(axis=2, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p / (pa * pb)), 0.0)
    mi = terms.sum(axis=(2, 3))
    np.fill_diagonal(mi, 0.0)
    return np.clip(mi, 0.0, None)


def max_spanning_tree(weights):
    """Kruskal maximum-weight spanning tree, rooted at variable 0.

    Equal weights are resolved by the lexicographic order of the
    ``(i, j)`` pair with ``i < j``.  Returns the parent array.
    """
    d = weights.shape[0]
    iu, ju = np.triu_indices(d, k=1)
    order = np.lexsort((ju, iu, -weights[iu, ju]))
    root = list(range(d))

    def find(a):
        while root[a] != a:
            root[a] = root[root[a]]
            a = root[a]
        return a

    adj = [[] for _ in range(d)]
    used = 0
    for e in order:
        a, b = int(iu[e]), int(ju[e])
        ra, rb = find(a), find(b)
        if ra != rb:
            root[ra] = rb
            adj[a].append(b)
            adj[b].append(a)
            used += 1
            if used == d - 1:
                break
    parents = np.full(d, -1, dtype=int)
    seen = {0}
    queue = [0]
    for j in queue:
        for nb in sorted(adj[j]):
            if nb not in seen:
                seen.add(nb)
                parents[nb] = j
                queue.append(nb)
    return parents


def _fit_cpt(parents, counts, n1, total):
    d = parents.size
    cpt = np.empty((d, 2, 2))
    marg = np.clip(n1 / total if total > 0 else np.full(d, 0.5), DELTA, 1.0 - DELTA)
    for j in range(d):
        a = parents[j]
        if a < 0:
            p1 = np.array([marg[j], marg[j]])
        else:
            joint = counts[a, j]  # [va, vj]
            rows = joint.sum(axis=1)
            with np.errstate(invalid="ignore", divide="ignore"):
                p1 = np.where(rows > 0, joint[:, 1] / rows, marg[j])
            p1 = np.clip(p1, DELTA, 1.0 - DELTA)
        cpt[j, :, 1] = p1
        cpt[j, :, 0] = 1.0 - p1
    return cpt


def _tree_loglik(parents, cpt, x):
    """log P(x | tree) for each row of binary ``x``, shape (N,)."""
    xi = x.astype(int)
    d = parents.size
    pa_val = np.where(parents >= 0, xi[:, np.maximum(parents, 0)], 0)
    return np.log(cpt[np.arange(d)[None, :], pa_val, xi]).sum(axis=1)


def _tan_m_step(x, resp, prev_parents):
    k = resp.shape[1]
    weight = resp.sum(axis=0)
    theta = weight / weight.sum()
    d = x.shape[1]
    parents = np.empty((k, d), dtype=int)
    cpt = np.empty((k, d, 2, 2))
    for kk in range(k):
        w = resp[:, kk]
        counts, n1, total = _pair_counts(x, w)
        if total <= 0:
            parents[kk] = prev_parents[kk] if prev_parents is not None else max_spanning_tree(np.zeros((d, d)))
            cpt[kk] = _fit_cpt(parents[kk], counts, n1, total)
            continue
        cand = max_spanning_tree(mutual_information(counts, total))
        cand_cpt = _fit_cpt(cand, counts, n1, total)
        parents[kk], cpt[kk] = cand, cand_cpt
        if prev_parents is not None and not np.array_equal(prev_parents[kk], cand):
            # Chow-Liu maximizes the unclamped objective; keep the previous
            # tree if clamping makes it score higher, so EM stays monotone
            old_cpt = _fit_cpt(prev_parents[kk], counts, n1, total)
            if w @ _tree_loglik(prev_parents[kk], old_cpt, x) > w @ _tree_loglik(cand, cand_cpt, x):
                parents[kk], cpt[kk] = prev_parents[kk], old_cpt
    return theta, parents, cpt


def tan_fit_em(c, k_states, max_iters=200, tol=1e-6, seed=0):
    """Fit a TAN mixture by EM.

    Each M-step rebuilds, for every class, a maximum-weight spanning tree
    over pairwise mutual information computed from responsibility-weighted
    counts (root = variable 0, ties by lexicographic pair), then refits the
    conditional tables with clamping to ``[DELTA, 1 - DELTA]``.
    """
    _check_fit_args(c, k_states)
    if c.n_timesteps * c.n_courses < 2:
        raise DataError("TAN needs at least two variables")
    x = _flat(c)
    rng = as_generator(seed)
    resp = rng.dirichlet(np.ones(k_states), size=x.shape[0])
    trace = []
    parents = None
    for it in range(max_iters):
        theta, parents, cpt = _tan_m_step(x, resp, parents)
        joint = np.log(theta)[None] + np.stack(
            [_tree_loglik(parents[kk], cpt[kk], x) for kk in range(k_states)], axis=1
        )
        ll = logsumexp(joint, axis=1)
        trace.append(float(ll.sum()))
        if len(trace) > 1 and trace[-1] - trace[-2] <= tol * abs(trace[-2]):
            break
        resp = np.exp(joint - ll[:, None])
    params = TanParams(theta, parents, cpt, c.n_timesteps, c.n_courses, c.vocab.fingerprint())
    return BaselineFit(params, trace)


# ---------------------------------------------------------------------------
# shared evaluation


def class_loglik(params, c):
    """``log P(x_i | class k)``, shape (N, K)."""
    _check_cohort(params, c)
    x = _flat(c)
    if isinstance(params, NaiveBayesParams):
        return _nb_class_loglik(params.phi, x)
    if isinstance(params, TanParams):
        return np.stack(
            [_tree_loglik(params.parents[k], params.cpt[k], x) for k in range(params.k_states)], axis=1
        )
    raise TypeError(f"unsupported parameter type {type(params).__name__}")


def model_loglik(params, c):
    """Per-student ``log sum_k theta_k P(x | k)``."""
    with np.errstate(divide="ignore"):
        log_theta = np.log(params.theta)
    return logsumexp(log_theta[None] + class_loglik(params, c), axis=1)


def model_sample(params, n, seed, vocab=None):
    """Ancestral sampling: class first, then variables (parents first for TAN)."""
    if n < 1:
        raise DataError("n must be >= 1")
    if vocab is None:
        vocab = CourseVocabulary.generic(params.n_courses)
    rng = as_generator(seed)
    k = params.k_states
    d = params.n_timesteps * params.n_courses
    cls = np.minimum((rng.random(n)[:, None] >= np.cumsum(params.theta)[None]).sum(axis=1), k - 1)
    u = rng.random((n, d))
    if isinstance(params, NaiveBayesParams):
        x = (u < params.phi[cls]).astype(np.int8)
    elif isinstance(params, TanParams):
        x = np.zeros((n, d), dtype=np.int8)
        for kk in range(k):
            rows = np.flatnonzero(cls == kk)
            if rows.size == 0:
                continue
            for j in params.order[kk]:
                a = params.parents[kk, j]
                pa_val = x[rows, a] if a >= 0 else np.zeros(rows.size, dtype=int)
                x[rows, j] = u[rows, j] < params.cpt[kk, j, pa_val, 1]
    else:
        raise TypeError(f"unsupported parameter type {type(params).__name__}")
    width = len(str(n - 1))
    return Cohort(
        vocab,
        x.reshape(n, params.n_timesteps, params.n_courses),
        [f"s{i:0{width}d}" for i in range(n)],
    )


def _tree_evidence(parents, order, cpt, evid):
    """log P(evidence) for one tree; ``evid`` is (N, D, 2) of 0/1 indicators."""
    n, d, _ = evid.shape
    lam = evid.astype(float).copy()
    log_scale = np.zeros(n)
    for j in order[::-1][:-1]:
        a = parents[j]
        msg = lam[:, j] @ cpt[j].T  # (N, 2) over parent value
        s = msg.max(axis=1)
        s = np.where(s > 0, s, 1.0)
        lam[:, a] *= msg / s[:, None]
        log_scale += np.log(s)
    root = order[0]
    with np.errstate(divide="ignore"):
        return np.log(lam[:, root] @ cpt[root, 0]) + log_scale


def predict_masked(params, c, observed, query):
    """``P(x_q = 1 | observed variables)`` for each student and query variable.

    Parameters
    ----------
    params : NaiveBayesParams or TanParams
    c : Cohort
        Supplies the observed values.
    observed : bool array of shape (T*M,)
        Flattened variables that count as evidence; the rest are marginalized.
    query : sequence of flattened variable indices

    Returns
    -------
    ndarray, shape (N, len(query))
    """
    _check_cohort(params, c)
    x = _flat(c)
    observed = np.asarray(observed, dtype=bool)
    query = np.asarray(query, dtype=int)
    if np.any(observed[query]):
        raise DataError("query variables must not be observed")
    with np.errstate(divide="ignore"):
        log_theta = np.log(params.theta)
    if isinstance(params, NaiveBayesParams):
        ll = _nb_class_loglik(params.phi[:, observed], x[:, observed])
        post = np.exp(ll + log_theta - logsumexp(ll + log_theta, axis=1, keepdims=True))
        return post @ params.phi[:, query]
    if not isinstance(params, TanParams):
        raise TypeError(f"unsupported parameter type {type(params).__name__}")
    n, d = x.shape
    base = np.ones((n, d, 2))
    base[:, observed, 0] = 1.0 - x[:, observed]
    base[:, observed, 1] = x[:, observed]
    k = params.k_states
    ev = np.empty((n, k))
    joint = np.empty((n, k, query.size))
    for kk in range(k):
        args = (params.parents[kk], params.order[kk], params.cpt[kk])
        ev[:, kk] = _tree_evidence(*args, base)
        for qi, q in enumerate(query):
            e = base.copy()
            e[:, q, 0] = 0.0
            joint[:, kk, qi] = _tree_evidence(*args, e)
    log_ev = ev + log_theta
    total = logsumexp(log_ev, axis=1)
    return np.exp(logsumexp(joint + log_theta[None, :, None], axis=1) - total[:, None])
