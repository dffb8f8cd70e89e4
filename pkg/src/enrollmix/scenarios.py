"""Shipped synthetic scenarios.

Each builder returns generating :class:`~enrollmix.cmm.CmmParams` for a
cohort with known structure.  Emission means are kept at 0 or at least 3
standard deviations from it, so per-state enrollment probabilities sit
near 0, 1/2 or 1; those are the values the -1/+1 relaxation reproduces
without bias.
"""

from dataclasses import dataclass, field

import numpy as np

from ._random import derive_seed
from .cmm import CmmParams
from .data_model import CourseVocabulary, synth_generate
from .evaluation import model_comparison

SATURATED = 3.0


def recovery_params(seed=0, k_states=3, n_timesteps=4, n_courses=10, separation=6.0):
    """Well-separated model for parameter-recovery checks.

    Every (timestep, state) emission has unit covariance and means of
    +-``separation`` drawn at random, so each state emits one binary
    prototype; at the default a course flips with probability about 1e-9.
    Rarer flips matter: the -1/+1 fit gives a pure state almost no
    variance, so a single flipped student is cheaper to explain with a
    state of its own than inside its prototype.  Transitions are sticky.  Prototypes are redrawn
    until every pair of states at a timestep differs in at least a third of
    the courses.
    """
    rng = np.random.default_rng(seed)
    k, t_count, m = k_states, n_timesteps, n_courses
    means = np.empty((t_count, k, m))
    for t in range(t_count):
        while True:
            proto = rng.choice([-separation, separation], size=(k, m))
            diff = (proto[:, None, :] != proto[None, :, :]).sum(axis=2)
            if k == 1 or diff[~np.eye(k, dtype=bool)].min() >= m // 3:
                break
        means[t] = proto
    covs = np.broadcast_to(np.eye(m), (t_count, k, m, m)).copy()
    theta = rng.dirichlet(np.full(k, 5.0))
    phi = np.empty((t_count - 1, k, k))
    for t in range(t_count - 1):
        for a in range(k):
            row = rng.dirichlet(np.full(k, 2.0)) * 0.4
            row[a] += 0.6
            phi[t, a] = row
    return CmmParams(theta, phi, means, covs)


def correlated_params(seed=0, k_states=8, n_timesteps=6, block=2, electives=0,
                      rho=0.6, concentration=1.0):
    """Temporally coupled model with co-enrolled course blocks.

    State ``s`` takes its own block of ``block`` courses (all of them or
    none, so they are strongly correlated within a timestep).  Transition
    rows are Dirichlet(``concentration``) with the diagonal zeroed, so a
    student never takes the same block in two consecutive timesteps and
    the number of distinct paths grows geometrically with the horizon.
    An optional pool of ``electives`` trailing courses adds, per
    (timestep, state), half the pool as coin flips with pairwise latent
    correlation ``rho``.
    """
    rng = np.random.default_rng(seed)
    k, t_count = k_states, n_timesteps
    m = k * block + electives
    means = np.full((t_count, k, m), -SATURATED)
    covs = np.broadcast_to(np.eye(m), (t_count, k, m, m)).copy()
    pool = np.arange(k * block, m)
    for t in range(t_count):
        for s in range(k):
            means[t, s, s * block:(s + 1) * block] = SATURATED
            sub = rng.choice(pool, size=electives // 2, replace=False)
            means[t, s, sub] = 0.0
            covs[t, s][np.ix_(sub, sub)] = rho
            covs[t, s][sub, sub] = 1.0
    theta = rng.dirichlet(np.full(k, 3.0))
    phi = np.empty((t_count - 1, k, k))
    for t in range(t_count - 1):
        for a in range(k):
            row = rng.dirichlet(np.full(k, concentration))
            row[a] = 0.0
            phi[t, a] = row / row.sum()
    return CmmParams(theta, phi, means, covs)


def coupled_params(switch=0.2, n_timesteps=4, n_courses=6, noise_courses=2, reset_every=None):
    """Two-state chain whose states emit opposite saturated patterns.

    State 0 takes the first half of the signal courses and state 1 the
    second half; ``noise_courses`` trailing courses are coin flips in both
    states.  The state persists between timesteps with probability
    ``1 - switch``.  With ``reset_every`` set, the state is instead redrawn
    uniformly after every ``reset_every`` timesteps, so coupling is local:
    adjacent timesteps inside a block agree, while distant ones carry no
    information about each other.
    """
    m = n_courses
    signal = m - noise_courses
    half = signal // 2
    base = np.full(m, -SATURATED)
    base[signal:] = 0.0
    means = np.empty((n_timesteps, 2, m))
    means[:, 0] = base
    means[:, 1] = base
    means[:, 0, :half] = SATURATED
    means[:, 1, half:signal] = SATURATED
    covs = np.broadcast_to(np.eye(m), (n_timesteps, 2, m, m)).copy()
    stay = np.array([[1 - switch, switch], [switch, 1 - switch]])
    phi = np.broadcast_to(stay, (n_timesteps - 1, 2, 2)).copy()
    if reset_every:
        phi[reset_every - 1::reset_every] = 0.5
    return CmmParams(np.array([0.5, 0.5]), phi, means, covs)


#: Locally coupled setting used for the intermediate-inference comparison.
INFERENCE_SCENARIO = {"switch": 0.05, "n_timesteps": 6, "reset_every": 2}


@dataclass(frozen=True)
class BenchmarkConfig:
    """Settings of the model-comparison benchmark."""

    k_grid: tuple = (2, 4, 8, 16)
    n_train: int = 3000
    n_holdout: int = 10000
    n_samples: int = 50000
    scope: str = "any_timestep"
    max_iters: int = 200
    tol: float = 1e-6
    restarts: int = 3
    generator: dict = field(default_factory=dict)


BENCHMARK = BenchmarkConfig()


def benchmark_cohorts(seed, config=BENCHMARK, n_train=None):
    """Generating parameters plus train and holdout cohorts of one replication."""
    p = correlated_params(seed, **config.generator)
    vocab = vocabulary(p.n_courses)
    n_train = config.n_train if n_train is None else n_train
    train = synth_generate(p, n_train, derive_seed(seed, 1), vocab)
    holdout = synth_generate(p, config.n_holdout, derive_seed(seed, 2), vocab)
    return p, train, holdout


def run_benchmark(seed, config=BENCHMARK, models=("cmm", "tan", "nb")):
    """Mean-field errors of every model on every K for one replication.

    Returns ``{model: {K: error}}``; see
    :func:`enrollmix.evaluation.best_of_k` for the summary.
    """
    _, train, holdout = benchmark_cohorts(seed, config)
    return model_comparison(
        train, holdout, config.k_grid, config.n_samples, seed=derive_seed(seed, 3),
        scope=config.scope, max_iters=config.max_iters, tol=config.tol,
        restarts=config.restarts, models=models,
    )


def vocabulary(n_courses):
    subjects = ["CS", "MATH", "BIO", "HUM"]
    return CourseVocabulary.generic(n_courses, [subjects[j % len(subjects)] for j in range(n_courses)])
