"""Metrics and analyses over fitted models and cohorts."""

import hashlib
from dataclasses import dataclass

import numpy as np

from . import baselines, cmm
from ._random import derive_seed
from .cmm import ObservationMask, infer_intermediate, posteriors, student_loglik
from .errors import DataError

SCOPES = ("any_timestep", "per_timestep")
SCHEMA_VERSION = 1


@dataclass(frozen=True)
class MarginalVector:
    p: np.ndarray
    scope: str


def empirical_marginals(c, scope="any_timestep"):
    """Per-course enrollment frequencies.

    ``any_timestep``: fraction of students taking course ``j`` at least once
    (length M).  ``per_timestep``: frequency of every (t, j) cell, flattened
    timestep-major (length T*M).  An empty cohort gives zeros.
    """
    if scope not in SCOPES:
        raise ValueError(f"scope must be one of {SCOPES}")
    if c.n_students == 0:
        size = c.n_courses if scope == "any_timestep" else c.n_timesteps * c.n_courses
        return MarginalVector(np.zeros(size), scope)
    if scope == "any_timestep":
        p = c.data.max(axis=1).mean(axis=0)
    else:
        p = c.data.mean(axis=0).reshape(-1)
    return MarginalVector(np.asarray(p, dtype=float), scope)


def mean_field_error(holdout, samples, scope="any_timestep"):
    """Sum of squared differences between the two cohorts' marginals."""
    if holdout.vocab.course_ids != samples.vocab.course_ids:
        raise DataError("holdout and samples use different course vocabularies")
    if holdout.n_timesteps != samples.n_timesteps:
        raise DataError("holdout and samples have different timestep counts")
    a = empirical_marginals(holdout, scope).p
    b = empirical_marginals(samples, scope).p
    return float(np.sum((a - b) ** 2))


def mean_field_report(holdout, samples, scope="any_timestep"):
    return {
        "schema_version": SCHEMA_VERSION,
        "metric": "mean_field_error",
        "scope": scope,
        "value": mean_field_error(holdout, samples, scope),
        "holdout_students": holdout.n_students,
        "sample_students": samples.n_students,
    }


# ---------------------------------------------------------------------------
# intermediate-class inference


@dataclass
class AccuracyReport:
    """Fixed-threshold prediction results.

    ``predictions`` and ``labels`` are (N, Q) 0/1 arrays; ``probabilities``
    the scores they were thresholded from.
    """

    accuracy: float
    per_course: dict
    predictions: np.ndarray
    labels: np.ndarray
    probabilities: np.ndarray
    query_t: int
    threshold: float

    def confusion(self):
        p, y = self.predictions.astype(bool), self.labels.astype(bool)
        return {
            "tp": int(np.sum(p & y)),
            "fp": int(np.sum(p & ~y)),
            "tn": int(np.sum(~p & ~y)),
            "fn": int(np.sum(~p & y)),
        }

    def to_json_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "metric": "accuracy_report",
            "query_t": self.query_t,
            "threshold": self.threshold,
            "accuracy": self.accuracy,
            "per_course": self.per_course,
            "confusion": self.confusion(),
            "n_students": int(self.labels.shape[0]),
        }


def _accuracy_report(prob, labels, course_names, query_t, threshold):
    pred = (prob > threshold).astype(np.int8)
    correct = pred == labels
    per_course = {name: float(correct[:, q].mean()) for q, name in enumerate(course_names)}
    return AccuracyReport(
        accuracy=float(correct.mean()),
        per_course=per_course,
        predictions=pred,
        labels=labels,
        probabilities=prob,
        query_t=query_t,
        threshold=threshold,
    )


def _check_query(c, query_t, query_courses, threshold):
    if not 0 < threshold < 1:
        raise DataError("threshold must lie strictly between 0 and 1")
    if not 0 <= query_t < c.n_timesteps:
        raise DataError("query_t out of range")
    q = np.asarray(query_courses, dtype=int)
    if q.size == 0 or q.min() < 0 or q.max() >= c.n_courses:
        raise DataError("query courses out of range")
    return q


def inference_accuracy(p, holdout, query_t, query_courses, threshold=0.5, k_mc=4000, seed=0):
    """Predict enrollment in ``query_courses`` at ``query_t`` from all other timesteps.

    Each holdout student's other timesteps are fully observed, ``query_t``
    is hidden, and a course is predicted taken iff its inferred probability
    exceeds ``threshold``.  Student ``i`` uses seed ``seed + i``.
    """
    q = _check_query(holdout, query_t, query_courses, threshold)
    cmm._check_fingerprint(p, holdout)
    others = [t for t in range(holdout.n_timesteps) if t != query_t]
    prob = np.empty((holdout.n_students, q.size))
    for i in range(holdout.n_students):
        mask = ObservationMask.from_record(holdout.data[i], others)
        prob[i] = infer_intermediate(p, mask, query_t, q, k_mc=k_mc, seed=seed + i).probabilities
    labels = holdout.data[:, query_t, q].astype(np.int8)
    names = [holdout.vocab.course_ids[j] for j in q]
    return _accuracy_report(prob, labels, names, query_t, threshold)


def baseline_inference_accuracy(params, holdout, query_t, query_courses, threshold=0.5):
    """Same task as :func:`inference_accuracy` for a naive Bayes or TAN mixture."""
    q = _check_query(holdout, query_t, query_courses, threshold)
    t_count, m = holdout.n_timesteps, holdout.n_courses
    observed = np.ones((t_count, m), dtype=bool)
    observed[query_t] = False
    flat_query = query_t * m + q
    prob = baselines.predict_masked(params, holdout, observed.reshape(-1), flat_query)
    labels = holdout.data[:, query_t, q].astype(np.int8)
    names = [holdout.vocab.course_ids[j] for j in q]
    return _accuracy_report(prob, labels, names, query_t, threshold)


def majority_accuracy(reference, holdout, query_t, query_courses):
    """Accuracy of predicting each course's majority label in ``reference``."""
    q = _check_query(holdout, query_t, query_courses, 0.5)
    majority = (reference.data[:, query_t, q].mean(axis=0) > 0.5).astype(np.int8)
    labels = holdout.data[:, query_t, q]
    return float((labels == majority[None]).mean())


# ---------------------------------------------------------------------------
# novelty


@dataclass
class NoveltyReport:
    """Cross-fit log-likelihood of each student.

    ``low`` / ``high`` hold student positions of the bottom / top decile
    by score.
    """

    student_ids: tuple
    scores: np.ndarray
    folds: np.ndarray
    low: np.ndarray
    high: np.ndarray

    def to_json_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "metric": "novelty_report",
            "students": [
                {"student_id": s, "score": float(v), "fold": int(f)}
                for s, v, f in zip(self.student_ids, self.scores, self.folds)
            ],
            "low": [self.student_ids[i] for i in self.low],
            "high": [self.student_ids[i] for i in self.high],
        }


def assign_folds(student_ids, folds, seed):
    """Fold of each student from a seeded hash of its id (order-independent)."""
    keys = [hashlib.sha256(f"{seed}:{sid}".encode("utf-8")).hexdigest() for sid in student_ids]
    rank = np.empty(len(keys), dtype=int)
    rank[np.argsort(keys, kind="stable")] = np.arange(len(keys))
    return rank % folds


def decile_groups(scores):
    n = scores.size
    size = max(1, n // 10)
    order = np.lexsort((np.arange(n), scores))
    return np.sort(order[:size]), np.sort(order[-size:])


def novelty_scores(c, k_states, folds=10, seed=0, max_iters=200, tol=1e-6, restarts=5):
    """Score each student under a CMM fit on the other folds.

    A k-fold stand-in for fitting one model per held-out student.  Folds
    come from :func:`assign_folds`; each training set is ordered by student
    id before fitting, so the result does not depend on the cohort's row
    order.  Fold ``f`` is fit with ``seed + f``.
    """
    if folds < 2:
        raise DataError("folds must be >= 2")
    fold = assign_folds(c.student_ids, folds, seed)
    scores = np.empty(c.n_students)
    ids = np.array(c.student_ids)
    for f in range(folds):
        test = np.flatnonzero(fold == f)
        if test.size == 0:
            continue
        train = np.flatnonzero(fold != f)
        if train.size < k_states:
            raise DataError(f"fold {f} leaves only {train.size} training students for k_states={k_states}")
        train = train[np.argsort(ids[train], kind="stable")]
        fit = cmm.em_fit_pm1(c.subset(train), k_states, max_iters=max_iters, tol=tol,
                             seed=seed + f, restarts=restarts)
        for i in test:
            scores[i] = student_loglik(fit.params, c.data[i], mode="pm1_exact")
    low, high = decile_groups(scores)
    return NoveltyReport(tuple(c.student_ids), scores, fold, low, high)


def subject_mix(c, report):
    """Mean per-subject course counts and mean total for the low and high groups."""
    if tuple(report.student_ids) != tuple(c.student_ids):
        raise DataError("novelty report is not aligned with the cohort")
    subjects = sorted(set(c.vocab.subjects))
    subj_of = np.array([subjects.index(s) for s in c.vocab.subjects])
    per_course = c.data.sum(axis=1)  # (N, M) enrollments per course over time
    per_subject = np.stack([per_course[:, subj_of == s].sum(axis=1) for s in range(len(subjects))], axis=1)
    groups = {}
    for name, rows in (("low", report.low), ("high", report.high)):
        sub = per_subject[rows].mean(axis=0)
        groups[name] = {
            "n_students": int(rows.size),
            "mean_total": float(per_course[rows].sum(axis=1).mean()),
            "subjects": {s: float(v) for s, v in zip(subjects, sub)},
        }
    return {"schema_version": SCHEMA_VERSION, "metric": "subject_mix", "groups": groups}


# ---------------------------------------------------------------------------
# latent states of courses


def latent_assignment(p, c):
    """Most responsible hidden state for each course.

    Course ``j`` weights state ``k`` by the summed responsibility
    ``gamma[i, t, k]`` over every (student, timestep) where ``j`` was taken.
    Returns a list of ``(state, confidence)``; ``(None, 0.0)`` for courses
    nobody took.  Ties go to the lower state index.
    """
    gamma = posteriors(p, c).gamma  # (N, T, K)
    weight = np.einsum("ntk,ntj->jk", gamma, c.data.astype(float))
    out = []
    for w in weight:
        total = w.sum()
        if total <= 0:
            out.append((None, 0.0))
            continue
        k = int(np.argmax(w))
        out.append((k, float(w[k] / total)))
    return out


def latent_assignment_json(p, c):
    rows = latent_assignment(p, c)
    return {
        "schema_version": SCHEMA_VERSION,
        "metric": "latent_assignment",
        "courses": [
            {"course_id": cid, "state": state, "confidence": conf}
            for cid, (state, conf) in zip(c.vocab.course_ids, rows)
        ],
    }


# ---------------------------------------------------------------------------
# model comparison


def model_comparison(train, holdout, k_grid, n_samples, seed=0, scope="any_timestep",
                     max_iters=200, tol=1e-6, restarts=3, models=("cmm", "tan", "nb")):
    """Mean-field error of CMM, TAN and naive Bayes mixtures over a grid of K.

    Every model is fit on ``train`` for each ``K`` in ``k_grid``, sampled
    ``n_samples`` times and scored against ``holdout``.  Returns
    ``{model: {K: error}}``; :func:`best_of_k` reduces it to one number per
    model.
    """
    out = {name: {} for name in models}
    for k in k_grid:
        fit_seed = derive_seed(seed, k, 0)
        sample_seed = derive_seed(seed, k, 1)
        for name in models:
            if name == "cmm":
                params = cmm.em_fit_pm1(train, k, max_iters=max_iters, tol=tol,
                                        seed=fit_seed, restarts=restarts).params
                samples = cmm.sample_students(params, n_samples, sample_seed, vocab=train.vocab)
            elif name in ("tan", "nb"):
                fitter = baselines.tan_fit_em if name == "tan" else baselines.nb_fit_em
                params = fitter(train, k, max_iters=max_iters, tol=tol, seed=fit_seed).params
                samples = baselines.model_sample(params, n_samples, sample_seed, vocab=train.vocab)
            else:
                raise ValueError(f"unknown model {name!r}")
            out[name][k] = mean_field_error(holdout, samples, scope)
    return out


def best_of_k(errors):
    return {name: min(per_k.values()) for name, per_k in errors.items()}
