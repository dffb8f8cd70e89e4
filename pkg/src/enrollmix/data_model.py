"""Enrollment cohorts: ingestion, filtering, splitting, relaxation and summaries."""

import csv
import hashlib
import io
import json
import os
from dataclasses import dataclass, field

import numpy as np

from ._random import as_generator
from .errors import DataError, ParseError

CSV_HEADER = ("student_id", "timestep", "course_id", "subject")
DEFAULT_TIMESTEPS = 4


@dataclass(frozen=True)
class CourseVocabulary:
    """Ordered course list; column ``j`` of a cohort is ``entries[j]``.

    Each entry is ``(course_id, display_name, subject)``.
    """

    entries: tuple
    index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        entries = tuple(tuple(str(v) for v in e) for e in self.entries)
        for e in entries:
            if len(e) != 3:
                raise DataError(f"vocabulary entry {e!r} must be (course_id, display_name, subject)")
            if not e[2]:
                raise DataError(f"course {e[0]!r} has an empty subject")
        index = {e[0]: j for j, e in enumerate(entries)}
        if len(index) != len(entries):
            raise DataError("duplicate course_id in vocabulary")
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "index", index)

    def __len__(self):
        return len(self.entries)

    @property
    def course_ids(self):
        return [e[0] for e in self.entries]

    @property
    def subjects(self):
        return [e[2] for e in self.entries]

    def fingerprint(self):
        """Stable hex digest of the ordered entries."""
        blob = json.dumps([list(e) for e in self.entries], separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    @classmethod
    def generic(cls, m, subjects=None):
        """Vocabulary ``c0..c{m-1}``; ``subjects`` defaults to a single "GEN"."""
        if subjects is None:
            subjects = ["GEN"] * m
        return cls(tuple((f"c{j}", f"c{j}", subjects[j]) for j in range(m)))


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Cohort:
    """Binary enrollment tensor ``data[student, timestep, course]``."""

    vocab: CourseVocabulary
    data: np.ndarray
    student_ids: tuple

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise DataError(f"cohort data must be 3-d (N, T, M), got shape {data.shape}")
        if data.size and not np.all((data == 0) | (data == 1)):
            raise DataError("cohort entries must be 0 or 1")
        ids = tuple(str(s) for s in self.student_ids)
        if len(ids) != data.shape[0]:
            raise DataError("student_ids length does not match data")
        if len(set(ids)) != len(ids):
            raise DataError("duplicate student ids")
        if data.shape[2] != len(self.vocab):
            raise DataError(f"data has {data.shape[2]} courses, vocabulary has {len(self.vocab)}")
        object.__setattr__(self, "data", _frozen(data, np.int8))
        object.__setattr__(self, "student_ids", ids)

    @property
    def n_students(self):
        return self.data.shape[0]

    @property
    def n_timesteps(self):
        return self.data.shape[1]

    @property
    def n_courses(self):
        return self.data.shape[2]

    def subset(self, rows):
        rows = np.asarray(rows, dtype=int)
        return Cohort(self.vocab, self.data[rows], [self.student_ids[i] for i in rows])

    def flat(self):
        """(N, T*M) view with timestep-major column order."""
        return self.data.reshape(self.n_students, -1)


@dataclass(frozen=True)
class RelaxedCohort:
    """Real-valued cohort; the -1/+1 image of a binary one."""

    vocab: CourseVocabulary
    data: np.ndarray
    student_ids: tuple

    def __post_init__(self):
        object.__setattr__(self, "data", _frozen(self.data, float))
        object.__setattr__(self, "student_ids", tuple(self.student_ids))

    def to_binary(self):
        return Cohort(self.vocab, (self.data > 0).astype(np.int8), self.student_ids)


def _open_text(source):
    if isinstance(source, (str, os.PathLike)):
        return open(source, "r", encoding="utf-8", newline="")
    if isinstance(source, io.TextIOBase):
        return source
    return io.TextIOWrapper(source, encoding="utf-8", newline="")


def load_transcripts_csv(source, timestep_count=DEFAULT_TIMESTEPS):
    """Read a long-format transcript CSV into a :class:`Cohort`.

    The header must be ``student_id,timestep,course_id,subject``.  Students
    and courses are indexed in order of first appearance; repeated
    (student, timestep, course) rows collapse to a single enrollment.

    Parameters
    ----------
    source : path, binary stream or text stream
    timestep_count : int
        Number of timesteps ``T``; timestep values must lie in ``0..T-1``.
    """
    if timestep_count < 1:
        raise DataError("timestep_count must be >= 1")
    fh = _open_text(source)
    try:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file") from None
        except UnicodeDecodeError as exc:
            raise ParseError(f"not valid UTF-8: {exc}", line=1) from None
        header = [h.strip() for h in header]
        if header and header[0].startswith("﻿"):
            header[0] = header[0][1:]
        if tuple(header) != CSV_HEADER:
            raise ParseError(f"expected header {','.join(CSV_HEADER)}, got {','.join(header)}", line=1)

        students = {}
        courses = {}
        cells = set()
        try:
            for row in reader:
                line = reader.line_num
                if not row or all(not v.strip() for v in row):
                    continue
                if len(row) != 4:
                    raise ParseError(f"expected 4 fields, got {len(row)}", line=line)
                sid, ts, cid, subject = (v.strip() for v in row)
                try:
                    t = int(ts)
                except ValueError:
                    raise ParseError(f"timestep {ts!r} is not an integer", line=line) from None
                if not 0 <= t < timestep_count:
                    raise ParseError(f"timestep {t} outside 0..{timestep_count - 1}", line=line)
                if not sid or not cid:
                    raise ParseError("empty student_id or course_id", line=line)
                if not subject:
                    raise ParseError(f"course {cid!r} has an empty subject", line=line)
                if cid in courses:
                    if courses[cid] != subject:
                        raise ParseError(
                            f"course {cid!r} listed under subjects {courses[cid]!r} and {subject!r}",
                            line=line,
                        )
                else:
                    courses[cid] = subject
                students.setdefault(sid, len(students))
                cells.add((students[sid], t, cid))
        except UnicodeDecodeError as exc:
            raise ParseError(f"not valid UTF-8: {exc}", line=reader.line_num + 1) from None
    finally:
        if isinstance(source, (str, os.PathLike)):
            fh.close()
        elif not isinstance(source, io.TextIOBase):
            fh.detach()

    if not cells:
        raise ParseError("file contains no enrollment rows")
    vocab = CourseVocabulary(tuple((cid, cid, subj) for cid, subj in courses.items()))
    data = np.zeros((len(students), timestep_count, len(vocab)), dtype=np.int8)
    for s, t, cid in cells:
        data[s, t, vocab.index[cid]] = 1
    return Cohort(vocab, data, list(students))


def write_transcripts_csv(cohort, dest):
    """Write ``cohort`` in the long format read by :func:`load_transcripts_csv`.

    Rows are ordered by student, timestep, then course column, so the
    output is deterministic.  Students with no enrollments produce no rows.
    """
    own = isinstance(dest, (str, os.PathLike))
    fh = open(dest, "w", encoding="utf-8", newline="") if own else dest
    try:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        ids = cohort.vocab.course_ids
        subjects = cohort.vocab.subjects
        for i, s, t, j in _enrolled_cells(cohort):
            writer.writerow((cohort.student_ids[i], t, ids[j], subjects[j]))
    finally:
        if own:
            fh.close()


def _enrolled_cells(cohort):
    idx = np.argwhere(cohort.data == 1)
    for i, t, j in idx:
        yield int(i), cohort.student_ids[i], int(t), int(j)


def filter_cohort(c, min_total_courses=0, min_per_timestep=0):
    """Keep students with enough enrollments overall and at every timestep."""
    if min_total_courses < 0 or min_per_timestep < 0:
        raise DataError("thresholds must be >= 0")
    per_t = c.data.sum(axis=2)
    keep = (per_t.sum(axis=1) >= min_total_courses) & np.all(per_t >= min_per_timestep, axis=1)
    return c.subset(np.flatnonzero(keep))


def split_cohort(c, holdout_fraction, seed):
    """Split students into (train, holdout) by a seeded permutation.

    The holdout size is ``floor(N * fraction + 0.5)`` (round half up),
    clipped to ``1..N-1`` so both parts are non-empty.  Students keep their
    original relative order inside each part.
    """
    if not 0.0 < holdout_fraction < 1.0:
        raise DataError("holdout_fraction must lie strictly between 0 and 1")
    n = c.n_students
    if n < 2:
        raise DataError("need at least 2 students to split")
    n_hold = int(np.floor(n * holdout_fraction + 0.5))
    n_hold = min(max(n_hold, 1), n - 1)
    perm = as_generator(seed).permutation(n)
    hold = np.sort(perm[:n_hold])
    train = np.sort(perm[n_hold:])
    return c.subset(train), c.subset(hold)


def shift_to_pm1(c):
    """Map enrollments {0, 1} to {-1, +1}."""
    return RelaxedCohort(c.vocab, 2.0 * c.data - 1.0, c.student_ids)


def synth_generate(params, n, seed, vocab=None):
    """Sample a synthetic cohort from a contextual mixture model.

    Thin wrapper over :func:`enrollmix.cmm.sample_students`, which holds
    the generative process.
    """
    from .cmm import sample_students

    return sample_students(params, n, seed, vocab=vocab)


@dataclass(frozen=True)
class CohortSummary:
    """Descriptive statistics of a cohort.

    ``per_timestep_subject_counts[t][subject]`` counts enrollments.
    ``totals_histogram`` has integer ``bins`` spanning the observed range of
    per-student totals with matching ``counts``.  ``normal_fit`` holds the
    sample mean and standard deviation (ddof=1) of those totals.
    """

    per_timestep_subject_counts: list
    totals_histogram: dict
    normal_fit: dict

    def to_json_dict(self):
        return {
            "schema_version": 1,
            "per_timestep_subject_counts": self.per_timestep_subject_counts,
            "totals_histogram": self.totals_histogram,
            "normal_fit": self.normal_fit,
        }


def summarize(c):
    """Per-timestep subject counts and a histogram of per-student totals."""
    subjects = sorted(set(c.vocab.subjects))
    subj_of = np.array([subjects.index(s) for s in c.vocab.subjects], dtype=int)
    per_t_course = c.data.sum(axis=0)  # (T, M)
    counts = []
    for t in range(c.n_timesteps):
        row = np.bincount(subj_of, weights=per_t_course[t], minlength=len(subjects))
        counts.append({s: int(v) for s, v in zip(subjects, row)})

    totals = c.data.sum(axis=(1, 2))
    if totals.size:
        lo, hi = int(totals.min()), int(totals.max())
        bins = list(range(lo, hi + 1))
        hist = np.bincount(totals - lo, minlength=hi - lo + 1)
        mean = float(totals.mean())
        sd = float(totals.std(ddof=1)) if totals.size > 1 else 0.0
    else:
        bins, hist, mean, sd = [], np.zeros(0, dtype=int), float("nan"), float("nan")
    return CohortSummary(
        per_timestep_subject_counts=counts,
        totals_histogram={"bins": bins, "counts": [int(v) for v in hist]},
        normal_fit={"mean": mean, "sd": sd},
    )


def reindex_cohort(c, vocab):
    """Express ``c`` in the column order of ``vocab``.

    Courses of ``vocab`` that ``c`` never saw become all-zero columns.  A
    course unknown to ``vocab``, or listed under a different subject, is a
    :class:`DataError`, since a model cannot score it.
    """
    cols = np.zeros((c.n_students, c.n_timesteps, len(vocab)), dtype=np.int8)
    target_subject = dict(zip(vocab.course_ids, vocab.subjects))
    for j, (cid, subject) in enumerate(zip(c.vocab.course_ids, c.vocab.subjects)):
        if cid not in vocab.index:
            raise DataError(f"course {cid!r} is not in the model vocabulary")
        if target_subject[cid] != subject:
            raise DataError(f"course {cid!r} has subject {subject!r}, model has {target_subject[cid]!r}")
        cols[:, :, vocab.index[cid]] = c.data[:, :, j]
    return Cohort(vocab, cols, c.student_ids)
