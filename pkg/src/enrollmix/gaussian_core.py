"""Multivariate normal numerics and binary-pattern (orthant) probabilities.

A binary enrollment vector ``x`` is read as the sign pattern of a latent
Gaussian vector: ``x_j = 1`` iff ``xbar_j > 0``.  The probability of a
pattern is therefore an orthant probability of the Gaussian.  This module
provides the Monte-Carlo estimator used throughout the package, a smoothed
variant of its reward used for gradient-based learning, and a quadrature
oracle for small dimensions.
"""

from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.special import log_ndtr, ndtr, ndtri

from ._random import as_generator
from .errors import DataError, NumericalError

DEFAULT_EPSILON = 1e-4
LOG_2PI = np.log(2.0 * np.pi)

# Monte-Carlo work is done in blocks of this many outer samples so memory
# stays bounded for large k_mc.  Changing it changes the random stream.
_CHUNK = 1 << 15


def std_normal_cdf(x):
    """Standard normal CDF, accurate to ~1e-16 absolute (Cephes ``ndtr``)."""
    return ndtr(x)


def std_normal_logcdf(x):
    return log_ndtr(x)


def _readonly(a):
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class MvnParams:
    """Mean and covariance of a multivariate normal distribution.

    The arrays are copied and frozen on construction.  Symmetry is checked
    here; positive-definiteness is checked lazily by the routines that
    factorize the covariance.
    """

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = _readonly(self.mean)
        cov = _readonly(self.cov)
        if mean.ndim != 1:
            raise DataError(f"mean must be a vector, got shape {mean.shape}")
        m = mean.shape[0]
        if cov.shape != (m, m):
            raise DataError(f"cov shape {cov.shape} does not match mean length {m}")
        if not np.all(np.isfinite(cov)) or not np.all(np.isfinite(mean)):
            raise DataError("non-finite mean or covariance")
        scale = max(1.0, float(np.max(np.abs(cov)))) if m else 1.0
        if not np.allclose(cov, cov.T, rtol=0.0, atol=1e-10 * scale):
            raise DataError("covariance is not symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self):
        return self.mean.shape[0]

    def cholesky(self):
        """Lower Cholesky factor of ``cov``; raises NumericalError if not PD."""
        try:
            return np.linalg.cholesky(self.cov)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("covariance is not positive definite") from exc


@dataclass(frozen=True)
class BinaryPattern:
    """A 0/1 vector queried against a Gaussian of the same length.

    ``positive`` holds the indices constrained above zero (enrolled) and
    ``negative`` those constrained below zero.
    """

    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 1:
            raise DataError("pattern must be a 1-d vector")
        if bits.size and not np.all((bits == 0) | (bits == 1)):
            raise DataError("pattern entries must be 0 or 1")
        bits = bits.astype(np.int8)
        bits.flags.writeable = False
        object.__setattr__(self, "bits", bits)

    def __len__(self):
        return self.bits.shape[0]

    @property
    def positive(self):
        return np.flatnonzero(self.bits == 1)

    @property
    def negative(self):
        return np.flatnonzero(self.bits == 0)


@dataclass(frozen=True)
class ProbEstimate:
    """Monte-Carlo probability estimate with its standard error."""

    value: float
    std_error: float
    sample_count: int

    def interval(self, z=3.0):
        """Return ``value +- z*std_error`` clamped to [0, 1]."""
        lo = max(0.0, self.value - z * self.std_error)
        hi = min(1.0, self.value + z * self.std_error)
        return lo, hi


def _as_pattern(pattern, m):
    if not isinstance(pattern, BinaryPattern):
        pattern = BinaryPattern(np.asarray(pattern))
    if len(pattern) != m:
        raise DataError(f"pattern length {len(pattern)} does not match dimension {m}")
    return pattern


def regularize_cov(cov, epsilon=DEFAULT_EPSILON):
    """Symmetrize ``cov`` and add ``epsilon`` to its diagonal."""
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise DataError(f"expected a square matrix, got shape {cov.shape}")
    sym = 0.5 * (cov + cov.T)
    return sym + epsilon * np.eye(cov.shape[0])


def logpdf(x, p):
    """Log-density of ``N(p.mean, p.cov)`` at ``x``.

    Parameters
    ----------
    x : array_like, shape (m,) or (n, m)
    p : MvnParams

    Returns
    -------
    float or ndarray of shape (n,)
    """
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != p.dim:
        raise DataError(f"point dimension {x.shape[-1]} does not match {p.dim}")
    chol = p.cholesky()
    diff = (x - p.mean).reshape(-1, p.dim)
    z = linalg.solve_triangular(chol, diff.T, lower=True)
    maha = np.sum(z * z, axis=0)
    out = -0.5 * (p.dim * LOG_2PI + maha) - np.sum(np.log(np.diag(chol)))
    return float(out[0]) if x.ndim == 1 else out


def _sampling_factor(cov):
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        # PSD but singular: fall back to a symmetric square root
        w, v = np.linalg.eigh(0.5 * (cov + cov.T))
        if w.min() < -1e-10 * max(1.0, abs(w).max()):
            raise NumericalError("covariance is not positive semi-definite")
        return v * np.sqrt(np.clip(w, 0.0, None))


def sample_mvn(p, n, seed):
    """Draw ``n`` samples from ``p``; returns an (n, m) array.

    ``seed`` is an int or a ``numpy.random.Generator``.
    """
    rng = as_generator(seed)
    factor = _sampling_factor(p.cov)
    z = rng.standard_normal((n, p.dim))
    return p.mean + z @ factor.T


def _check_index(idx, m):
    idx = np.asarray(idx, dtype=int).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= m):
        raise DataError(f"index out of range for dimension {m}")
    if np.unique(idx).size != idx.size:
        raise DataError("duplicate indices")
    return idx


def marginal(p, idx):
    """Marginal distribution of the coordinates ``idx`` (in the given order)."""
    idx = _check_index(idx, p.dim)
    return MvnParams(p.mean[idx], p.cov[np.ix_(idx, idx)])


@dataclass(frozen=True)
class ConditionalMap:
    """Affine description of ``x_rest | x_obs = y``.

    ``mean(y) = rest_mean + gain @ (y - obs_mean)`` and the covariance
    ``cov`` does not depend on ``y``.
    """

    obs_idx: np.ndarray
    rest_idx: np.ndarray
    obs_mean: np.ndarray
    rest_mean: np.ndarray
    gain: np.ndarray
    cov: np.ndarray

    def mean(self, y):
        y = np.asarray(y, dtype=float)
        return self.rest_mean + (y - self.obs_mean) @ self.gain.T


def conditional_map(p, obs_idx):
    """Build the :class:`ConditionalMap` for conditioning on ``obs_idx``."""
    obs_idx = _check_index(obs_idx, p.dim)
    rest_idx = np.setdiff1d(np.arange(p.dim), obs_idx)
    s_rr = p.cov[np.ix_(rest_idx, rest_idx)]
    if obs_idx.size == 0:
        gain = np.zeros((rest_idx.size, 0))
        cov = s_rr.copy()
    else:
        s_oo = p.cov[np.ix_(obs_idx, obs_idx)]
        s_or = p.cov[np.ix_(obs_idx, rest_idx)]
        try:
            factor = linalg.cho_factor(s_oo, lower=True)
        except linalg.LinAlgError as exc:
            raise NumericalError("observed block of covariance is singular") from exc
        gain = linalg.cho_solve(factor, s_or).T
        cov = s_rr - gain @ s_or
        cov = 0.5 * (cov + cov.T)
    return ConditionalMap(
        obs_idx=obs_idx,
        rest_idx=rest_idx,
        obs_mean=p.mean[obs_idx],
        rest_mean=p.mean[rest_idx],
        gain=gain,
        cov=cov,
    )


def condition(p, observed_idx, observed_vals=None):
    """Condition ``p`` on ``x[observed_idx] = observed_vals``.

    Returns the distribution of the remaining coordinates in increasing
    index order.  With ``observed_vals`` omitted the marginal of the
    observed coordinates is returned instead.
    """
    if observed_vals is None:
        return marginal(p, observed_idx)
    observed_vals = np.asarray(observed_vals, dtype=float).reshape(-1)
    observed_idx = np.asarray(observed_idx, dtype=int).reshape(-1)
    if observed_idx.size != observed_vals.size:
        raise DataError("observed_idx and observed_vals differ in length")
    if observed_idx.size >= p.dim:
        raise DataError("at least one coordinate must remain unobserved")
    cmap = conditional_map(p, observed_idx)
    return MvnParams(cmap.mean(observed_vals), cmap.cov)


def _standard_error(weights):
    k = weights.shape[0]
    if k < 2:
        # conservative bound for a [0, 1]-valued single draw
        return 0.5
    return float(np.std(weights, ddof=1) / np.sqrt(k))


def _tail_sigma(cmap):
    var = np.diag(cmap.cov)
    if np.any(var <= 0.0):
        raise NumericalError("conditional variance is not positive")
    return np.sqrt(var)


def orthant_prob_mc(p, pattern, k_mc, seed, tail_mode="nested_mc", inner_samples=32):
    """Monte-Carlo estimate of ``P(xbar_G > 0, xbar_L < 0)``.

    Outer samples ``y`` are drawn from the marginal over the positive
    coordinates ``G``.  Each sample with ``y > 0`` is weighted by an
    estimate of ``P(xbar_L < 0 | xbar_G = y)``:

    * ``"product_cdf"``: product of the univariate conditional CDFs.  Fast,
      exact when ``|L| <= 1``, biased otherwise.
    * ``"nested_mc"``: ``inner_samples`` draws from the exact conditional
      normal (exact CDF when ``|L| <= 1``).  Consistent.

    With ``G`` empty there is nothing to sample over ``G``: ``nested_mc``
    draws ``k_mc`` full vectors and counts those in the negative orthant,
    ``product_cdf`` returns the deterministic product of marginal CDFs.
    With ``L`` empty the estimate is the fraction of ``y > 0``.

    Parameters
    ----------
    p : MvnParams
    pattern : BinaryPattern or array_like of {0, 1}
    k_mc : int
        Number of outer Monte-Carlo samples.
    seed : int or numpy.random.Generator
    tail_mode : {"nested_mc", "product_cdf"}
    inner_samples : int
        Inner sample count per outer sample in ``nested_mc`` mode.

    Returns
    -------
    ProbEstimate
    """
    if k_mc < 1:
        raise ValueError("k_mc must be >= 1")
    if tail_mode not in ("nested_mc", "product_cdf"):
        raise ValueError(f"unknown tail_mode {tail_mode!r}")
    pattern = _as_pattern(pattern, p.dim)
    rng = as_generator(seed)
    pos = pattern.positive
    neg = pattern.negative
    if p.dim == 0:
        return ProbEstimate(1.0, 0.0, k_mc)

    if pos.size == 0:
        sigma = np.sqrt(np.diag(p.cov))
        if neg.size == 1 or tail_mode == "product_cdf":
            if np.any(sigma <= 0.0):
                raise NumericalError("marginal variance is not positive")
            value = float(np.prod(ndtr(-p.mean / sigma)))
            return ProbEstimate(value, 0.0, k_mc)
        weights = np.concatenate([
            np.all(sample_mvn(p, n, rng) < 0.0, axis=1).astype(float)
            for n in _chunks(k_mc)
        ])
        return ProbEstimate(float(weights.mean()), _standard_error(weights), k_mc)

    cmap = conditional_map(p, pos)
    outer = marginal(p, pos)
    outer_factor = _sampling_factor(outer.cov)
    if neg.size:
        sigma = _tail_sigma(cmap)
        inner_factor = _sampling_factor(cmap.cov)
    parts = []
    for n in _chunks(k_mc):
        y = outer.mean + rng.standard_normal((n, pos.size)) @ outer_factor.T
        hit = np.all(y > 0.0, axis=1)
        w = hit.astype(float)
        if neg.size and hit.any():
            mu = cmap.mean(y[hit])
            if neg.size == 1 or tail_mode == "product_cdf":
                w[hit] = np.prod(ndtr(-mu / sigma), axis=1)
            else:
                eps = rng.standard_normal((mu.shape[0], inner_samples, neg.size))
                z = mu[:, None, :] + eps @ inner_factor.T
                w[hit] = np.mean(np.all(z < 0.0, axis=2), axis=1)
        parts.append(w)
    weights = np.concatenate(parts)
    return ProbEstimate(float(weights.mean()), _standard_error(weights), k_mc)


def _chunks(total):
    while total > 0:
        n = min(total, _CHUNK)
        yield n
        total -= n


def smoothed_orthant_reward(y, p, pattern):
    """Smoothed per-sample reward used when learning from binary patterns.

    ``y`` holds values of the positive coordinates (shape ``(|G|,)`` or
    ``(n, |G|)``).  The reward is the product of univariate conditional
    CDFs over the negative coordinates times the fraction of ``y`` that is
    positive.  An empty ``G`` counts as fully satisfied.
    """
    pattern = _as_pattern(pattern, p.dim)
    y = np.asarray(y, dtype=float)
    pos = pattern.positive
    if y.shape[-1] != pos.size:
        raise DataError(f"y has {y.shape[-1]} coordinates, pattern has {pos.size} positives")
    cmap = conditional_map(p, pos)
    soft = np.mean(y > 0.0, axis=-1) if pos.size else np.ones(y.shape[:-1])
    if pattern.negative.size == 0:
        return soft
    sigma = _tail_sigma(cmap)
    mu = cmap.mean(y)
    return np.prod(ndtr(-mu / sigma), axis=-1) * soft


def _gauss_legendre_unit(n):
    """Nodes/weights on (0, 1) after a periodizing sine transform.

    The transform flattens the integrand at both ends, which removes the
    algebraic endpoint singularities of the separated orthant integrand.
    """
    x, w = np.polynomial.legendre.leggauss(n)
    t = 0.5 * (x + 1.0)
    u = t - np.sin(2.0 * np.pi * t) / (2.0 * np.pi)
    return u, 0.5 * w * (1.0 - np.cos(2.0 * np.pi * t))


_MAX_NODES = {2: 4096, 3: 1024, 4: 128}


def _orthant_quadrature(shift, chol, n):
    m = shift.shape[0]
    u, w = _gauss_legendre_unit(n)
    grids = np.meshgrid(*([u] * (m - 1)), indexing="ij")
    weights = np.ones(grids[0].shape)
    for g in np.meshgrid(*([w] * (m - 1)), indexing="ij"):
        weights = weights * g
    us = [g.ravel() for g in grids]
    weights = weights.ravel()
    ws = []
    prod = np.ones_like(weights)
    for i in range(m):
        acc = -shift[i] - sum(chol[i, j] * ws[j] for j in range(i))
        # w_i must exceed acc / chol[i, i]; upper is that tail mass
        upper = np.broadcast_to(ndtr(-acc / chol[i, i]), weights.shape)
        prod = prod * upper
        if i < m - 1:
            ws.append(-ndtri(np.clip(upper * (1.0 - us[i]), 1e-300, 1.0)))
    return float(np.sum(prod * weights))


def orthant_prob_exact_small(p, pattern, tol=1e-7):
    """Orthant probability by tensor-product quadrature, for ``m <= 4``.

    The sign pattern is folded into the distribution so the query becomes
    ``P(z > 0)``.  Writing ``z = a + C w`` with ``C`` the Cholesky factor
    and ``w`` standard normal, the constraints separate coordinate by
    coordinate; the innermost one is a closed-form CDF and the rest are
    integrated with Gauss-Legendre rules on the unit cube.  The node count
    doubles until successive estimates differ by less than ``tol``.
    """
    m = p.dim
    if m > 4:
        raise ValueError("orthant_prob_exact_small supports m <= 4")
    pattern = _as_pattern(pattern, m)
    if m == 0:
        return 1.0
    sign = np.where(pattern.bits == 1, 1.0, -1.0)
    shift = sign * p.mean
    cov = p.cov * np.outer(sign, sign)
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("covariance is not positive definite") from exc
    if m == 1:
        return float(ndtr(shift[0] / chol[0, 0]))
    prev = None
    n = 8
    while n <= _MAX_NODES[m]:
        est = _orthant_quadrature(shift, chol, n)
        if prev is not None and abs(est - prev) < tol:
            return min(1.0, max(0.0, est))
        prev = est
        n *= 2
    raise NumericalError(f"orthant quadrature did not converge (last change {abs(est - prev):.2e})")
