"""Monte Carlo estimators, log-log fits and simulation-vs-limit comparison.

All acceptance comparisons use bands of ``K_SE`` standard errors.  Replica
means are accumulated with :func:`math.fsum`, which is exactly rounded and
therefore independent of replica order.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .errors import NonPositiveCovariance, PairMismatch, TooFewReplicas

__all__ = [
    "K_SE",
    "EstimatorResult",
    "FitResult",
    "CovarianceEstimate",
    "replica_mean",
    "fit_loglog",
    "covariance_matrix_estimate",
    "lag_moments",
    "decorrelation_fit",
    "lln_check",
    "variances_nonincreasing",
    "convergence_report",
    "time_holder_fit",
    "pullback_rate_fit",
    "mann_kendall",
    "gaussianity_diagnostic",
]

K_SE = 4.0
MIN_COV_REPLICAS = 30


@dataclass(frozen=True)
class EstimatorResult:
    mean: float
    stderr: float
    n: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.stderr < 0 or math.isnan(self.stderr):
            raise ValueError(f"stderr must be non-negative, got {self.stderr}")
        if self.n < 1:
            raise ValueError("n must be at least 1")

    def contains(self, value: float, k: float = K_SE) -> bool:
        """``|mean - value| <= k * stderr``."""
        return abs(self.mean - value) <= k * self.stderr

    def __str__(self):
        return f"{self.mean:.6g} ± {self.stderr:.2g} (n={self.n})"


@dataclass(frozen=True)
class FitResult:
    slope: float
    intercept: float
    slope_stderr: float
    r_squared: float
    n: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not math.isnan(self.r_squared) and not -1e-12 <= self.r_squared <= 1 + 1e-12:
            raise ValueError(f"r_squared outside [0, 1]: {self.r_squared}")


def replica_mean(x) -> EstimatorResult:
    """Mean over the leading (replica) axis with its standard error."""
    x = np.asarray(x, dtype=float).ravel()
    n = x.size
    if n == 0:
        raise ValueError("no samples")
    mean = math.fsum(x) / n
    if n == 1:
        return EstimatorResult(mean, 0.0, 1)
    var = math.fsum((x - mean) ** 2) / (n - 1)
    return EstimatorResult(mean, math.sqrt(var / n), n)


def fit_loglog(x, y, base: float = math.e) -> FitResult:
    """Least-squares line through ``(log x, log y)``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    lx, ly = np.log(x) / math.log(base), np.log(y) / math.log(base)
    if x.size < 2:
        raise ValueError("need at least two points to fit")
    if x.size == 2:
        slope = (ly[1] - ly[0]) / (lx[1] - lx[0])
        return FitResult(slope, ly[0] - slope * lx[0], math.nan, 1.0, 2)
    res = stats.linregress(lx, ly)
    return FitResult(float(res.slope), float(res.intercept), float(res.stderr),
                     float(min(res.rvalue**2, 1.0)), int(x.size))


# ---------------------------------------------------------------------------
# covariance matrices


@dataclass(frozen=True)
class CovarianceEstimate:
    """Entrywise sample covariance with jackknife standard errors."""

    mean: np.ndarray
    stderr: np.ndarray
    n: int

    def entry(self, i: int, j: int) -> EstimatorResult:
        return EstimatorResult(float(self.mean[i, j]), float(self.stderr[i, j]), self.n)

    def __len__(self):
        return self.mean.shape[0]


def covariance_matrix_estimate(samples) -> CovarianceEstimate:
    """Sample covariance of ``samples`` (replica x component).

    Standard errors are delete-one jackknife, computed in closed form.
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n, m = x.shape
    if n < MIN_COV_REPLICAS:
        raise TooFewReplicas(f"{n} replicas, need at least {MIN_COV_REPLICAS}")
    # covariance is shift invariant; shifting by the first row makes constant columns exactly zero
    x = x - x[0]
    s1 = x.sum(axis=0)
    s2 = x.T @ x
    cov = (s2 - np.outer(s1, s1) / n) / (n - 1)
    # leave-one-out: remove replica k
    nl = n - 1
    loo_mean = (s1[None, :] - x) / nl
    loo = (s2[None, :, :] - x[:, :, None] * x[:, None, :]
           - nl * loo_mean[:, :, None] * loo_mean[:, None, :]) / (nl - 1)
    centre = loo.mean(axis=0)
    se = np.sqrt((n - 1) / n * ((loo - centre) ** 2).sum(axis=0))
    return CovarianceEstimate(cov, se, n)


# ---------------------------------------------------------------------------
# spatial decorrelation


def lag_moments(values, offsets: Sequence[int], dimension: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-replica spatial means of ``u`` and of ``u(x) u(x + l e_i)``.

    ``values`` has shape ``(replicas, n, ..., n)``; products are averaged over
    sites and over the ``dimension`` coordinate directions.  Returns
    ``(means (R,), products (R, len(offsets)))``.
    """
    v = np.asarray(values, dtype=float)
    axes = tuple(range(-dimension, 0))
    means = v.reshape(v.shape[0], -1).mean(axis=1)
    prods = np.empty((v.shape[0], len(offsets)))
    for j, off in enumerate(offsets):
        acc = 0.0
        for ax in axes:
            acc = acc + (v * np.roll(v, -int(off), axis=ax)).reshape(v.shape[0], -1).mean(axis=1)
        prods[:, j] = acc / dimension
    return means, prods


def _jackknife_cov_from_moments(means: np.ndarray, prods: np.ndarray):
    """cov(lag) = E[u(x)u(x+l)] - (E u)^2 with jackknife errors over replicas."""
    r = means.shape[0]
    m = means.sum() / r
    p = prods.sum(axis=0) / r
    est = p - m * m
    loo_m = (m * r - means) / (r - 1)
    loo_p = (p[None, :] * r - prods) / (r - 1)
    loo = loo_p - loo_m[:, None] ** 2
    se = np.sqrt((r - 1) / r * ((loo - loo.mean(axis=0)) ** 2).sum(axis=0))
    return est, se


def decorrelation_fit(fields, lags: Sequence[float], kappa: float, spacing: float | None = None,
                      snr: float = 2.0) -> FitResult:
    """Fit ``log cov(u(t,x), u(t,0))`` against ``log |x|``.

    ``fields`` is either a sequence of :class:`~ewlimit.solver.FieldState`
    (one per replica, same time) or a pair ``(means, products)`` from
    :func:`lag_moments`.  Lags whose covariance is within ``snr`` standard
    errors of zero are excluded from the fit.  ``meta`` carries the
    estimates, the exclusions and the one-sided check
    ``cov <= C |x|^(2 - kappa)`` with ``C`` calibrated at the smallest lag.
    """
    lags = np.asarray(lags, dtype=float)
    if isinstance(fields, tuple) and len(fields) == 2:
        means, prods = (np.asarray(a, dtype=float) for a in fields)
    else:
        fields = list(fields)
        grid = fields[0].grid
        spacing = grid.h
        offsets = np.rint(lags / spacing).astype(int)
        if not np.allclose(offsets * spacing, lags):
            raise ValueError("lags must be multiples of the grid spacing")
        if np.any(lags <= 0) or np.any(lags > grid.side_length / 4 + 1e-12):
            raise ValueError("lags must lie in (0, L/4]")
        means, prods = lag_moments(np.stack([f.values for f in fields]), offsets, grid.dimension)
    est, se = _jackknife_cov_from_moments(means, prods)
    keep = est > snr * se
    excluded = [float(l) for l, k in zip(lags, keep) if not k]
    meta = {
        "lags": lags.tolist(),
        "cov": est.tolist(),
        "cov_se": se.tolist(),
        "excluded": excluded,
        "replicas": int(means.shape[0]),
    }
    if excluded:
        warnings.warn(f"non-positive covariance at lags {excluded}", NonPositiveCovariance)
    if keep.sum() < 2:
        meta["status"] = "NonPositiveCovariance"
        meta["bound_holds"] = False
        return FitResult(math.nan, math.nan, math.nan, math.nan, int(keep.sum()), meta)
    fit = fit_loglog(lags[keep], est[keep])
    i0 = int(np.argmin(lags))
    c_hat = est[i0] * lags[i0] ** (kappa - 2.0)
    bound = c_hat * lags ** (2.0 - kappa)
    meta["bound_constant"] = float(c_hat)
    meta["bound_holds"] = bool(np.all(est <= bound + K_SE * se))
    meta["status"] = "ok"
    return FitResult(fit.slope, fit.intercept, fit.slope_stderr, fit.r_squared, fit.n, meta)


# ---------------------------------------------------------------------------
# law of large numbers


def _second_moment(samples: np.ndarray, centre: float) -> EstimatorResult:
    # per-replica mean square deviation; extra axes are translates of the test function
    per_rep = ((samples - centre) ** 2).reshape(samples.shape[0], -1).mean(axis=1)
    return replica_mean(per_rep)


def lln_check(samples: Mapping[float, np.ndarray], integral: float | Mapping[float, float]) -> dict:
    """Deviation of ``int u_eps g`` from ``int g`` for each ``eps``.

    ``samples[eps]`` has shape ``(replicas,)`` or ``(replicas, translates)``.
    Returns ``{eps: EstimatorResult}`` for the mean deviation; each result's
    ``meta`` holds the sample variance of the pairing and its standard error
    (variance about the known mean ``int g``).
    """
    out = {}
    for eps in sorted(samples, reverse=True):
        s = np.asarray(samples[eps], dtype=float)
        if s.shape[0] < 2:
            raise TooFewReplicas("need at least two replicas")
        ref = integral[eps] if isinstance(integral, Mapping) else integral
        per_rep = s.reshape(s.shape[0], -1).mean(axis=1) - ref
        dev = replica_mean(per_rep)
        var = _second_moment(s, ref)
        out[eps] = EstimatorResult(dev.mean, dev.stderr, dev.n,
                                   {"variance": var.mean, "variance_se": var.stderr})
    return out


def variances_nonincreasing(check: Mapping[float, EstimatorResult], slack: float = 1.0) -> bool:
    """Variance sequence over decreasing ``eps`` never rises by more than ``slack`` SE."""
    eps = sorted(check, reverse=True)
    for a, b in zip(eps, eps[1:]):
        va, vb = check[a].meta, check[b].meta
        joint = math.hypot(va["variance_se"], vb["variance_se"])
        if vb["variance"] > va["variance"] + slack * joint:
            return False
    return True


# ---------------------------------------------------------------------------
# covariance convergence


def convergence_report(mc: Mapping[float, CovarianceEstimate], limit, slack: float = 1.0) -> dict:
    """Per-entry discrepancy ``|mc - Sigma|`` for each ``eps`` and its trend.

    ``limit`` is a :class:`~ewlimit.limit_model.LimitCovariance`.  Returns a
    dict with ``rows`` (epsilon, i, j, mc, mc_se, limit, discrepancy) and
    ``decreasing[(i, j)]``, true when the discrepancy does not grow from one
    ``eps`` to the next smaller one by more than ``slack`` standard errors.
    """
    sigma = np.asarray(limit.entries)
    rows = []
    disc = {}
    for eps in sorted(mc, reverse=True):
        est = mc[eps]
        if est.mean.shape != sigma.shape:
            raise PairMismatch(f"MC matrix {est.mean.shape} vs limit {sigma.shape}")
        for i in range(sigma.shape[0]):
            for j in range(i, sigma.shape[1]):
                d = abs(est.mean[i, j] - sigma[i, j])
                rows.append((eps, i, j, float(est.mean[i, j]), float(est.stderr[i, j]),
                             float(sigma[i, j]), float(d)))
                disc.setdefault((i, j), []).append((d, float(est.stderr[i, j])))
    decreasing = {}
    for key, seq in disc.items():
        ok = True
        for (d0, _), (d1, s1) in zip(seq, seq[1:]):
            if d1 > d0 + slack * s1:
                ok = False
        decreasing[key] = ok
    return {"rows": rows, "decreasing": decreasing}


# ---------------------------------------------------------------------------
# Hölder-type scaling fits


def time_holder_fit(snapshots, times, max_gap: float | None = None) -> FitResult:
    """Fit ``log ||X_t - X_r||_2`` against ``log |t - r|``.

    ``snapshots`` has shape ``(replicas, len(times))`` on a uniform time grid.
    Increments with the same gap are pooled.  The slope is the temporal
    exponent estimate.
    """
    x = np.asarray(snapshots, dtype=float)
    times = np.asarray(times, dtype=float)
    if x.ndim != 2 or x.shape[1] != times.size:
        raise ValueError("snapshots must be (replicas, times)")
    if times.size < 8:
        raise ValueError("need at least 8 time points")
    steps = np.diff(times)
    if not np.allclose(steps, steps[0]):
        raise ValueError("time grid must be uniform")
    gaps, norms = [], []
    for k in range(1, times.size):
        gap = k * steps[0]
        if max_gap is not None and gap > max_gap + 1e-12:
            break
        inc = x[:, k:] - x[:, :-k]
        gaps.append(gap)
        norms.append(math.sqrt(np.mean(inc**2)))
    fit = fit_loglog(gaps, norms)
    meta = {"gaps": gaps, "norms": norms}
    return FitResult(fit.slope, fit.intercept, fit.slope_stderr, fit.r_squared, fit.n, meta)


def pullback_rate_fit(discrepancies, K_values: Sequence[float], t: float) -> FitResult:
    """Fit ``log ||u^(K') - u^(K)||_2`` against ``log(1 + t + min(K, K'))``.

    ``discrepancies`` has shape ``(replicas, len(K_values) - 1)``: entry ``j``
    is the per-replica mean square difference between consecutive runs
    ``K_values[j]`` and ``K_values[j + 1]``.  When every discrepancy is
    exactly zero the fit is skipped and reported as exact.
    """
    d = np.asarray(discrepancies, dtype=float)
    K = np.asarray(K_values, dtype=float)
    if d.ndim == 1:
        d = d[None, :]
    if d.shape[1] != K.size - 1:
        raise ValueError("need one discrepancy column per consecutive pair of K values")
    if not np.any(d):
        return FitResult(math.nan, math.nan, math.nan, math.nan, 0, {"status": "exact"})
    rms = np.sqrt(d.mean(axis=0))
    x = 1.0 + t + np.minimum(K[:-1], K[1:])
    fit = fit_loglog(x, rms)
    meta = {"x": x.tolist(), "rms": rms.tolist(), "status": "ok"}
    return FitResult(fit.slope, fit.intercept, fit.slope_stderr, fit.r_squared, fit.n, meta)


def mann_kendall(series) -> tuple[float, float]:
    """Kendall tau of ``series`` against its index, with two-sided p-value."""
    s = np.asarray(series, dtype=float)
    res = stats.kendalltau(np.arange(s.size), s)
    return float(res.statistic), float(res.pvalue)


def gaussianity_diagnostic(samples) -> list[dict]:
    """Per-column skewness, excess kurtosis and D'Agostino-Pearson p-value.

    Informational only: no finite-``eps`` rate is available for the
    marginals, so these numbers never enter a pass/fail decision.
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    out = []
    for col in x.T:
        row = {"skew": math.nan, "excess_kurtosis": math.nan, "normaltest_p": math.nan, "n": int(col.size)}
        if np.ptp(col) > 0:
            row["skew"], row["excess_kurtosis"] = float(stats.skew(col)), float(stats.kurtosis(col))
            if col.size >= 20:
                row["normaltest_p"] = float(stats.normaltest(col).pvalue)
        out.append(row)
    return out
