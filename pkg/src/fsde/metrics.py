"""Discrepancy estimators between sample sets and discrete laws."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .engine import MomentSeries


class EstimatorError(ValueError):
    pass


@dataclass(frozen=True)
class DiscreteDist:
    atoms: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        a = np.asarray(self.atoms)
        if w.shape[0] != a.shape[0]:
            raise EstimatorError("atoms and weights differ in length")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise EstimatorError("weights must be nonnegative and sum to 1")
        if not np.all(np.isfinite(a)):
            raise EstimatorError("atoms must be finite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "atoms", a)


@dataclass(frozen=True)
class RateFit:
    kappa1: float
    kappa2: float
    ci: float
    r_squared: float
    window: tuple

    def to_dict(self) -> dict:
        return asdict(self)


def _resample(x: np.ndarray, n: int) -> np.ndarray:
    # quantile matching onto n equally weighted order statistics
    q = (np.arange(n) + 0.5) / n
    return np.quantile(np.sort(x), q, method="linear")


def w2_1d(samples_a, samples_b) -> float:
    """Empirical W2 on the line (sorted pairing).

    Unequal sample counts are brought to the smaller count by quantile
    interpolation.
    """
    a = np.asarray(samples_a, dtype=float).ravel()
    b = np.asarray(samples_b, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise EstimatorError("empty sample set")
    if a.size != b.size:
        n = min(a.size, b.size)
        a = _resample(a, n) if a.size != n else a
        b = _resample(b, n) if b.size != n else b
    diff = np.sort(a) - np.sort(b)
    return float(math.sqrt(np.mean(diff * diff)))


def segment_cost_matrix(ens_a: np.ndarray, ens_b: np.ndarray) -> np.ndarray:
    """Squared sup-norm distances between two stacks of segments (n, m+1, d)."""
    a = np.asarray(ens_a, dtype=float)
    b = np.asarray(ens_b, dtype=float)
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    diff = a[:, None, :, :] - b[None, :, :, :]
    return np.max(np.sum(diff * diff, axis=3), axis=2)


def w2_supnorm_assignment(ens_a, ens_b, max_n: int = 512) -> float:
    """Exact empirical W2 on path space via optimal assignment."""
    a = np.asarray(ens_a, dtype=float)
    b = np.asarray(ens_b, dtype=float)
    if a.shape != b.shape:
        raise EstimatorError("ensembles must have equal size and discretisation")
    n = a.shape[0]
    if n == 0:
        raise EstimatorError("empty ensemble")
    if n > max_n:
        raise EstimatorError(f"ensemble size {n} exceeds {max_n}; use the coupling bound")
    cost = segment_cost_matrix(a, b)
    rows, cols = linear_sum_assignment(cost)
    return float(math.sqrt(cost[rows, cols].sum() / n))


def fd_bins(pooled: np.ndarray, lo: int = 16, hi: int = 256) -> int:
    q75, q25 = np.percentile(pooled, [75, 25])
    iqr = q75 - q25
    span = pooled.max() - pooled.min()
    if iqr <= 0 or span <= 0:
        return lo
    width = 2.0 * iqr / len(pooled) ** (1.0 / 3.0)
    return int(np.clip(math.ceil(span / width), lo, hi))


def histograms(samples_a, samples_b, n_bins: int | None = None, value_range=None):
    """Common-bin histograms ``(p, q, edges)``.

    Bins span the pooled range unless ``value_range`` is given, in which case
    samples outside it are clipped into the edge bins.
    """
    a = np.asarray(samples_a, dtype=float).ravel()
    b = np.asarray(samples_b, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise EstimatorError("empty sample set")
    pooled = np.concatenate([a, b])
    if n_bins is None:
        n_bins = fd_bins(pooled)
    if n_bins < 2:
        raise EstimatorError("need at least two bins")
    if value_range is None:
        lo, hi = float(pooled.min()), float(pooled.max())
    else:
        lo, hi = map(float, value_range)
        a = np.clip(a, lo, hi)
        b = np.clip(b, lo, hi)
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, n_bins + 1)
    p = np.histogram(a, edges)[0] / a.size
    q = np.histogram(b, edges)[0] / b.size
    return p, q, edges


def tv_discrete(p, q) -> float:
    return 0.5 * float(np.sum(np.abs(np.asarray(p) - np.asarray(q))))


def kl_discrete(p, q) -> float:
    """``sum p log(p / q)`` with ``0 log 0 = 0``; ``inf`` if ``p`` is not dominated by ``q``."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    pos = p > 0
    if np.any(q[pos] == 0):
        return math.inf
    return float(np.sum(p[pos] * np.log(p[pos] / q[pos])))


def divergence_estimators(samples_a, samples_b, n_bins: int | None = None,
                          value_range=None) -> tuple[float, float]:
    """Histogram plug-in ``(TV, KL(a || b))`` on 1-D samples."""
    p, q, _ = histograms(samples_a, samples_b, n_bins, value_range)
    return tv_discrete(p, q), kl_discrete(p, q)


@dataclass(frozen=True)
class PinskerResult:
    holds: bool
    tv_sq: float
    half_kl: float
    slack: float
    kl_infinite: bool


def pinsker_check(p: DiscreteDist, q: DiscreteDist) -> PinskerResult:
    """Check ``TV(p, q)^2 <= KL(p || q) / 2`` exactly on a common atom set."""
    if p.atoms.shape != q.atoms.shape or not np.array_equal(p.atoms, q.atoms):
        raise EstimatorError("distributions must share their atoms")
    tv = tv_discrete(p.weights, q.weights)
    kl = kl_discrete(p.weights, q.weights)
    half = 0.5 * kl
    return PinskerResult(tv * tv <= half + 1e-15, tv * tv, half, half - tv * tv, math.isinf(kl))


def fit_rate(series: MomentSeries, window: tuple | None = None, r0: float | None = None) -> RateFit:
    """Log-linear least squares ``log E = log kappa1 - kappa2 t``.

    The default window drops the first ``r0 + 1`` time units.  ``ci`` is
    1.96 regression standard errors of the slope.
    """
    t = np.asarray(series.times, dtype=float)
    y = np.asarray(series.estimate, dtype=float)
    if window is None:
        start = (r0 or 0.0) + 1.0
        window = (start, float(t.max()))
    sel = (t >= window[0] - 1e-12) & (t <= window[1] + 1e-12)
    t, y = t[sel], y[sel]
    if t.size < 4:
        raise EstimatorError("rate fit needs at least 4 points in the window")
    if np.any(y <= 0):
        raise EstimatorError("rate fit window contains nonpositive entries")
    ly = np.log(y)
    A = np.column_stack([np.ones_like(t), t])
    coef, *_ = np.linalg.lstsq(A, ly, rcond=None)
    resid = ly - A @ coef
    dof = t.size - 2
    s2 = float(resid @ resid) / dof
    cov = s2 * np.linalg.inv(A.T @ A)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - float(resid @ resid) / ss_tot if ss_tot > 0 else 1.0
    return RateFit(
        kappa1=float(math.exp(coef[0])),
        kappa2=float(-coef[1]),
        ci=float(1.96 * math.sqrt(cov[1, 1])),
        r_squared=r2,
        window=(float(window[0]), float(window[1])),
    )
