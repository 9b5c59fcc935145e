"""Closed-form constants of the Hölder-drift contraction estimate.

Everything here is a pure function of a :class:`ModelParams` record and a
tuning triple ``(delta, eps, lam)``.  The feasibility search scans tuning
triples for the fastest certified decay rate of
``E ||X_t^xi - X_t^eta||_inf^2``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field

import numpy as np


class DomainError(ValueError):
    """An argument lies outside the set where a formula is defined."""


class PreconditionError(ValueError):
    """A tuning triple violates ``lam > lambda0(delta)``."""


class SearchConfigError(ValueError):
    pass


# Lanczos approximation, g = 7, n = 9.
_LANCZOS_G = 7.0
_LANCZOS_COEF = (
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
)

# lam must exceed lambda0 strictly; this is the enforced relative margin.
LAMBDA_MARGIN = 1e-6


def gamma_fn(x: float) -> float:
    """Gamma function for ``x > 0`` (Lanczos, reflection below 1/2)."""
    x = float(x)
    if not x > 0 or not math.isfinite(x):
        raise DomainError(f"gamma_fn needs a finite positive argument, got {x!r}")
    if x < 0.5:
        # Reflection: Gamma(x) Gamma(1-x) = pi / sin(pi x)
        return math.pi / (math.sin(math.pi * x) * gamma_fn(1.0 - x))
    z = x - 1.0
    acc = _LANCZOS_COEF[0]
    for k in range(1, len(_LANCZOS_COEF)):
        acc += _LANCZOS_COEF[k] / (z + k)
    t = z + _LANCZOS_G + 0.5
    return math.sqrt(2.0 * math.pi) * t ** (z + 0.5) * math.exp(-t) * acc


@dataclass(frozen=True)
class ModelParams:
    """Problem datum of ``dX = -beta X dt + (b(X) + B(X_t)) dt + dW``."""

    beta: float
    kappa: float
    alpha: float
    b_inf: float
    lambda_B: float
    B_inf: float
    r0: float
    d: int = 1

    def __post_init__(self):
        if not self.beta > 0:
            raise DomainError("beta must be positive")
        if not 0 < self.alpha < 1:
            raise DomainError("alpha must lie in (0, 1)")
        if not self.r0 > 0:
            raise DomainError("r0 must be positive")
        if int(self.d) != self.d or self.d < 1:
            raise DomainError("d must be a positive integer")
        for name in ("kappa", "b_inf", "lambda_B", "B_inf"):
            if not getattr(self, name) >= 0:
                raise DomainError(f"{name} must be nonnegative")

    @property
    def drift_free(self) -> bool:
        return self.kappa == 0 and self.b_inf == 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelParams":
        keys = ("beta", "kappa", "alpha", "b_inf", "lambda_B", "B_inf", "r0", "d")
        missing = [k for k in keys if k not in data]
        if missing:
            raise DomainError(f"model is missing fields {missing}")
        return cls(**{k: data[k] for k in keys})


@dataclass(frozen=True)
class TuningParams:
    delta: float
    eps: float
    lam: float
    eps_moment: float | None = None

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise DomainError(f"delta must lie in (0, 1), got {self.delta}")
        if not 0 < self.eps < 1:
            raise DomainError(f"eps must lie in (0, 1), got {self.eps}")
        if not self.lam > 0:
            raise DomainError(f"lambda must be positive, got {self.lam}")


@dataclass(frozen=True)
class ContractionCertificate:
    tuning: TuningParams
    lambda0: float
    upsilon: float
    lambda_big: float
    rate: float
    prefactor: float
    feasible: bool
    kappa2: float
    kappa0: float

    def to_dict(self) -> dict:
        out = asdict(self)
        out["tuning"] = asdict(self.tuning)
        return out


@dataclass(frozen=True)
class MomentCertificate:
    eps: float
    eps_moment: float
    gamma_const: float
    transient_rate: float
    asymptotic_bound: float
    valid: bool


def _check_delta(delta: float) -> None:
    if not 0 < delta < 1:
        raise DomainError(f"delta must lie in (0, 1), got {delta}")


def lambda0(params: ModelParams, delta: float) -> float:
    """Threshold above which the Zvonkin fixed point is a contraction."""
    _check_delta(delta)
    c = (1.0 + delta) / delta * params.b_inf
    return max((c * math.sqrt(math.pi)) ** 2, c)


def upsilon(params: ModelParams, lam: float, delta: float) -> float:
    """Bound on the Hessian of the Zvonkin solution ``u^lambda``."""
    if not lam > 0:
        raise DomainError(f"lambda must be positive, got {lam}")
    _check_delta(delta)
    kappa_tilde = smoothed_holder_constant(params, lam, delta)
    a = params.alpha
    return 2.0 * gamma_fn(a / 2.0) * lam ** (-a / 2.0) * kappa_tilde


def smoothed_holder_constant(params: ModelParams, lam: float, delta: float) -> float:
    """Hölder constant of ``x -> b(x) + grad u(x) b(x)`` (same exponent alpha)."""
    b = params.b_inf
    return (
        (1.0 + delta) * params.kappa
        + 2.0 * delta * b
        + 4.0 * (1.0 + delta) * (3.0 + 1.0 / lam) * b * b
    )


def _check_tuning(params: ModelParams, tuning: TuningParams) -> float:
    lam0 = lambda0(params, tuning.delta)
    if lam0 > 0 and tuning.lam < (1.0 + LAMBDA_MARGIN) * lam0:
        raise PreconditionError(
            f"lambda={tuning.lam} is not above lambda0(delta={tuning.delta})={lam0}"
        )
    return lam0


def lambda_big(params: ModelParams, tuning: TuningParams) -> float:
    _check_tuning(params, tuning)
    delta, eps, lam = tuning.delta, tuning.eps, tuning.lam
    ups = upsilon(params, lam, delta)
    linear = (
        (1.0 + delta) * delta * lam
        + params.beta * delta
        + (1.0 + delta) ** 2 * params.lambda_B
        + (1.0 + delta) * ups * params.B_inf
    )
    quad = (params.d + 4.0 / ((1.0 - delta) ** 2 * eps)) * ups * ups
    return 2.0 / (1.0 - eps) * linear + quad / (1.0 - eps)


def sigma_lambda(params: ModelParams, tuning: TuningParams) -> float:
    """Drift coefficient of the transformed difference process."""
    _check_tuning(params, tuning)
    delta, lam = tuning.delta, tuning.lam
    ups = upsilon(params, lam, delta)
    total = (
        2.0 * (1.0 + delta) * delta * lam
        + 2.0 * params.beta * delta
        + 2.0 * (1.0 + delta) ** 2 * params.lambda_B
        + 2.0 * (1.0 + delta) * ups * params.B_inf
        + params.d * ups * ups
    )
    return total / (1.0 - delta) ** 2


def _delay_exponent(params: ModelParams, delta: float) -> float:
    return 2.0 * params.beta * params.r0 / (1.0 - delta) ** 2


def certificate(params: ModelParams, tuning: TuningParams) -> ContractionCertificate:
    lam0 = _check_tuning(params, tuning)
    ups = upsilon(params, tuning.lam, tuning.delta)
    big = lambda_big(params, tuning)
    c = _delay_exponent(params, tuning.delta)
    threshold = 2.0 * params.beta * math.exp(-c)
    rate = math.exp(c) / (1.0 - tuning.delta) ** 2 * (big - threshold)
    prefactor = math.exp(c) / (1.0 - tuning.eps)
    feasible = big < threshold
    return ContractionCertificate(
        tuning=tuning,
        lambda0=lam0,
        upsilon=ups,
        lambda_big=big,
        rate=rate,
        prefactor=prefactor,
        feasible=feasible,
        kappa2=-rate if feasible else 0.0,
        kappa0=prefactor,
    )


def contraction_bound(
    params: ModelParams, tuning: TuningParams, t, init_sq: float
):
    """Upper bound on ``E ||X_t^xi - X_t^eta||^2`` given ``||xi - eta||^2``.

    ``t`` may be a scalar or an array of times.
    """
    if init_sq < 0:
        raise DomainError("init_sq must be nonnegative")
    cert = certificate(params, tuning)
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0):
        raise DomainError("t must be nonnegative")
    out = cert.prefactor * np.exp(cert.rate * t_arr) * init_sq
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class SearchConfig:
    """Grid for :func:`feasibility_search`.

    Defaults: 16 log-spaced deltas, 8 eps, 32 log-spaced lambdas per delta,
    then ``refine_rounds`` rounds of local refinement around the incumbent.
    """

    delta_range: tuple[float, float] = (0.01, 0.5)
    n_delta: int = 16
    eps_range: tuple[float, float] = (0.05, 0.9)
    n_eps: int = 8
    n_lambda: int = 32
    lambda_hi_factor: float = 1e4
    lambda_floor: float = 1e-6
    refine_rounds: int = 3
    refine_points: int = 9

    def __post_init__(self):
        if min(self.n_delta, self.n_eps, self.n_lambda) < 1:
            raise SearchConfigError("search grid is empty")
        lo, hi = self.delta_range
        if not 0 < lo <= hi < 1:
            raise SearchConfigError("delta_range must lie inside (0, 1)")
        lo, hi = self.eps_range
        if not 0 < lo <= hi < 1:
            raise SearchConfigError("eps_range must lie inside (0, 1)")

    def lambda_range(self, lam0: float) -> tuple[float, float]:
        lo = max((1.0 + 1e-4) * lam0, self.lambda_floor)
        hi = self.lambda_hi_factor * (1.0 + lam0)
        return lo, max(hi, lo)


@dataclass
class SearchResult:
    best: ContractionCertificate | None
    n_evaluated: int
    config: SearchConfig
    extent: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {"n_evaluated": self.n_evaluated, "grid": asdict(self.config), "extent": self.extent}
        if self.best is None:
            out["verdict"] = "infeasible"
        else:
            out["verdict"] = "feasible"
            out["certificate"] = self.best.to_dict()
        return out


def _geom(lo: float, hi: float, n: int) -> np.ndarray:
    if n == 1 or lo == hi:
        return np.array([lo])
    return np.geomspace(lo, hi, n)


def _better(a: ContractionCertificate, b: ContractionCertificate | None) -> bool:
    if b is None:
        return True
    if a.rate != b.rate:
        return a.rate < b.rate
    ka = (a.tuning.delta, a.tuning.eps, a.tuning.lam)
    kb = (b.tuning.delta, b.tuning.eps, b.tuning.lam)
    return ka < kb


def _evaluate(params, delta, eps, lam):
    try:
        return certificate(params, TuningParams(float(delta), float(eps), float(lam)))
    except (PreconditionError, DomainError):
        return None


def feasibility_search(
    params: ModelParams, grid: SearchConfig | None = None
) -> SearchResult:
    """Best feasible tuning triple, minimising the certified rate.

    The coarse grid is followed by coordinate-wise refinement that shrinks
    a bracket around the incumbent in each of delta, eps and lambda.
    Ties are broken towards the lexicographically smallest triple, so the
    outcome does not depend on scan order.
    """
    grid = grid or SearchConfig()
    best_any = None
    best = None
    n_eval = 0

    deltas = _geom(*grid.delta_range, grid.n_delta)
    epss = np.linspace(*grid.eps_range, grid.n_eps)
    for delta in deltas:
        lam_lo, lam_hi = grid.lambda_range(lambda0(params, delta))
        for eps, lam in itertools.product(epss, _geom(lam_lo, lam_hi, grid.n_lambda)):
            cert = _evaluate(params, delta, eps, lam)
            n_eval += 1
            if cert is None:
                continue
            if _better(cert, best_any):
                best_any = cert
            if cert.feasible and _better(cert, best):
                best = cert

    # Refine around the feasible incumbent, or the least-bad point if none.
    anchor = best if best is not None else best_any
    if anchor is not None:
        d_lo, d_hi = grid.delta_range
        e_lo, e_hi = grid.eps_range
        span_d = (d_hi / d_lo) ** (1.0 / max(grid.n_delta - 1, 1))
        span_e = (e_hi - e_lo) / max(grid.n_eps - 1, 1)
        span_l = 10.0 ** (4.0 / max(grid.n_lambda - 1, 1))
        for _ in range(grid.refine_rounds):
            tn = anchor.tuning
            cand_d = np.clip(
                _geom(tn.delta / span_d, tn.delta * span_d, grid.refine_points), d_lo, d_hi
            )
            cand_e = np.clip(
                np.linspace(tn.eps - span_e, tn.eps + span_e, grid.refine_points), e_lo, e_hi
            )
            for delta in np.unique(cand_d):
                lam_lo, lam_hi = grid.lambda_range(lambda0(params, delta))
                cand_l = np.clip(
                    _geom(tn.lam / span_l, tn.lam * span_l, grid.refine_points), lam_lo, lam_hi
                )
                for eps, lam in itertools.product(np.unique(cand_e), np.unique(cand_l)):
                    cert = _evaluate(params, delta, eps, lam)
                    n_eval += 1
                    if cert is None:
                        continue
                    if _better(cert, best_any):
                        best_any = cert
                    if cert.feasible and _better(cert, best):
                        best = cert
            anchor = best if best is not None else best_any
            span_d = math.sqrt(span_d)
            span_e /= 2.0
            span_l = math.sqrt(span_l)

    extent = {
        "delta": list(grid.delta_range),
        "eps": list(grid.eps_range),
        "lambda_hi_factor": grid.lambda_hi_factor,
        "least_rate": None if best_any is None else best_any.rate,
    }
    return SearchResult(best=best, n_evaluated=n_eval, config=grid, extent=extent)


def _check_moment_args(params: ModelParams, eps: float, eps_moment: float) -> None:
    if not 0 < eps < 1:
        raise DomainError(f"eps must lie in (0, 1), got {eps}")
    if not 0 < eps_moment < 2.0 * params.beta:
        raise DomainError(f"eps_moment must lie in (0, 2 beta), got {eps_moment}")


def moment_certificate(
    params: ModelParams, eps: float, eps_moment: float, B_at_zero: float = 0.0
) -> MomentCertificate:
    _check_moment_args(params, eps, eps_moment)
    a = 2.0 * params.beta - eps_moment
    gamma_const = (
        (params.b_inf + B_at_zero) ** 2 / eps_moment + params.d + 4.0 / eps
    ) / (1.0 - eps)
    rate = 2.0 * params.lambda_B * math.exp(a * params.r0) / (1.0 - eps) - a
    valid = 2.0 * params.lambda_B / (1.0 - eps) < a * math.exp(-a * params.r0)
    asym = math.exp(params.r0 * a) * gamma_const / -rate if valid else math.inf
    return MomentCertificate(eps, eps_moment, gamma_const, rate, asym, valid)


def _expm1_over(rate: float, t: np.ndarray) -> np.ndarray:
    """``(exp(rate t) - 1) / rate`` with the ``rate -> 0`` limit ``t``."""
    x = rate * t
    small = np.abs(x) < 1e-8
    safe = np.where(small, 1.0, rate)
    return np.where(small, t * (1.0 + x / 2.0), np.expm1(x) / safe)


def moment_bound(
    params: ModelParams,
    eps: float,
    eps_moment: float,
    xi_sup_sq: float,
    B_at_zero: float,
    t,
):
    """Uniform-in-time second-moment bound for ``||X_t^xi||_inf^2``.

    Returns ``(bound, certificate)``; ``certificate.valid`` records whether
    the bound stays finite as ``t -> inf``.
    """
    cert = moment_certificate(params, eps, eps_moment, B_at_zero)
    if xi_sup_sq < 0 or B_at_zero < 0:
        raise DomainError("xi_sup_sq and B_at_zero must be nonnegative")
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0):
        raise DomainError("t must be nonnegative")
    a = 2.0 * params.beta - eps_moment
    rho = cert.transient_rate
    lead = math.exp(params.r0 * a)
    out = lead * (
        np.exp(rho * t_arr) * xi_sup_sq / (1.0 - eps)
        + cert.gamma_const * _expm1_over(rho, t_arr)
    )
    return (float(out) if out.ndim == 0 else out), cert


def best_moment_tuning(
    params: ModelParams, B_at_zero: float = 0.0, n: int = 40
) -> tuple[float, float] | None:
    """(eps, eps_moment) with the smallest asymptotic moment bound, or None."""
    best = None
    for eps in np.linspace(0.02, 0.98, n):
        for frac in np.linspace(0.02, 0.98, n):
            cert = moment_certificate(params, float(eps), float(frac * 2 * params.beta), B_at_zero)
            if cert.valid and (best is None or cert.asymptotic_bound < best[0]):
                best = (cert.asymptotic_bound, float(eps), float(frac * 2 * params.beta))
    return None if best is None else best[1:]

