"""Numerical Zvonkin transform in one dimension.

Solves the resolvent fixed point

    u = int_0^inf e^{-lam t} P_t (b + u' b) dt

over the Ornstein-Uhlenbeck semigroup ``P_t`` of ``dZ = -beta Z dt + dW``
by Picard iteration on a uniform grid.  The time integral uses
exponentially weighted trapezoid weights on a log-spaced grid in
``s = lam t``.  Inside the solver, Gaussian averages of the drift are
computed exactly for its singular power part and by Gaussian-hat
convolution for the remainder; :func:`ou_apply` (Gauss-Hermite) is the
general-purpose semigroup evaluator for smooth test functions.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.signal import fftconvolve
from scipy.special import gamma as gamma_special, hyp1f1, ndtr

from .constants import ModelParams, PreconditionError, lambda0, smoothed_holder_constant, upsilon
from .pathspace import DriftSpec, eval_b, format_float


class ConvergenceError(RuntimeError):
    def __init__(self, message, contraction=None):
        super().__init__(message)
        self.contraction = contraction


class VerificationError(AssertionError):
    pass


@dataclass(frozen=True)
class OUParams:
    beta: float

    def mean_factor(self, t):
        return np.exp(-self.beta * np.asarray(t, dtype=float))

    def noise_std(self, t):
        t = np.asarray(t, dtype=float)
        return np.sqrt(-np.expm1(-2.0 * self.beta * t) / (2.0 * self.beta))


@dataclass(frozen=True)
class QuadratureConfig:
    n_hermite: int = 32
    n_t: int = 128
    s_min: float = 1e-6
    s_max: float = 40.0

    def __post_init__(self):
        if self.n_hermite < 16:
            raise ValueError("n_hermite must be at least 16")
        if self.n_t < 64:
            raise ValueError("n_t must be at least 64")

    def hermite(self) -> tuple[np.ndarray, np.ndarray]:
        """Nodes/weights for ``E f(N(0, 1))``."""
        z, w = np.polynomial.hermite_e.hermegauss(self.n_hermite)
        return z, w / math.sqrt(2.0 * math.pi)

    def time_rule(self, lam: float) -> tuple[np.ndarray, np.ndarray]:
        """Nodes ``t_j`` and weights ``w_j`` with ``sum_j w_j g(t_j) ~ int e^{-lam t} g(t) dt``.

        The weights integrate ``e^{-s}`` against the piecewise-linear
        interpolant of ``g`` exactly, with ``g`` held constant on
        ``[0, s_min]`` and beyond ``s_max``.
        """
        s = np.geomspace(self.s_min, self.s_max, self.n_t)
        w = np.zeros_like(s)
        w[0] += -math.expm1(-s[0])  # int_0^{s_0} e^{-s} ds
        w[-1] += math.exp(-s[-1])  # tail
        a, b = s[:-1], s[1:]
        hgap = b - a
        ea, eb = np.exp(-a), np.exp(-b)
        # int_a^b e^{-s} (b - s)/hgap ds and int_a^b e^{-s} (s - a)/hgap ds
        left = ea - (ea - eb) / hgap
        right = (ea - eb) / hgap - eb
        w[:-1] += left
        w[1:] += right
        return s / lam, w / lam


@dataclass
class GridField:
    x_grid: np.ndarray
    u: np.ndarray
    du: np.ndarray
    d2u: np.ndarray
    lam: float
    residual: float = math.nan
    iterations: int = 0
    observed_contraction: float = 0.0
    history: list = field(default_factory=list)

    @property
    def dx(self) -> float:
        return float(self.x_grid[1] - self.x_grid[0])

    def interior(self, strip: float = 0.1) -> np.ndarray:
        n = len(self.x_grid)
        k = int(math.ceil(strip * n))
        mask = np.zeros(n, dtype=bool)
        mask[k : n - k] = True
        return mask

    def theta(self) -> np.ndarray:
        return self.x_grid + self.u

    def to_csv(self, path) -> None:
        with open(path, "w", newline="\n") as fh:
            fh.write("x,u,du,d2u\n")
            for row in zip(self.x_grid, self.u, self.du, self.d2u):
                fh.write(",".join(format_float(v) for v in row) + "\n")

    @classmethod
    def from_csv(cls, path, lam: float) -> "GridField":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, 0], data[:, 1], data[:, 2], data[:, 3], lam)


def ou_apply(f, t, x, ou: OUParams, quad: QuadratureConfig | None = None):
    """Gauss-Hermite approximation of ``E f(e^{-beta t} x + sd(t) N)``.

    ``t`` and ``x`` broadcast; ``f`` must be vectorised.
    """
    quad = quad or QuadratureConfig()
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise ValueError("ou_apply needs t > 0")
    z, w = quad.hermite()
    mean = ou.mean_factor(t) * np.asarray(x, dtype=float)
    sd = ou.noise_std(t)
    pts = mean[..., None] + sd[..., None] * z
    return np.tensordot(f(pts), w, axes=([-1], [0]))


def central_diff(u: np.ndarray, dx: float) -> tuple[np.ndarray, np.ndarray]:
    """Second-order first and second differences, one-sided at the ends."""
    du = np.empty_like(u)
    d2u = np.empty_like(u)
    du[1:-1] = (u[2:] - u[:-2]) / (2 * dx)
    du[0] = (-3 * u[0] + 4 * u[1] - u[2]) / (2 * dx)
    du[-1] = (3 * u[-1] - 4 * u[-2] + u[-3]) / (2 * dx)
    d2u[1:-1] = (u[2:] - 2 * u[1:-1] + u[:-2]) / dx**2
    d2u[0] = (2 * u[0] - 5 * u[1] + 4 * u[2] - u[3]) / dx**2
    d2u[-1] = (2 * u[-1] - 5 * u[-2] + 4 * u[-3] - u[-4]) / dx**2
    return du, d2u


@dataclass(frozen=True)
class GridConfig:
    n_x: int = 32001  # odd, so the origin is a node
    half_width: float | None = None  # default derived from the drift

    def resolve(self, b_spec: DriftSpec, beta: float) -> np.ndarray:
        L = self.half_width
        if L is None:
            cap = b_spec.cap if b_spec.kind != "zero" else 1.0
            L = max(5.0 * cap, 10.0 * b_spec.declared_b_inf() / beta + 5.0 / math.sqrt(2 * beta))
        return np.linspace(-L, L, self.n_x)


def signed_power_mean(mu, alpha: float, quad: QuadratureConfig | None = None):
    """``E[sign(mu + Z) |mu + Z|^alpha]`` for standard normal ``Z``.

    Kummer-function closed form for ``|mu| <= 8``; Gauss-Hermite on the
    (then smooth) integrand beyond.
    """
    mu = np.asarray(mu, dtype=float)
    out = np.empty_like(mu)
    near = np.abs(mu) <= 8.0
    coef = 2.0 ** ((alpha + 1) / 2) * gamma_special((alpha + 2) / 2) / math.sqrt(math.pi)
    m = mu[near]
    out[near] = coef * m * hyp1f1((1 - alpha) / 2, 1.5, -m * m / 2)
    far = mu[~near]
    if far.size:
        z, w = (quad or QuadratureConfig()).hermite()
        vals = (np.abs(far)[:, None] + z[None, :]).clip(0) ** alpha
        out[~near] = np.sign(far) * (vals @ w)
    return out


def _phi2(z):
    """Second antiderivative of the Gaussian density: ``z Phi(z) + phi(z)``."""
    return z * ndtr(z) + np.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)


def hat_gaussian_kernel(sd: float, dx: float) -> np.ndarray:
    """Weights ``k_j = E hat(j dx + sd N)`` for the unit hat of half-width ``dx``.

    Convolving grid samples with these averages the piecewise-linear
    interpolant against the Gaussian exactly.
    """
    half = int(math.ceil(8.5 * sd / dx)) + 1
    s = np.arange(-half, half + 1) * dx
    r = sd / dx
    k = r * (_phi2((s + dx) / sd) - 2 * _phi2(s / sd) + _phi2((s - dx) / sd))
    return np.clip(k, 0.0, None)


class ResolventOperator:
    """The map ``u -> int e^{-lam t} P_t(b + u' b) dt`` on a fixed uniform grid.

    The drift is split as ``b = c * q + (b - c * q)`` with ``q(y) = sign(y)|y|^alpha``.
    The singular piece ``(1 + u'(0)) c q`` is averaged in closed form; the
    remainder is regular at the origin and is averaged exactly in its
    piecewise-linear interpolant (Gaussian-hat convolution), then read off at
    the contracted means ``e^{-beta t} x`` by linear interpolation.
    ``u`` is held constant off the grid, so ``u' = 0`` in the padding.
    """

    def __init__(self, b_spec: DriftSpec, ou: OUParams, lam: float, x: np.ndarray,
                 quad: QuadratureConfig):
        self.b_spec = b_spec
        self.x = x
        self.n = len(x)
        self.dx = dx = float(x[1] - x[0])
        self.i0 = int(np.argmin(np.abs(x)))
        if abs(x[self.i0]) > 1e-12 * dx:
            raise ValueError("grid must contain the origin (use an odd n_x)")
        t, self.wt = quad.time_rule(lam)
        self.mean = ou.mean_factor(t)
        self.sd = ou.noise_std(t)
        self.zero = b_spec.kind == "zero"
        self.kernels = [hat_gaussian_kernel(s, dx) for s in self.sd]
        self.pad = max(len(k) for k in self.kernels) // 2 + 2
        self.y = x[0] + dx * np.arange(-self.pad, self.n + self.pad)
        self.b_y = eval_b(b_spec, self.y)
        if self.zero:
            self.q_y = np.zeros_like(self.y)
            self.sing = np.zeros_like(x)
        else:
            c, a = b_spec.c, b_spec.alpha
            self.q_y = c * np.sign(self.y) * np.abs(self.y) ** a
            sing = np.zeros_like(x)
            for mj, sj, wj in zip(self.mean, self.sd, self.wt):
                sing += wj * c * sj**a * signed_power_mean(mj * x / sj, a, quad)
            self.sing = sing

    def __call__(self, du: np.ndarray) -> np.ndarray:
        if self.zero:
            return np.zeros(self.n)
        slope0 = 1.0 + du[self.i0]
        g = self.b_y.copy()
        g[self.pad : self.pad + self.n] *= 1.0 + du
        h = g - slope0 * self.q_y
        out = slope0 * self.sing
        for mj, wj, ker in zip(self.mean, self.wt, self.kernels):
            sm = fftconvolve(h, ker, mode="same") if len(ker) > 64 else np.convolve(h, ker, mode="same")
            out += wj * np.interp(mj * self.x, self.y, sm)
        return out


def solve_zvonkin(b_spec: DriftSpec, ou: OUParams, lam: float, delta: float,
                  grid: GridConfig | None = None, quad: QuadratureConfig | None = None,
                  tol: float = 1e-8, max_iter: int = 200,
                  params: ModelParams | None = None) -> GridField:
    """Picard iteration for the Zvonkin fixed point, starting from ``u = 0``.

    ``observed_contraction`` is the largest ratio of successive gradient
    updates ``||du_{k+1} - du_k|| / ||du_k - du_{k-1}||``.
    """
    grid = grid or GridConfig()
    quad = quad or QuadratureConfig()
    params = params or model_for_drift(b_spec, ou.beta)
    lam0 = lambda0(params, delta)
    if lam0 > 0 and not lam > lam0:
        raise PreconditionError(f"lambda={lam} is not above lambda0={lam0}")
    x = grid.resolve(b_spec, ou.beta)
    dx = float(x[1] - x[0])
    op = ResolventOperator(b_spec, ou, lam, x, quad)

    u = np.zeros_like(x)
    du = np.zeros_like(x)
    prev_grad_step = None
    contraction = 0.0
    history = []
    for k in range(1, max_iter + 1):
        u_new = op(du)
        du_new, _ = central_diff(u_new, dx)
        step = float(np.max(np.abs(u_new - u)))
        grad_step = float(np.max(np.abs(du_new - du)))
        if prev_grad_step is not None and prev_grad_step > 0:
            contraction = max(contraction, grad_step / prev_grad_step)
        history.append({"iteration": k, "step": step, "grad_step": grad_step})
        prev_grad_step = grad_step
        u, du = u_new, du_new
        if step < tol:
            break
    else:
        raise ConvergenceError(
            f"Picard iteration did not reach tol={tol} in {max_iter} sweeps", contraction
        )

    du, d2u = central_diff(u, dx)
    field_ = GridField(x, u, du, d2u, lam, iterations=k, observed_contraction=contraction,
                       history=history)
    field_.residual = float(np.max(np.abs(u - op(du))[field_.interior()]))
    return field_


def model_for_drift(b_spec: DriftSpec, beta: float, **kw) -> ModelParams:
    """ModelParams carrying the drift's declared constants (``B = 0`` by default)."""
    return ModelParams(
        beta=beta,
        kappa=b_spec.declared_kappa(),
        alpha=b_spec.declared_alpha,
        b_inf=b_spec.declared_b_inf(),
        lambda_B=kw.get("lambda_B", 0.0),
        B_inf=kw.get("B_inf", 0.0),
        r0=kw.get("r0", 1.0),
        d=1,
    )


def pde_residual(field_: GridField, b_spec: DriftSpec, beta: float) -> np.ndarray:
    """``1/2 u'' + u' b + b - beta x u' - lam u`` on the grid."""
    b = eval_b(b_spec, field_.x_grid)
    return (0.5 * field_.d2u + field_.du * b + b - beta * field_.x_grid * field_.du
            - field_.lam * field_.u)


@dataclass
class VerificationReport:
    max_du: float
    du_bound: float
    max_d2u: float
    d2u_bound: float
    holder_ratio: float
    holder_bound: float
    theta_slope: tuple[float, float]
    pde_residual: float
    pde_scale: float
    allowance: float
    failures: list

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        return asdict(self)


def holder_ratio(x: np.ndarray, g: np.ndarray, alpha: float, n_pairs: int, seed: int) -> tuple:
    rng = np.random.default_rng(seed)
    i = rng.integers(0, len(x), n_pairs)
    # mix of near and far partners
    off = np.where(rng.random(n_pairs) < 0.5, rng.integers(1, 20, n_pairs),
                   rng.integers(1, len(x), n_pairs))
    j = (i + off) % len(x)
    den = np.abs(x[i] - x[j]) ** alpha
    ratio = np.abs(g[i] - g[j]) / den
    k = int(np.argmax(ratio))
    return float(ratio[k]), (float(x[i[k]]), float(x[j[k]]))


def verify_gradient_bounds(field_: GridField, params: ModelParams, delta: float, lam: float,
                           b_spec: DriftSpec, allowance: float = 0.05,
                           n_pairs: int = 200_000, seed: int = 0,
                           raise_on_fail: bool = False) -> VerificationReport:
    """Compare a converged field against the gradient, Hessian and Hölder bounds.

    The outer 10% of the grid is excluded on each side.
    """
    mask = field_.interior()
    x = field_.x_grid[mask]
    du = field_.du[mask]
    d2u = field_.d2u[mask]
    b = eval_b(b_spec, x)
    smoothed = b + du * b

    max_du = float(np.max(np.abs(du)))
    max_d2u = float(np.max(np.abs(d2u)))
    ups = upsilon(params, lam, delta)
    kt = smoothed_holder_constant(params, lam, delta)
    if params.b_inf == 0:
        h_ratio, witness = 0.0, None
    else:
        h_ratio, witness = holder_ratio(x, smoothed, params.alpha, n_pairs, seed)
    res = np.abs(pde_residual(field_, b_spec, params.beta))[mask]
    scale = field_.lam * float(np.max(np.abs(field_.u)))
    slope = 1.0 + du

    failures = []
    if max_du > delta * (1 + allowance):
        failures.append(f"gradient bound: max|u'|={max_du} > delta={delta}")
    if max_d2u > ups * (1 + allowance):
        failures.append(f"hessian bound: max|u''|={max_d2u} > upsilon={ups}")
    if h_ratio > kt * (1 + allowance):
        failures.append(f"holder bound: ratio {h_ratio} > kappa_tilde={kt} at {witness}")
    if slope.min() < 1 - delta * (1 + allowance) or slope.max() > 1 + delta * (1 + allowance):
        failures.append("theta slope outside [1 - delta, 1 + delta]")
    report = VerificationReport(max_du, delta, max_d2u, ups, h_ratio, kt,
                                (float(slope.min()), float(slope.max())),
                                float(res.max()), scale, allowance, failures)
    if raise_on_fail and failures:
        raise VerificationError("; ".join(failures))
    return report


def bismut_gradient_mc(f, t: float, x: float, ou: OUParams, n_samples: int = 100_000,
                       seed: int = 0, block: int = 1 << 14) -> tuple[float, float]:
    """Monte Carlo ``d/dx P_t f(x)`` via the Bismut weight.

    Samples ``Z_t = e^{-beta t} x + A`` and ``I = int_0^t e^{-beta r} dW_r``
    jointly: both have variance ``(1 - e^{-2 beta t}) / (2 beta)`` and
    covariance ``t e^{-beta t}``.  Estimator is ``f(Z_t) I / t``.  Blocks
    of ``block`` samples each use their own Philox key, so the result does
    not depend on how blocks are scheduled.
    """
    if not t > 0:
        raise ValueError("t must be positive")
    if n_samples < 100:
        raise ValueError("n_samples must be at least 100")
    var = float(ou.noise_std(t)) ** 2
    cov = t * math.exp(-ou.beta * t)
    mean = math.exp(-ou.beta * t) * x
    sa = math.sqrt(var)
    # I = rho * A / sa * si + sqrt(1 - rho^2) * si * N'
    rho = cov / var
    resid_sd = math.sqrt(max(var - cov * cov / var, 0.0))
    vals = []
    for start in range(0, n_samples, block):
        k = min(block, n_samples - start)
        gen = np.random.Generator(np.random.Philox(key=[seed, start // block]))
        g = gen.standard_normal((2, k))
        a = sa * g[0]
        i = rho * a + resid_sd * g[1]
        vals.append(np.asarray(f(mean + a), dtype=float) * i / t)
    v = np.concatenate(vals)
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(len(v)))


def diagnostics(field_: GridField, report: VerificationReport | None = None) -> dict:
    out = {
        "lambda": field_.lam,
        "n_x": len(field_.x_grid),
        "half_width": float(field_.x_grid[-1]),
        "dx": field_.dx,
        "residual": field_.residual,
        "iterations": field_.iterations,
        "observed_contraction": field_.observed_contraction,
        "history": field_.history,
    }
    if report is not None:
        out["verification"] = report.to_dict()
    return out


def dump_json(obj, path) -> None:
    with open(path, "w", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
