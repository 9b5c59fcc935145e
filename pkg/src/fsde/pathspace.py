"""Discretised path space C([-r0, 0]; R^d) and the built-in drift families.

A :class:`Segment` stores ``m + 1`` grid values ``xi(-r0 + i h)`` with
``h = r0 / m``.  Sup norms are taken over grid points only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    pass


class CertificationError(AssertionError):
    """An empirical Hölder/Lipschitz ratio exceeded its declared constant."""

    def __init__(self, message, witness=None):
        super().__init__(message)
        self.witness = witness


@dataclass(frozen=True)
class Segment:
    r0: float
    values: np.ndarray  # shape (m + 1, d)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
        if vals.ndim != 2 or vals.shape[0] < 2:
            raise ShapeError("a segment needs at least two grid points")
        if not np.all(np.isfinite(vals)):
            raise ShapeError("segment values must be finite")
        if not self.r0 > 0:
            raise ShapeError("r0 must be positive")
        object.__setattr__(self, "values", vals)

    @property
    def m(self) -> int:
        return self.values.shape[0] - 1

    @property
    def d(self) -> int:
        return self.values.shape[1]

    @property
    def h(self) -> float:
        return self.r0 / self.m

    @property
    def times(self) -> np.ndarray:
        """Time offsets ``-r0 + i h``; the last one is exactly 0."""
        return -self.r0 + self.r0 * np.arange(self.m + 1) / self.m

    def __sub__(self, other: "Segment") -> "Segment":
        _check_compatible(self, other)
        return Segment(self.r0, self.values - other.values)

    def at(self, s: float) -> np.ndarray:
        """Linear interpolation at an off-grid offset ``s`` in [-r0, 0]."""
        if not -self.r0 <= s <= 0:
            raise ValueError(f"offset {s} outside [-r0, 0]")
        return np.array([np.interp(s, self.times, self.values[:, j]) for j in range(self.d)])

    @classmethod
    def constant(cls, r0: float, m: int, c, d: int = 1) -> "Segment":
        c = np.broadcast_to(np.asarray(c, dtype=float), (d,))
        return cls(r0, np.tile(c, (m + 1, 1)))

    @classmethod
    def zero(cls, r0: float, m: int, d: int = 1) -> "Segment":
        return cls.constant(r0, m, 0.0, d)

    @classmethod
    def spike(cls, r0: float, m: int, c, d: int = 1) -> "Segment":
        """Zero except at the endpoint ``s = 0``."""
        vals = np.zeros((m + 1, d))
        vals[-1] = c
        return cls(r0, vals)

    @classmethod
    def from_preset(cls, spec, r0: float, m: int, d: int = 1) -> "Segment":
        """Build from ``"zero"``, ``{"constant": c}``, ``{"spike": c}`` or ``{"values": [...]}``."""
        if spec == "zero":
            return cls.zero(r0, m, d)
        if isinstance(spec, dict):
            if "constant" in spec:
                return cls.constant(r0, m, spec["constant"], d)
            if "spike" in spec:
                return cls.spike(r0, m, spec["spike"], d)
            if "values" in spec:
                seg = cls(r0, np.asarray(spec["values"], dtype=float).reshape(m + 1, d))
                return seg
        raise ValueError(f"unknown segment preset {spec!r}")

    def to_csv(self, path) -> None:
        header = "time_offset," + ",".join(f"x_{j + 1}" for j in range(self.d))
        rows = np.column_stack([self.times, self.values])
        with open(path, "w", newline="\n") as fh:
            fh.write(header + "\n")
            for row in rows:
                fh.write(",".join(format_float(v) for v in row) + "\n")

    @classmethod
    def from_csv(cls, path) -> "Segment":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        r0 = -float(data[0, 0])
        return cls(r0, data[:, 1:])


def format_float(v: float) -> str:
    return f"{v:.17g}"


def _check_compatible(a: Segment, b: Segment) -> None:
    if a.values.shape != b.values.shape or a.r0 != b.r0:
        raise ShapeError(
            f"segments differ in discretisation: r0 {a.r0} vs {b.r0}, "
            f"shape {a.values.shape} vs {b.values.shape}"
        )


def sup_norm(seg: Segment) -> float:
    return float(np.max(np.linalg.norm(seg.values, axis=1)))


def segment_distance(a: Segment, b: Segment) -> float:
    return sup_norm(a - b)


# ---------------------------------------------------------------------------
# drift families


@dataclass(frozen=True)
class DriftSpec:
    """Pointwise drift ``b``.

    ``holder_power(c, alpha, cap)``: ``b(x) = c sign(x) min(|x|, cap)^alpha``
    componentwise.  Hölder constant ``2^(1 - alpha) c``; ``||b||_inf = c cap^alpha``
    per component (times ``sqrt(d)`` for the Euclidean norm).
    """

    kind: str = "zero"
    c: float = 0.0
    alpha: float = 0.5
    cap: float = 1.0

    def __post_init__(self):
        if self.kind not in ("zero", "holder_power"):
            raise ValueError(f"unknown drift kind {self.kind!r}")
        if self.kind == "holder_power":
            if not 0 < self.alpha < 1 or self.c < 0 or not self.cap > 0:
                raise ValueError("holder_power needs c >= 0, 0 < alpha < 1, cap > 0")

    @classmethod
    def zero(cls) -> "DriftSpec":
        return cls("zero")

    @classmethod
    def holder_power(cls, c: float, alpha: float, cap: float) -> "DriftSpec":
        return cls("holder_power", c, alpha, cap)

    def declared_kappa(self, d: int = 1) -> float:
        if self.kind == "zero":
            return 0.0
        # sum_i |x_i - y_i|^(2 alpha) <= d^(1 - alpha) |x - y|^(2 alpha) by concavity
        return 2.0 ** (1.0 - self.alpha) * self.c * d ** ((1.0 - self.alpha) / 2.0)

    def declared_b_inf(self, d: int = 1) -> float:
        if self.kind == "zero":
            return 0.0
        return self.c * self.cap**self.alpha * math.sqrt(d)

    @property
    def declared_alpha(self) -> float:
        return self.alpha

    def __call__(self, x):
        return eval_b(self, x)

    def to_dict(self) -> dict:
        if self.kind == "zero":
            return {"kind": "zero"}
        return {"kind": self.kind, "c": self.c, "alpha": self.alpha, "cap": self.cap}

    @classmethod
    def from_dict(cls, data: dict) -> "DriftSpec":
        kind = data.get("kind", "zero")
        if kind == "zero":
            return cls.zero()
        return cls.holder_power(data["c"], data["alpha"], data["cap"])


def eval_b(spec: DriftSpec, x):
    """Evaluate ``b`` on an array of points (any shape, componentwise)."""
    x = np.asarray(x, dtype=float)
    if spec.kind == "zero":
        return np.zeros_like(x)
    return spec.c * np.sign(x) * np.minimum(np.abs(x), spec.cap) ** spec.alpha


def saturate(u):
    """Odd, bounded, 1-Lipschitz saturation ``u / (1 + |u|)``."""
    return u / (1.0 + np.abs(u))


@dataclass(frozen=True)
class FunctionalSpec:
    """Delay functional ``B`` on segments.

    ``terminal_saturated(scale)``: ``B(xi) = scale * s(xi(-r0))`` with
    ``s(u) = u / (1 + |u|)``; Lipschitz constant and sup norm both ``scale``.

    ``window_average(scale, clip)``: ``B(xi) = scale * clip_c(mean of xi)``
    with the trapezoid average over ``[-r0, 0]``; Lipschitz ``scale``,
    sup norm ``scale * clip``.
    """

    kind: str = "zero"
    scale: float = 0.0
    clip: float = 1.0

    def __post_init__(self):
        if self.kind not in ("zero", "terminal_saturated", "window_average"):
            raise ValueError(f"unknown functional kind {self.kind!r}")
        if self.scale < 0 or not self.clip > 0:
            raise ValueError("functional needs scale >= 0 and clip > 0")

    @classmethod
    def zero(cls) -> "FunctionalSpec":
        return cls("zero")

    @classmethod
    def terminal_saturated(cls, scale: float) -> "FunctionalSpec":
        return cls("terminal_saturated", scale)

    @classmethod
    def window_average(cls, scale: float, clip: float) -> "FunctionalSpec":
        return cls("window_average", scale, clip)

    def declared_lambda_B(self, d: int = 1) -> float:
        return 0.0 if self.kind == "zero" else self.scale

    def declared_B_inf(self, d: int = 1) -> float:
        if self.kind == "zero":
            return 0.0
        if self.kind == "terminal_saturated":
            return self.scale * math.sqrt(d)
        return self.scale * self.clip * math.sqrt(d)

    @property
    def B_at_zero(self) -> float:
        return 0.0

    def to_dict(self) -> dict:
        if self.kind == "zero":
            return {"kind": "zero"}
        if self.kind == "terminal_saturated":
            return {"kind": self.kind, "scale": self.scale}
        return {"kind": self.kind, "scale": self.scale, "clip": self.clip}

    @classmethod
    def from_dict(cls, data: dict) -> "FunctionalSpec":
        kind = data.get("kind", "zero")
        if kind == "zero":
            return cls.zero()
        if kind == "terminal_saturated":
            return cls.terminal_saturated(data["scale"])
        return cls.window_average(data["scale"], data["clip"])


def eval_B_batch(spec: FunctionalSpec, hist: np.ndarray) -> np.ndarray:
    """``B`` on a batch of segment histories of shape ``(n, m + 1, d)``.

    Index 0 is the oldest point ``xi(-r0)``, index ``m`` is ``xi(0)``.
    """
    if spec.kind == "zero":
        return np.zeros((hist.shape[0], hist.shape[2]))
    if spec.kind == "terminal_saturated":
        return spec.scale * saturate(hist[:, 0, :])
    m = hist.shape[1] - 1
    avg = (hist.sum(axis=1) - 0.5 * (hist[:, 0, :] + hist[:, m, :])) / m
    return spec.scale * np.clip(avg, -spec.clip, spec.clip)


def eval_B(spec: FunctionalSpec, seg: Segment) -> np.ndarray:
    return eval_B_batch(spec, seg.values[None, :, :])[0]


# ---------------------------------------------------------------------------
# empirical certification


@dataclass
class CertificationReport:
    kind: str
    trials: int
    max_ratio: float
    declared: float
    witness: tuple | None

    @property
    def passed(self) -> bool:
        return self.max_ratio <= self.declared * (1.0 + 1e-9)


def certify_constants(spec, trials: int = 100_000, seed: int = 0, *, d: int = 1,
                      r0: float = 1.0, m: int = 16, raise_on_fail: bool = True,
                      chunk: int = 100_000) -> CertificationReport:
    """Sample random pairs and compare the worst observed ratio with the declaration.

    For a :class:`DriftSpec` the ratio is ``|b(x) - b(y)| / |x - y|^alpha``;
    for a :class:`FunctionalSpec` it is ``|B(xi) - B(eta)| / ||xi - eta||_inf``.
    Pairs are drawn at several length scales so that both the small- and
    large-separation regimes are exercised.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    best = 0.0
    witness = None
    done = 0
    while done < trials:
        n = min(chunk, trials - done)
        if isinstance(spec, DriftSpec):
            scale = 10.0 ** rng.uniform(-6, 1, size=(n, 1))
            x = rng.normal(size=(n, d)) * 2.0
            y = x + rng.normal(size=(n, d)) * scale
            # Straddling the origin is where the power map is least regular.
            flip = rng.random(n) < 0.3
            y[flip] = -x[flip] * rng.uniform(0, 1.5, size=(flip.sum(), 1))
            num = np.linalg.norm(eval_b(spec, x) - eval_b(spec, y), axis=1)
            den = np.linalg.norm(x - y, axis=1) ** spec.alpha
            declared = spec.declared_kappa(d)
        elif isinstance(spec, FunctionalSpec):
            scale = 10.0 ** rng.uniform(-4, 1, size=(n, 1, 1))
            x = rng.normal(size=(n, m + 1, d)) * 2.0
            y = x + rng.normal(size=(n, m + 1, d)) * scale
            num = np.linalg.norm(eval_B_batch(spec, x) - eval_B_batch(spec, y), axis=1)
            den = np.max(np.linalg.norm(x - y, axis=2), axis=1)
            declared = spec.declared_lambda_B(d)
        else:
            raise TypeError(f"cannot certify {type(spec).__name__}")
        ok = den > 0
        ratio = np.zeros(n)
        ratio[ok] = num[ok] / den[ok]
        k = int(np.argmax(ratio))
        if ratio[k] > best:
            best = float(ratio[k])
            witness = (x[k].tolist(), y[k].tolist())
        done += n
    report = CertificationReport(spec.kind, trials, best, declared, witness)
    if raise_on_fail and not report.passed:
        raise CertificationError(
            f"{spec.kind}: observed ratio {best} exceeds declared {declared}", witness
        )
    return report


def bounded_by_declaration(spec: FunctionalSpec, n: int = 1_000_000, seed: int = 0,
                           m: int = 16, d: int = 1, chunk: int = 100_000) -> float:
    """Largest ``|B(xi)|`` over random segments (for checking ``||B||_inf``)."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for start in range(0, n, chunk):
        k = min(chunk, n - start)
        segs = rng.normal(size=(k, m + 1, d)) * 10.0 ** rng.uniform(-1, 2, size=(k, 1, 1))
        worst = max(worst, float(np.max(np.linalg.norm(eval_B_batch(spec, segs), axis=1))))
    return worst
