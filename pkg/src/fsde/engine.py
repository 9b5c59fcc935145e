"""Euler-Maruyama simulation of the delay equation with segment history.

    X_{k+1} = X_k + h (-beta X_k + b(X_k) + B(X_{t_k})) + sqrt(h) G_k

The last ``m + 1 = r0 / h + 1`` states are kept in a ring buffer, so ``B``
always reads exact grid history.  Gaussian increments of path ``i`` come
from a Philox stream keyed by ``(seed, i)``; step ``k`` consumes the
``k``-th draw of that stream.  Paths are processed in fixed-size blocks,
so results do not depend on how many workers run the blocks.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .pathspace import DriftSpec, FunctionalSpec, Segment, eval_b, saturate

BLOCK = 512


class ConfigError(ValueError):
    pass


class BlowUpError(FloatingPointError):
    def __init__(self, step):
        super().__init__(f"non-finite state at step {step}")
        self.step = step


@dataclass(frozen=True)
class Dynamics:
    beta: float
    r0: float
    drift_b: DriftSpec = field(default_factory=DriftSpec.zero)
    drift_B: FunctionalSpec = field(default_factory=FunctionalSpec.zero)
    d: int = 1


@dataclass(frozen=True)
class SimConfig:
    h: float
    T: float
    n_paths: int = 10_000
    seed: int = 0
    record_times: tuple = ()
    noise: bool = True
    workers: int | None = None

    def steps_per_delay(self, r0: float) -> int:
        m = round(r0 / self.h)
        if m < 1 or abs(m * self.h - r0) > 1e-9 * r0:
            raise ConfigError(f"step h={self.h} does not divide r0={r0}")
        return m

    @property
    def n_steps(self) -> int:
        n = round(self.T / self.h)
        if abs(n * self.h - self.T) > 1e-9 * max(self.T, 1.0):
            raise ConfigError(f"horizon T={self.T} is not a multiple of h={self.h}")
        return n

    def record_steps(self) -> np.ndarray:
        times = self.record_times or (self.T,)
        steps = []
        for t in times:
            k = round(t / self.h)
            if abs(k * self.h - t) > 1e-9 * max(t, 1.0) or not 0 <= k <= self.n_steps:
                raise ConfigError(f"record time {t} is not a grid time in [0, T]")
            steps.append(k)
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ConfigError("record_times must be strictly increasing")
        return np.array(steps, dtype=np.int64)

    def validate(self, dyn: Dynamics) -> int:
        m = self.steps_per_delay(dyn.r0)
        if not self.h < 1.0 / (2.0 * dyn.beta):
            raise ConfigError(f"h={self.h} violates h < 1/(2 beta)")
        if self.n_paths < 1:
            raise ConfigError("n_paths must be positive")
        self.record_steps()
        return m


@dataclass
class MomentSeries:
    times: np.ndarray
    estimate: np.ndarray
    ci95: np.ndarray
    h: float
    n_paths: int

    @classmethod
    def from_samples(cls, times, samples: np.ndarray, h: float) -> "MomentSeries":
        """``samples`` has one row per path and one column per record time."""
        n = samples.shape[0]
        est = samples.mean(axis=0)
        sd = samples.std(axis=0, ddof=1) if n > 1 else np.zeros_like(est)
        return cls(np.asarray(times, dtype=float), est, 1.96 * sd / math.sqrt(n), h, n)

    @property
    def upper(self) -> np.ndarray:
        return self.estimate + self.ci95


@dataclass
class EnsembleResult:
    moments: MomentSeries
    terminal: np.ndarray  # (n_paths, n_record, d) values X(t)
    segments: np.ndarray | None = None  # (n_keep, n_record, m + 1, d)
    trace: np.ndarray | None = None  # (n_paths, n_steps + 1, d) when requested


@dataclass
class CoupledResult:
    moments: MomentSeries  # E ||X_t - Y_t||^2
    moments_x: MomentSeries  # E ||X_t||^2
    terminal_x: np.ndarray
    terminal_y: np.ndarray
    trace_diff: np.ndarray | None = None
    segments_x: np.ndarray | None = None
    segments_y: np.ndarray | None = None


def worker_count(requested: int | None = None) -> int:
    if requested is not None:
        return max(1, int(requested))
    env = os.environ.get("FSDE_THREADS")
    return max(1, int(env)) if env else 1


def path_normals(seed: int, first: int, count: int, n_steps: int, d: int) -> np.ndarray:
    """Increments for paths ``first .. first + count - 1`` of shape (count, n_steps, d)."""
    out = np.empty((count, n_steps, d))
    for j in range(count):
        gen = np.random.Generator(np.random.Philox(key=np.array([seed, first + j], dtype=np.uint64)))
        out[j] = gen.standard_normal((n_steps, d))
    return out


def _B_ring(spec: FunctionalSpec, ring: np.ndarray, oldest: int, newest: int, m: int):
    if spec.kind == "zero":
        return 0.0
    if spec.kind == "terminal_saturated":
        return spec.scale * saturate(ring[:, oldest, :])
    avg = (ring.sum(axis=1) - 0.5 * (ring[:, oldest, :] + ring[:, newest, :])) / m
    return spec.scale * np.clip(avg, -spec.clip, spec.clip)


class _Chain:
    """A batch of paths advancing together through a ring-buffer history."""

    def __init__(self, dyn: Dynamics, init: np.ndarray, m: int, h: float):
        self.dyn = dyn
        self.m = m
        self.h = h
        self.ring = np.array(init, dtype=float)  # (n, m + 1, d), chronological at start
        self.newest = m
        self.x = self.ring[:, m, :].copy()

    def drift(self) -> np.ndarray:
        dyn = self.dyn
        oldest = (self.newest + 1) % (self.m + 1)
        out = -dyn.beta * self.x
        if dyn.drift_b.kind != "zero":
            out = out + eval_b(dyn.drift_b, self.x)
        if dyn.drift_B.kind != "zero":
            out = out + _B_ring(dyn.drift_B, self.ring, oldest, self.newest, self.m)
        return out

    def step(self, noise: np.ndarray | None) -> None:
        x = self.x + self.h * self.drift()
        if noise is not None:
            x = x + math.sqrt(self.h) * noise
        self.newest = (self.newest + 1) % (self.m + 1)
        self.ring[:, self.newest, :] = x
        self.x = x

    def chronological(self) -> np.ndarray:
        return np.roll(self.ring, -(self.newest + 1), axis=1)

    def sup_sq(self) -> np.ndarray:
        return np.max(np.sum(self.ring * self.ring, axis=2), axis=1)


def _run_block(dyn, cfg, m, first, count, inits, keep_segments, want_trace):
    """Advance ``len(inits)`` synchronously coupled copies of paths in one block."""
    n_steps = cfg.n_steps
    rec = cfg.record_steps()
    normals = path_normals(cfg.seed, first, count, n_steps, dyn.d) if cfg.noise else None
    chains = [_Chain(dyn, np.broadcast_to(seg.values, (count,) + seg.values.shape), m, cfg.h)
              for seg in inits]
    n_rec = len(rec)
    sup = np.empty((len(inits), count, n_rec))
    term = np.empty((len(inits), count, n_rec, dyn.d))
    diff = np.empty((count, n_rec)) if len(inits) == 2 else None
    segs = np.empty((len(inits), keep_segments, n_rec, m + 1, dyn.d)) if keep_segments else None
    trace = np.empty((len(inits), count, n_steps + 1, dyn.d)) if want_trace else None

    def snapshot(r):
        for c, ch in enumerate(chains):
            sup[c, :, r] = ch.sup_sq()
            term[c, :, r] = ch.x
            if keep_segments:
                segs[c, :, r] = ch.chronological()[:keep_segments]
        if diff is not None:
            dr = chains[0].ring - chains[1].ring
            diff[:, r] = np.max(np.sum(dr * dr, axis=2), axis=1)

    r = 0
    if want_trace:
        for c, ch in enumerate(chains):
            trace[c, :, 0] = ch.x
    while r < n_rec and rec[r] == 0:
        snapshot(r)
        r += 1
    for k in range(n_steps):
        g = normals[:, k, :] if normals is not None else None
        for ch in chains:
            ch.step(g)
        if not np.all(np.isfinite(chains[0].x)) or not np.all(np.isfinite(chains[-1].x)):
            raise BlowUpError(k + 1)
        if want_trace:
            for c, ch in enumerate(chains):
                trace[c, :, k + 1] = ch.x
        while r < n_rec and rec[r] == k + 1:
            snapshot(r)
            r += 1
    return sup, term, diff, segs, trace


def _run(dyn, cfg, inits, keep_segments=0, want_trace=False):
    m = cfg.validate(dyn)
    for seg in inits:
        if seg.m != m or seg.d != dyn.d or abs(seg.r0 - dyn.r0) > 1e-12 * dyn.r0:
            raise ConfigError("initial segment does not match (r0, m, d)")
    blocks = [(i, min(BLOCK, cfg.n_paths - i)) for i in range(0, cfg.n_paths, BLOCK)]

    def job(b):
        first, count = b
        keep = max(0, min(keep_segments - first, count))
        return _run_block(dyn, cfg, m, first, count, inits, keep, want_trace)

    n_workers = worker_count(cfg.workers)
    if n_workers == 1:
        parts = [job(b) for b in blocks]
    else:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            parts = list(pool.map(job, blocks))

    sup = np.concatenate([p[0] for p in parts], axis=1)
    term = np.concatenate([p[1] for p in parts], axis=1)
    diff = np.concatenate([p[2] for p in parts], axis=0) if len(inits) == 2 else None
    segs = None
    if keep_segments:
        segs = np.concatenate([p[3] for p in parts if p[3] is not None and p[3].shape[1]], axis=1)
    trace = np.concatenate([p[4] for p in parts], axis=1) if want_trace else None
    times = cfg.record_steps() * cfg.h
    return times, sup, term, diff, segs, trace


def simulate_ensemble(dyn: Dynamics, xi: Segment, cfg: SimConfig, *, keep_segments: int = 0,
                      trace: bool = False) -> EnsembleResult:
    """Independent paths from ``xi``; moments are ``E ||X_t||_inf^2``."""
    times, sup, term, _, segs, tr = _run(dyn, cfg, [xi], keep_segments, trace)
    series = MomentSeries.from_samples(times, sup[0], cfg.h)
    return EnsembleResult(series, term[0], None if segs is None else segs[0],
                          None if tr is None else tr[0])


def simulate_coupled(dyn: Dynamics, xi: Segment, eta: Segment, cfg: SimConfig, *,
                     keep_segments: int = 0, trace: bool = False) -> CoupledResult:
    """Synchronous coupling: both solutions consume the same increments."""
    times, sup, term, diff, segs, tr = _run(dyn, cfg, [xi, eta], keep_segments, trace)
    return CoupledResult(
        moments=MomentSeries.from_samples(times, diff, cfg.h),
        moments_x=MomentSeries.from_samples(times, sup[0], cfg.h),
        terminal_x=term[0],
        terminal_y=term[1],
        trace_diff=None if tr is None else tr[0] - tr[1],
        segments_x=None if segs is None else segs[0],
        segments_y=None if segs is None else segs[1],
    )


@dataclass
class StationarySample:
    segments: np.ndarray  # (n_samples, m + 1, d)
    times: np.ndarray  # snapshot times
    burn_in: float
    spacing: float
    certified: bool

    @property
    def terminal(self) -> np.ndarray:
        return self.segments[:, -1, :]


def stationary_sampler(dyn: Dynamics, cfg: SimConfig, burn_in: float, n_samples: int,
                       *, xi: Segment | None = None, spacing: float | None = None,
                       certified: bool = True) -> StationarySample:
    """Approximate invariant-measure draws from long runs.

    ``cfg.n_paths`` chains run in parallel from ``xi`` (zero by default);
    after ``burn_in`` each emits ``ceil(n_samples / n_paths)`` snapshots
    ``spacing`` apart (at least ``r0``).  ``certified`` records whether a
    feasibility certificate backs the existence of the invariant law.
    """
    m = cfg.steps_per_delay(dyn.r0)
    spacing = dyn.r0 if spacing is None else spacing
    if spacing < dyn.r0 - 1e-12:
        raise ConfigError("snapshot spacing must be at least r0")
    per_chain = math.ceil(n_samples / cfg.n_paths)
    rec = [burn_in + j * spacing for j in range(per_chain)]
    T = rec[-1]
    run = SimConfig(h=cfg.h, T=T, n_paths=cfg.n_paths, seed=cfg.seed, record_times=tuple(rec),
                    noise=cfg.noise, workers=cfg.workers)
    xi = xi if xi is not None else Segment.zero(dyn.r0, m, dyn.d)
    times, _, _, _, segs, _ = _run(dyn, run, [xi], keep_segments=cfg.n_paths)
    # (n_paths, n_rec, m+1, d) -> chain-major, then truncate
    flat = segs[0].reshape(-1, m + 1, dyn.d)[:n_samples]
    return StationarySample(flat, times, burn_in, spacing, certified)
