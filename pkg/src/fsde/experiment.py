"""Experiment configs, presets and the staged run pipeline.

A run directory holds plain data files written with fixed formatting, so
equal ``(config, seed)`` reproduce them byte for byte.  Wall-clock time
and worker count go to ``runtime.json``, the one file allowed to differ
between reruns.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .constants import (
    ModelParams,
    SearchConfig,
    TuningParams,
    best_moment_tuning,
    certificate,
    contraction_bound,
    feasibility_search,
    lambda0,
    lambda_big,
    moment_bound,
    sigma_lambda,
    upsilon,
)
from .engine import (
    ConfigError,
    CoupledResult,
    Dynamics,
    MomentSeries,
    SimConfig,
    simulate_coupled,
    simulate_ensemble,
    stationary_sampler,
)
from .metrics import EstimatorError, divergence_estimators, fit_rate, w2_1d
from .pathspace import DriftSpec, FunctionalSpec, Segment, format_float

EXIT_OK = 0
EXIT_BOUND = 2
EXIT_INFEASIBLE = 3
EXIT_CONFIG = 4

DECAY_TIMES = (1.0, 2.0, 4.0, 6.0)


class StageError(RuntimeError):
    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass
class ExperimentConfig:
    name: str
    model: ModelParams
    drift_b: DriftSpec
    drift_B: FunctionalSpec
    sim: SimConfig
    tuning: TuningParams | str | None  # "auto", explicit, or None to skip
    xi: dict | str
    eta: dict | str
    moment: dict | str | None = None
    stationary: dict | None = None
    zvonkin: dict | None = None
    outputs: str | None = None
    raw: dict = field(default_factory=dict)

    @property
    def m(self) -> int:
        return self.sim.steps_per_delay(self.model.r0)

    @property
    def dynamics(self) -> Dynamics:
        return Dynamics(self.model.beta, self.model.r0, self.drift_b, self.drift_B, self.model.d)

    def segment(self, which: str) -> Segment:
        spec = self.xi if which == "xi" else self.eta
        return Segment.from_preset(spec, self.model.r0, self.m, self.model.d)

    def digest(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _sim_from(data: dict, r0: float) -> SimConfig:
    h = data.get("h")
    if h is None:
        h = r0 / data.get("m", 64)
    return SimConfig(
        h=float(h),
        T=float(data["T"]),
        n_paths=int(data.get("n_paths", 10_000)),
        seed=int(data.get("seed", 0)),
        record_times=tuple(float(t) for t in data.get("record_times", ())),
        noise=bool(data.get("noise", True)),
    )


def parse_config(data: dict) -> ExperimentConfig:
    """Validate a config document; raises :class:`ConfigError` on any inconsistency."""
    try:
        model = ModelParams.from_dict(data["model"])
        drift_b = DriftSpec.from_dict(data.get("drift_b", {"kind": "zero"}))
        drift_B = FunctionalSpec.from_dict(data.get("drift_B", {"kind": "zero"}))
        sim = _sim_from(data["sim"], model.r0)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed config: {exc}") from exc

    d = model.d
    tol = 1e-12
    checks = [
        ("kappa", model.kappa, drift_b.declared_kappa(d)),
        ("b_inf", model.b_inf, drift_b.declared_b_inf(d)),
        ("lambda_B", model.lambda_B, drift_B.declared_lambda_B(d)),
        ("B_inf", model.B_inf, drift_B.declared_B_inf(d)),
    ]
    for name, declared_model, declared_spec in checks:
        if declared_model < declared_spec * (1 - tol):
            raise ConfigError(
                f"model.{name}={declared_model} is below the drift's certified {declared_spec}"
            )
    if drift_b.kind != "zero" and abs(model.alpha - drift_b.alpha) > tol:
        raise ConfigError("model.alpha must equal the drift's Hölder exponent")
    sim.validate(Dynamics(model.beta, model.r0, drift_b, drift_B, d))

    tuning = data.get("tuning", "auto")
    if isinstance(tuning, dict):
        try:
            tuning = TuningParams(tuning["delta"], tuning["eps"], tuning["lambda"])
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"bad tuning: {exc}") from exc
    elif tuning not in ("auto", None):
        raise ConfigError(f"tuning must be 'auto', null or an object, got {tuning!r}")

    cfg = ExperimentConfig(
        name=data.get("name", "experiment"),
        model=model,
        drift_b=drift_b,
        drift_B=drift_B,
        sim=sim,
        tuning=tuning,
        xi=data.get("xi", {"constant": 1.0}),
        eta=data.get("eta", {"constant": -1.0}),
        moment=data.get("moment"),
        stationary=data.get("stationary"),
        zvonkin=data.get("zvonkin"),
        outputs=data.get("outputs"),
        raw=data,
    )
    try:
        cfg.segment("xi")
        cfg.segment("eta")
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(json.load(fh))


PRESETS = ("ou-pure", "feasible-lipschitz", "holder-drift", "infeasible")


def preset(name: str) -> dict:
    text = resources.files("fsde").joinpath("presets", f"{name}.json").read_text()
    return json.loads(text)


# ---------------------------------------------------------------------------
# file output


def write_json(obj, path) -> None:
    with open(path, "w", newline="\n") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, float) and not math.isfinite(obj):
        return "inf" if obj > 0 else ("-inf" if obj < 0 else "nan")
    return obj


def write_csv(path, header: list[str], columns: list) -> None:
    cols = [np.asarray(c) for c in columns]
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in zip(*cols):
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format_float(float(v))


def read_csv(path) -> dict:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return {name: data[:, j] for j, name in enumerate(header)}


def write_series(path, series: MomentSeries) -> None:
    write_csv(path, ["t", "estimate", "ci95"], [series.times, series.estimate, series.ci95])


def write_snapshots(path, times, segments: np.ndarray, r0: float) -> None:
    """Segment snapshots as rows ``(sample, t, time_offset, x_1..x_d)``.

    ``segments`` has shape ``(n_samples, n_times, m + 1, d)``.
    """
    n, nt, mp1, d = segments.shape
    offsets = -r0 + r0 * np.arange(mp1) / (mp1 - 1)
    header = ["sample", "t", "time_offset"] + [f"x_{j + 1}" for j in range(d)]
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for i in range(n):
            for k in range(nt):
                for s in range(mp1):
                    vals = [str(i), format_float(times[k]), format_float(offsets[s])]
                    vals += [format_float(v) for v in segments[i, k, s]]
                    fh.write(",".join(vals) + "\n")


# ---------------------------------------------------------------------------
# stages


def resolve_certificate(cfg: ExperimentConfig, grid: SearchConfig | None = None):
    """Return ``(certificate or None, search report dict or None)``."""
    if cfg.tuning is None:
        return None, None
    if cfg.tuning == "auto":
        result = feasibility_search(cfg.model, grid)
        return result.best, result.to_dict()
    return certificate(cfg.model, cfg.tuning), None


def constants_report(model: ModelParams, tuning: TuningParams) -> dict:
    cert = certificate(model, tuning)
    return {
        "model": model.to_dict(),
        "lambda0": lambda0(model, tuning.delta),
        "upsilon": upsilon(model, tuning.lam, tuning.delta),
        "lambda_big": lambda_big(model, tuning),
        "sigma": sigma_lambda(model, tuning),
        "certificate": cert.to_dict(),
    }


def resolve_moment_tuning(cfg: ExperimentConfig):
    if cfg.moment is None:
        return None
    B0 = cfg.drift_B.B_at_zero
    if cfg.moment == "auto":
        found = best_moment_tuning(cfg.model, B0)
        return found
    return float(cfg.moment["eps"]), float(cfg.moment["eps_moment"])


def zvonkin_stage(cfg: ExperimentConfig, out, overrides: dict | None = None):
    """Solve and verify the smoothing PDE for ``cfg.drift_b``; writes field and diagnostics."""
    from .zvonkin import (GridConfig, OUParams, QuadratureConfig, diagnostics, solve_zvonkin,
                          verify_gradient_bounds)

    z = {**(cfg.zvonkin or {}), **(overrides or {})}
    delta = float(z.get("delta", 0.5))
    zmodel = replace(cfg.model, d=1)
    lam = z.get("lambda")
    lam = float(lam) if lam is not None else float(z.get("lambda_factor", 2.0)) * lambda0(zmodel, delta)
    fld = solve_zvonkin(cfg.drift_b, OUParams(cfg.model.beta), lam, delta,
                        GridConfig(int(z.get("n_x", 32001))),
                        QuadratureConfig(int(z.get("n_hermite", 32)), int(z.get("n_t", 128))),
                        tol=float(z.get("tol", 1e-8)), params=zmodel)
    rep = verify_gradient_bounds(fld, zmodel, delta, lam, cfg.drift_b)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    fld.to_csv(out / "zvonkin_field.csv")
    diag = diagnostics(fld, rep)
    diag.update({"delta": delta, "model": zmodel.to_dict(), "drift_b": cfg.drift_b.to_dict()})
    write_json(diag, out / "zvonkin.json")
    return rep


def decay_profile(cfg: ExperimentConfig, coupled: CoupledResult, stat_terminal: np.ndarray,
                  times=DECAY_TIMES) -> dict:
    """Histogram TV/KL and 1-D W2 between ``X(t)`` marginals and stationary draws.

    Bins cover the central 99% of the stationary draws; outside values are
    clipped into the edge bins so the reference histogram has no empty bin.
    """
    rec = coupled.moments.times
    ref = stat_terminal[:, 0]
    lo, hi = np.quantile(ref, [0.005, 0.995])
    out = {"t": [], "tv": [], "kl": [], "w2": [], "value_range": [float(lo), float(hi)]}
    for t in times:
        idx = np.flatnonzero(np.abs(rec - t) < 1e-9)
        if not idx.size:
            continue
        x = coupled.terminal_x[:, idx[0], 0]
        tv, kl = divergence_estimators(x, ref, value_range=(lo, hi))
        out["t"].append(float(t))
        out["tv"].append(tv)
        out["kl"].append(kl)
        out["w2"].append(w2_1d(x, ref))
    return out


def trend_ok(values, max_inversions: int = 1) -> bool:
    """Decreasing overall, with at most ``max_inversions`` adjacent increases."""
    v = list(values)
    if len(v) < 2:
        return True
    ups = sum(1 for a, b in zip(v, v[1:]) if b > a)
    return ups <= max_inversions and v[-1] < v[0]


def run_experiment(cfg: ExperimentConfig, out_dir=None, *, workers: int | None = None,
                   search_grid: SearchConfig | None = None) -> int:
    """Execute constants -> zvonkin -> couple -> stationary -> metrics.

    Returns the exit code (0 ok, 2 bound violation, 3 infeasible).
    """
    started = time.perf_counter()
    out = Path(out_dir or cfg.outputs or f"runs/{cfg.name}")
    out.mkdir(parents=True, exist_ok=True)
    stages = {}
    checks = {}
    sim = replace(cfg.sim, workers=workers)

    # constants
    cert, search = resolve_certificate(cfg, search_grid)
    if cfg.tuning == "auto" and cert is None:
        write_json(search, out / "search.json")
        stages["constants"] = "infeasible"
        _write_manifest(out, cfg, stages, checks, None, started, workers)
        return EXIT_INFEASIBLE
    if search is not None:
        write_json(search, out / "search.json")
    if cert is not None:
        write_json(constants_report(cfg.model, cert.tuning), out / "constants.json")
    stages["constants"] = "ok"

    # zvonkin (optional)
    if cfg.zvonkin and cfg.drift_b.kind != "zero":
        rep = zvonkin_stage(cfg, out)
        checks["zvonkin_bounds"] = rep.passed
        stages["zvonkin"] = "ok" if rep.passed else "bound_violation"

    # couple
    xi, eta = cfg.segment("xi"), cfg.segment("eta")
    coupled = simulate_coupled(cfg.dynamics, xi, eta, sim, keep_segments=4)
    write_series(out / "moments.csv", coupled.moments)
    write_series(out / "moments_x.csv", coupled.moments_x)
    write_snapshots(out / "segments.csv", coupled.moments.times, coupled.segments_x, cfg.model.r0)
    stages["couple"] = "ok"

    times = coupled.moments.times
    init_sq = float(np.max(np.sum((xi.values - eta.values) ** 2, axis=1)))
    if cert is not None:
        bound = contraction_bound(cfg.model, cert.tuning, times, init_sq)
        write_csv(out / "bound.csv", ["t", "bound"], [times, bound])
        checks["contraction_domination"] = bool(np.all(coupled.moments.upper <= bound))
        if cert.feasible:
            try:
                fit = fit_rate(coupled.moments, r0=cfg.model.r0)
            except EstimatorError as exc:
                write_json({"skipped": str(exc)}, out / "ratefit.json")
            else:
                ok = fit.kappa2 >= cert.kappa2 - fit.ci
                checks["rate_vs_kappa2"] = bool(ok)
                write_json({"fit": fit.to_dict(), "certificate_kappa2": cert.kappa2,
                            "passed": bool(ok)}, out / "ratefit.json")

    mt = resolve_moment_tuning(cfg)
    if mt is not None:
        eps, eps_m = mt
        xi_sq = float(np.max(np.sum(xi.values**2, axis=1)))
        mb, mcert = moment_bound(cfg.model, eps, eps_m, xi_sq, cfg.drift_B.B_at_zero, times)
        write_csv(out / "moment_bound.csv", ["t", "bound"], [times, mb])
        write_json({"eps": eps, "eps_moment": eps_m, "gamma": mcert.gamma_const,
                    "transient_rate": mcert.transient_rate,
                    "asymptotic_bound": mcert.asymptotic_bound, "valid": mcert.valid},
                   out / "moment.json")
        if mcert.valid:
            checks["moment_domination"] = bool(np.all(coupled.moments_x.upper <= mb))

    # stationary (optional)
    if cfg.stationary:
        st = cfg.stationary
        scfg = SimConfig(h=sim.h, T=sim.h, n_paths=int(st.get("n_chains", sim.n_paths)),
                         seed=int(st.get("seed", sim.seed + 1)), workers=workers)
        sample = stationary_sampler(cfg.dynamics, scfg, float(st.get("burn_in", 10.0)),
                                    int(st.get("n_samples", scfg.n_paths)),
                                    certified=cert is not None and cert.feasible)
        keep = min(4, sample.segments.shape[0])
        write_snapshots(out / "stationary_segments.csv", sample.times[:1],
                        sample.segments[:keep, None], cfg.model.r0)
        term = sample.terminal
        var = float(np.var(term[:, 0], ddof=1))
        n = term.shape[0]
        stat = {"n_samples": n, "burn_in": sample.burn_in, "spacing": sample.spacing,
                "terminal_mean": float(term[:, 0].mean()), "terminal_var": var,
                "terminal_var_se": var * math.sqrt(2.0 / (n - 1)),
                "certified": sample.certified}
        stages["stationary"] = "ok"
        stat["decay"] = decay_profile(cfg, coupled, term)
        stat["decay"]["tv_trend_ok"] = trend_ok(stat["decay"]["tv"])
        stat["decay"]["kl_trend_ok"] = trend_ok(stat["decay"]["kl"])
        write_json(stat, out / "stationary.json")
        stages["metrics"] = "ok"

    _write_manifest(out, cfg, stages, checks, cert, started, workers)
    return EXIT_OK if all(checks.values()) else EXIT_BOUND


def _write_manifest(out, cfg, stages, checks, cert, started, workers):
    manifest = {
        "name": cfg.name,
        "config_hash": cfg.digest(),
        "seed": cfg.sim.seed,
        "h": cfg.sim.h,
        "tool_version": __version__,
        "stages": stages,
        "checks": checks,
        "constants_digest": None if cert is None else hashlib.sha256(
            json.dumps(_jsonable(cert.to_dict()), sort_keys=True).encode()).hexdigest(),
        "runtime_log": "runtime.json",
    }
    tmp = Path(out) / "manifest.json.tmp"
    write_json(manifest, tmp)
    tmp.replace(Path(out) / "manifest.json")
    write_json({"wall_clock_s": round(time.perf_counter() - started, 3), "workers": workers},
               Path(out) / "runtime.json")


# ---------------------------------------------------------------------------
# report

_REQUIRED = {"manifest.json": "run", "moments.csv": "couple"}


def emit_report(run_dir) -> dict:
    """Merge a run directory into ``report.json`` and ``curves.csv``.

    Idempotent: the report carries no timing information.
    """
    run = Path(run_dir)
    for name, stage in _REQUIRED.items():
        if not (run / name).exists():
            raise StageError(stage, f"missing artifact {name} in {run}")
    with open(run / "manifest.json") as fh:
        manifest = json.load(fh)
    mom = read_csv(run / "moments.csv")
    report = {"manifest": manifest, "curves": {}}

    cols = [mom["t"], mom["estimate"], mom["ci95"]]
    header = ["t", "empirical", "ci95"]
    if (run / "bound.csv").exists():
        bnd = read_csv(run / "bound.csv")
        cols.append(bnd["bound"])
        header.append("bound")
        report["curves"]["contraction"] = {
            "max_ratio_upper_to_bound": float(np.max((mom["estimate"] + mom["ci95"]) / bnd["bound"]))
        }
    write_csv(run / "curves.csv", header, cols)

    if (run / "moment_bound.csv").exists():
        mx = read_csv(run / "moments_x.csv")
        mb = read_csv(run / "moment_bound.csv")
        write_csv(run / "moment_curves.csv", ["t", "empirical", "ci95", "bound"],
                  [mx["t"], mx["estimate"], mx["ci95"], mb["bound"]])
        report["curves"]["moment"] = {
            "max_ratio_upper_to_bound": float(np.max((mx["estimate"] + mx["ci95"]) / mb["bound"]))
        }
    for name in ("ratefit.json", "stationary.json", "zvonkin.json", "constants.json", "moment.json"):
        if (run / name).exists():
            with open(run / name) as fh:
                doc = json.load(fh)
            doc.pop("history", None)
            report[name.removesuffix(".json")] = doc
    write_json(report, run / "report.json")
    return report
