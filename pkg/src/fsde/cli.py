"""Command-line entry point: ``fsde <command> ...``.

Exit codes: 0 success, 2 a bound was violated, 3 no feasible tuning,
4 invalid configuration or missing inputs.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .constants import (
    DomainError,
    ModelParams,
    PreconditionError,
    SearchConfig,
    SearchConfigError,
    TuningParams,
    feasibility_search,
)
from .engine import BlowUpError, ConfigError, simulate_coupled, simulate_ensemble, stationary_sampler
from .experiment import (
    EXIT_BOUND,
    EXIT_CONFIG,
    EXIT_INFEASIBLE,
    EXIT_OK,
    PRESETS,
    StageError,
    constants_report,
    emit_report,
    parse_config,
    preset,
    read_csv,
    run_experiment,
    write_csv,
    write_json,
    write_series,
    write_snapshots,
    zvonkin_stage,
)
from .metrics import (
    DiscreteDist,
    EstimatorError,
    divergence_estimators,
    fit_rate,
    pinsker_check,
    w2_1d,
)
from .engine import MomentSeries


def _load_doc(ref: str) -> dict:
    path = Path(ref)
    if path.exists():
        with open(path) as fh:
            return json.load(fh)
    if ref in PRESETS:
        return preset(ref)
    raise ConfigError(f"no config file or preset named {ref!r}")


def _model_and_tuning(doc: dict):
    model = ModelParams.from_dict(doc["model"] if "model" in doc else doc)
    tuning = doc.get("tuning") if "model" in doc else None
    return model, tuning


def _emit(obj, out: str | None) -> None:
    if out:
        write_json(obj, out)
    else:
        from .experiment import _jsonable

        json.dump(_jsonable(obj), sys.stdout, indent=2, sort_keys=True)
        sys.stdout.write("\n")


def _search_grid(args) -> SearchConfig:
    kw = {}
    for name in ("n_delta", "n_eps", "n_lambda"):
        v = getattr(args, name, None)
        if v is not None:
            kw[name] = v
    return SearchConfig(**kw)


# --- constants --------------------------------------------------------------


def cmd_constants_eval(args) -> int:
    model, tuning = _model_and_tuning(_load_doc(args.config))
    if args.delta is not None:
        tuning = TuningParams(args.delta, args.eps, args.lam)
    elif isinstance(tuning, dict):
        tuning = TuningParams(tuning["delta"], tuning["eps"], tuning["lambda"])
    else:
        best = feasibility_search(model).best
        if best is None:
            _emit({"verdict": "infeasible"}, args.out)
            return EXIT_INFEASIBLE
        tuning = best.tuning
    _emit(constants_report(model, tuning), args.out)
    return EXIT_OK


def cmd_constants_search(args) -> int:
    model, _ = _model_and_tuning(_load_doc(args.config))
    result = feasibility_search(model, _search_grid(args))
    _emit(result.to_dict(), args.out)
    return EXIT_OK if result.best is not None else EXIT_INFEASIBLE


# --- zvonkin -----------------------------------------------------------------


def cmd_zvonkin_solve(args) -> int:
    cfg = parse_config(_load_doc(args.config))
    overrides = {k: v for k, v in (("delta", args.delta), ("lambda", args.lam), ("n_x", args.n_x),
                                   ("n_t", args.n_t), ("n_hermite", args.n_hermite)) if v is not None}
    rep = zvonkin_stage(cfg, args.out, overrides)
    print(json.dumps(rep.to_dict(), indent=2))
    return EXIT_OK if rep.passed else EXIT_BOUND


def cmd_zvonkin_verify(args) -> int:
    from .pathspace import DriftSpec
    from .zvonkin import GridField, verify_gradient_bounds

    run = Path(args.dir)
    for name in ("zvonkin.json", "zvonkin_field.csv"):
        if not (run / name).exists():
            raise StageError("zvonkin", f"missing artifact {name} in {run}")
    with open(run / "zvonkin.json") as fh:
        diag = json.load(fh)
    fld = GridField.from_csv(run / "zvonkin_field.csv", diag["lambda"])
    rep = verify_gradient_bounds(fld, ModelParams.from_dict(diag["model"]), diag["delta"],
                                 diag["lambda"], DriftSpec.from_dict(diag["drift_b"]))
    print(json.dumps(rep.to_dict(), indent=2))
    return EXIT_OK if rep.passed else EXIT_BOUND


# --- simulation ---------------------------------------------------------------


def _sim_cfg(args):
    from dataclasses import replace

    cfg = parse_config(_load_doc(args.config))
    sim = replace(cfg.sim, workers=args.workers)
    if args.seed is not None:
        sim = replace(sim, seed=args.seed)
    if args.n_paths is not None:
        sim = replace(sim, n_paths=args.n_paths)
    return cfg, sim


def _terminal_csv(path, times, columns: dict) -> None:
    n, nt = next(iter(columns.values())).shape[:2]
    idx = np.repeat(np.arange(n), nt)
    tt = np.tile(times, n)
    names = list(columns)
    write_csv(path, ["path", "t"] + names, [idx, tt] + [columns[k].reshape(-1) for k in names])


def cmd_simulate(args) -> int:
    cfg, sim = _sim_cfg(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = simulate_ensemble(cfg.dynamics, cfg.segment("xi"), sim, keep_segments=args.keep)
    write_series(out / "moments.csv", res.moments)
    _terminal_csv(out / "terminal.csv", res.moments.times, {"x": res.terminal[:, :, 0]})
    if args.keep:
        write_snapshots(out / "segments.csv", res.moments.times, res.segments, cfg.model.r0)
    return EXIT_OK


def cmd_couple(args) -> int:
    cfg, sim = _sim_cfg(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = simulate_coupled(cfg.dynamics, cfg.segment("xi"), cfg.segment("eta"), sim,
                           keep_segments=args.keep)
    write_series(out / "moments.csv", res.moments)
    write_series(out / "moments_x.csv", res.moments_x)
    _terminal_csv(out / "terminal.csv", res.moments.times,
                  {"x": res.terminal_x[:, :, 0], "y": res.terminal_y[:, :, 0]})
    if args.keep:
        write_snapshots(out / "segments.csv", res.moments.times, res.segments_x, cfg.model.r0)
    return EXIT_OK


def cmd_stationary(args) -> int:
    cfg, sim = _sim_cfg(args)
    st = cfg.stationary or {}
    burn = args.burn_in if args.burn_in is not None else float(st.get("burn_in", 10.0))
    n = args.n_samples if args.n_samples is not None else int(st.get("n_samples", sim.n_paths))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sample = stationary_sampler(cfg.dynamics, sim, burn, n)
    write_csv(out / "samples.csv", ["sample", "x"],
              [np.arange(sample.terminal.shape[0]), sample.terminal[:, 0]])
    keep = min(args.keep, sample.segments.shape[0])
    if keep:
        write_snapshots(out / "segments.csv", sample.times[:1], sample.segments[:keep, None],
                        cfg.model.r0)
    return EXIT_OK


# --- metrics -----------------------------------------------------------------


def _column(path, name: str | None):
    data = read_csv(path)
    if name is None:
        name = list(data)[-1]
    if name not in data:
        raise EstimatorError(f"column {name!r} not in {path}")
    return data[name]


def cmd_metrics(args) -> int:
    kind = args.kind
    if kind == "fit":
        d = read_csv(args.a)
        series = MomentSeries(d["t"], d["estimate"], d["ci95"], h=float("nan"), n_paths=0)
        fit = fit_rate(series, tuple(args.window) if args.window else None, r0=args.r0)
        _emit(fit.to_dict(), None)
        return EXIT_OK
    if args.b is None:
        raise EstimatorError(f"metrics {kind} needs two inputs")
    if kind == "pinsker":
        p = read_csv(args.a)
        q = read_csv(args.b)
        res = pinsker_check(DiscreteDist(p["atom"], p["weight"]), DiscreteDist(q["atom"], q["weight"]))
        _emit(res.__dict__, None)
        return EXIT_OK if res.holds else EXIT_BOUND
    a = _column(args.a, args.column)
    b = _column(args.b, args.column)
    if kind == "w2":
        _emit({"w2": w2_1d(a, b)}, None)
    else:
        rng = tuple(args.range) if args.range else None
        tv, kl = divergence_estimators(a, b, args.bins, rng)
        _emit({"tv": tv} if kind == "tv" else {"kl": kl}, None)
    return EXIT_OK


# --- pipeline ----------------------------------------------------------------


def cmd_run(args) -> int:
    cfg = parse_config(_load_doc(args.config))
    code = run_experiment(cfg, args.out, workers=args.workers)
    out = args.out or cfg.outputs or f"runs/{cfg.name}"
    print(f"{cfg.name}: exit {code} -> {out}")
    return code


def cmd_report(args) -> int:
    report = emit_report(args.dir)
    print(json.dumps({"manifest": report["manifest"], "curves": report["curves"]}, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fsde", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("constants", help="evaluate or search contraction constants")
    csub = c.add_subparsers(dest="action", required=True)
    ev = csub.add_parser("eval")
    ev.add_argument("config")
    ev.add_argument("--delta", type=float)
    ev.add_argument("--eps", type=float)
    ev.add_argument("--lambda", dest="lam", type=float)
    ev.add_argument("--out")
    ev.set_defaults(func=cmd_constants_eval)
    se = csub.add_parser("search")
    se.add_argument("config")
    se.add_argument("--n-delta", type=int)
    se.add_argument("--n-eps", type=int)
    se.add_argument("--n-lambda", type=int)
    se.add_argument("--out")
    se.set_defaults(func=cmd_constants_search)

    z = sub.add_parser("zvonkin", help="solve or re-verify the smoothing PDE")
    zsub = z.add_subparsers(dest="action", required=True)
    zs = zsub.add_parser("solve")
    zs.add_argument("config")
    zs.add_argument("--out", required=True)
    zs.add_argument("--delta", type=float)
    zs.add_argument("--lambda", dest="lam", type=float)
    zs.add_argument("--n-x", type=int)
    zs.add_argument("--n-t", type=int)
    zs.add_argument("--n-hermite", type=int)
    zs.set_defaults(func=cmd_zvonkin_solve)
    zv = zsub.add_parser("verify")
    zv.add_argument("dir")
    zv.set_defaults(func=cmd_zvonkin_verify)

    for name, func, helptext in (
        ("simulate", cmd_simulate, "independent paths from xi"),
        ("couple", cmd_couple, "synchronously coupled paths from xi and eta"),
        ("stationary", cmd_stationary, "long-run draws from the invariant law"),
    ):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("config")
        s.add_argument("--out", required=True)
        s.add_argument("--seed", type=int)
        s.add_argument("--n-paths", type=int)
        s.add_argument("--workers", type=int)
        s.add_argument("--keep", type=int, default=4, help="segments to store")
        if name == "stationary":
            s.add_argument("--burn-in", type=float)
            s.add_argument("--n-samples", type=int)
        s.set_defaults(func=func)

    m = sub.add_parser("metrics", help="estimators on CSV samples")
    m.add_argument("kind", choices=["w2", "tv", "kl", "pinsker", "fit"])
    m.add_argument("a")
    m.add_argument("b", nargs="?")
    m.add_argument("--column")
    m.add_argument("--bins", type=int)
    m.add_argument("--range", type=float, nargs=2)
    m.add_argument("--window", type=float, nargs=2)
    m.add_argument("--r0", type=float)
    m.set_defaults(func=cmd_metrics)

    r = sub.add_parser("run", help="full pipeline from a config file or preset name")
    r.add_argument("config")
    r.add_argument("--out")
    r.add_argument("--workers", type=int)
    r.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="consolidate a run directory")
    rep.add_argument("dir")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DomainError, PreconditionError, SearchConfigError, StageError,
            EstimatorError, BlowUpError, KeyError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
