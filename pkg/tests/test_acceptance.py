"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line."""

import itertools
import json
import math
import time

import numpy as np
import pytest

from fsde.constants import (
    ModelParams,
    TuningParams,
    gamma_fn,
    lambda0,
    lambda_big,
    sigma_lambda,
    upsilon,
)
from fsde.engine import Dynamics, SimConfig, simulate_coupled, simulate_ensemble, stationary_sampler
from fsde.experiment import PRESETS, parse_config, preset, read_csv, run_experiment
from fsde.metrics import (
    DiscreteDist,
    fit_rate,
    pinsker_check,
    segment_cost_matrix,
    w2_supnorm_assignment,
)
from fsde.engine import MomentSeries
from fsde.pathspace import DriftSpec, Segment
from fsde.zvonkin import (
    GridConfig,
    OUParams,
    bismut_gradient_mc,
    model_for_drift,
    ou_apply,
    solve_zvonkin,
    verify_gradient_bounds,
)

WORKER_COUNTS = (1, 2, 8)


@pytest.fixture(scope="module")
def suite_runs(tmp_path_factory):
    """Every preset run once per worker count; returns {workers: {preset: (dir, code)}}."""
    out = {}
    for w in WORKER_COUNTS:
        base = tmp_path_factory.mktemp(f"workers{w}")
        runs = {}
        for name in PRESETS:
            t0 = time.perf_counter()
            code = run_experiment(parse_config(preset(name)), base / name, workers=w)
            runs[name] = (base / name, code, time.perf_counter() - t0)
        out[w] = runs
    return out


def _load(run_dir, name):
    return json.loads((run_dir / name).read_text())


def test_c01_constants_reduce_without_drift(criterion):
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        beta, lam_B, r0 = rng.uniform(0.1, 5), rng.uniform(0, 3), rng.uniform(0.01, 2)
        delta, eps, lam = rng.uniform(0.01, 0.99), rng.uniform(0.01, 0.99), 10 ** rng.uniform(-3, 3)
        p = ModelParams(beta=beta, kappa=0.0, alpha=rng.uniform(0.05, 0.95), b_inf=0.0,
                        lambda_B=lam_B, B_inf=rng.uniform(0, 3), r0=r0)
        got = lambda_big(p, TuningParams(delta, eps, lam))
        ref = 2 / (1 - eps) * ((1 + delta) * delta * lam + beta * delta + (1 + delta) ** 2 * lam_B)
        worst = max(worst, abs(got - ref) / abs(ref))
    dt = time.perf_counter() - t0
    criterion(1, "constants reduction with zero drift", worst <= 1e-14 and dt < 1.0,
              f"max rel err {worst:.2e}, {dt:.2f}s")


def test_c02_sigma_lambda_identity(criterion):
    rng = np.random.default_rng(102)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        p = ModelParams(beta=rng.uniform(0.1, 5), kappa=rng.uniform(0, 3), alpha=rng.uniform(0.05, 0.95),
                        b_inf=rng.uniform(0, 3), lambda_B=rng.uniform(0, 3), B_inf=rng.uniform(0, 3),
                        r0=rng.uniform(0.01, 2), d=int(rng.integers(1, 4)))
        delta, eps = rng.uniform(0.01, 0.99), rng.uniform(0.01, 0.99)
        lam = max(lambda0(p, delta), 1e-3) * (1.01 + 10 ** rng.uniform(-2, 2))
        t = TuningParams(delta, eps, lam)
        ups = upsilon(p, lam, delta)
        lhs = sigma_lambda(p, t) / (1 - eps) + 4 * ups**2 / ((1 - delta) ** 4 * eps * (1 - eps))
        rhs = lambda_big(p, t) / (1 - delta) ** 2
        worst = max(worst, abs(lhs - rhs) / abs(rhs))
    dt = time.perf_counter() - t0
    criterion(2, "Sigma/Lambda identity", worst <= 1e-12 and dt < 1.0,
              f"max rel err {worst:.2e}, {dt:.2f}s")


def test_c03_gamma(criterion):
    t0 = time.perf_counter()
    half = abs(gamma_fn(0.5) - math.sqrt(math.pi)) / math.sqrt(math.pi)
    xs = np.linspace(0.1, 5.0, 491)
    rec = max(abs(gamma_fn(x + 1) - x * gamma_fn(x)) / gamma_fn(x + 1) for x in xs)
    dt = time.perf_counter() - t0
    criterion(3, "gamma at 1/2 and recurrence", max(half, rec) <= 1e-11 and dt < 1.0,
              f"half {half:.1e}, recurrence {rec:.1e}, {dt:.2f}s")


def test_c04_zvonkin_solver(criterion):
    b = DriftSpec.holder_power(1.0, 0.5, 1.0)
    params = model_for_drift(b, 1.0)
    lam = 2 * lambda0(params, 0.5)
    t0 = time.perf_counter()
    fld = solve_zvonkin(b, OUParams(1.0), lam, 0.5, GridConfig())
    rep = verify_gradient_bounds(fld, params, 0.5, lam, b)
    dt = time.perf_counter() - t0
    contraction_cap = math.sqrt(math.pi) * params.b_inf / math.sqrt(lam) * 1.05
    ups = upsilon(params, lam, 0.5)
    parts = {
        "a": fld.residual < 1e-6,
        "b": fld.observed_contraction <= contraction_cap,
        "c": rep.max_du <= 0.5 * 1.002,
        "d": rep.max_d2u <= ups * 1.05,
        "e": rep.pde_residual < 1e-3 * rep.pde_scale,
    }
    detail = (f"residual {fld.residual:.1e}, contraction {fld.observed_contraction:.3f}/{contraction_cap:.3f}, "
              f"|u'| {rep.max_du:.4f}, |u''| {rep.max_d2u:.3f}/{ups:.1f}, "
              f"pde {rep.pde_residual:.1e}/{1e-3 * rep.pde_scale:.1e}, {dt:.1f}s")
    failed = "".join(k for k, v in parts.items() if not v)
    criterion(4, "Zvonkin fixed point" + (f" (failed: {failed})" if failed else ""),
              all(parts.values()) and dt < 60, detail)


def test_c05_bismut_gradient(criterion):
    ou = OUParams(1.0)
    rng = np.random.default_rng(105)
    t0 = time.perf_counter()
    fails = []
    for t in (0.5, 1.0):
        mean, se = bismut_gradient_mc(lambda z: z, t, 0.3, ou, n_samples=100_000, seed=1)
        if abs(mean - math.exp(-t)) > 3 * se:
            fails.append(("identity", t))
    for case in range(20):
        coef = rng.normal(size=4)
        t, x = rng.uniform(0.2, 2.0), rng.uniform(-2, 2)
        f = np.polynomial.Polynomial(coef)
        step = 1e-4
        # Gauss-Hermite is exact on cubics, so the difference quotient is the only error (O(step^2))
        fd = (ou_apply(f, t, x + step, ou) - ou_apply(f, t, x - step, ou)) / (2 * step)
        mean, se = bismut_gradient_mc(f, t, x, ou, n_samples=100_000, seed=100 + case)
        if abs(mean - fd) > 3 * se:
            fails.append((case, mean, fd, se))
    dt = time.perf_counter() - t0
    criterion(5, "Bismut gradient estimator", not fails and dt < 60,
              f"{len(fails)} of 22 outside 3 SE, {dt:.1f}s")


def test_c06_ou_exactness(criterion):
    r0, m = 0.1, 64
    h, beta = r0 / m, 1.0
    dyn = Dynamics(beta, r0)
    cfg = SimConfig(h=h, T=6.0, n_paths=1000, seed=6)
    xi, eta = Segment.constant(r0, m, 1.0), Segment.constant(r0, m, -1.0)
    t0 = time.perf_counter()
    res = simulate_coupled(dyn, xi, eta, cfg, trace=True)
    x = simulate_ensemble(dyn, xi, cfg, trace=True).trace[:, :, 0]
    y = simulate_ensemble(dyn, eta, cfg, trace=True).trace[:, :, 0]
    dt = time.perf_counter() - t0
    k = np.arange(cfg.n_steps + 1)
    exact = (1 - beta * h) ** k * 2.0
    err = np.abs(res.trace_diff[:, :, 0] - exact)
    # rounding budget: a few ulps of the operands per step, accumulated
    budget = 8 * np.finfo(float).eps * np.cumsum(np.abs(x) + np.abs(y), axis=1)
    same = np.array_equal(x - y, res.trace_diff[:, :, 0])
    ok = bool(np.all(err <= budget)) and same and dt < 5
    criterion(6, "OU coupled difference is deterministic", ok,
              f"max abs err {err.max():.1e}, max err/budget {np.max(err / budget):.2f}, {dt:.1f}s")


def test_c07_contraction_domination(criterion, suite_runs):
    run, code, dt = suite_runs[1]["feasible-lipschitz"]
    mom, bnd = read_csv(run / "moments.csv"), read_csv(run / "bound.csv")
    times_ok = np.allclose(mom["t"], np.arange(1, 13) * 0.5)
    upper = mom["estimate"] + mom["ci95"]
    ok = times_ok and bool(np.all(upper <= bnd["bound"])) and dt < 300
    criterion(7, "coupled moment under contraction bound", ok,
              f"max upper/bound {np.max(upper / bnd['bound']):.3f}, run {dt:.1f}s")


def test_c08_rate_fit(criterion, suite_runs):
    run = suite_runs[1]["feasible-lipschitz"][0]
    doc = _load(run, "ratefit.json")
    fit, k2 = doc["fit"], doc["certificate_kappa2"]
    criterion(8, "fitted rate vs certified rate", fit["kappa2"] >= k2 - fit["ci"],
              f"fit {fit['kappa2']:.4f} +- {fit['ci']:.4f}, certified {k2:.4f}")


def test_c09_moment_domination(criterion, suite_runs):
    lines = []
    ok = True
    for name in ("feasible-lipschitz", "holder-drift"):
        run, _, dt = suite_runs[1][name]
        mdoc = _load(run, "moment.json")
        mx, mb = read_csv(run / "moments_x.csv"), read_csv(run / "moment_bound.csv")
        upper = mx["estimate"] + mx["ci95"]
        this = mdoc["valid"] and bool(np.all(upper <= mb["bound"])) and dt < 300
        ok = ok and this
        lines.append(f"{name}: max upper/bound {np.max(upper / mb['bound']):.3f}")
    b_inf = preset("holder-drift")["model"]["b_inf"]
    criterion(9, "second moment under uniform bound", ok and b_inf > 0, "; ".join(lines))


def test_c10_metric_oracles(criterion):
    rng = np.random.default_rng(110)
    t0 = time.perf_counter()
    exact = True
    for _ in range(50):
        a, b = rng.normal(size=(6, 5, 1)), rng.normal(size=(6, 5, 1))
        cost = segment_cost_matrix(a, b)
        brute = min(cost[np.arange(6), list(p)].sum() for p in itertools.permutations(range(6)))
        exact &= w2_supnorm_assignment(a, b) == math.sqrt(brute / 6)
    pinsker = True
    for _ in range(1000):
        k = int(rng.integers(2, 25))
        atoms = np.arange(k)
        p = DiscreteDist(atoms, rng.dirichlet(np.ones(k)))
        q = DiscreteDist(atoms, rng.dirichlet(np.full(k, rng.uniform(0.1, 3))))
        pinsker &= pinsker_check(p, q).holds
    worst = 0.0
    for _ in range(50):
        k1, k2 = 10 ** rng.uniform(-2, 2), rng.uniform(0.05, 5)
        t = np.linspace(0.5, 6, 12)
        fit = fit_rate(MomentSeries(t, k1 * np.exp(-k2 * t), np.zeros(12), 0.01, 1), r0=0.1)
        worst = max(worst, abs(fit.kappa2 - k2) / k2, abs(fit.kappa1 - k1) / k1)
    dt = time.perf_counter() - t0
    criterion(10, "metric oracles", exact and pinsker and worst <= 1e-10 and dt < 30,
              f"assignment exact {exact}, pinsker {pinsker}, fit rel err {worst:.1e}, {dt:.1f}s")


def test_c11_stationary(criterion, suite_runs):
    beta = 1.0
    t0 = time.perf_counter()
    s = stationary_sampler(Dynamics(beta, 0.1), SimConfig(h=0.1 / 64, T=0.1 / 64, n_paths=10_000, seed=11),
                           burn_in=10.0, n_samples=10_000)
    x = s.terminal[:, 0]
    var = x.var(ddof=1)
    se = var * math.sqrt(2 / (x.size - 1))
    var_ok = abs(var - 1 / (2 * beta)) <= 3 * se
    dt = time.perf_counter() - t0
    decay = _load(suite_runs[1]["feasible-lipschitz"][0], "stationary.json")["decay"]
    ok = var_ok and decay["tv_trend_ok"] and decay["kl_trend_ok"] and decay["t"] == [1, 2, 4, 6]
    tv = ", ".join(f"{v:.3f}" for v in decay["tv"])
    kl = ", ".join(f"{v:.4f}" for v in decay["kl"])
    criterion(11, "stationary variance and decay toward it", ok and dt < 300,
              f"var {var:.4f} vs {1 / (2 * beta)} (se {se:.4f}); TV [{tv}]; KL [{kl}]")


def test_c12_determinism(criterion, suite_runs):
    mismatched = []
    n_files = 0
    for name in PRESETS:
        ref_dir = suite_runs[1][name][0]
        files = sorted(p.name for p in ref_dir.iterdir() if p.suffix in (".csv", ".json")
                       and p.name != "runtime.json")
        n_files += len(files)
        for w in WORKER_COUNTS[1:]:
            other = suite_runs[w][name][0]
            other_files = sorted(p.name for p in other.iterdir() if p.suffix in (".csv", ".json")
                                 and p.name != "runtime.json")
            if other_files != files:
                mismatched.append((name, w, "file set"))
                continue
            for f in files:
                if (ref_dir / f).read_bytes() != (other / f).read_bytes():
                    mismatched.append((name, w, f))
    codes = {w: [suite_runs[w][n][1] for n in PRESETS] for w in WORKER_COUNTS}
    total = sum(sum(r[2] for r in suite_runs[w].values()) for w in WORKER_COUNTS)
    ok = not mismatched and len(set(map(tuple, codes.values()))) == 1 and total < 600
    criterion(12, "byte-identical artifacts under 1, 2, 8 workers", ok,
              f"{n_files} files per suite, mismatches {mismatched}, suite time {total:.0f}s")
