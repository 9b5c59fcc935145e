import math

import numpy as np
import pytest

from fsde.engine import (
    BLOCK,
    ConfigError,
    Dynamics,
    SimConfig,
    path_normals,
    simulate_coupled,
    simulate_ensemble,
    stationary_sampler,
)
from fsde.pathspace import DriftSpec, FunctionalSpec, Segment

R0 = 0.1
M = 16
H = R0 / M


def test_config_validation():
    dyn = Dynamics(1.0, R0)
    with pytest.raises(ConfigError):
        SimConfig(h=0.03, T=1.0).validate(dyn)
    with pytest.raises(ConfigError):
        SimConfig(h=0.1, T=1.0).validate(Dynamics(6.0, 0.1))  # h >= 1/(2 beta)
    with pytest.raises(ConfigError):
        SimConfig(h=H, T=1.0, record_times=(0.5, 0.25)).validate(dyn)
    with pytest.raises(ConfigError):
        SimConfig(h=H, T=1.0, record_times=(0.3333,)).validate(dyn)
    with pytest.raises(ConfigError):
        simulate_ensemble(dyn, Segment.zero(R0, 8), SimConfig(h=H, T=1.0, n_paths=4))


def test_normals_depend_only_on_path_index():
    a = path_normals(7, 0, 10, 50, 1)
    b = path_normals(7, 5, 3, 50, 1)
    np.testing.assert_array_equal(a[5:8], b)


def test_noise_free_matches_recursion():
    # deterministic delay equation x' = -x + 0.5 s(x(t - r0)), Euler by hand
    dyn = Dynamics(1.0, R0, drift_B=FunctionalSpec.terminal_saturated(0.5))
    cfg = SimConfig(h=H, T=1.0, n_paths=2, noise=False, record_times=(1.0,))
    res = simulate_ensemble(dyn, Segment.constant(R0, M, 1.0), cfg, trace=True)
    hist = [1.0] * (M + 1)
    for _ in range(cfg.n_steps):
        x = hist[-1]
        delayed = hist[-(M + 1)]
        hist.append(x + H * (-x + 0.5 * delayed / (1 + abs(delayed))))
    np.testing.assert_allclose(res.trace[0, :, 0], hist[M:], rtol=0, atol=1e-15)


def test_ou_coupling_difference_is_deterministic():
    dyn = Dynamics(1.0, R0)
    cfg = SimConfig(h=H, T=2.0, n_paths=50, seed=3)
    res = simulate_coupled(dyn, Segment.constant(R0, M, 1.0), Segment.constant(R0, M, -1.0), cfg,
                           trace=True)
    k = np.arange(cfg.n_steps + 1)
    np.testing.assert_allclose(res.trace_diff[:, :, 0], np.broadcast_to(2 * (1 - H) ** k, (50, k.size)),
                               rtol=1e-12)


def test_ou_second_moment():
    # E X_t^2 for Euler OU from x0: mean^2 + variance of the recursion
    dyn = Dynamics(1.0, R0)
    cfg = SimConfig(h=H, T=1.0, n_paths=20_000, seed=11, record_times=(1.0,))
    res = simulate_ensemble(dyn, Segment.constant(R0, M, 1.0), cfg)
    n = cfg.n_steps
    a = 1 - H
    var = H * (1 - a ** (2 * n)) / (1 - a * a)
    x = res.terminal[:, 0, 0]
    assert abs(x.mean() - a**n) < 3 * x.std() / math.sqrt(x.size)
    assert abs(x.var() - var) < 3 * var * math.sqrt(2 / x.size)


def test_sup_norm_moment_dominates_terminal():
    dyn = Dynamics(1.0, R0, drift_b=DriftSpec.holder_power(0.5, 0.5, 1.0))
    cfg = SimConfig(h=H, T=1.0, n_paths=600, seed=1, record_times=(0.5, 1.0))
    res = simulate_ensemble(dyn, Segment.constant(R0, M, 1.0), cfg, keep_segments=3)
    term = np.mean(np.sum(res.terminal**2, axis=2), axis=0)
    assert np.all(res.moments.estimate >= term)
    assert res.segments.shape == (3, 2, M + 1, 1)
    np.testing.assert_array_equal(res.segments[:, :, -1], res.terminal[:3])


@pytest.mark.parametrize("workers", [1, 3])
def test_results_are_independent_of_workers_and_blocks(workers, monkeypatch):
    dyn = Dynamics(1.0, R0, drift_B=FunctionalSpec.window_average(0.2, 5.0))
    xi, eta = Segment.constant(R0, M, 1.0), Segment.spike(R0, M, -2.0)
    n = BLOCK + 37
    ref = simulate_coupled(dyn, xi, eta, SimConfig(h=H, T=0.5, n_paths=n, seed=4, workers=1))
    monkeypatch.setenv("FSDE_THREADS", str(workers))
    res = simulate_coupled(dyn, xi, eta, SimConfig(h=H, T=0.5, n_paths=n, seed=4))
    np.testing.assert_array_equal(ref.terminal_x, res.terminal_x)
    np.testing.assert_array_equal(ref.moments.estimate, res.moments.estimate)
    # a path's trajectory does not depend on how many other paths run
    small = simulate_coupled(dyn, xi, eta, SimConfig(h=H, T=0.5, n_paths=3, seed=4))
    np.testing.assert_array_equal(small.terminal_x, ref.terminal_x[:3])


def test_stationary_sampler_layout():
    dyn = Dynamics(1.0, R0)
    cfg = SimConfig(h=H, T=H, n_paths=5, seed=0)
    s = stationary_sampler(dyn, cfg, burn_in=1.0, n_samples=12, spacing=0.2)
    assert s.segments.shape == (12, M + 1, 1)
    np.testing.assert_allclose(s.times, [1.0, 1.2, 1.4])
    with pytest.raises(ConfigError):
        stationary_sampler(dyn, cfg, 1.0, 4, spacing=0.05)


def test_ou_stationary_variance():
    dyn = Dynamics(2.0, R0)
    s = stationary_sampler(dyn, SimConfig(h=H, T=H, n_paths=4000, seed=5), 5.0, 4000)
    x = s.terminal[:, 0]
    target = 1.0 / (2 * 2.0)
    assert abs(x.var(ddof=1) - target) < 3 * target * math.sqrt(2 / (x.size - 1))
