"""Grid refinement study for the Zvonkin solver.

Prints iteration count, fixed-point residual, observed contraction and the
relative PDE residual as the spatial grid is refined.

    python3 scripts/zvonkin_grid_study.py [--c 1.0] [--alpha 0.5]
"""

import argparse
import time

from fsde.constants import lambda0
from fsde.pathspace import DriftSpec
from fsde.zvonkin import GridConfig, OUParams, model_for_drift, solve_zvonkin, verify_gradient_bounds


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--c", type=float, default=1.0)
    ap.add_argument("--alpha", type=float, default=0.5)
    ap.add_argument("--delta", type=float, default=0.5)
    args = ap.parse_args()
    b = DriftSpec.holder_power(args.c, args.alpha, 1.0)
    params = model_for_drift(b, 1.0)
    lam = 2 * lambda0(params, args.delta)
    print(f"lambda = {lam:.4f}")
    print(f"{'n_x':>7}{'iters':>7}{'residual':>11}{'contraction':>13}{'pde/scale':>11}{'secs':>7}")
    for n_x in (2001, 4001, 8001, 16001, 32001):
        t0 = time.perf_counter()
        fld = solve_zvonkin(b, OUParams(1.0), lam, args.delta, GridConfig(n_x))
        rep = verify_gradient_bounds(fld, params, args.delta, lam, b, n_pairs=20_000)
        dt = time.perf_counter() - t0
        print(f"{n_x:>7}{fld.iterations:>7}{fld.residual:>11.2e}{fld.observed_contraction:>13.4f}"
              f"{rep.pde_residual / rep.pde_scale:>11.2e}{dt:>7.1f}")


if __name__ == "__main__":
    main()
