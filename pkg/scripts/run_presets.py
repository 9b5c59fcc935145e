"""Run every shipped preset and consolidate each run directory.

    python3 scripts/run_presets.py [--out runs] [--workers N]
"""

import argparse
from pathlib import Path

from fsde.experiment import PRESETS, emit_report, parse_config, preset, run_experiment


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs")
    ap.add_argument("--workers", type=int)
    args = ap.parse_args()
    for name in PRESETS:
        run_dir = Path(args.out) / name
        code = run_experiment(parse_config(preset(name)), run_dir, workers=args.workers)
        summary = ""
        if (run_dir / "moments.csv").exists():
            curves = emit_report(run_dir)["curves"]
            summary = ", ".join(f"{k} max upper/bound {v['max_ratio_upper_to_bound']:.3f}"
                                for k, v in curves.items())
        print(f"{name:<20} exit {code}  {summary}")


if __name__ == "__main__":
    main()
