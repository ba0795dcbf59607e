"""Run the FIR, localization and network-size sweeps and write their CSVs.

Usage: python3 scripts/run_sweeps.py [--config configs/default.yaml] [--out results] [--workers 4]
"""

import argparse
import time
from pathlib import Path

from sls_lqg.cli import write_csv
from sls_lqg.experiments import linear_fit_r2, sweep_d, sweep_fir, sweep_n
from sls_lqg.system import ExperimentConfig, load_config


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--config", type=Path)
    parser.add_argument("--out", type=Path, default=Path("results"))
    parser.add_argument("--workers", type=int, default=None)
    parser.add_argument("--d-sweep-nodes", type=int, default=10, help="chain size for the localization sweep")
    args = parser.parse_args()
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    args.out.mkdir(parents=True, exist_ok=True)

    d_cfg = cfg.replace(n_nodes=args.d_sweep_nodes)
    for name, fn, c in (("sweep_fir", sweep_fir, cfg), ("sweep_d", sweep_d, d_cfg), ("sweep_n", sweep_n, cfg)):
        t0 = time.perf_counter()
        rows = fn(c, args.workers)
        write_csv(args.out / f"{name}.csv", rows, c)
        print(f"{name}: {len(rows)} rows in {time.perf_counter() - t0:.1f}s")
        for row in rows:
            print("   ", "  ".join(f"{k}={v:.8g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
        if name == "sweep_n":
            slope, icpt, r2 = linear_fit_r2([r["N"] for r in rows], [r["gap"] for r in rows])
            print(f"    gap ~ {slope:.4g} N + {icpt:.4g}, R^2 = {r2:.4f}")


if __name__ == "__main__":
    main()
