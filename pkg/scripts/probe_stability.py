"""Impulse probes on the composed controller: window bound versus measured decay time.

Usage: python3 scripts/probe_stability.py [--n 15] [--d 3] [--r-scale 300]
"""

import argparse

import numpy as np

from sls_lqg.experiments import design_output_feedback
from sls_lqg.sim import (SIGNALS, GlobalController, closed_loop_spectral_radius, impulse_disturbance, init_nodes,
                         run_global)
from sls_lqg.system import build_chain_network, build_graph

THRESHOLD = 1e-6


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--n", type=int, default=15)
    parser.add_argument("--d", type=int, default=3)
    parser.add_argument("--r-scale", type=float, default=300.0)
    parser.add_argument("--t0", type=int, default=10)
    args = parser.parse_args()

    sys = build_chain_network(args.n, 0.6, 1.0, 1.0, args.r_scale)
    des = design_output_feedback(sys, args.d, 200)
    ctrl = GlobalController(init_nodes(des.sf, des.kf, sys, build_graph(sys)), sys)
    rho = closed_loop_spectral_radius(sys, ctrl)
    window = int(np.ceil(10.0 / (1.0 - rho)))
    print(f"N={args.n} d={args.d} R={args.r_scale:g}: rho={rho:.4f} window={window} steps")
    T = args.t0 + 4 * window
    for ch in ("x", "y", "beta"):
        rec = run_global(sys, ctrl, impulse_disturbance(sys, T, ch, args.t0))
        norms = np.max(np.stack([np.abs(rec.signals[s]).max(axis=1) for s in SIGNALS]), axis=0)
        above = np.flatnonzero(norms > THRESHOLD)
        settle = int(above[-1]) + 1 - args.t0 if above.size else 0
        print(f"  {ch:>4s}: below {THRESHOLD:g} after {settle} steps, "
              f"peak after window {norms[args.t0 + window:].max():.2e}")


if __name__ == "__main__":
    main()
