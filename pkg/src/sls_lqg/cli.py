"""Command-line entry point.

Subcommands ``synth``, ``verify``, ``simulate``, ``sweep-fir``, ``sweep-d`` and
``sweep-n``. Exit codes: 0 success, 1 runtime failure, 2 invalid input.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import sys as _sys
from pathlib import Path

import numpy as np

from . import __version__
from .clm import dump_kernels_csv, localization_width, verify_of_feasibility, verify_sf_feasibility
from .experiments import design_output_feedback, linear_fit_r2, sweep_d, sweep_fir, sweep_n
from .oracles import InstabilityError, OracleError, solve_centralized_lqg
from .sim import ProtocolError, gaussian_disturbance, init_nodes, run_centralized_reference, run_closed_loop
from .slc import check_column_feasibility
from .synthesis import SynthesisError
from .system import ExperimentConfig, InvalidConfigError, build_graph, load_config

log = logging.getLogger("sls_lqg")

FEAS_TOL = 1e-8


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(dataclasses.asdict(cfg), sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def header_comment(cfg: ExperimentConfig) -> str:
    return f"config_sha256={config_hash(cfg)} version={__version__}"


def write_csv(path: Path, rows: list[dict], cfg: ExperimentConfig) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# {header_comment(cfg)}\n")
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def _parse_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc
    if not values:
        raise argparse.ArgumentTypeError("list must not be empty")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sls-lqg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("synth", "synthesize SF/KF factors, compose them, and dump realizations, kernels and costs"),
        ("verify", "check feasibility residuals and localization width of a design"),
        ("simulate", "run the node-level controller against seeded noise"),
        ("sweep-fir", "FIR oracle cost against the infinite-horizon cost for several horizons"),
        ("sweep-d", "output-feedback cost as the localization parameter varies"),
        ("sweep-n", "output-feedback cost and gap to centralized LQG as the chain grows"),
    ]:
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", type=Path, help="YAML/JSON experiment file")
        p.add_argument("--out", type=Path, default=Path("out"), help="output directory (default: out)")
        p.add_argument("--d", type=int, help="override the localization parameter")
        p.add_argument("--n", type=int, help="override the number of chain nodes")
        p.add_argument("--seed", type=int, help="override the noise seed")
        p.add_argument("--fir-horizons", type=_parse_list, help="comma-separated FIR horizons")
        p.add_argument("--workers", type=int, default=None, help="thread pool size for sweeps")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    return cfg.replace(d=args.d, n_nodes=args.n, seed=args.seed, fir_horizons=args.fir_horizons)


def cmd_synth(cfg: ExperimentConfig, out: Path) -> int:
    sys = cfg.system()
    design = design_output_feedback(sys, cfg.d, cfg.t_eval)
    central = solve_centralized_lqg(sys)
    for tag, sol in (("sf", design.sf), ("kf", design.kf)):
        arrays = {}
        for col in sol.columns:
            for field in ("A_blk", "B_blk", "C_blk", "K_blk"):
                arrays[f"col{col.i}_{field}"] = getattr(col, field)
        np.savez(out / f"realizations_{tag}.npz", **arrays)
    dump_kernels_csv({"Phi_xw": design.sf.Phi_x, "Phi_uw": design.sf.Phi_u,
                      "Phi_ew": design.kf.Phi_x, "Phi_ev": design.kf.Phi_u},
                     out / "kernels.csv", header_comment(cfg))
    rows = [
        {"quantity": "n_nodes", "value": sys.n_nodes},
        {"quantity": "d", "value": cfg.d},
        {"quantity": "sf_cost", "value": design.sf.cost},
        {"quantity": "sf_truncated_cost", "value": design.sf.truncated_cost},
        {"quantity": "sf_tail_bound", "value": design.sf.tail_bound},
        {"quantity": "kf_cost", "value": design.kf.cost},
        {"quantity": "of_cost", "value": design.h2.cost},
        {"quantity": "of_tail_bound", "value": design.h2.tail_bound},
        {"quantity": "centralized_lqg_cost", "value": central.lqg_cost},
        {"quantity": "max_column_spectral_radius",
         "value": max(c.spectral_radius for c in (*design.sf.columns, *design.kf.columns))},
    ]
    write_csv(out / "cost_report.csv", rows, cfg)
    for row in rows:
        print(f"{row['quantity']:>28s}  {row['value']}")
    return 0


def cmd_verify(cfg: ExperimentConfig, out: Path) -> int:
    sys = cfg.system()
    graph = build_graph(sys)
    design = design_output_feedback(sys, cfg.d, cfg.t_eval)
    infeasible = [i for i in range(sys.n)
                  if not check_column_feasibility(design.sf.results[i].encodings, sys, i).feasible]
    rows = [
        {"check": "sf_feasibility_residual", "value": verify_sf_feasibility(design.sf.Phi_x, design.sf.Phi_u, sys),
         "limit": FEAS_TOL},
        {"check": "of_feasibility_residual", "value": verify_of_feasibility(design.clm), "limit": FEAS_TOL},
        {"check": "sf_localization_width", "value": localization_width(design.sf, graph), "limit": float(cfg.d)},
        {"check": "of_localization_width", "value": localization_width(design.clm, graph),
         "limit": float(2 * cfg.d + 2)},
        {"check": "infeasible_columns", "value": float(len(infeasible)), "limit": 0.0},
    ]
    write_csv(out / "verify.csv", rows, cfg)
    ok = True
    for row in rows:
        passed = row["value"] <= row["limit"]
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'}  {row['check']:<26s} {row['value']:.3e} (limit {row['limit']:g})")
    return 0 if ok else 1


def cmd_simulate(cfg: ExperimentConfig, out: Path) -> int:
    sys = cfg.system()
    graph = build_graph(sys)
    design = design_output_feedback(sys, cfg.d, cfg.t_eval)
    nodes = init_nodes(design.sf, design.kf, sys, graph)
    dist = gaussian_disturbance(sys, cfg.t_sim, cfg.seed)
    rec = run_closed_loop(sys, nodes, dist, graph=graph, d=cfg.d, log_messages=True)
    rec.to_csv(out / "trajectory.csv", header_comment(cfg))
    rec.messages_to_csv(out / "messages.csv", header_comment(cfg))
    ref = run_centralized_reference(design.clm, sys, dist, min(cfg.t_sim, cfg.t_eval))
    T = ref.T
    dev = float(np.abs(rec.u[:T] - ref.u).max())
    cost = float(np.mean(np.einsum("ti,ij,tj->t", rec.x, sys.Q, rec.x) + np.einsum("ti,ij,tj->t", rec.u, sys.R, rec.u)))
    print(f"steps={cfg.t_sim} messages={len(rec.messages)} empirical_cost={cost:.6g} "
          f"h2_cost={design.h2.cost:.6g} max|u_dist-u_central| (t<{T})={dev:.3e}")
    return 0


def cmd_sweep(kind: str, cfg: ExperimentConfig, out: Path, workers) -> int:
    if kind == "sweep-fir":
        rows = sweep_fir(cfg, workers)
        write_csv(out / "sweep_fir.csv", rows, cfg)
    elif kind == "sweep-d":
        rows = sweep_d(cfg, workers)
        write_csv(out / "sweep_d.csv", rows, cfg)
    else:
        rows = sweep_n(cfg, workers)
        write_csv(out / "sweep_n.csv", rows, cfg)
        slope, icpt, r2 = linear_fit_r2([r["N"] for r in rows], [r["gap"] for r in rows])
        print(f"gap linear fit: slope={slope:.6g} intercept={icpt:.6g} R^2={r2:.4f}")
    for row in rows:
        print("  ".join(f"{k}={v:.10g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        args.out.mkdir(parents=True, exist_ok=True)
    except (InvalidConfigError, OSError) as exc:
        print(f"error: {exc}", file=_sys.stderr)
        return 2
    try:
        if args.command == "synth":
            return cmd_synth(cfg, args.out)
        if args.command == "verify":
            return cmd_verify(cfg, args.out)
        if args.command == "simulate":
            return cmd_simulate(cfg, args.out)
        return cmd_sweep(args.command, cfg, args.out, args.workers)
    except (SynthesisError, OracleError, ProtocolError, InstabilityError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=_sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
