"""Sweeps over FIR horizon, localization parameter and network size."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .clm import ClosedLoopMaps, H2Report, compose_output_feedback, h2_cost
from .oracles import fir_cost, solve_centralized_lqg
from .slc import build_delayed_localization
from .synthesis import StructuredSolution, synthesize_kalman_filter, synthesize_state_feedback
from .system import ExperimentConfig, NetworkSystem, build_chain_network, build_graph


@dataclass(frozen=True, eq=False)
class OutputFeedbackDesign:
    sys: NetworkSystem
    d: int
    sf: StructuredSolution
    kf: StructuredSolution
    clm: ClosedLoopMaps
    h2: H2Report


def design_output_feedback(sys: NetworkSystem, d: int, T_eval: int, workers: int | None = None
                           ) -> OutputFeedbackDesign:
    graph = build_graph(sys)
    schedule = build_delayed_localization(graph, d, sys)
    sf = synthesize_state_feedback(sys, schedule, T_eval + 1, workers)
    kf = synthesize_kalman_filter(sys, schedule, T_eval + 1, workers)
    clm = compose_output_feedback(sf, kf, T_eval)
    return OutputFeedbackDesign(sys, d, sf, kf, clm, h2_cost(clm))


def _map(fn, items, workers):
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def sweep_fir(cfg: ExperimentConfig, workers: int | None = None) -> list[dict]:
    """FIR oracle cost per horizon next to the infinite-horizon state-feedback cost."""
    sys = cfg.system()
    schedule = build_delayed_localization(build_graph(sys), cfg.d, sys)
    inf_cost = synthesize_state_feedback(sys, schedule, cfg.t_eval).cost
    costs = _map(lambda H: fir_cost(sys, schedule, H), list(cfg.fir_horizons), workers)
    return [{"H": int(H), "fir_cost": c, "inf_cost": inf_cost} for H, c in zip(cfg.fir_horizons, costs)]


def sweep_d(cfg: ExperimentConfig, workers: int | None = None) -> list[dict]:
    sys = cfg.system()
    central = solve_centralized_lqg(sys).lqg_cost
    reports = _map(lambda d: design_output_feedback(sys, int(d), cfg.t_eval).h2, list(cfg.d_grid), workers)
    return [{"d": int(d), "of_cost": r.cost, "centralized_lqg_cost": central, "tail_bound": r.tail_bound}
            for d, r in zip(cfg.d_grid, reports)]


def sweep_n(cfg: ExperimentConfig, workers: int | None = None) -> list[dict]:
    def one(N):
        sys = build_chain_network(int(N), cfg.alpha, cfg.rho, cfg.q_scale, cfg.r_scale)
        return design_output_feedback(sys, cfg.d, cfg.t_eval).h2.cost, solve_centralized_lqg(sys).lqg_cost

    out = _map(one, list(cfg.n_grid), workers)
    return [{"N": int(N), "of_cost": of, "centralized_lqg_cost": c, "gap": of - c}
            for N, (of, c) in zip(cfg.n_grid, out)]


def linear_fit_r2(x, y) -> tuple[float, float, float]:
    """Least-squares line through ``(x, y)``; returns ``(slope, intercept, R^2)``."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid ** 2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2
