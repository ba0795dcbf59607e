import numpy as np
import pytest

from conftest import chain
from sls_lqg.oracles import (FirInfeasibleError, OracleError, PredictorLqgController, fir_cost, gaussian_noise,
                             riccati_fixed_point, run_plant, simulate_lqg_cost, solve_centralized_lqg,
                             solve_fir_column_qp)
from sls_lqg.sim import GlobalController, init_nodes
from sls_lqg.slc import build_delayed_localization, unconstrained_schedule
from sls_lqg.synthesis import synthesize_kalman_filter, synthesize_state_feedback
from sls_lqg.system import NetworkSystem, build_chain_network, build_graph


def _scalar(a=0.5, b=1.0, q=1.0, r=1.0):
    return NetworkSystem(A=[[a]], B=[[b]], C=[[1.0]], W=[[1.0]], V=[[1.0]], Q=[[q]], R=[[r]],
                         node_of_state=[0], node_of_input=[0], node_of_output=[0])


def test_scalar_lqr_root():
    sol = solve_centralized_lqg(_scalar())
    assert sol.P_lqr[0, 0] == pytest.approx((0.25 + np.sqrt(4.0625)) / 2, abs=1e-10)
    assert sol.P_lqr[0, 0] == pytest.approx(1.132782, abs=1e-6)


def test_no_dynamics_means_no_control():
    sys = build_chain_network(3, 0.6, 1.0)
    sys = NetworkSystem(A=np.zeros((3, 3)), B=sys.B, C=sys.C, W=sys.W, V=sys.V, Q=2 * np.eye(3), R=sys.R,
                        node_of_state=sys.node_of_state, node_of_input=sys.node_of_input,
                        node_of_output=sys.node_of_output)
    sol = solve_centralized_lqg(sys)
    np.testing.assert_allclose(sol.P_lqr, 2 * np.eye(3))
    np.testing.assert_allclose(sol.K_lqr, 0)


def test_riccati_iteration_is_monotone():
    sys = chain(6, 1.0)
    riccati_fixed_point(sys.A, sys.B, sys.Q, sys.R, check_monotone=True)


def test_riccati_divergence_is_reported():
    with pytest.raises(OracleError):
        riccati_fixed_point(np.array([[2.0]]), np.array([[0.0]]), np.eye(1), np.eye(1), max_iter=200)


def test_lqr_cost_is_trace_formula():
    sys = chain(5, 1.0)
    sol = solve_centralized_lqg(sys)
    sf = synthesize_state_feedback(sys, unconstrained_schedule(sys))
    assert sol.lqr_cost == pytest.approx(np.trace(sol.P_lqr @ sys.W))
    assert sf.cost == pytest.approx(sol.lqr_cost, rel=1e-8)


# -- FIR oracle ----------------------------------------------------------------------

def test_fir_scalar_single_step_deadbeat():
    a, b, q, r = 0.7, 2.0, 3.0, 5.0
    sys = _scalar(a, b, q, r)
    qp = solve_fir_column_qp(sys, unconstrained_schedule(sys), 0, 1)
    assert qp.phi_u[0, 0] == pytest.approx(-a / b)
    assert qp.cost == pytest.approx(q + r * a**2 / b**2)


def test_fir_converges_to_infinite_horizon():
    sys = chain(3, 1.0)
    sched = build_delayed_localization(build_graph(sys), 1, sys)
    inf = synthesize_state_feedback(sys, sched).cost
    assert fir_cost(sys, sched, 40) == pytest.approx(inf, rel=1e-2)


def test_fir_cost_nonincreasing_in_horizon():
    sys = chain(6, 300.0)
    sched = build_delayed_localization(build_graph(sys), 2, sys)
    costs = [fir_cost(sys, sched, H) for H in (5, 10, 20, 40)]
    assert all(b <= a + 1e-9 for a, b in zip(costs, costs[1:]))


def test_fir_kkt_residual_small():
    sys = chain(5, 1.0)
    sched = build_delayed_localization(build_graph(sys), 2, sys)
    for i in range(5):
        qp = solve_fir_column_qp(sys, sched, i, 15)
        assert qp.kkt_residual < 1e-9
        np.testing.assert_array_equal(qp.phi_x[0], np.eye(5)[i])


def test_fir_infeasible_schedule():
    base = build_chain_network(3, 0.6, 1.0)
    sys = NetworkSystem(A=base.A, B=np.eye(3)[:, [0]], C=base.C, W=base.W, V=base.V, Q=base.Q, R=np.eye(1),
                        node_of_state=[0, 1, 2], node_of_input=[0], node_of_output=[0, 1, 2])
    sched = build_delayed_localization(build_graph(sys), 1, sys)
    with pytest.raises(FirInfeasibleError):
        solve_fir_column_qp(sys, sched, 2, 5)


# -- Monte Carlo ---------------------------------------------------------------------

def test_zero_noise_zero_cost():
    sys = chain(4, 1.0)
    ctrl = PredictorLqgController(sys, solve_centralized_lqg(sys))
    assert run_plant(sys, ctrl, np.zeros((50, 4)), np.zeros((50, 4))) == 0.0


def test_noise_streams_are_reproducible_and_distinct():
    sys = chain(3, 1.0)
    w1, v1 = gaussian_noise(sys, 20, 7, 0)
    w2, _ = gaussian_noise(sys, 20, 7, 0)
    w3, _ = gaussian_noise(sys, 20, 7, 1)
    np.testing.assert_array_equal(w1, w2)
    assert not np.allclose(w1, w3)
    assert v1.shape == (20, 3)


def test_centralized_lqg_monte_carlo():
    sys = chain(5, 1.0)
    sol = solve_centralized_lqg(sys)
    mc = simulate_lqg_cost(lambda: PredictorLqgController(sys, sol), sys, 4000, seed=3, n_trials=12)
    assert abs(mc.mean - sol.lqg_cost) <= 3 * mc.stderr


def test_unconstrained_sls_controller_monte_carlo():
    sys = chain(5, 1.0)
    sched = unconstrained_schedule(sys)
    sf = synthesize_state_feedback(sys, sched, 60)
    kf = synthesize_kalman_filter(sys, sched, 60)
    nodes = init_nodes(sf, kf, sys, build_graph(sys))
    mc = simulate_lqg_cost(lambda: GlobalController(nodes, sys), sys, 4000, seed=5, n_trials=12)
    assert abs(mc.mean - solve_centralized_lqg(sys).lqg_cost) <= 3 * mc.stderr
