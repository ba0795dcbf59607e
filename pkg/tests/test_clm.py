import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import chain, design
from sls_lqg.clm import (ClosedLoopMaps, ContractError, KernelSequence, compose_output_feedback, convolve, delay,
                         dump_kernels_csv, h2_cost, localization_width, shift, verify_of_feasibility,
                         verify_sf_feasibility)
from sls_lqg.oracles import centralized_closed_loop_maps, solve_centralized_lqg
from sls_lqg.system import NetworkSystem, build_graph


def _random_seq(rng, T, r, c, proper=True):
    G = rng.standard_normal((T + 1, r, c))
    if proper:
        G[0] = 0
    return KernelSequence(G, proper)


def _only_xx(sys, M):
    n = sys.n
    Z = np.zeros((3, n, n))
    Xx = Z.copy()
    Xx[1] = M
    return ClosedLoopMaps(*(KernelSequence(G, True) for G in (Xx, Z.copy(), Z.copy(), Z.copy())), sys=sys)


def _with(sys, **kw):
    fields = dict(A=sys.A, B=sys.B, C=sys.C, W=sys.W, V=sys.V, Q=sys.Q, R=sys.R,
                  node_of_state=sys.node_of_state, node_of_input=sys.node_of_input,
                  node_of_output=sys.node_of_output)
    fields.update(kw)
    return NetworkSystem(**fields)


# -- sequence arithmetic ---------------------------------------------------------

def test_shift_moves_lag_one_to_zero():
    G = delay(np.eye(2), 1, 4)
    np.testing.assert_array_equal(shift(G)[0], np.eye(2))
    assert shift(G).T == 3


def test_shift_of_polynomial():
    A, B = np.array([[1.0, 2.0]]), np.array([[3.0, 4.0]])
    G = KernelSequence(np.stack([np.zeros((1, 2)), A, B, np.zeros((1, 2))]), True)
    S = shift(G)
    np.testing.assert_array_equal(S[0], A)
    np.testing.assert_array_equal(S[1], B)


def test_double_shift():
    M = np.arange(4.0).reshape(2, 2) + 1
    S = shift(shift(delay(M, 2, 5)))
    np.testing.assert_array_equal(S[0], M)


def test_shift_requires_strictly_proper():
    with pytest.raises(ContractError):
        shift(delay(np.eye(2), 0, 3))


def test_strictly_proper_flag_is_enforced():
    with pytest.raises(ContractError):
        KernelSequence(np.ones((2, 1, 1)), True)


def test_convolve_identity_element():
    rng = np.random.default_rng(0)
    H = _random_seq(rng, 6, 3, 2)
    out = convolve(delay(np.eye(3), 0, 6), H)
    np.testing.assert_array_equal(out.kernels, H.kernels)


def test_convolve_lag_products():
    A, B = np.array([[2.0]]), np.array([[5.0]])
    out = convolve(delay(A, 1, 5), delay(B, 1, 5))
    np.testing.assert_array_equal(out.kernels[:, 0, 0], [0, 0, 10, 0, 0, 0])
    assert out.strictly_proper


def test_convolve_dimension_mismatch():
    rng = np.random.default_rng(0)
    with pytest.raises(ContractError):
        convolve(_random_seq(rng, 3, 2, 3), _random_seq(rng, 3, 2, 3))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_convolve_associative(seed):
    rng = np.random.default_rng(seed)
    F, G, H = (_random_seq(rng, 10, 3, 3, proper=False) for _ in range(3))
    a = convolve(convolve(F, G), H)
    b = convolve(F, convolve(G, H))
    np.testing.assert_allclose(a.kernels, b.kernels, rtol=1e-10, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 9))
def test_truncation_commutes_with_convolution(seed, T):
    rng = np.random.default_rng(seed)
    G, H = _random_seq(rng, 10, 2, 3), _random_seq(rng, 10, 3, 2)
    np.testing.assert_allclose(convolve(G, H, T).kernels, convolve(G.truncate(T), H.truncate(T)).kernels,
                               atol=1e-12)


# -- composition and feasibility -----------------------------------------------------

def test_leading_kernels_of_composition():
    des = design(5, 2, 60)
    sf, kf, clm = des.sf, des.kf, des.clm
    np.testing.assert_allclose(clm.Phi_xx[1], np.eye(5), atol=1e-14)
    np.testing.assert_allclose(clm.Phi_uy[1], -sf.Phi_u[1] @ kf.Phi_u[1], atol=1e-14)
    for G in clm.maps().values():
        np.testing.assert_array_equal(G[0], 0)


def test_composed_maps_are_feasible():
    clm = design(5, 2, 60).clm
    assert verify_of_feasibility(clm) < 1e-8


def test_composition_horizon_is_capped():
    des = design(5, 2, 60)
    with pytest.raises(ContractError):
        compose_output_feedback(des.sf, des.kf, des.kf.T)


def test_centralized_maps_are_feasible():
    sys = chain(5, 1.0)
    assert verify_of_feasibility(centralized_closed_loop_maps(sys, solve_centralized_lqg(sys), 80)) < 1e-8


def test_sf_residual_detects_corruption():
    sf = design(5, 2, 60).sf
    sys = sf.sys
    assert verify_sf_feasibility(sf.Phi_x, sf.Phi_u, sys) < 1e-9
    X = sf.Phi_x.copy()
    X[3, 1, 2] += 0.1
    assert verify_sf_feasibility(X, sf.Phi_u, sys) >= 0.1 - 1e-9
    zeros = np.zeros_like(sf.Phi_x)
    assert verify_sf_feasibility(zeros, np.zeros_like(sf.Phi_u), sys) == pytest.approx(1.0)


def test_of_residual_detects_swapped_maps():
    clm = design(5, 2, 60).clm
    bad = ClosedLoopMaps(clm.Phi_xx, clm.Phi_ux, clm.Phi_uy, clm.Phi_xy, sys=clm.sys)
    assert verify_of_feasibility(bad) > 1e-2


# -- cost -------------------------------------------------------------------------

def test_h2_of_identity_kernel():
    sys = chain(2, 1.0)
    assert h2_cost(_only_xx(sys, np.eye(2))).cost == pytest.approx(2.0)


def test_h2_scales_with_process_noise():
    sys = chain(3, 1.0)
    clm = design(3, 1, 40, 1.0).clm
    base = h2_cost(clm)
    scaled = h2_cost(clm, _with(sys, W=4 * np.eye(3)))
    # Q = R = I, so the w-columns contribute their plain Frobenius mass
    w_part = float(np.sum(clm.Phi_xx.kernels ** 2)) + float(np.sum(clm.Phi_ux.kernels ** 2))
    assert scaled.cost == pytest.approx(base.cost + 3 * w_part, rel=1e-12)


def test_h2_of_unconstrained_design_matches_lqg():
    from sls_lqg.slc import unconstrained_schedule
    from sls_lqg.synthesis import synthesize_kalman_filter, synthesize_state_feedback
    sys = chain(5, 1.0)
    sched = unconstrained_schedule(sys)
    clm = compose_output_feedback(synthesize_state_feedback(sys, sched, 301), synthesize_kalman_filter(sys, sched, 301),
                                  300)
    assert h2_cost(clm).cost == pytest.approx(solve_centralized_lqg(sys).lqg_cost, rel=1e-9)


def test_h2_accepts_state_feedback_solution():
    sf = design(5, 2, 60).sf
    rep = h2_cost(sf)
    assert rep.cost == pytest.approx(sf.truncated_cost, rel=1e-12)


# -- localization ------------------------------------------------------------------

def test_width_of_diagonal_maps_is_zero():
    sys = chain(4, 1.0)
    assert localization_width(_only_xx(sys, np.diag([1.0, 2.0, 3.0, 4.0])), build_graph(sys)) == 0


def test_state_feedback_width_at_most_d():
    for d in (1, 2, 3):
        sf = design(8, d, 60).sf
        assert localization_width(sf, build_graph(sf.sys)) <= d


def test_composed_width_bound_on_large_chain():
    clm = design(15, 3, 60).clm
    assert localization_width(clm, build_graph(clm.sys), T=50) <= 8


# -- CSV ----------------------------------------------------------------------------

def test_kernel_dump_order(tmp_path):
    G = np.arange(2 * 2 * 3, dtype=float).reshape(2, 2, 3)
    path = tmp_path / "k.csv"
    dump_kernels_csv({"B": G, "A": G[:, :1, :1]}, path, "hdr")
    lines = path.read_text().splitlines()
    assert lines[0] == "# hdr"
    rows = list(csv.reader(lines[1:]))
    assert rows[0] == ["map", "lag", "i", "j", "value"]
    keys = [(r[0], int(r[1]), int(r[2]), int(r[3])) for r in rows[1:]]
    assert keys[:3] == [("B", 0, 0, 0), ("B", 0, 0, 1), ("B", 0, 0, 2)]
    assert keys[-1] == ("A", 1, 0, 0)
    assert len(keys) == 12 + 2
    assert float(rows[1 + 11][4]) == 11.0
