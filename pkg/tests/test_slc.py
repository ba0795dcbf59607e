import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from sls_lqg.slc import (build_delayed_localization, check_column_feasibility, dual_schedule, encode_column,
                         encode_column_stages, null_basis, pinv, selection_cols, selection_rows,
                         unconstrained_schedule)
from sls_lqg.system import NetworkSystem, build_chain_network, build_graph


def _schedule(N, d, alpha=0.6):
    sys = build_chain_network(N, alpha, 1.0, 1.0, 1.0)
    return sys, build_delayed_localization(build_graph(sys), d, sys)


def _band(N, w):
    idx = np.arange(N)
    return np.abs(idx[:, None] - idx[None, :]) <= w


def _single_actuator_chain(N=3):
    base = build_chain_network(N, 0.6, 1.0, 1.0, 1.0)
    return NetworkSystem(A=base.A, B=np.eye(N)[:, [0]], C=base.C, W=base.W, V=base.V, Q=base.Q,
                         R=np.eye(1), node_of_state=np.arange(N), node_of_input=[0],
                         node_of_output=np.arange(N))


def test_chain_n3_d1_is_tridiagonal():
    _, sched = _schedule(3, 1)
    for k in (1, 2, 7):
        np.testing.assert_array_equal(sched.x(k), _band(3, 1))


def test_chain_n5_d2_tridiagonal_then_pentadiagonal():
    _, sched = _schedule(5, 2)
    np.testing.assert_array_equal(sched.x(1), _band(5, 1))
    np.testing.assert_array_equal(sched.x(2), _band(5, 2))
    np.testing.assert_array_equal(sched.S_x_tail, _band(5, 2))
    np.testing.assert_array_equal(sched.x(30), sched.S_x_tail)


def test_diagonal_plant_gives_identity_pattern():
    sys, sched = _schedule(4, 3, alpha=0.0)
    for k in (1, 2, 3, 4):
        np.testing.assert_array_equal(sched.x(k), np.eye(4, dtype=bool))


def test_inputs_inherit_node_pattern():
    sys, sched = _schedule(6, 2)
    for k in (1, 2):
        np.testing.assert_array_equal(sched.u(k), sched.x(k))


def test_zero_d_rejected():
    sys = build_chain_network(3, 0.6, 1.0)
    with pytest.raises(ValueError):
        build_delayed_localization(build_graph(sys), 0, sys)


@pytest.mark.parametrize("N", [4, 7])
def test_schedules_nest_in_k_and_d(N):
    sys = build_chain_network(N, 0.6, 1.0)
    g = build_graph(sys)
    for d1, d2 in itertools.combinations(range(1, 5), 2):
        s1, s2 = (build_delayed_localization(g, d, sys) for d in (d1, d2))
        for k in range(1, 8):
            assert not np.any(s1.x(k) & ~s2.x(k))
            assert not np.any(s2.x(k) & ~s2.x(k + 1))


def test_dual_schedule_transposes_each_kernel():
    sys, sched = _schedule(5, 2)
    dual = dual_schedule(sched, sys)
    for k in (1, 2):
        np.testing.assert_array_equal(dual.x(k), sched.x(k).T)


def test_selection_examples():
    np.testing.assert_array_equal(selection_rows(np.array([1, 0, 1])), [[0, 1, 0]])
    np.testing.assert_array_equal(selection_cols(np.array([1, 0, 1])), [[1, 0], [0, 0], [0, 1]])
    assert selection_rows(np.ones(3)).shape == (0, 3)


def test_null_basis_of_row_of_ones():
    N = null_basis(np.array([[1.0, 1.0]]))
    np.testing.assert_allclose(N, np.array([[1.0], [-1.0]]) / np.sqrt(2), atol=1e-14)


def test_empty_constraint_matrix_null_basis_is_identity():
    np.testing.assert_array_equal(null_basis(np.zeros((0, 3))), np.eye(3))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)),
              elements=st.floats(-3, 3, allow_nan=False).map(lambda v: round(v, 3))))
def test_null_basis_and_pinv_properties(M):
    N = null_basis(M)
    rank = np.linalg.matrix_rank(M, tol=1e-10 * max(np.linalg.norm(M, 2), 1e-300))
    assert N.shape == (M.shape[1], M.shape[1] - rank)
    np.testing.assert_allclose(M @ N, 0, atol=1e-9)
    np.testing.assert_allclose(N.T @ N, np.eye(N.shape[1]), atol=1e-12)
    for c in range(N.shape[1]):
        nz = np.flatnonzero(np.abs(N[:, c]) > 1e-12)
        assert N[nz[0], c] > 0
    P = pinv(M)
    np.testing.assert_allclose(M @ P @ M, M, atol=1e-8)


def test_selection_matrix_detects_support_exhaustively():
    sys, sched = _schedule(6, 2)
    for i in range(6):
        enc = encode_column(sched, sys, i, 1)
        s = enc.s_x.astype(bool)
        for pattern in itertools.product([0, 1], repeat=6):
            v = np.array(pattern, float)
            inside = not np.any(v.astype(bool) & ~s)
            assert (np.abs(enc.M_x @ v).max(initial=0.0) == 0) == inside


def test_encoding_invariants_on_chain():
    sys, sched = _schedule(5, 2)
    rng = np.random.default_rng(0)
    for i in range(5):
        for enc in encode_column_stages(sched, sys, i).entries():
            np.testing.assert_allclose(enc.F @ enc.N_F, 0, atol=1e-12)
            np.testing.assert_allclose(enc.N_F.T @ enc.N_F, np.eye(enc.n_r), atol=1e-12)
            assert np.linalg.matrix_rank(enc.M_u @ enc.N_F) == enc.n_r
            rank_F = np.linalg.matrix_rank(enc.F) if enc.F.size else 0
            assert enc.n_r == enc.M_u.shape[1] - rank_F
            v = enc.basis @ rng.standard_normal(enc.basis.shape[1])
            assert np.all(v[~enc.s_x.astype(bool)] == 0)


def test_seed_is_admissible():
    sys, sched = _schedule(5, 2)
    for i in range(5):
        assert sched.x(1)[i, i]
        assert encode_column_stages(sched, sys, i).seed_residual == 0.0


def test_full_actuation_is_feasible():
    sys, sched = _schedule(8, 3)
    for i in range(8):
        rep = check_column_feasibility(encode_column_stages(sched, sys, i), sys, i)
        assert rep.feasible and rep.first_infeasible_k is None


def test_unconstrained_schedule_is_feasible_with_empty_constraints():
    sys = build_chain_network(4, 0.6, 1.0)
    sched = unconstrained_schedule(sys)
    for i in range(4):
        enc = encode_column_stages(sched, sys, i)
        assert enc.tail.M_x.shape == (0, 4)
        assert check_column_feasibility(enc, sys, i).feasible


def test_single_actuator_chain_is_infeasible():
    sys = _single_actuator_chain()
    sched = build_delayed_localization(build_graph(sys), 1, sys)
    rep = check_column_feasibility(encode_column_stages(sched, sys, 2), sys, 2)
    assert not rep.feasible
    assert rep.first_infeasible_k == 1
    assert max(rep.residuals) > 1e-9
    # without implied constraints the failure shows up where the leak happens
    plain = [encode_column(sched, sys, 2, k) for k in (1, 2)]
    assert check_column_feasibility(plain, sys, 2).first_infeasible_k == 2
