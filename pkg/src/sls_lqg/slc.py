"""Sparsity schedules and the per-column nullspace encoding of their constraints.

A schedule fixes the support of every closed-loop kernel ``Phi[k]`` (``k >= 1``).
Column ``i`` of the state-feedback problem then reads

    M_x[k] phi_x[k] = 0,   phi_u[k] = M_u[k] q[k],

and the dynamics couple consecutive kernels through ``F[k] = M_x[k+1] B M_u[k]``.
When ``F[k]`` cannot absorb every admissible ``M_x[k+1] A phi_x[k]``, the leftover
directions are constraints on ``phi_x[k]`` itself; :func:`encode_column_stages`
pushes them backwards so every stage of the column problem is consistent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .system import InterconnectionGraph, NetworkSystem

RANK_RTOL = 1e-10
IMPLIED_ATOL = 1e-10
FEASIBILITY_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class SparsitySchedule:
    """Kernel supports for ``k = 1..d``; every ``k > d`` reuses the ``k = d`` pattern.

    ``node_patterns[k-1][I, J]`` allows node ``I`` to respond at lag ``k`` to a
    disturbance entering at node ``J``. ``S_x``/``S_u`` are the coordinate-level
    lifts (n x n and m x n).
    """

    d: int
    node_patterns: tuple
    S_x: tuple
    S_u: tuple

    def x(self, k: int) -> np.ndarray:
        return self.S_x[min(k, self.d) - 1]

    def u(self, k: int) -> np.ndarray:
        return self.S_u[min(k, self.d) - 1]

    @property
    def S_x_tail(self) -> np.ndarray:
        return self.S_x[-1]

    @property
    def S_u_tail(self) -> np.ndarray:
        return self.S_u[-1]


def schedule_from_node_patterns(patterns, node_of_state, node_of_input) -> SparsitySchedule:
    patterns = tuple(np.asarray(P, dtype=bool) for P in patterns)
    if not patterns:
        raise ValueError("schedule needs at least one kernel pattern")
    nx, nu = np.asarray(node_of_state), np.asarray(node_of_input)
    S_x = tuple(P[np.ix_(nx, nx)] for P in patterns)
    S_u = tuple(P[np.ix_(nu, nx)] for P in patterns)
    for S in S_x + S_u + patterns:
        S.setflags(write=False)
    return SparsitySchedule(d=len(patterns), node_patterns=patterns, S_x=S_x, S_u=S_u)


def build_delayed_localization(graph: InterconnectionGraph, d: int,
                               sys: NetworkSystem) -> SparsitySchedule:
    """d-delayed localization: lag-``k`` support is the ``min(k, d)``-hop ball.

    Inputs inherit the pattern of the node they belong to.
    """
    if int(d) != d or d < 1:
        raise ValueError(f"d must be a positive integer, got {d}")
    patterns = [graph.within(k) for k in range(1, int(d) + 1)]
    return schedule_from_node_patterns(patterns, sys.node_of_state, sys.node_of_input)


def unconstrained_schedule(sys: NetworkSystem) -> SparsitySchedule:
    N = sys.n_nodes
    return schedule_from_node_patterns([np.ones((N, N), bool)], sys.node_of_state, sys.node_of_input)


def dual_schedule(schedule: SparsitySchedule, sys: NetworkSystem) -> SparsitySchedule:
    """Schedule for the estimation dual on ``(A^T, C^T)``.

    Kernel patterns are transposed so that ``Phi_ew[k]`` keeps the support of
    ``S_x[k]`` and row ``i`` of ``Phi_ev[k]`` reads outputs of nodes in ``N_in^k(i)``.
    """
    patterns = [P.T for P in schedule.node_patterns]
    return schedule_from_node_patterns(patterns, sys.node_of_state, sys.node_of_output)


# -- small linear-algebra helpers --------------------------------------------

def _fix_signs(cols: np.ndarray) -> np.ndarray:
    for c in range(cols.shape[1]):
        nz = np.flatnonzero(np.abs(cols[:, c]) > 1e-12)
        if nz.size and cols[nz[0], c] < 0:
            cols[:, c] = -cols[:, c]
    return cols


def _rank(s: np.ndarray, atol: float | None = None) -> int:
    if s.size == 0:
        return 0
    tol = atol if atol is not None else RANK_RTOL * s[0]
    return int(np.sum(s > max(tol, 0.0))) if s[0] > 0 else 0


def pinv(M: np.ndarray) -> np.ndarray:
    """Pseudo-inverse with singular values below ``1e-10 * s_max`` dropped."""
    if M.size == 0:
        return np.zeros(M.shape[::-1])
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    r = _rank(s)
    return (Vt[:r].T / s[:r]) @ U[:, :r].T


def null_basis(M: np.ndarray) -> np.ndarray:
    """Orthonormal basis of ``null(M)``, columns sign-normalised."""
    ncols = M.shape[1]
    if M.shape[0] == 0:
        return np.eye(ncols)
    if ncols == 0:
        return np.zeros((0, 0))
    _, s, Vt = np.linalg.svd(M, full_matrices=True)
    r = _rank(s)
    return _fix_signs(Vt[r:].T.copy())


def _row_basis(M: np.ndarray, atol: float) -> np.ndarray:
    if M.size == 0:
        return np.zeros((0, M.shape[1]))
    _, s, Vt = np.linalg.svd(M, full_matrices=False)
    return Vt[: _rank(s, atol)]


def selection_rows(mask: np.ndarray) -> np.ndarray:
    """Rows ``e_j^T`` for every ``j`` where ``mask`` is zero."""
    return np.eye(mask.size)[~np.asarray(mask, bool)]


def selection_cols(mask: np.ndarray) -> np.ndarray:
    """Columns ``e_j`` for every ``j`` where ``mask`` is one."""
    return np.eye(mask.size)[:, np.asarray(mask, bool)]


@dataclass(frozen=True, eq=False)
class ColumnEncoding:
    """Encoding of one kernel index ``k`` of column ``i``.

    ``k == d + 1`` denotes the constant tail (all ``k > d``). ``M_next`` is the
    constraint matrix applied to ``phi_x[k+1]``; it equals the selection
    ``M_x[k+1]`` unless implied constraints were added. ``basis`` spans the
    admissible ``phi_x[k]``.
    """

    i: int
    k: int
    s_x: np.ndarray
    s_u: np.ndarray
    M_x: np.ndarray
    M_u: np.ndarray
    M_next: np.ndarray
    F: np.ndarray
    F_pinv: np.ndarray
    N_F: np.ndarray
    basis: np.ndarray

    @property
    def n_r(self) -> int:
        return self.N_F.shape[1]

    @property
    def projector(self) -> np.ndarray:
        return self.basis @ self.basis.T


def _make_entry(sys, i, k, s_x, s_u, M_x, M_next, basis) -> ColumnEncoding:
    M_u = selection_cols(s_u)
    F = M_next @ sys.B @ M_u
    return ColumnEncoding(i=i, k=k, s_x=s_x, s_u=s_u, M_x=M_x, M_u=M_u, M_next=M_next,
                          F=F, F_pinv=pinv(F), N_F=null_basis(F), basis=basis)


def encode_column(schedule: SparsitySchedule, sys: NetworkSystem, i: int, k: int) -> ColumnEncoding:
    """Plain encoding of kernel ``k`` using only the schedule's selection matrices."""
    if k < 1:
        raise ValueError("kernel index starts at 1")
    s_x = schedule.x(k)[:, i]
    return _make_entry(sys, i, k, s_x, schedule.u(k)[:, i], selection_rows(s_x),
                       selection_rows(schedule.x(k + 1)[:, i]), selection_cols(s_x))


def _implied(sys, M_next, s_u) -> np.ndarray:
    F = M_next @ sys.B @ selection_cols(s_u)
    G = M_next @ sys.A
    return G - F @ (pinv(F) @ G)


def _tighten(s_x: np.ndarray, implied: np.ndarray):
    """Combine the support selection with implied rows; return (constraints, basis)."""
    sel = selection_rows(s_x)
    free = np.flatnonzero(s_x)
    extra = _row_basis(implied[:, free], IMPLIED_ATOL)
    n = s_x.size
    basis = np.zeros((n, 0))
    if free.size:
        local = null_basis(extra) if extra.shape[0] else np.eye(free.size)
        basis = np.zeros((n, local.shape[1]))
        basis[free] = local
    if extra.shape[0] == 0:
        return sel, basis
    E = np.zeros((extra.shape[0], n))
    E[:, free] = extra
    return np.vstack([sel, E]), basis


@dataclass(frozen=True, eq=False)
class ColumnEncodingSet:
    """Consistent encodings of column ``i``: ``stages[k-1]`` for ``k = 1..d`` plus ``tail``."""

    i: int
    d: int
    stages: tuple
    tail: ColumnEncoding
    seed_residual: float

    def entries(self) -> list[ColumnEncoding]:
        return [*self.stages, self.tail]


def encode_column_stages(schedule: SparsitySchedule, sys: NetworkSystem, i: int) -> ColumnEncodingSet:
    """Encode every kernel of column ``i``, propagating implied constraints backwards.

    The tail constraint set is the smallest fixed point containing the tail
    support; stage constraints are then swept from ``k = d`` down to ``1``.
    """
    d, n = schedule.d, sys.n
    s_x_tail, s_u_tail = schedule.S_x_tail[:, i], schedule.S_u_tail[:, i]

    M_tail, basis_tail = selection_rows(s_x_tail), selection_cols(s_x_tail)
    for _ in range(n + 1):
        M_new, basis_new = _tighten(s_x_tail, _implied(sys, M_tail, s_u_tail))
        converged = M_new.shape[0] == M_tail.shape[0]
        M_tail, basis_tail = M_new, basis_new
        if converged:
            break
    tail = _make_entry(sys, i, d + 1, s_x_tail, s_u_tail, selection_rows(s_x_tail), M_tail, basis_tail)

    stages = []
    M_next = M_tail
    for k in range(d, 0, -1):
        s_x, s_u = schedule.x(k)[:, i], schedule.u(k)[:, i]
        M_k, basis_k = _tighten(s_x, _implied(sys, M_next, s_u))
        stages.append(_make_entry(sys, i, k, s_x, s_u, selection_rows(s_x), M_next, basis_k))
        M_next = M_k
    stages.reverse()
    e_i = np.eye(n)[:, i]
    seed_residual = float(np.abs(M_next @ e_i).max()) if M_next.shape[0] else 0.0
    return ColumnEncodingSet(i=i, d=d, stages=tuple(stages), tail=tail, seed_residual=seed_residual)


@dataclass(frozen=True)
class FeasibilityReport:
    feasible: bool
    first_infeasible_k: int | None
    residuals: tuple


def check_column_feasibility(encodings, sys: NetworkSystem, i: int,
                             tol: float = FEASIBILITY_TOL) -> FeasibilityReport:
    """Check that ``M_next A phi + F q = 0`` is solvable for every admissible ``phi``.

    At ``k = 1`` the only admissible kernel is the seed ``e_i``, which must also
    satisfy the kernel's own support. Infeasibility is reported, not raised.
    """
    if isinstance(encodings, ColumnEncodingSet):
        encodings = encodings.entries()
    e_i = np.eye(sys.n)[:, [i]]
    residuals = []
    first = None
    for enc in encodings:
        if enc.k == 1:
            phis = e_i
            own = np.abs(enc.M_x @ e_i).max() if enc.M_x.shape[0] else 0.0
        else:
            phis, own = enc.basis, 0.0
        res = 0.0
        if enc.M_next.shape[0] and phis.shape[1]:
            G = enc.M_next @ sys.A @ phis
            res = float(np.abs(G - enc.F @ (enc.F_pinv @ G)).max())
        res = max(res, float(own))
        residuals.append(res)
        if first is None and res > tol:
            first = enc.k
    return FeasibilityReport(feasible=first is None, first_infeasible_k=first, residuals=tuple(residuals))
