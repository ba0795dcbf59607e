"""Column-wise infinite-horizon state-feedback SLS and its estimation dual.

Each column problem is rewritten, kernel by kernel, as an unconstrained
time-varying LQR problem in the free variable ``r[k]``:

    q[k]      = -F_pinv[k] M_next[k] A phi_x[k] + N_F[k] r[k]
    phi_u[k]  = M_u[k] q[k] = -kappa[k] phi_x[k] + M_u[k] N_F[k] r[k]
    phi_x[k+1] = (A - B kappa[k]) phi_x[k] + B M_u[k] N_F[k] r[k]

Kernels ``k > d`` share one pattern, so their cost-to-go is a cross-weighted
algebraic Riccati solution; kernels ``1..d`` follow by backward recursion.
All value functions live on the admissible subspace of each kernel.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .slc import (ColumnEncoding, ColumnEncodingSet, SparsitySchedule, check_column_feasibility,
                  dual_schedule, encode_column_stages)
from .system import NetworkSystem

DARE_TOL = 1e-11
DARE_MAX_ITER = 100_000
DEFAULT_T_EVAL = 200


class SynthesisError(RuntimeError):
    """Column problem cannot be solved (infeasible schedule or unsolvable tail)."""


class StabilityError(SynthesisError):
    """Assembled realization is not Schur stable."""


@dataclass(frozen=True, eq=False)
class StageData:
    """Transformed LQR data for one kernel index (``k == d + 1`` is the tail)."""

    k: int
    kappa: np.ndarray
    Q: np.ndarray
    Z: np.ndarray
    R: np.ndarray
    A: np.ndarray
    B: np.ndarray
    P: np.ndarray          # projector onto admissible phi_x[k]
    enc: ColumnEncoding

    @property
    def n_r(self) -> int:
        return self.B.shape[1]


@dataclass(frozen=True, eq=False)
class TransformedColumnData:
    i: int
    stages: tuple
    tail: StageData

    @property
    def d(self) -> int:
        return len(self.stages)


def transform_stage(sys: NetworkSystem, enc: ColumnEncoding) -> StageData:
    kappa = enc.M_u @ enc.F_pinv @ enc.M_next @ sys.A
    MN = enc.M_u @ enc.N_F
    Q = sys.Q + kappa.T @ sys.R @ kappa
    return StageData(
        k=enc.k, kappa=kappa,
        Q=0.5 * (Q + Q.T),
        Z=-MN.T @ sys.R @ kappa,
        R=MN.T @ sys.R @ MN,
        A=sys.A - sys.B @ kappa,
        B=sys.B @ MN,
        P=enc.projector, enc=enc,
    )


def transform_column(sys: NetworkSystem, encodings: ColumnEncodingSet, i: int) -> TransformedColumnData:
    report = check_column_feasibility(encodings, sys, i)
    if not report.feasible:
        raise SynthesisError(f"column {i} is infeasible at kernel k={report.first_infeasible_k}")
    return TransformedColumnData(
        i=i,
        stages=tuple(transform_stage(sys, e) for e in encodings.stages),
        tail=transform_stage(sys, encodings.tail),
    )


def _gain(X, A, B, R, Z):
    if B.shape[1] == 0:
        return np.zeros((0, A.shape[1]))
    S = R + B.T @ X @ B
    return np.linalg.solve(0.5 * (S + S.T), B.T @ X @ A + Z)


def riccati_step(X_next: np.ndarray, A, B, Q, R, Z, P=None):
    """One backward step of the cross-weighted Riccati map; returns ``(X, K)``.

    ``X = Q + A'XA - (A'XB + Z')(R + B'XB)^-1 (B'XA + Z)`` and ``K`` is the
    minimising gain for ``r = -K phi``. With a projector ``P`` both are
    restricted to the admissible subspace.
    """
    K = _gain(X_next, A, B, R, Z)
    Acl = A - B @ K
    # Joseph-like form keeps X symmetric PSD
    X = Q + Acl.T @ X_next @ Acl + K.T @ R @ K - K.T @ Z - Z.T @ K
    if P is not None:
        X, K = P @ X @ P, K @ P
    return 0.5 * (X + X.T), K


def solve_tail_dare(A, B, Q, R, Z=None, P=None, tol: float = DARE_TOL,
                    max_iter: int = DARE_MAX_ITER):
    """Fixed-point iteration of the cross-weighted Riccati map, started at ``Q``.

    Returns ``(X, K)``; raises :class:`SynthesisError` when the iteration does
    not settle to ``tol`` (max-norm increment) within ``max_iter`` steps.
    """
    A, B, Q, R = (np.atleast_2d(np.asarray(M, float)) for M in (A, B, Q, R))
    Z = np.zeros((B.shape[1], A.shape[0])) if Z is None else np.atleast_2d(np.asarray(Z, float))
    X = Q if P is None else P @ Q @ P
    for _ in range(int(max_iter)):
        X_new, K = riccati_step(X, A, B, Q, R, Z, P)
        if not np.all(np.isfinite(X_new)):
            break
        if np.abs(X_new - X).max() < tol:
            return X_new, _gain(X_new, A, B, R, Z) @ (np.eye(A.shape[0]) if P is None else P)
        X = X_new
    raise SynthesisError("tail Riccati iteration did not converge; structure is infeasible or "
                         "not stabilizable on the admissible subspace")


def dare_residual(X, A, B, Q, R, Z=None, P=None) -> float:
    Z = np.zeros((B.shape[1], A.shape[0])) if Z is None else Z
    X_next, _ = riccati_step(X, A, B, Q, R, Z, P)
    return float(np.abs(X_next - X).max())


@dataclass(frozen=True, eq=False)
class RiccatiSolution:
    """Cost-to-go and gains; ``K_full`` maps ``phi_x[k]`` to ``phi_u[k]``."""

    X_tail: np.ndarray
    K_tail: np.ndarray
    X: tuple
    K: tuple
    K_full: tuple
    K_full_tail: np.ndarray


def full_gain(stage: StageData, K_r: np.ndarray) -> np.ndarray:
    """Map ``phi_x[k] -> phi_u[k]`` implied by ``r[k] = -K_r phi_x[k]``."""
    enc = stage.enc
    return (-stage.kappa - enc.M_u @ enc.N_F @ K_r) @ stage.P


def riccati_backward(data: TransformedColumnData, X_tail: np.ndarray,
                     K_tail: np.ndarray | None = None) -> RiccatiSolution:
    tail = data.tail
    if K_tail is None:
        K_tail = _gain(X_tail, tail.A, tail.B, tail.R, tail.Z) @ tail.P
    X_next = X_tail
    Xs, Ks = [], []
    for st in reversed(data.stages):
        X, K = riccati_step(X_next, st.A, st.B, st.Q, st.R, st.Z, st.P)
        Xs.append(X)
        Ks.append(K)
        X_next = X
    Xs.reverse()
    Ks.reverse()
    return RiccatiSolution(
        X_tail=X_tail, K_tail=K_tail, X=tuple(Xs), K=tuple(Ks),
        K_full=tuple(full_gain(st, K) for st, K in zip(data.stages, Ks)),
        K_full_tail=full_gain(tail, K_tail),
    )


@dataclass(frozen=True, eq=False)
class ColumnRealization:
    """State-space realization of column ``i``: ``(A_blk, B_blk, C_blk)`` gives
    ``Phi_x(:, i)`` and ``(A_blk, B_blk, K_blk)`` gives ``Phi_u(:, i)``.

    State block ``b < d`` holds ``phi_x[b+1]``; the last block holds every
    ``phi_x[k]`` with ``k > d``.
    """

    i: int
    d: int
    A_blk: np.ndarray
    B_blk: np.ndarray
    C_blk: np.ndarray
    K_blk: np.ndarray
    state_support: np.ndarray | None = None

    def compress(self) -> "ColumnRealization":
        """Drop state coordinates outside the admissible supports.

        Those coordinates only ever carry rounding noise, so the kernels are
        unchanged to machine precision.
        """
        if self.state_support is None:
            return self
        idx = np.flatnonzero(self.state_support)
        return ColumnRealization(i=self.i, d=self.d, A_blk=self.A_blk[np.ix_(idx, idx)],
                                 B_blk=self.B_blk[idx], C_blk=self.C_blk[:, idx], K_blk=self.K_blk[:, idx],
                                 state_support=None)

    @property
    def spectral_radius(self) -> float:
        return float(np.abs(np.linalg.eigvals(self.A_blk)).max()) if self.A_blk.size else 0.0

    def kernels(self, T: int):
        """Impulse-response kernels ``0..T`` as arrays ``(T+1, n, )`` and ``(T+1, m, )``."""
        n_out_x, n_out_u = self.C_blk.shape[0], self.K_blk.shape[0]
        phi_x = np.zeros((T + 1, n_out_x))
        phi_u = np.zeros((T + 1, n_out_u))
        s = self.B_blk[:, 0].copy()
        for k in range(1, T + 1):
            phi_x[k] = self.C_blk @ s
            phi_u[k] = self.K_blk @ s
            s = self.A_blk @ s
        return phi_x, phi_u, s

    def output_gramian(self, Q: np.ndarray, R: np.ndarray) -> np.ndarray:
        """``L = sum_k (A^k)' (C'QC + K'RK) A^k``."""
        M = self.C_blk.T @ Q @ self.C_blk + self.K_blk.T @ R @ self.K_blk
        return sla.solve_discrete_lyapunov(self.A_blk.T, M)


def assemble_realization(sol: RiccatiSolution, data: TransformedColumnData, i: int,
                         n: int | None = None) -> ColumnRealization:
    d = data.d
    n = data.tail.A.shape[0] if n is None else n
    m = sol.K_full_tail.shape[0]
    A_blk = np.zeros(((d + 1) * n, (d + 1) * n))
    for k, st in enumerate(data.stages, start=1):
        Acl = (st.A - st.B @ sol.K[k - 1]) @ st.P
        A_blk[k * n:(k + 1) * n, (k - 1) * n:k * n] = Acl
    tail = data.tail
    A_blk[d * n:, d * n:] = (tail.A - tail.B @ sol.K_tail) @ tail.P
    B_blk = np.zeros(((d + 1) * n, 1))
    B_blk[i, 0] = 1.0
    C_blk = np.tile(np.eye(n), (1, d + 1))
    K_blk = np.hstack([*sol.K_full, sol.K_full_tail]) if d else sol.K_full_tail
    support = np.concatenate([np.any(st.P != 0, axis=1) for st in (*data.stages, tail)])
    real = ColumnRealization(i=i, d=d, A_blk=A_blk, B_blk=B_blk, C_blk=C_blk, K_blk=K_blk.reshape(m, -1),
                             state_support=support)
    rho = real.spectral_radius
    if rho >= 1:
        raise StabilityError(f"column {i}: realization spectral radius {rho:.6f} >= 1")
    return real


@dataclass(frozen=True, eq=False)
class ColumnResult:
    encodings: ColumnEncodingSet
    data: TransformedColumnData
    riccati: RiccatiSolution
    realization: ColumnRealization


def synthesize_column(sys: NetworkSystem, schedule: SparsitySchedule, i: int) -> ColumnResult:
    enc = encode_column_stages(schedule, sys, i)
    data = transform_column(sys, enc, i)
    tail = data.tail
    X_tail, K_tail = solve_tail_dare(tail.A, tail.B, tail.Q, tail.R, tail.Z, tail.P)
    sol = riccati_backward(data, X_tail, K_tail)
    return ColumnResult(enc, data, sol, assemble_realization(sol, data, i, sys.n))


@dataclass(frozen=True, eq=False)
class StructuredSolution:
    """Column realizations plus truncated kernels ``Phi_x[0..T]``, ``Phi_u[0..T]``.

    For a Kalman-filter solution (``transposed``) the kernels are those of
    ``Phi_ew`` (n x n) and ``Phi_ev`` (n x p), and ``columns`` realise the rows.
    ``cost`` is the exact squared H2 norm under identity noise;
    ``truncated_cost`` stops at lag ``T`` and ``tail_bound`` is the geometric
    estimate ``||C_blk|| rho^T / (1 - rho)`` of what was dropped.
    """

    sys: NetworkSystem
    schedule: SparsitySchedule
    columns: tuple
    results: tuple
    Phi_x: np.ndarray
    Phi_u: np.ndarray
    cost: float
    truncated_cost: float
    tail_bound: float
    transposed: bool = False

    @property
    def T(self) -> int:
        return self.Phi_x.shape[0] - 1

    @property
    def column_costs(self) -> np.ndarray:
        return np.array([r.riccati.X[0][r.realization.i, r.realization.i] if r.riccati.X
                         else r.riccati.X_tail[r.realization.i, r.realization.i] for r in self.results])


def _solve_columns(sys, schedule, workers):
    cols = range(sys.n)
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda i: synthesize_column(sys, schedule, i), cols))
    return [synthesize_column(sys, schedule, i) for i in cols]


def synthesize_state_feedback(sys: NetworkSystem, schedule: SparsitySchedule,
                              T_eval: int = DEFAULT_T_EVAL, workers: int | None = None) -> StructuredSolution:
    """Optimal structured ``(Phi_xw, Phi_uw)``, one independent column at a time.

    Columns may be solved on a thread pool; results are reduced in column order.
    """
    results = _solve_columns(sys, schedule, workers)
    n, m = sys.n, sys.m
    Phi_x = np.zeros((T_eval + 1, n, n))
    Phi_u = np.zeros((T_eval + 1, m, n))
    cost = truncated = bound = 0.0
    for res in results:
        real = res.realization
        px, pu, s_rest = real.kernels(T_eval)
        Phi_x[:, :, real.i] = px
        Phi_u[:, :, real.i] = pu
        truncated += float(np.einsum("ka,ab,kb->", px, sys.Q, px) + np.einsum("ka,ab,kb->", pu, sys.R, pu))
        L = real.output_gramian(sys.Q, sys.R)
        cost += float(real.B_blk[:, 0] @ L @ real.B_blk[:, 0])
        rho = real.spectral_radius
        bound += np.linalg.norm(real.C_blk, 2) * rho ** T_eval / (1 - rho)
    return StructuredSolution(sys=sys, schedule=schedule, columns=tuple(r.realization for r in results),
                              results=tuple(results), Phi_x=Phi_x, Phi_u=Phi_u, cost=cost,
                              truncated_cost=truncated, tail_bound=float(bound))


def synthesize_kalman_filter(sys: NetworkSystem, schedule: SparsitySchedule,
                             T_eval: int = DEFAULT_T_EVAL, workers: int | None = None) -> StructuredSolution:
    """Structured estimation maps ``(Phi_ew, Phi_ev)`` from the dual problem.

    Solves the state-feedback problem on ``(A^T, C^T)`` with weights ``(W, V)``
    and the transposed schedule, then transposes every kernel so that
    ``Phi_ew (zI - A) - Phi_ev C = I``.
    """
    dual = sys.dual()
    sol = synthesize_state_feedback(dual, dual_schedule(schedule, sys), T_eval, workers)
    return StructuredSolution(
        sys=sys, schedule=schedule, columns=sol.columns, results=sol.results,
        Phi_x=np.ascontiguousarray(sol.Phi_x.transpose(0, 2, 1)),
        Phi_u=np.ascontiguousarray(sol.Phi_u.transpose(0, 2, 1)),
        cost=sol.cost, truncated_cost=sol.truncated_cost, tail_bound=sol.tail_bound, transposed=True,
    )
