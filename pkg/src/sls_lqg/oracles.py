"""Independent reference solutions used to check the structured synthesis.

* centralized LQR/LQG from the two standard Riccati equations;
* brute-force FIR column problems solved through their KKT system;
* Monte Carlo estimates of the average LQG cost of any controller.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .clm import ClosedLoopMaps, KernelSequence
from .slc import SparsitySchedule
from .system import NetworkSystem

DARE_TOL = 1e-11
DARE_MAX_ITER = 1_000_000
KKT_TOL = 1e-9
DIVERGENCE_LIMIT = 1e9


class OracleError(RuntimeError):
    pass


class FirInfeasibleError(OracleError):
    """The FIR terminal condition cannot be met under the given supports."""


class InstabilityError(RuntimeError):
    """Simulated state norm exceeded the divergence limit."""


def riccati_fixed_point(A, B, Q, R, tol: float = DARE_TOL, max_iter: int = DARE_MAX_ITER,
                        check_monotone: bool = False) -> np.ndarray:
    """Iterate ``X <- Q + A'XA - A'XB (R + B'XB)^-1 B'XA`` from ``X = Q``.

    With ``check_monotone`` the smallest eigenvalue of each increment is
    verified to be nonnegative (up to rounding).
    """
    X = np.array(Q, dtype=float)
    for _ in range(max_iter):
        BX = B.T @ X
        X_new = Q + A.T @ X @ A - (BX @ A).T @ np.linalg.solve(R + BX @ B, BX @ A)
        X_new = 0.5 * (X_new + X_new.T)
        if not np.all(np.isfinite(X_new)):
            break
        step = X_new - X
        if check_monotone and np.linalg.eigvalsh(step).min() < -1e-9 * max(1.0, np.abs(X_new).max()):
            raise OracleError("Riccati iteration lost monotonicity")
        X = X_new
        if np.abs(step).max() < tol:
            return X
    raise OracleError("Riccati iteration did not converge (not stabilizable/detectable?)")


@dataclass(frozen=True, eq=False)
class CentralizedLqgSolution:
    """``K_lqr`` acts as ``u = -K_lqr x``; ``L_kf`` is the one-step predictor gain.

    ``P_kf`` is the steady-state covariance of ``x(t) - xhat(t | t-1)``.
    """

    P_lqr: np.ndarray
    K_lqr: np.ndarray
    P_kf: np.ndarray
    L_kf: np.ndarray
    lqg_cost: float
    lqr_cost: float


def solve_centralized_lqg(sys: NetworkSystem, tol: float = DARE_TOL) -> CentralizedLqgSolution:
    """Optimal strictly proper output feedback (predictor-form LQG).

    ``J = tr(P_lqr W) + tr((R + B'P_lqr B) K P_kf K')``; the state-feedback
    part alone gives ``tr(P_lqr W)``.
    """
    A, B, C = sys.A, sys.B, sys.C
    P = riccati_fixed_point(A, B, sys.Q, sys.R, tol)
    K = np.linalg.solve(sys.R + B.T @ P @ B, B.T @ P @ A)
    S = riccati_fixed_point(A.T, C.T, sys.W, sys.V, tol)
    L = A @ S @ C.T @ np.linalg.inv(C @ S @ C.T + sys.V)
    lqr = float(np.trace(P @ sys.W))
    lqg = lqr + float(np.trace((sys.R + B.T @ P @ B) @ K @ S @ K.T))
    return CentralizedLqgSolution(P_lqr=P, K_lqr=K, P_kf=S, L_kf=L, lqg_cost=lqg, lqr_cost=lqr)


def centralized_closed_loop_maps(sys: NetworkSystem, sol: CentralizedLqgSolution, T: int) -> ClosedLoopMaps:
    """Kernels of ``(w, v) -> (x, u)`` under the predictor LQG controller.

    Closed-loop state ``(x, xhat)``::

        x+    = A x - B K xhat + w
        xhat+ = L C x + (A - B K - L C) xhat + L v,    u = -K xhat
    """
    n, m, p = sys.n, sys.m, sys.p
    A, B, C, K, L = sys.A, sys.B, sys.C, sol.K_lqr, sol.L_kf
    Acl = np.block([[A, -B @ K], [L @ C, A - B @ K - L @ C]])
    Bw = np.vstack([np.eye(n), np.zeros((n, n))])
    Bv = np.vstack([np.zeros((n, p)), L])
    Cx = np.hstack([np.eye(n), np.zeros((n, n))])
    Cu = np.hstack([np.zeros((m, n)), -K])
    out = {k: np.zeros((T + 1, r, c)) for k, r, c in
           (("Phi_xx", n, n), ("Phi_ux", m, n), ("Phi_xy", n, p), ("Phi_uy", m, p))}
    Sw, Sv = Bw.copy(), Bv.copy()
    for k in range(1, T + 1):
        out["Phi_xx"][k], out["Phi_ux"][k] = Cx @ Sw, Cu @ Sw
        out["Phi_xy"][k], out["Phi_uy"][k] = Cx @ Sv, Cu @ Sv
        Sw, Sv = Acl @ Sw, Acl @ Sv
    return ClosedLoopMaps(**{k: KernelSequence(v, True) for k, v in out.items()}, sys=sys,
                          meta={"centralized": True, "T": T})


@dataclass(frozen=True, eq=False)
class FirQpSolution:
    """Column ``i`` with ``phi_x[1..H]``, ``phi_u[1..H]`` (index 0 is lag 1) and ``phi_x[H+1] = 0``."""

    i: int
    H: int
    phi_x: np.ndarray
    phi_u: np.ndarray
    cost: float
    kkt_residual: float


def solve_fir_column_qp(sys: NetworkSystem, schedule: SparsitySchedule, i: int, H: int) -> FirQpSolution:
    """Minimise ``sum_k phi_x'Q phi_x + phi_u'R phi_u`` over FIR column ``i`` of horizon ``H``.

    Unknowns are the supported entries of ``phi_x[2..H]`` and ``phi_u[1..H]``;
    ``phi_x[1] = e_i`` is fixed. Equalities are the dynamics for ``k = 1..H``
    with ``phi_x[H+1] = 0``; entries off the support enter as zero rows.
    """
    n, m = sys.n, sys.m
    if H < 1:
        raise ValueError("horizon must be >= 1")
    e_i = np.zeros(n)
    e_i[i] = 1.0
    if not schedule.x(1)[i, i]:
        raise FirInfeasibleError(f"column {i}: seed outside the lag-1 support")
    # variable layout: x-blocks for k = 2..H, then u-blocks for k = 1..H
    x_idx = {k: np.flatnonzero(schedule.x(k)[:, i]) for k in range(2, H + 1)}
    u_idx = {k: np.flatnonzero(schedule.u(k)[:, i]) for k in range(1, H + 1)}
    starts, pos = {}, 0
    for k in range(2, H + 1):
        starts[("x", k)] = pos
        pos += x_idx[k].size
    for k in range(1, H + 1):
        starts[("u", k)] = pos
        pos += u_idx[k].size
    nv = pos

    Hm = np.zeros((nv, nv))
    for k in range(2, H + 1):
        s, idx = starts[("x", k)], x_idx[k]
        Hm[s:s + idx.size, s:s + idx.size] = sys.Q[np.ix_(idx, idx)]
    for k in range(1, H + 1):
        s, idx = starts[("u", k)], u_idx[k]
        Hm[s:s + idx.size, s:s + idx.size] = sys.R[np.ix_(idx, idx)]
    # the fixed phi_x[1] = e_i only adds a constant: Q couples no two lags
    const = float(e_i @ sys.Q @ e_i)

    # phi_x[k+1] - A phi_x[k] - B phi_u[k] = 0, k = 1..H
    E = np.zeros((n * H, nv))
    g = np.zeros(n * H)
    for k in range(1, H + 1):
        rows = slice((k - 1) * n, k * n)
        if k + 1 <= H:
            s, idx = starts[("x", k + 1)], x_idx[k + 1]
            E[rows, s + np.arange(idx.size)] += np.eye(n)[:, idx]
        if k == 1:
            g[rows] += sys.A @ e_i
        else:
            s, idx = starts[("x", k)], x_idx[k]
            E[rows, s:s + idx.size] -= sys.A[:, idx]
        s, idx = starts[("u", k)], u_idx[k]
        E[rows, s:s + idx.size] -= sys.B[:, idx]

    KKT = np.block([[2 * Hm, E.T], [E, np.zeros((E.shape[0], E.shape[0]))]])
    rhs = np.concatenate([np.zeros(nv), g])
    sol = np.linalg.lstsq(KKT, rhs, rcond=None)[0]
    z = sol[:nv]
    primal = float(np.abs(E @ z - g).max()) if g.size else 0.0
    if primal > KKT_TOL:
        raise FirInfeasibleError(f"column {i}: FIR terminal condition unattainable at H={H} "
                                 f"(equality residual {primal:.2e})")
    dual = float(np.abs(KKT @ sol - rhs).max())

    phi_x = np.zeros((H, n))
    phi_u = np.zeros((H, m))
    phi_x[0] = e_i
    for k in range(2, H + 1):
        s, idx = starts[("x", k)], x_idx[k]
        phi_x[k - 1, idx] = z[s:s + idx.size]
    for k in range(1, H + 1):
        s, idx = starts[("u", k)], u_idx[k]
        phi_u[k - 1, idx] = z[s:s + idx.size]
    cost = const + float(z @ Hm @ z)
    return FirQpSolution(i=i, H=H, phi_x=phi_x, phi_u=phi_u, cost=cost, kkt_residual=max(primal, dual))


def fir_cost(sys: NetworkSystem, schedule: SparsitySchedule, H: int) -> float:
    """Sum of FIR column costs (identity disturbance covariance)."""
    return float(sum(solve_fir_column_qp(sys, schedule, i, H).cost for i in range(sys.n)))


# -- Monte Carlo ---------------------------------------------------------------

def noise_generator(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based Philox generator keyed by ``(seed, stream)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(stream)])))


def gaussian_noise(sys: NetworkSystem, T: int, seed: int, stream: int = 0):
    """``w ~ N(0, W)`` and ``v ~ N(0, V)`` for ``T`` steps."""
    rng = noise_generator(seed, stream)
    Lw, Lv = np.linalg.cholesky(sys.W), np.linalg.cholesky(sys.V)
    w = rng.standard_normal((T, sys.n)) @ Lw.T
    v = rng.standard_normal((T, sys.p)) @ Lv.T
    return w, v


class PredictorLqgController:
    """``u = -K xhat``, ``xhat+ = A xhat + B u + L (y - C xhat)``."""

    def __init__(self, sys: NetworkSystem, sol: CentralizedLqgSolution):
        self.sys, self.sol = sys, sol
        self.xhat = np.zeros(sys.n)

    def step(self, y: np.ndarray) -> np.ndarray:
        s, K, L = self.sys, self.sol.K_lqr, self.sol.L_kf
        u = -K @ self.xhat
        self.xhat = s.A @ self.xhat + s.B @ u + L @ (y - s.C @ self.xhat)
        return u


@dataclass(frozen=True)
class MonteCarloResult:
    mean: float
    stderr: float
    trial_costs: tuple


def run_plant(sys: NetworkSystem, controller, w: np.ndarray, v: np.ndarray) -> float:
    """Average ``x'Qx + u'Ru`` over one trajectory started at ``x = 0``."""
    T = w.shape[0]
    x = np.zeros(sys.n)
    total = 0.0
    A, B, C, Q, R = sys.A, sys.B, sys.C, sys.Q, sys.R
    for t in range(T):
        u = controller.step(C @ x + v[t])
        total += x @ Q @ x + u @ R @ u
        x = A @ x + B @ u + w[t]
        if not np.isfinite(x).all() or np.abs(x).max() > DIVERGENCE_LIMIT:
            raise InstabilityError(f"state norm exceeded {DIVERGENCE_LIMIT:g} at t={t}")
    return total / T


def simulate_lqg_cost(controller_factory: Callable[[], object], sys: NetworkSystem, T_sim: int,
                      seed: int, n_trials: int) -> MonteCarloResult:
    """Mean and standard error of the time-averaged cost across seeded trials.

    Trial ``k`` draws its noise from stream ``k`` of ``seed``, so results do not
    depend on the order in which trials are run.
    """
    costs = []
    for k in range(n_trials):
        w, v = gaussian_noise(sys, T_sim, seed, k)
        costs.append(run_plant(sys, controller_factory(), w, v))
    costs = np.asarray(costs)
    se = float(costs.std(ddof=1) / np.sqrt(n_trials)) if n_trials > 1 else float("nan")
    return MonteCarloResult(mean=float(costs.mean()), stderr=se, trial_costs=tuple(costs.tolist()))
