"""Truncated-kernel arithmetic for closed-loop maps.

A transfer operator ``G(z) = sum_k z^-k G[k]`` is stored as an array of shape
``(T + 1, rows, cols)``. Composition, feasibility residuals, H2 costs and
localization widths all work on these arrays.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .system import InterconnectionGraph, NetworkSystem

ZERO_TOL = 1e-10


class ContractError(ValueError):
    """Operation applied to a sequence that violates its precondition."""


@dataclass(frozen=True, eq=False)
class KernelSequence:
    kernels: np.ndarray
    strictly_proper: bool = False

    def __post_init__(self):
        G = np.asarray(self.kernels, dtype=float)
        if G.ndim != 3:
            raise ContractError(f"kernels must have shape (T+1, rows, cols), got {G.shape}")
        if self.strictly_proper and np.any(G[0] != 0):
            raise ContractError("strictly proper sequence must have a zero lag-0 kernel")
        object.__setattr__(self, "kernels", G)

    @classmethod
    def from_kernels(cls, kernels, strictly_proper: bool | None = None) -> "KernelSequence":
        G = np.asarray(kernels, dtype=float)
        if strictly_proper is None:
            strictly_proper = not np.any(G[0])
        return cls(G, strictly_proper)

    @property
    def T(self) -> int:
        return self.kernels.shape[0] - 1

    @property
    def shape(self) -> tuple:
        return self.kernels.shape[1:]

    def __getitem__(self, k):
        return self.kernels[k]

    def truncate(self, T: int) -> "KernelSequence":
        return KernelSequence(self.kernels[: T + 1].copy(), self.strictly_proper)

    def __add__(self, other: "KernelSequence") -> "KernelSequence":
        T = min(self.T, other.T)
        return KernelSequence.from_kernels(self.kernels[: T + 1] + other.kernels[: T + 1])

    def __sub__(self, other: "KernelSequence") -> "KernelSequence":
        T = min(self.T, other.T)
        return KernelSequence.from_kernels(self.kernels[: T + 1] - other.kernels[: T + 1])

    def __neg__(self) -> "KernelSequence":
        return KernelSequence(-self.kernels, self.strictly_proper)

    def left(self, M: np.ndarray) -> "KernelSequence":
        """Constant left factor ``M G``."""
        return KernelSequence(np.matmul(M, self.kernels), self.strictly_proper)

    def right(self, M: np.ndarray) -> "KernelSequence":
        return KernelSequence(np.matmul(self.kernels, M), self.strictly_proper)


def delay(M: np.ndarray, lag: int, T: int) -> KernelSequence:
    """``z^-lag M`` as a sequence of length ``T + 1``."""
    G = np.zeros((T + 1, *np.shape(M)))
    if lag <= T:
        G[lag] = M
    return KernelSequence(G, lag > 0)


def shift(G: KernelSequence) -> KernelSequence:
    """Multiply by ``z``: ``G'[k] = G[k + 1]``; the result has one lag fewer."""
    if not G.strictly_proper:
        raise ContractError("shift needs a strictly proper sequence")
    return KernelSequence.from_kernels(G.kernels[1:].copy())


def convolve(G: KernelSequence, H: KernelSequence, T: int | None = None) -> KernelSequence:
    """``(G H)[k] = sum_j G[j] H[k - j]`` for ``k <= T``."""
    if G.shape[1] != H.shape[0]:
        raise ContractError(f"inner dimensions differ: {G.shape} x {H.shape}")
    T = min(G.T, H.T) if T is None else T
    out = np.zeros((T + 1, G.shape[0], H.shape[1]))
    Hk = H.kernels
    for j in range(min(T, G.T) + 1):
        Gj = G.kernels[j]
        if not Gj.any():
            continue
        L = min(T + 1 - j, Hk.shape[0])
        if L > 0:
            out[j:j + L] += np.matmul(Gj, Hk[:L])
    return KernelSequence.from_kernels(out, G.strictly_proper or H.strictly_proper or None)


def z_minus_A(Phi: KernelSequence, A: np.ndarray) -> KernelSequence:
    """``(zI - A) Phi`` for strictly proper ``Phi``; one lag shorter than ``Phi``."""
    return shift(Phi) - Phi.left(A).truncate(Phi.T - 1)


@dataclass(frozen=True, eq=False)
class ClosedLoopMaps:
    """The four maps ``(w, v) -> (x, u)`` plus the factors they came from."""

    Phi_xx: KernelSequence
    Phi_ux: KernelSequence
    Phi_xy: KernelSequence
    Phi_uy: KernelSequence
    sys: NetworkSystem
    sf: object = None
    kf: object = None
    meta: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return self.Phi_xx.T

    def maps(self) -> dict:
        return {"Phi_xx": self.Phi_xx, "Phi_ux": self.Phi_ux, "Phi_xy": self.Phi_xy, "Phi_uy": self.Phi_uy}


def compose_output_feedback(sf, kf, T: int | None = None) -> ClosedLoopMaps:
    """Separation-style composition of a state-feedback and an estimation solution.

    With ``D_w = (zI - A) Phi_ew`` and ``D_v = (zI - A) Phi_ev``::

        Phi_xx = Phi_xw + Phi_ew - Phi_xw D_w      Phi_xy = Phi_ev - Phi_xw D_v
        Phi_ux = Phi_uw - Phi_uw D_w               Phi_uy = -Phi_uw D_v

    ``T`` is capped at ``kf.T - 1`` because ``D`` needs one extra lag.
    """
    if sf.sys is not kf.sys and not sf.sys.equals(kf.sys):
        raise ContractError("state-feedback and estimation solutions were built for different plants")
    sys = sf.sys
    T_max = min(sf.T, kf.T - 1)
    T = T_max if T is None else T
    if T > T_max:
        raise ContractError(f"horizon {T} exceeds what the factors support ({T_max})")
    n, m = sys.n, sys.m
    Phi_xw = KernelSequence(sf.Phi_x[: T + 1], True)
    Phi_uw = KernelSequence(sf.Phi_u[: T + 1], True)
    Phi_ew = KernelSequence(kf.Phi_x[: T + 2], True)
    Phi_ev = KernelSequence(kf.Phi_u[: T + 2], True)
    # one stacked product covers all four cross terms
    left = KernelSequence(np.concatenate([Phi_xw.kernels, Phi_uw.kernels], axis=1), True)
    D = KernelSequence(np.concatenate([z_minus_A(Phi_ew, sys.A).kernels,
                                       z_minus_A(Phi_ev, sys.A).kernels], axis=2))
    P = convolve(left, D, T).kernels
    Pxw, Puw = P[:, :n, :n], P[:, n:, :n]
    Pxv, Puv = P[:, :n, n:], P[:, n:, n:]
    maps = dict(
        Phi_xx=Phi_xw.kernels + Phi_ew.kernels[: T + 1] - Pxw,
        Phi_ux=Phi_uw.kernels - Puw,
        Phi_xy=Phi_ev.kernels[: T + 1] - Pxv,
        Phi_uy=-Puv,
    )
    for G in maps.values():
        G[0] = 0.0
    return ClosedLoopMaps(**{k: KernelSequence(v, True) for k, v in maps.items()}, sys=sys, sf=sf, kf=kf,
                          meta={"d": sf.schedule.d, "T": T})


def _arr(G) -> np.ndarray:
    return G.kernels if isinstance(G, KernelSequence) else np.asarray(G, dtype=float)


def verify_sf_feasibility(Phi_xw, Phi_uw, sys: NetworkSystem, T: int | None = None) -> float:
    """Max residual of ``Phi_xw[k+1] - A Phi_xw[k] - B Phi_uw[k] = delta_k0 I`` for ``k < T``.

    Nonzero lag-0 kernels count towards the residual.
    """
    X, U = _arr(Phi_xw), _arr(Phi_uw)
    T = X.shape[0] - 1 if T is None else min(T, X.shape[0] - 1)
    R = X[1:T + 1] - np.matmul(sys.A, X[:T]) - np.matmul(sys.B, U[:T])
    R[0] -= np.eye(sys.n)
    res = np.abs(R).max() if R.size else 0.0
    return float(max(res, np.abs(X[0]).max(), np.abs(U[0]).max()))


def verify_of_feasibility(clm: ClosedLoopMaps, sys: NetworkSystem | None = None, T: int | None = None) -> float:
    """Max residual over both affine identities of output-feedback achievability.

    Left:  ``(zI - A) Phi_x. - B Phi_u. = [I 0]``.
    Right: ``Phi_.x (zI - A) - Phi_.y C = [I; 0]``.
    """
    sys = clm.sys if sys is None else sys
    Xx, Ux, Xy, Uy = (_arr(G) for G in (clm.Phi_xx, clm.Phi_ux, clm.Phi_xy, clm.Phi_uy))
    T = Xx.shape[0] - 1 if T is None else min(T, Xx.shape[0] - 1)
    A, B, C = sys.A, sys.B, sys.C
    I = np.eye(sys.n)
    r = [
        Xx[1:T + 1] - A @ Xx[:T] - B @ Ux[:T],
        Xy[1:T + 1] - A @ Xy[:T] - B @ Uy[:T],
        Xx[1:T + 1] - Xx[:T] @ A - Xy[:T] @ C,
        Ux[1:T + 1] - Ux[:T] @ A - Uy[:T] @ C,
    ]
    r[0][0] -= I
    r[2][0] -= I
    worst = max(float(np.abs(x).max()) for x in r)
    lag0 = max(float(np.abs(G[0]).max()) for G in (Xx, Ux, Xy, Uy))
    return max(worst, lag0)


def _psd_sqrt(M: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(M)
    return (V * np.sqrt(np.clip(w, 0, None))) @ V.T


@dataclass(frozen=True)
class H2Report:
    cost: float
    tail_bound: float
    T: int


def _tail_estimate(sq_norms: np.ndarray, window: int = 20) -> float:
    """Geometric extrapolation of the squared-kernel norms beyond the horizon."""
    T = sq_norms.size - 1
    if T < 2 * window or sq_norms[-1] == 0:
        return 0.0 if sq_norms[-1] == 0 else float("inf")
    a, b = sq_norms[T - window], sq_norms[T]
    if a <= 0:
        return 0.0
    r = (b / a) ** (1.0 / window)
    return float(b * r / (1 - r)) if r < 1 else float("inf")


def h2_cost(obj, sys: NetworkSystem | None = None, T: int | None = None) -> H2Report:
    """Squared H2 norm of ``diag(Q, R)^1/2 Phi diag(W, V)^1/2``, truncated at lag ``T``.

    Accepts a :class:`ClosedLoopMaps` or a state-feedback solution (maps
    ``w -> (x, u)`` only). The tail bound extrapolates the decay of the last
    kernels geometrically.
    """
    sys = obj.sys if sys is None else sys
    Qh, Rh, Wh, Vh = (_psd_sqrt(M) for M in (sys.Q, sys.R, sys.W, sys.V))
    if isinstance(obj, ClosedLoopMaps):
        T = obj.T if T is None else min(T, obj.T)
        blocks = [(Qh, obj.Phi_xx, Wh), (Rh, obj.Phi_ux, Wh), (Qh, obj.Phi_xy, Vh), (Rh, obj.Phi_uy, Vh)]
    else:
        T = obj.T if T is None else min(T, obj.T)
        blocks = [(Qh, obj.Phi_x, Wh), (Rh, obj.Phi_u, Wh)]
    sq = np.zeros(T + 1)
    for L, G, Rw in blocks:
        weighted = L @ _arr(G)[: T + 1] @ Rw
        sq += np.einsum("kij,kij->k", weighted, weighted)
    return H2Report(cost=float(sq.sum()), tail_bound=_tail_estimate(sq), T=T)


def _node_maps(sys: NetworkSystem):
    return {"x": sys.node_of_state, "u": sys.node_of_input, "w": sys.node_of_state, "y": sys.node_of_output}


def localization_width(obj, graph: InterconnectionGraph, T: int | None = None,
                       tol: float = ZERO_TOL) -> float:
    """Largest hop distance ``hop[row node, column node]`` carrying an entry above ``tol``."""
    nodes = _node_maps(obj.sys)
    if isinstance(obj, ClosedLoopMaps):
        items = [(obj.Phi_xx, "x", "w"), (obj.Phi_ux, "u", "w"), (obj.Phi_xy, "x", "y"), (obj.Phi_uy, "u", "y")]
    elif getattr(obj, "transposed", False):
        items = [(obj.Phi_x, "x", "w"), (obj.Phi_u, "x", "y")]
    else:
        items = [(obj.Phi_x, "x", "w"), (obj.Phi_u, "u", "w")]
    width = 0.0
    for G, rk, ck in items:
        G = _arr(G)
        G = G if T is None else G[: T + 1]
        mask = np.any(np.abs(G) > tol, axis=0)
        rows, cols = np.nonzero(mask)
        if rows.size:
            width = max(width, float(graph.hop_distance[nodes[rk][rows], nodes[ck][cols]].max()))
    return width


def dump_kernels_csv(maps: dict, path, header_comment: str | None = None) -> None:
    """Write ``map, lag, i, j, value`` rows in (map, lag, i, j) order."""
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh)
        w.writerow(["map", "lag", "i", "j", "value"])
        for name in maps:
            G = _arr(maps[name])
            for k in range(G.shape[0]):
                for i in range(G.shape[1]):
                    for j in range(G.shape[2]):
                        w.writerow([name, k, i, j, repr(float(G[k, i, j]))])
