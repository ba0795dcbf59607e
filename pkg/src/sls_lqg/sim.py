"""Node-level execution of the composed controller with explicit message passing.

Every time step runs four barrier-separated stages. In each stage all nodes
first post their messages (validated against the stage's hop bound), then
every node consumes its inbox. Nodes are scheduled in id order, which makes
runs deterministic; since each stage reads only its inbox snapshot, any
parallel schedule gives the same result.

Signal timing inside one step ``t`` (``A``, ``B`` are plant matrices)::

    what(t+1) = (Phi_ew beta)(t+1)             vhat(t+1) = (Phi_ev y)(t+1)
    wtil(t)   = beta(t) + A what(t) - what(t+1)
    vtil(t)   = A vhat(t) - vhat(t+1)
    alpha(t+1) = what(t+1) + (Phi_xw wtil)(t+1)  gamma(t+1) = (Phi_uw wtil)(t+1)
    zeta(t+1)  = vhat(t+1) + (Phi_xw vtil)(t+1)  theta(t)   = (Phi_uw vtil)(t)
    beta(t+1) = -A alpha(t+1) - B gamma(t+1) - zeta(t+1)
    u(t)      = gamma(t+1) + theta(t)
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .clm import ClosedLoopMaps
from .oracles import DIVERGENCE_LIMIT, InstabilityError, gaussian_noise
from .system import InterconnectionGraph, NetworkSystem

SIGNALS = ("x", "y", "u", "beta", "w_hat", "v_hat", "w_til", "v_til", "alpha", "gamma", "zeta", "theta")
STAGE_HOPS = {1: "d", 2: 1, 3: "d", 4: 1}


class ProtocolError(RuntimeError):
    """A message broke its stage's hop bound, or an expected message never arrived."""

    def __init__(self, msg, stage=None, sender=None, receiver=None, hops=None):
        super().__init__(msg)
        self.stage, self.sender, self.receiver, self.hops = stage, sender, receiver, hops


# -- disturbances -------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Disturbance:
    """Exogenous inputs for ``T`` steps; ``delta_beta`` perturbs the controller state."""

    w: np.ndarray
    v: np.ndarray
    delta_beta: np.ndarray | None = None

    @property
    def T(self) -> int:
        return self.w.shape[0]

    def beta_kick(self, t: int):
        return None if self.delta_beta is None else self.delta_beta[t]


def zero_disturbance(sys: NetworkSystem, T: int) -> Disturbance:
    return Disturbance(np.zeros((T, sys.n)), np.zeros((T, sys.p)))


def gaussian_disturbance(sys: NetworkSystem, T: int, seed: int, stream: int = 0) -> Disturbance:
    w, v = gaussian_noise(sys, T, seed, stream)
    return Disturbance(w, v)


def impulse_disturbance(sys: NetworkSystem, T: int, channel: str, t0: int, index: int = 0) -> Disturbance:
    """Unit impulse at time ``t0`` on ``x`` (through ``w``), ``y`` (through ``v``) or ``beta``."""
    d = zero_disturbance(sys, T)
    if channel == "x":
        d.w[t0, index] = 1.0
    elif channel == "y":
        d.v[t0, index] = 1.0
    elif channel == "beta":
        db = np.zeros((T, sys.n))
        db[t0, index] = 1.0
        return Disturbance(d.w, d.v, db)
    else:
        raise ValueError(f"unknown impulse channel {channel!r}")
    return d


# -- records ------------------------------------------------------------------

@dataclass(frozen=True)
class StageMessage:
    t: int
    stage: int
    sender: int
    receiver: int
    payload: dict


@dataclass
class TrajectoryRecord:
    """Signals indexed by time: ``signals[name][t]``; ``x[t]`` is the state at ``t``."""

    sys: NetworkSystem
    signals: dict
    messages: list = field(default_factory=list)

    @property
    def T(self) -> int:
        return self.signals["x"].shape[0]

    def __getattr__(self, name):
        sig = self.__dict__.get("signals", {})
        if name in sig:
            return sig[name]
        raise AttributeError(name)

    def to_csv(self, path, header_comment: str | None = None) -> None:
        """Rows ``t, signal_name, node, value`` in (t, signal, coordinate) order."""
        owners = {"x": self.sys.node_of_state, "y": self.sys.node_of_output, "u": self.sys.node_of_input,
                  "gamma": self.sys.node_of_input, "theta": self.sys.node_of_input}
        with open(path, "w", newline="") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            w = csv.writer(fh)
            w.writerow(["t", "signal_name", "node", "value"])
            names = [s for s in SIGNALS if s in self.signals]
            for t in range(self.T):
                for name in names:
                    own = owners.get(name, self.sys.node_of_state)
                    for c, val in enumerate(self.signals[name][t]):
                        w.writerow([t, name, int(own[c]), repr(float(val))])

    def messages_to_csv(self, path, header_comment: str | None = None) -> None:
        """Rows ``t, stage, sender, receiver, payload_name, value``."""
        with open(path, "w", newline="") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            w = csv.writer(fh)
            w.writerow(["t", "stage", "sender", "receiver", "payload_name", "value"])
            for msg in self.messages:
                for name, vals in msg.payload.items():
                    for val in np.atleast_1d(vals):
                        w.writerow([msg.t, msg.stage, msg.sender, msg.receiver, name, repr(float(val))])


def _empty_record(sys: NetworkSystem, T: int) -> dict:
    dims = {"x": sys.n, "y": sys.p, "u": sys.m, "gamma": sys.m, "theta": sys.m}
    return {s: np.zeros((T, dims.get(s, sys.n))) for s in SIGNALS}


# -- per-node local systems -----------------------------------------------------

@dataclass(eq=False)
class RowSystem:
    """``eta+ = A eta + B u[inputs]``; output ``c @ eta`` (one row of a KF map, shifted by z)."""

    A: np.ndarray
    B: np.ndarray
    c: np.ndarray
    inputs: np.ndarray
    eta: np.ndarray

    def step(self, u_full: np.ndarray) -> float:
        self.eta = self.A @ self.eta + self.B @ u_full[self.inputs]
        return float(self.c @ self.eta)


@dataclass(eq=False)
class ColumnSystem:
    """One SF column: shared ``A``, input ``b`` and outputs restricted to supported coordinates."""

    coord: int
    A: np.ndarray
    b: np.ndarray
    C: np.ndarray
    K: np.ndarray
    x_rows: np.ndarray
    u_rows: np.ndarray
    lam: np.ndarray
    xi: np.ndarray


def _row_system(real, which: str, tol: float = 0.0) -> RowSystem:
    """Transpose a dual-column realization into a row system.

    ``which='w'`` uses ``C_blk^T`` as input matrix (reads beta), ``'v'`` uses ``K_blk^T`` (reads y).
    """
    r = real.compress()
    M = r.C_blk if which == "w" else r.K_blk
    inputs = np.flatnonzero(np.any(np.abs(M) > tol, axis=1))
    return RowSystem(A=r.A_blk.T.copy(), B=M[inputs].T.copy(), c=r.B_blk[:, 0].copy(),
                     inputs=inputs, eta=np.zeros(r.A_blk.shape[0]))


def _column_system(real) -> ColumnSystem:
    r = real.compress()
    x_rows = np.flatnonzero(np.any(r.C_blk != 0, axis=1))
    u_rows = np.flatnonzero(np.any(r.K_blk != 0, axis=1))
    ns = r.A_blk.shape[0]
    return ColumnSystem(coord=real.i, A=r.A_blk, b=r.B_blk[:, 0].copy(), C=r.C_blk[x_rows], K=r.K_blk[u_rows],
                        x_rows=x_rows, u_rows=u_rows, lam=np.zeros(ns), xi=np.zeros(ns))


@dataclass(eq=False)
class NodeController:
    """Local controller of one node: KF rows, two SF column instances and the internal state."""

    i: int
    state_coords: np.ndarray
    input_coords: np.ndarray
    output_coords: np.ndarray
    n_in1: list
    n_ind: list
    n_out1: list
    n_outd: list
    kf_w: list
    kf_v: list
    columns: list
    beta: np.ndarray
    w_hat: np.ndarray
    v_hat: np.ndarray
    w_hat_next: np.ndarray = None
    v_hat_next: np.ndarray = None
    nbr_w_hat: dict = field(default_factory=dict)
    nbr_v_hat: dict = field(default_factory=dict)
    scratch: dict = field(default_factory=dict)

    def internal_states(self) -> list:
        return ([r.eta for r in self.kf_w] + [r.eta for r in self.kf_v]
                + [c.lam for c in self.columns] + [c.xi for c in self.columns])


def init_nodes(sf, kf, sys: NetworkSystem, graph: InterconnectionGraph) -> list:
    """Split the state-feedback columns and estimation rows across their owner nodes."""
    if sf.sys.n != sys.n or kf.sys.n != sys.n or len(sf.columns) != sys.n or len(kf.columns) != sys.n:
        raise ValueError("factors do not match the plant dimensions")
    if sf.schedule.d != kf.schedule.d:
        raise ValueError("state-feedback and estimation schedules use different d")
    d = sf.schedule.d
    nodes = []
    for i in range(sys.n_nodes):
        sc = np.flatnonzero(sys.node_of_state == i)
        nodes.append(NodeController(
            i=i, state_coords=sc,
            input_coords=np.flatnonzero(sys.node_of_input == i),
            output_coords=np.flatnonzero(sys.node_of_output == i),
            n_in1=graph.n_in(i, 1), n_ind=graph.n_in(i, d),
            n_out1=graph.n_out(i, 1), n_outd=graph.n_out(i, d),
            kf_w=[_row_system(kf.columns[c], "w") for c in sc],
            kf_v=[_row_system(kf.columns[c], "v") for c in sc],
            columns=[_column_system(sf.columns[c]) for c in sc],
            beta=np.zeros(sc.size), w_hat=np.zeros(sc.size), v_hat=np.zeros(sc.size),
        ))
    return nodes


# -- message transport -------------------------------------------------------------

class Network:
    """Validates and delivers stage messages; optionally keeps a log."""

    def __init__(self, graph: InterconnectionGraph, d: int, log: bool = False):
        self.graph, self.d, self.log = graph, d, log
        self.messages: list = []
        self.boxes: dict = {}

    def bound(self, stage: int) -> int:
        b = STAGE_HOPS[stage]
        return self.d if b == "d" else b

    def open_stage(self):
        self.boxes = {}

    def send(self, t: int, stage: int, sender: int, receiver: int, payload: dict):
        hops = self.graph.hop_distance[receiver, sender]
        if hops > self.bound(stage):
            raise ProtocolError(f"stage {stage}: node {sender} -> node {receiver} spans {hops:g} hops "
                                f"(bound {self.bound(stage)})", stage, sender, receiver, hops)
        self.boxes.setdefault(receiver, {})[sender] = payload
        if self.log:
            self.messages.append(StageMessage(t, stage, sender, receiver,
                                              {k: np.array(v, copy=True) for k, v in payload.items()}))

    def inbox(self, receiver: int) -> dict:
        return self.boxes.get(receiver, {})


def _gather(inbox: dict, senders, name: str, sys_owner: np.ndarray, size: int, stage: int, node: int):
    """Assemble a global-length vector from ``name`` payloads of the listed senders."""
    full = np.zeros(size)
    for j in senders:
        if j not in inbox:
            raise ProtocolError(f"stage {stage}: node {node} is missing the message from node {j}",
                                stage, j, node)
        full[sys_owner == j] = inbox[j][name]
    return full


# -- subroutines ------------------------------------------------------------------

def subroutine1(node: NodeController, inbox: dict, sys: NetworkSystem):
    """Advance the estimation rows by one step; returns ``(what_i(t+1), vhat_i(t+1))``."""
    beta = _gather(inbox, node.n_ind, "beta", sys.node_of_state, sys.n, 1, node.i)
    y = _gather(inbox, node.n_ind, "y", sys.node_of_output, sys.p, 1, node.i)
    node.w_hat_next = np.array([r.step(beta) for r in node.kf_w])
    node.v_hat_next = np.array([r.step(y) for r in node.kf_v])
    return node.w_hat_next, node.v_hat_next


def subroutine2(node: NodeController, inbox: dict, sys: NetworkSystem) -> dict:
    """Advance both SF instances; returns outgoing components keyed by receiver node."""
    w_hat = _gather(inbox, node.n_in1, "w_hat", sys.node_of_state, sys.n, 2, node.i)
    v_hat = _gather(inbox, node.n_in1, "v_hat", sys.node_of_state, sys.n, 2, node.i)
    A_rows = sys.A[node.state_coords]
    w_til = node.beta + A_rows @ w_hat - node.w_hat_next
    v_til = A_rows @ v_hat - node.v_hat_next
    node.scratch.update(w_til=w_til, v_til=v_til)

    alpha_hat, zeta_hat = np.zeros(sys.n), np.zeros(sys.n)
    gamma_hat, theta_hat = np.zeros(sys.m), np.zeros(sys.m)
    for col, wt, vt in zip(node.columns, w_til, v_til):
        theta_hat[col.u_rows] += col.K @ col.xi          # uses xi(t), before the update
        col.lam = col.A @ col.lam + col.b * wt
        col.xi = col.A @ col.xi + col.b * vt
        alpha_hat[col.x_rows] += col.C @ col.lam
        zeta_hat[col.x_rows] += col.C @ col.xi
        gamma_hat[col.u_rows] += col.K @ col.lam

    receivers = set(node.n_outd)
    for col in node.columns:
        receivers.update(sys.node_of_state[col.x_rows].tolist())
        receivers.update(sys.node_of_input[col.u_rows].tolist())
    out = {}
    for j in sorted(receivers):
        xs, us = sys.node_of_state == j, sys.node_of_input == j
        out[j] = {"alpha_hat": alpha_hat[xs], "zeta_hat": zeta_hat[xs],
                  "gamma_hat": gamma_hat[us], "theta_hat": theta_hat[us]}
    return out


def subroutine3(node: NodeController, inbox: dict):
    """Sum received components into ``(alpha_i(t+1), gamma_i(t+1), zeta_i(t+1), theta_i(t))``."""
    alpha, zeta = node.w_hat_next.copy(), node.v_hat_next.copy()
    gamma = np.zeros(node.input_coords.size)
    theta = np.zeros(node.input_coords.size)
    for j in node.n_ind:
        if j not in inbox:
            raise ProtocolError(f"stage 3: node {node.i} is missing the message from node {j}", 3, j, node.i)
    for j in sorted(inbox):
        msg = inbox[j]
        alpha += msg["alpha_hat"]
        zeta += msg["zeta_hat"]
        gamma += msg["gamma_hat"]
        theta += msg["theta_hat"]
    node.scratch.update(alpha=alpha, gamma=gamma, zeta=zeta, theta=theta)
    return alpha, gamma, zeta, theta


def subroutine4(node: NodeController, inbox: dict, sys: NetworkSystem):
    """Return ``(u_i(t), beta_i(t+1))``."""
    alpha = _gather(inbox, node.n_in1, "alpha", sys.node_of_state, sys.n, 4, node.i)
    gamma = _gather(inbox, node.n_in1, "gamma", sys.node_of_input, sys.m, 4, node.i)
    sc = node.state_coords
    beta_next = -sys.A[sc] @ alpha - sys.B[sc] @ gamma - node.scratch["zeta"]
    u = node.scratch["gamma"] + node.scratch["theta"]
    return u, beta_next


# -- closed-loop runs --------------------------------------------------------------

def _check_divergence(x, t):
    if not np.isfinite(x).all() or np.abs(x).max() > DIVERGENCE_LIMIT:
        raise InstabilityError(f"state norm exceeded {DIVERGENCE_LIMIT:g} at t={t}")


def run_closed_loop(sys: NetworkSystem, nodes: list, disturbance: Disturbance, T_sim: int | None = None,
                    graph: InterconnectionGraph | None = None, d: int | None = None,
                    log_messages: bool = False) -> TrajectoryRecord:
    """Plant plus node controllers, four communication stages per step."""
    T = disturbance.T if T_sim is None else T_sim
    if T > disturbance.T:
        raise ValueError("disturbance is shorter than the requested horizon")
    if graph is None or d is None:
        raise ValueError("graph and d are needed to enforce locality")
    net = Network(graph, d, log_messages)
    rec = _empty_record(sys, T)
    x = np.zeros(sys.n)
    for t in range(T):
        y = sys.C @ x + disturbance.v[t]
        kick = disturbance.beta_kick(t)
        if kick is not None:
            for nd in nodes:
                nd.beta = nd.beta + kick[nd.state_coords]

        net.open_stage()
        for nd in nodes:
            payload = {"beta": nd.beta, "y": y[nd.output_coords]}
            for j in nd.n_outd:
                net.send(t, 1, nd.i, j, payload)
        for nd in nodes:
            subroutine1(nd, net.inbox(nd.i), sys)

        net.open_stage()
        for nd in nodes:
            for j in nd.n_out1:
                net.send(t, 2, nd.i, j, {"w_hat": nd.w_hat, "v_hat": nd.v_hat})
        outgoing = [subroutine2(nd, net.inbox(nd.i), sys) for nd in nodes]

        net.open_stage()
        for nd, out in zip(nodes, outgoing):
            for j, payload in out.items():
                net.send(t, 3, nd.i, j, payload)
        for nd in nodes:
            subroutine3(nd, net.inbox(nd.i))

        net.open_stage()
        for nd in nodes:
            for j in nd.n_out1:
                net.send(t, 4, nd.i, j, {"alpha": nd.scratch["alpha"], "gamma": nd.scratch["gamma"]})
        u = np.zeros(sys.m)
        results = [subroutine4(nd, net.inbox(nd.i), sys) for nd in nodes]

        for nd, (u_i, beta_next) in zip(nodes, results):
            sc = nd.state_coords
            u[nd.input_coords] = u_i
            rec["beta"][t, sc] = nd.beta
            rec["w_hat"][t, sc] = nd.w_hat
            rec["v_hat"][t, sc] = nd.v_hat
            rec["w_til"][t, sc] = nd.scratch["w_til"]
            rec["v_til"][t, sc] = nd.scratch["v_til"]
            rec["alpha"][t, sc] = nd.scratch["alpha"]
            rec["zeta"][t, sc] = nd.scratch["zeta"]
            rec["gamma"][t, nd.input_coords] = nd.scratch["gamma"]
            rec["theta"][t, nd.input_coords] = nd.scratch["theta"]
            nd.beta, nd.w_hat, nd.v_hat = beta_next, nd.w_hat_next, nd.v_hat_next
        rec["x"][t], rec["y"][t], rec["u"][t] = x, y, u
        x = sys.A @ x + sys.B @ u + disturbance.w[t]
        _check_divergence(x, t)
    return TrajectoryRecord(sys=sys, signals=rec, messages=net.messages)


class KernelController:
    """Global controller driven by truncated composed kernels.

    ``beta(t+1) = -sum_k Phi_xx[k+2] beta(t-k) - sum_k Phi_xy[k+1] y(t-k)`` and
    ``u(t) = sum_k Phi_ux[k+1] beta(t-k) + sum_{k>=1} Phi_uy[k] y(t-k)``.
    """

    def __init__(self, clm: ClosedLoopMaps, T_sim: int):
        self.Gxx = clm.Phi_xx.kernels[2:]
        self.Gxy = clm.Phi_xy.kernels[1:]
        self.Gux = clm.Phi_ux.kernels[1:]
        self.Guy = clm.Phi_uy.kernels[1:]
        sys = clm.sys
        self.beta_hist = np.zeros((T_sim + 1, sys.n))
        self.y_hist = np.zeros((T_sim, sys.p))
        self.t = 0

    @staticmethod
    def _conv(G, hist, t):
        L = min(G.shape[0], t + 1)
        if L == 0:
            return np.zeros(G.shape[1])
        return np.einsum("kij,kj->i", G[:L], hist[t - L + 1:t + 1][::-1])

    def step(self, y: np.ndarray, kick: np.ndarray | None = None) -> np.ndarray:
        t = self.t
        if kick is not None:
            self.beta_hist[t] += kick
        u = self._conv(self.Gux, self.beta_hist, t)
        if t > 0:
            u = u + self._conv(self.Guy, self.y_hist, t - 1)
        self.y_hist[t] = y
        self.beta_hist[t + 1] = -self._conv(self.Gxx, self.beta_hist, t) - self._conv(self.Gxy, self.y_hist, t)
        self.t += 1
        return u

    @property
    def beta(self) -> np.ndarray:
        return self.beta_hist[self.t]


def run_centralized_reference(clm: ClosedLoopMaps, sys: NetworkSystem, disturbance: Disturbance,
                              T_sim: int | None = None) -> TrajectoryRecord:
    """Same plant and noise, controller realised by kernel convolution with the composed maps."""
    T = disturbance.T if T_sim is None else T_sim
    ctrl = KernelController(clm, T)
    rec = {"x": np.zeros((T, sys.n)), "y": np.zeros((T, sys.p)), "u": np.zeros((T, sys.m)),
           "beta": np.zeros((T, sys.n))}
    x = np.zeros(sys.n)
    for t in range(T):
        y = sys.C @ x + disturbance.v[t]
        u = ctrl.step(y, disturbance.beta_kick(t))
        rec["x"][t], rec["y"][t], rec["u"][t], rec["beta"][t] = x, y, u, ctrl.beta_hist[t]
        x = sys.A @ x + sys.B @ u + disturbance.w[t]
        _check_divergence(x, t)
    return TrajectoryRecord(sys=sys, signals=rec)


class GlobalController:
    """All node computations stacked into sparse matrices.

    Performs exactly the per-node arithmetic without message passing; used for
    long Monte Carlo runs and for the closed-loop spectral radius.
    """

    def __init__(self, nodes: list, sys: NetworkSystem):
        self.sys = sys
        rows_w = [r for nd in nodes for r in nd.kf_w]
        rows_v = [r for nd in nodes for r in nd.kf_v]
        cols = [c for nd in nodes for c in nd.columns]
        coords = np.concatenate([nd.state_coords for nd in nodes])
        self.Aw, self.Bw, self.Cw = self._stack_rows(rows_w, coords, sys.n, sys.n)
        self.Av, self.Bv, self.Cv = self._stack_rows(rows_v, coords, sys.p, sys.n)
        self.Al = sp.block_diag([c.A for c in cols], format="csr")
        sizes = [c.A.shape[0] for c in cols]
        off = np.concatenate([[0], np.cumsum(sizes)])
        Bl = np.zeros((off[-1], sys.n))
        Cl = np.zeros((sys.n, off[-1]))
        Kl = np.zeros((sys.m, off[-1]))
        for c, o0, o1 in zip(cols, off[:-1], off[1:]):
            Bl[o0:o1, c.coord] = c.b
            Cl[np.ix_(c.x_rows, np.arange(o0, o1))] = c.C
            Kl[np.ix_(c.u_rows, np.arange(o0, o1))] = c.K
        self.Bl, self.Cl, self.Kl = sp.csr_matrix(Bl), sp.csr_matrix(Cl), sp.csr_matrix(Kl)
        self.sizes = dict(eta_w=self.Aw.shape[0], eta_v=self.Av.shape[0], lam=off[-1], xi=off[-1],
                          beta=sys.n, w_hat=sys.n, v_hat=sys.n)
        self.reset()

    @staticmethod
    def _stack_rows(rows, coords, n_in, n_out):
        A = sp.block_diag([r.A for r in rows], format="csr")
        sizes = [r.A.shape[0] for r in rows]
        off = np.concatenate([[0], np.cumsum(sizes)])
        B = np.zeros((off[-1], n_in))
        C = np.zeros((n_out, off[-1]))
        for r, c, o0, o1 in zip(rows, coords, off[:-1], off[1:]):
            B[o0:o1, r.inputs] = r.B
            C[c, o0:o1] = r.c
        return A, sp.csr_matrix(B), sp.csr_matrix(C)

    def reset(self):
        self.state = {k: np.zeros(v) for k, v in self.sizes.items()}

    def get_state(self) -> np.ndarray:
        return np.concatenate([self.state[k] for k in self.sizes])

    def set_state(self, vec: np.ndarray):
        pos = 0
        for k, s in self.sizes.items():
            self.state[k] = np.array(vec[pos:pos + s], dtype=float)
            pos += s

    def step(self, y: np.ndarray, kick: np.ndarray | None = None, out: dict | None = None) -> np.ndarray:
        s, A, B = self.state, self.sys.A, self.sys.B
        if kick is not None:
            s["beta"] = s["beta"] + kick
        s["eta_w"] = self.Aw @ s["eta_w"] + self.Bw @ s["beta"]
        s["eta_v"] = self.Av @ s["eta_v"] + self.Bv @ y
        w_next, v_next = self.Cw @ s["eta_w"], self.Cv @ s["eta_v"]
        w_til = s["beta"] + A @ s["w_hat"] - w_next
        v_til = A @ s["v_hat"] - v_next
        theta = self.Kl @ s["xi"]
        s["lam"] = self.Al @ s["lam"] + self.Bl @ w_til
        s["xi"] = self.Al @ s["xi"] + self.Bl @ v_til
        alpha = w_next + self.Cl @ s["lam"]
        gamma = self.Kl @ s["lam"]
        zeta = v_next + self.Cl @ s["xi"]
        u = gamma + theta
        if out is not None:
            out.update(beta=s["beta"].copy(), w_hat=s["w_hat"].copy(), v_hat=s["v_hat"].copy(), w_til=w_til,
                       v_til=v_til, alpha=alpha, gamma=gamma, zeta=zeta, theta=theta)
        s["beta"] = -A @ alpha - B @ gamma - zeta
        s["w_hat"], s["v_hat"] = w_next, v_next
        return u


def run_global(sys: NetworkSystem, ctrl: GlobalController, disturbance: Disturbance,
               T_sim: int | None = None) -> TrajectoryRecord:
    """Closed loop with the stacked controller, recording every intermediate signal."""
    T = disturbance.T if T_sim is None else T_sim
    ctrl.reset()
    rec = _empty_record(sys, T)
    x = np.zeros(sys.n)
    scratch = {}
    for t in range(T):
        y = sys.C @ x + disturbance.v[t]
        u = ctrl.step(y, disturbance.beta_kick(t), scratch)
        for k, v in scratch.items():
            rec[k][t] = v
        rec["x"][t], rec["y"][t], rec["u"][t] = x, y, u
        x = sys.A @ x + sys.B @ u + disturbance.w[t]
        _check_divergence(x, t)
    return TrajectoryRecord(sys=sys, signals=rec)


def closed_loop_matrix(sys: NetworkSystem, ctrl: GlobalController) -> np.ndarray:
    """One-step map of the noise-free closed loop on ``(x, controller state)``."""
    nc = ctrl.get_state().size
    dim = sys.n + nc
    M = np.zeros((dim, dim))
    for k in range(dim):
        e = np.zeros(dim)
        e[k] = 1.0
        x, ctrl_state = e[:sys.n], e[sys.n:]
        ctrl.set_state(ctrl_state)
        u = ctrl.step(sys.C @ x)
        M[:sys.n, k] = sys.A @ x + sys.B @ u
        M[sys.n:, k] = ctrl.get_state()
    ctrl.reset()
    return M


def closed_loop_spectral_radius(sys: NetworkSystem, ctrl: GlobalController) -> float:
    return float(np.abs(np.linalg.eigvals(closed_loop_matrix(sys, ctrl))).max())


@dataclass(frozen=True)
class ProbeResult:
    channel: str
    t0: int
    window_end: int
    rho: float
    peak_after_window: float
    norm_t1: float
    norm_t50: float

    @property
    def decayed(self) -> bool:
        return self.peak_after_window < 1e-6


def _signal_norms(rec: TrajectoryRecord) -> np.ndarray:
    return np.max(np.stack([np.abs(rec.signals[s]).max(axis=1) for s in SIGNALS]), axis=0)


def impulse_probe(sys: NetworkSystem, ctrl: GlobalController, channel: str, index: int = 0, t0: int = 10,
                  rho: float | None = None, tail: int = 20) -> ProbeResult:
    """Inject a unit impulse and measure every recorded signal after ``t0 + 10 / (1 - rho)``."""
    rho = closed_loop_spectral_radius(sys, ctrl) if rho is None else rho
    if rho >= 1:
        return ProbeResult(channel, t0, -1, rho, float("inf"), float("nan"), float("nan"))
    end = t0 + int(np.ceil(10.0 / (1.0 - rho)))
    T = max(end + tail, t0 + 52)
    rec = run_global(sys, ctrl, impulse_disturbance(sys, T, channel, t0, index))
    norms = _signal_norms(rec)
    return ProbeResult(channel, t0, end, rho, float(norms[end:].max()), float(norms[t0 + 1]),
                       float(norms[t0 + 50]))
