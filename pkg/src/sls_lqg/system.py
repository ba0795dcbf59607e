"""Plant data, interconnection graphs and experiment configuration."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml


class InvalidConfigError(ValueError):
    """Raised for out-of-range or malformed configuration values."""


def _check_spd(name: str, M: np.ndarray) -> None:
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise InvalidConfigError(f"{name} must be square, got shape {M.shape}")
    if not np.allclose(M, M.T, atol=1e-12, rtol=0):
        raise InvalidConfigError(f"{name} must be symmetric")
    if np.linalg.eigvalsh(M).min() <= 0:
        raise InvalidConfigError(f"{name} must be positive definite")


def _check_partition(name: str, part: np.ndarray, size: int, n_nodes: int) -> None:
    if part.shape != (size,):
        raise InvalidConfigError(f"{name} must assign each of {size} coordinates a node")
    if size and (part.min() < 0 or part.max() >= n_nodes):
        raise InvalidConfigError(f"{name} refers to nodes outside 0..{n_nodes - 1}")


@dataclass(frozen=True, eq=False)
class NetworkSystem:
    """Discrete-time LTI plant ``x+ = Ax + Bu + w``, ``y = Cx + v`` on a node network.

    ``node_of_state[i]`` is the node owning state coordinate ``i`` (likewise for
    inputs and outputs). Instances are immutable after validation.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    W: np.ndarray
    V: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    node_of_state: np.ndarray
    node_of_input: np.ndarray
    node_of_output: np.ndarray

    def __post_init__(self):
        for f in fields(self):
            arr = np.array(getattr(self, f.name), dtype=int if f.name.startswith("node") else float)
            arr.setflags(write=False)
            object.__setattr__(self, f.name, arr)
        n, m, p = self.n, self.m, self.p
        if self.A.shape != (n, n):
            raise InvalidConfigError("A must be square")
        if self.B.shape != (n, m) or self.C.shape != (p, n):
            raise InvalidConfigError("B, C dimensions do not match A")
        for name, M, k in (("W", self.W, n), ("V", self.V, p), ("Q", self.Q, n), ("R", self.R, m)):
            _check_spd(name, M)
            if M.shape[0] != k:
                raise InvalidConfigError(f"{name} must be {k}x{k}")
        _check_partition("node_of_state", self.node_of_state, n, self.n_nodes)
        _check_partition("node_of_input", self.node_of_input, m, self.n_nodes)
        _check_partition("node_of_output", self.node_of_output, p, self.n_nodes)
        if set(self.node_of_state.tolist()) != set(range(self.n_nodes)):
            raise InvalidConfigError("every node must own at least one state")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def p(self) -> int:
        return self.C.shape[0]

    @property
    def n_nodes(self) -> int:
        return int(self.node_of_state.max()) + 1

    def dual(self) -> "NetworkSystem":
        """Estimation dual ``(A^T, C^T)`` with weights ``(W, V)`` and noise ``(Q, R)``."""
        return NetworkSystem(
            A=self.A.T, B=self.C.T, C=self.B.T, W=self.Q, V=self.R, Q=self.W, R=self.V,
            node_of_state=self.node_of_state, node_of_input=self.node_of_output,
            node_of_output=self.node_of_input,
        )

    def equals(self, other: "NetworkSystem") -> bool:
        return all(np.array_equal(getattr(self, f.name), getattr(other, f.name)) for f in fields(self))


def save_system(sys: NetworkSystem, path) -> None:
    np.savez(path, **{f.name: getattr(sys, f.name) for f in fields(sys)})


def load_system(path) -> NetworkSystem:
    with np.load(path) as data:
        return NetworkSystem(**{f.name: data[f.name] for f in fields(NetworkSystem)})


def build_chain_network(N: int, alpha: float, rho: float, q_scale: float = 1.0,
                        r_scale: float = 1.0) -> NetworkSystem:
    """Bi-directional scalar chain with ``x_i+ = rho(1-2 alpha) x_i + rho alpha (x_{i-1} + x_{i+1}) + u_i``.

    Actuation and sensing are local (``B = C = I``) and both noise covariances are identity.
    """
    if int(N) != N or N < 1:
        raise InvalidConfigError(f"N must be a positive integer, got {N}")
    if q_scale <= 0 or r_scale <= 0:
        raise InvalidConfigError("q_scale and r_scale must be positive")
    N = int(N)
    A = rho * (1 - 2 * alpha) * np.eye(N)
    off = rho * alpha * np.ones(N - 1)
    A += np.diag(off, 1) + np.diag(off, -1)
    eye = np.eye(N)
    nodes = np.arange(N)
    return NetworkSystem(A=A, B=eye, C=eye, W=eye, V=eye, Q=q_scale * eye, R=r_scale * eye,
                         node_of_state=nodes, node_of_input=nodes, node_of_output=nodes)


@dataclass(frozen=True, eq=False)
class InterconnectionGraph:
    """Node-level support of the dynamics.

    ``support[i, j]`` is true when node ``j`` directly affects node ``i`` (self-loops
    included). ``hop_distance[i, j]`` counts the steps needed for node ``j`` to
    affect node ``i``; unreachable pairs hold ``inf``.
    """

    support: np.ndarray
    hop_distance: np.ndarray

    @property
    def N(self) -> int:
        return self.support.shape[0]

    def n_in(self, i: int, k: int) -> list[int]:
        """Nodes whose signals reach node ``i`` within ``k`` hops."""
        return [j for j in range(self.N) if self.hop_distance[i, j] <= k]

    def n_out(self, j: int, k: int) -> list[int]:
        """Nodes reached from node ``j`` within ``k`` hops."""
        return [i for i in range(self.N) if self.hop_distance[i, j] <= k]

    def within(self, k: int) -> np.ndarray:
        """Binary N x N matrix of pairs at hop distance at most ``k``."""
        return self.hop_distance <= k


def build_graph(sys: NetworkSystem) -> InterconnectionGraph:
    N = sys.n_nodes
    support = np.eye(N, dtype=bool)
    rows, cols = np.nonzero(sys.A)
    support[sys.node_of_state[rows], sys.node_of_state[cols]] = True
    rows, cols = np.nonzero(sys.B)
    support[sys.node_of_state[rows], sys.node_of_input[cols]] = True

    hop = np.full((N, N), np.inf)
    # BFS forward from every source along j -> i edges
    for src in range(N):
        hop[src, src] = 0
        queue = deque([src])
        while queue:
            j = queue.popleft()
            for i in np.flatnonzero(support[:, j]):
                if np.isinf(hop[i, src]):
                    hop[i, src] = hop[j, src] + 1
                    queue.append(i)
    support.setflags(write=False)
    hop.setflags(write=False)
    return InterconnectionGraph(support=support, hop_distance=hop)


@dataclass
class ExperimentConfig:
    n_nodes: int = 15
    alpha: float = 0.6
    rho: float = 1.0
    q_scale: float = 1.0
    r_scale: float = 300.0
    d: int = 3
    seed: int = 0
    t_sim: int = 500
    t_eval: int = 200
    fir_horizon: int = 20
    fir_horizons: list[int] = field(default_factory=lambda: [5, 10, 15, 20, 30, 40])
    d_grid: list[int] = field(default_factory=lambda: list(range(1, 10)))
    n_grid: list[int] = field(default_factory=lambda: [6, 8, 10, 12, 14])

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("n_nodes", "d", "t_sim", "t_eval", "fir_horizon"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
                raise InvalidConfigError(f"{name} must be an integer >= 1, got {value!r}")
        if self.q_scale <= 0 or self.r_scale <= 0:
            raise InvalidConfigError("q_scale and r_scale must be positive")
        for name in ("fir_horizons", "d_grid", "n_grid"):
            values = getattr(self, name)
            if not values or any(int(v) != v or v < 1 for v in values):
                raise InvalidConfigError(f"{name} must be a non-empty list of integers >= 1")

    def system(self) -> NetworkSystem:
        return build_chain_network(self.n_nodes, self.alpha, self.rho, self.q_scale, self.r_scale)

    def replace(self, **overrides) -> "ExperimentConfig":
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        data.update({k: v for k, v in overrides.items() if v is not None})
        return ExperimentConfig(**data)


def load_config(path) -> ExperimentConfig:
    """Read a YAML (or JSON) experiment file; missing keys take the defaults."""
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise InvalidConfigError(f"cannot parse {path}: {exc}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise InvalidConfigError(f"{path}: top level must be a mapping")
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(data) - known
    if unknown:
        raise InvalidConfigError(f"{path}: unknown keys {sorted(unknown)}")
    return ExperimentConfig(**data)
