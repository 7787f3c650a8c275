"""Linearized swing dynamics: system assembly, exact simulation, datasets.

The grid follows ``M d2(delta) + gamma M d(delta) + K delta = u`` with a
Kron-reduced Laplacian ``K`` among generator internal nodes.  Bus angles are
the algebraic solution of the lossless DC network given the internal angles,
bus frequencies apply the same coefficients to the speed block, and line
flows are ``b_ij (theta_i - theta_j)``.

Ambient inputs are i.i.d. per step with covariance ``alpha * M / dt`` and
held constant over the step, which is the discrete counterpart of white
noise with intensity ``alpha * M``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.linalg import expm
from scipy.sparse.csgraph import connected_components

from .timeseries import Channel, TimeSeriesSet


class GridValidationError(ValueError):
    """Raised for grid models or input specs violating their invariants."""


@dataclass
class GridModel:
    """Network data and the two scalar dynamics parameters.

    ``generators`` entries are dicts with ``id``, ``inertia`` and optionally
    ``internal_susceptance`` (connection to the terminal bus; omitted means
    the internal node coincides with the bus).
    """

    generators: list[dict]
    buses: list
    lines: list[dict]
    gen_bus_map: dict
    damping_ratio: float = 0.5
    ambient_scale: float = 1.0
    name: str = "grid"

    def __post_init__(self):
        self.generators = [dict(g, id=str(g["id"])) for g in self.generators]
        self.buses = [str(b) for b in self.buses]
        self.lines = [
            dict(l, from_bus=str(l["from_bus"]), to_bus=str(l["to_bus"])) for l in self.lines
        ]
        self.gen_bus_map = {str(k): str(v) for k, v in self.gen_bus_map.items()}
        self.validate()

    @property
    def gen_ids(self) -> list[str]:
        return [g["id"] for g in self.generators]

    def validate(self):
        if not self.generators:
            raise GridValidationError("grid has no generators")
        if len(set(self.buses)) != len(self.buses):
            raise GridValidationError("duplicate bus ids")
        if len(set(self.gen_ids)) != len(self.gen_ids):
            raise GridValidationError("duplicate generator ids")
        for name in ("damping_ratio", "ambient_scale"):
            if not getattr(self, name) > 0:
                raise GridValidationError(f"{name} must be positive")
        buses = set(self.buses)
        for g in self.generators:
            if not g["inertia"] > 0:
                raise GridValidationError(f"generator {g['id']}: inertia must be positive")
            xs = g.get("internal_susceptance")
            if xs is not None and not xs > 0:
                raise GridValidationError(
                    f"generator {g['id']}: internal_susceptance must be positive"
                )
            if self.gen_bus_map.get(g["id"]) not in buses:
                raise GridValidationError(f"generator {g['id']} is not mapped to a known bus")
        extra = set(self.gen_bus_map) - set(self.gen_ids)
        if extra:
            raise GridValidationError(f"gen_bus_map names unknown generators: {sorted(extra)}")
        for l in self.lines:
            if l["from_bus"] not in buses or l["to_bus"] not in buses:
                raise GridValidationError(f"line {l['from_bus']}-{l['to_bus']} uses unknown bus")
            if l["from_bus"] == l["to_bus"]:
                raise GridValidationError(f"line {l['from_bus']}-{l['to_bus']} is a self-loop")
            if not l["susceptance"] > 0:
                raise GridValidationError(
                    f"line {l['from_bus']}-{l['to_bus']}: susceptance must be positive"
                )
        # two generators sharing a bus need a reactance between them
        direct = [self.gen_bus_map[g["id"]] for g in self.generators
                  if g.get("internal_susceptance") is None]
        if len(set(direct)) != len(direct):
            raise GridValidationError(
                "generators sharing a bus must declare internal_susceptance"
            )
        idx = {b: k for k, b in enumerate(self.buses)}
        adj = np.zeros((len(self.buses), len(self.buses)))
        for l in self.lines:
            adj[idx[l["from_bus"]], idx[l["to_bus"]]] = 1
        ncomp, _ = connected_components(adj, directed=False)
        if ncomp != 1:
            raise GridValidationError("network not connected")

    def to_dict(self) -> dict:
        return {
            "format": "foloc-grid",
            "version": 1,
            "name": self.name,
            "generators": self.generators,
            "buses": self.buses,
            "lines": self.lines,
            "gen_bus_map": self.gen_bus_map,
            "damping_ratio": self.damping_ratio,
            "ambient_scale": self.ambient_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridModel":
        if d.get("version", 1) != 1:
            raise GridValidationError(f"unsupported grid format version {d.get('version')!r}")
        return cls(
            generators=d["generators"],
            buses=d["buses"],
            lines=d["lines"],
            gen_bus_map=d["gen_bus_map"],
            damping_ratio=d.get("damping_ratio", 0.5),
            ambient_scale=d.get("ambient_scale", 1.0),
            name=d.get("name", "grid"),
        )


def load_grid(path) -> GridModel:
    return GridModel.from_dict(json.loads(Path(path).read_text()))


def save_grid(grid: GridModel, path):
    Path(path).write_text(json.dumps(grid.to_dict(), indent=2))


@dataclass(frozen=True)
class SwingSystem:
    """Continuous-time state space of the linearized grid.

    State order is ``[delta_1..delta_n, omega_1..omega_n]``.  ``C`` maps the
    state to ``output_channels`` (bus angles, bus frequencies, line flows).
    """

    gen_ids: tuple
    M: np.ndarray
    gamma: float
    alpha: float
    K: np.ndarray
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    output_channels: tuple
    gen_graph: np.ndarray
    gen_bus: dict = field(default_factory=dict)
    bus_graph: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.gen_ids)

    @property
    def D(self) -> np.ndarray:
        return self.gamma * self.M

    @property
    def state_channels(self) -> list[Channel]:
        return [Channel(f"delta:{g}", "rotor_angle", g) for g in self.gen_ids] + [
            Channel(f"omega:{g}", "rotor_speed", g) for g in self.gen_ids
        ]

    @property
    def input_channels(self) -> list[Channel]:
        return [Channel(f"u:{g}", "input", g) for g in self.gen_ids]

    @property
    def channels(self) -> list[Channel]:
        return self.state_channels + list(self.output_channels)

    @property
    def observation(self) -> np.ndarray:
        """Map from state to every non-input channel (states then outputs)."""
        return np.vstack([np.eye(2 * self.n), self.C])

    def gen_index(self, gen_id) -> int:
        try:
            return self.gen_ids.index(str(gen_id))
        except ValueError:
            raise KeyError(f"unknown generator {gen_id!r}") from None

    def modes(self) -> np.ndarray:
        """Damped oscillation frequencies (Hz) of the nonzero modes, ascending."""
        lam = np.linalg.eigvals(self.A)
        f = np.abs(lam.imag) / (2 * np.pi)
        return np.unique(np.round(f[lam.imag > 1e-9], 12))


def build_swing_system(grid: GridModel) -> SwingSystem:
    grid.validate()
    buses = grid.buses
    nb = len(buses)
    gens = grid.gen_ids
    n = len(gens)
    bidx = {b: k for k, b in enumerate(buses)}

    # node set: every bus, plus one internal node per generator with a reactance
    gen_node = []
    extra_edges = []
    nnodes = nb
    for g in grid.generators:
        bus = bidx[grid.gen_bus_map[g["id"]]]
        if g.get("internal_susceptance") is None:
            gen_node.append(bus)
        else:
            gen_node.append(nnodes)
            extra_edges.append((nnodes, bus, float(g["internal_susceptance"])))
            nnodes += 1

    L = np.zeros((nnodes, nnodes))
    edges = [(bidx[l["from_bus"]], bidx[l["to_bus"]], float(l["susceptance"])) for l in grid.lines]
    for i, j, b in edges + extra_edges:
        L[i, i] += b
        L[j, j] += b
        L[i, j] -= b
        L[j, i] -= b

    g_nodes = np.array(gen_node)
    r_nodes = np.setdiff1d(np.arange(nnodes), g_nodes)
    # node angles = E @ delta
    E = np.zeros((nnodes, n))
    E[g_nodes, np.arange(n)] = 1.0
    if r_nodes.size:
        Lrr = L[np.ix_(r_nodes, r_nodes)]
        Lrg = L[np.ix_(r_nodes, g_nodes)]
        E[r_nodes] = -np.linalg.solve(Lrr, Lrg)
        K = L[np.ix_(g_nodes, g_nodes)] + L[np.ix_(g_nodes, r_nodes)] @ E[r_nodes]
    else:
        K = L[np.ix_(g_nodes, g_nodes)].copy()
    K = 0.5 * (K + K.T)
    K -= np.diag(K.sum(axis=1))  # scrub round-off from the zero row sums

    Theta = E[:nb]  # bus angle rows
    M = np.diag([float(g["inertia"]) for g in grid.generators])
    Minv = np.diag(1.0 / np.diag(M))
    gamma = float(grid.damping_ratio)
    Z = np.zeros((n, n))
    A = np.block([[Z, np.eye(n)], [-Minv @ K, -gamma * np.eye(n)]])
    B = np.vstack([Z, Minv])

    rows, chans = [], []
    for k, b in enumerate(buses):
        rows.append(np.concatenate([Theta[k], np.zeros(n)]))
        chans.append(Channel(f"theta:{b}", "bus_angle", b))
    for k, b in enumerate(buses):
        rows.append(np.concatenate([np.zeros(n), Theta[k]]))
        chans.append(Channel(f"f:{b}", "bus_freq", b))
    for (i, j, bij), l in zip(edges, grid.lines):
        rows.append(np.concatenate([bij * (Theta[i] - Theta[j]), np.zeros(n)]))
        chans.append(Channel(f"p:{l['from_bus']}-{l['to_bus']}", "line_flow",
                             f"{l['from_bus']}-{l['to_bus']}"))
    C = np.array(rows)

    gen_graph = _terminal_graph(L[:nb, :nb], np.array([bidx[grid.gen_bus_map[g]] for g in gens]))

    bus_graph = {b: set() for b in buses}
    for l in grid.lines:
        bus_graph[l["from_bus"]].add(l["to_bus"])
        bus_graph[l["to_bus"]].add(l["from_bus"])

    for arr in (M, K, A, B, C, gen_graph):
        arr.setflags(write=False)
    return SwingSystem(
        gen_ids=tuple(gens),
        M=M,
        gamma=gamma,
        alpha=float(grid.ambient_scale),
        K=K,
        A=A,
        B=B,
        C=C,
        output_channels=tuple(chans),
        gen_graph=gen_graph,
        gen_bus=dict(grid.gen_bus_map),
        bus_graph=bus_graph,
    )


def _terminal_graph(Lbus: np.ndarray, term: np.ndarray) -> np.ndarray:
    """Generator adjacency from the bus network reduced onto generator buses.

    Two generators are neighbors when their buses are joined by a path that
    avoids every other generator bus (or when they share a bus).  Without
    internal reactances this is exactly the sparsity of ``K``; with them ``K``
    is dense and carries no locality, so the terminal-bus reduction is used.
    """
    n = len(term)
    tb = np.unique(term)
    rest = np.setdiff1d(np.arange(Lbus.shape[0]), tb)
    Kt = Lbus[np.ix_(tb, tb)].copy()
    if rest.size:
        Kt -= Lbus[np.ix_(tb, rest)] @ np.linalg.solve(Lbus[np.ix_(rest, rest)], Lbus[np.ix_(rest, tb)])
    adj_t = np.abs(Kt) > 1e-9 * np.abs(Kt).max()
    pos = {b: k for k, b in enumerate(tb)}
    t = np.array([pos[b] for b in term])
    adj = adj_t[np.ix_(t, t)] | (t[:, None] == t[None, :])
    return adj & ~np.eye(n, dtype=bool)


def discretize(A: np.ndarray, B: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Zero-order-hold pair ``(Ad, Bd)`` from the exponential of ``[[A, B], [0, 0]]``."""
    ns, ni = A.shape[0], B.shape[1]
    aug = np.zeros((ns + ni, ns + ni))
    aug[:ns, :ns] = A
    aug[:ns, ns:] = B
    phi = expm(aug * dt)
    return phi[:ns, :ns], phi[:ns, ns:]


def _input_samples(sys: SwingSystem, u, n_steps: int, dt: float, t0: float) -> np.ndarray:
    if u is None:
        return np.zeros((n_steps, sys.n))
    if callable(u):
        t = t0 + dt * np.arange(n_steps)
        samples = np.array([np.broadcast_to(u(tk), (sys.n,)) for tk in t], dtype=float)
    else:
        samples = np.asarray(u, dtype=float)
        if samples.ndim == 1:
            samples = samples[:, None]
        if samples.shape != (n_steps, sys.n):
            raise ValueError(f"input samples must have shape {(n_steps, sys.n)}, got {samples.shape}")
    if not np.all(np.isfinite(samples)):
        raise ValueError("input contains non-finite samples")
    return samples


def simulate(
    sys: SwingSystem,
    u: Callable | np.ndarray | None,
    dt: float,
    duration: float,
    x0: np.ndarray | None = None,
    t0: float = 0.0,
) -> TimeSeriesSet:
    """Simulate with the exact ZOH discretization.

    ``u`` is either a callable ``u(t) -> (n,)`` sampled at the step starts,
    or a ``(n_steps, n)`` array of held input values.  The returned record has
    the states, the outputs and the inputs, sampled at ``t0 + k*dt``.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    if not duration >= dt:
        raise ValueError("duration must be at least one step")
    n_steps = int(round(duration / dt))
    U = _input_samples(sys, u, n_steps, dt, t0)
    Ad, Bd = discretize(sys.A, sys.B, dt)
    ns = 2 * sys.n
    x = np.zeros(ns) if x0 is None else np.asarray(x0, dtype=float).copy()
    if x.shape != (ns,):
        raise ValueError(f"x0 must have shape ({ns},)")
    X = np.empty((n_steps, ns))
    BU = U @ Bd.T
    AdT = Ad.T.copy()
    for k in range(n_steps):
        X[k] = x
        x = x @ AdT + BU[k]
    Y = X @ sys.C.T
    return TimeSeriesSet(
        dt=dt,
        data=np.hstack([X, Y, U]),
        channels=sys.channels + sys.input_channels,
        t0=t0,
    )


def ambient_inputs(sys: SwingSystem, n_steps: int, dt: float, rng) -> np.ndarray:
    std = np.sqrt(sys.alpha * np.diag(sys.M) / dt)
    return rng.standard_normal((n_steps, sys.n)) * std


def gen_ambient(sys: SwingSystem, duration: float, dt: float, seed=None) -> TimeSeriesSet:
    n_steps = int(round(duration / dt))
    rng = np.random.default_rng(seed)
    ts = simulate(sys, ambient_inputs(sys, n_steps, dt, rng), dt, duration)
    ts.attrs.update(kind="ambient", seed=seed)
    return ts


@dataclass(frozen=True)
class FOComponent:
    source: str
    frequency: float
    amplitude: float
    phase: float = 0.0


@dataclass(frozen=True)
class FOInputSpec:
    """Sinusoidal forcing at up to two sources with up to two frequencies."""

    components: tuple

    def __post_init__(self):
        comps = tuple(
            c if isinstance(c, FOComponent) else FOComponent(**c) for c in self.components
        )
        comps = tuple(
            FOComponent(str(c.source), float(c.frequency), float(c.amplitude), float(c.phase))
            for c in comps
        )
        object.__setattr__(self, "components", comps)
        for c in comps:
            if not c.frequency > 0:
                raise GridValidationError("FO frequencies must be positive")
            if c.amplitude < 0:
                raise GridValidationError("FO amplitudes must be non-negative")
        if len(self.sources) > 2:
            raise GridValidationError("at most 2 FO sources are supported")
        if len(self.frequencies) > 2:
            raise GridValidationError("at most 2 FO frequencies are supported")

    @property
    def sources(self) -> list[str]:
        return sorted({c.source for c in self.components})

    @property
    def frequencies(self) -> list[float]:
        return sorted({c.frequency for c in self.components})

    def to_dict(self) -> dict:
        return {"components": [c.__dict__ for c in self.components]}


def fo_inputs(sys: SwingSystem, spec: FOInputSpec, n_steps: int, dt: float, t0=0.0) -> np.ndarray:
    t = t0 + dt * np.arange(n_steps)
    U = np.zeros((n_steps, sys.n))
    for c in spec.components:
        U[:, sys.gen_index(c.source)] += c.amplitude * np.sin(
            2 * np.pi * c.frequency * t + c.phase
        )
    return U


def gen_fo(
    sys: SwingSystem,
    spec: FOInputSpec,
    duration: float,
    dt: float,
    ambient_seed=None,
) -> TimeSeriesSet:
    """FO record; adds ambient noise drawn from ``ambient_seed`` unless it is None."""
    if not isinstance(spec, FOInputSpec):
        spec = FOInputSpec(spec)
    for s in spec.sources:
        sys.gen_index(s)
    n_steps = int(round(duration / dt))
    U = fo_inputs(sys, spec, n_steps, dt)
    if ambient_seed is not None:
        U = U + ambient_inputs(sys, n_steps, dt, np.random.default_rng(ambient_seed))
    ts = simulate(sys, U, dt, duration)
    ts.attrs.update(kind="fo", fo=spec.to_dict(), ambient_seed=ambient_seed)
    return ts


def reference_impulse_response(sys: SwingSystem, source, duration: float, dt: float) -> TimeSeriesSet:
    """Exact sampled response ``obs @ expm(A t) @ B[:, source]`` of every channel."""
    l = sys.gen_index(source)
    n_steps = int(round(duration / dt))
    E = expm(sys.A * dt)
    X = np.empty((n_steps, 2 * sys.n))
    x = sys.B[:, l].copy()
    for k in range(n_steps):
        X[k] = x
        x = E @ x
    ts = TimeSeriesSet(dt=dt, data=np.hstack([X, X @ sys.C.T]), channels=sys.channels)
    ts.attrs.update(kind="impulse_response", source=str(source))
    return ts


def transfer_at(sys: SwingSystem, source, xi: float) -> np.ndarray:
    """Continuous-time frequency response of every channel to ``source`` at ``xi`` Hz."""
    l = sys.gen_index(source)
    s = 2j * np.pi * xi
    x = np.linalg.solve(s * np.eye(2 * sys.n) - sys.A, sys.B[:, l])
    return sys.observation @ x
