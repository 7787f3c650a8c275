"""Desk-scale reference grids shipped with the package.

* ``gen2``  - two unit-inertia generators on one line; a single inter-area
  mode near 0.39 Hz.
* ``ring8`` - eight generators on a ring with two chords and heterogeneous
  inertias; seven oscillatory modes between 0.2 and 0.58 Hz.
* ``grid12`` - six generators behind internal reactances on a 12-bus ring
  (terminal buses ``B1..B6`` alternating with load buses ``B7..B12``); used
  with bus-only measurements: terminal-bus frequencies and line flows, each
  generator's speed replaced by its terminal-bus frequency.
"""

from __future__ import annotations

import numpy as np

from .dynsim import GridModel

RING8_INERTIA = (1.0, 1.6, 2.2, 1.2, 0.8, 1.9, 1.3, 1.5)
GRID12_INERTIA = (1.2, 2.0, 0.9, 1.6, 1.1, 1.8)


def gen2(susceptance: float = 3.0, gamma: float = 0.5, alpha: float = 1.0) -> GridModel:
    return GridModel(
        generators=[{"id": "G1", "inertia": 1.0}, {"id": "G2", "inertia": 1.0}],
        buses=["B1", "B2"],
        lines=[{"from_bus": "B1", "to_bus": "B2", "susceptance": susceptance}],
        gen_bus_map={"G1": "B1", "G2": "B2"},
        damping_ratio=gamma,
        ambient_scale=alpha,
        name="gen2",
    )


def ring8(b: float = 3.0, gamma: float = 0.5, alpha: float = 1.0,
          chords=((1, 5), (3, 7))) -> GridModel:
    gens = [{"id": f"G{k}", "inertia": m} for k, m in enumerate(RING8_INERTIA, 1)]
    buses = [f"B{k}" for k in range(1, 9)]
    lines = [
        {"from_bus": f"B{k}", "to_bus": f"B{k % 8 + 1}",
         "susceptance": float(b * (1 + 0.3 * np.sin(k)))}
        for k in range(1, 9)
    ]
    lines += [{"from_bus": f"B{i}", "to_bus": f"B{j}", "susceptance": 0.6 * b} for i, j in chords]
    return GridModel(
        generators=gens,
        buses=buses,
        lines=lines,
        gen_bus_map={f"G{k}": f"B{k}" for k in range(1, 9)},
        damping_ratio=gamma,
        ambient_scale=alpha,
        name="ring8",
    )


def grid12(gamma: float = 0.5, alpha: float = 1.0, strong: float = 8.0, weak: float = 3.0,
           internal: float = 10.0) -> GridModel:
    gens = [
        {"id": f"G{k}", "inertia": m, "internal_susceptance": internal}
        for k, m in enumerate(GRID12_INERTIA, 1)
    ]
    lines = []
    for k in range(1, 7):
        load, nxt = f"B{k + 6}", f"B{k % 6 + 1}"
        lines.append({"from_bus": f"B{k}", "to_bus": load,
                      "susceptance": float(strong * (1 + 0.2 * np.cos(k)))})
        lines.append({"from_bus": load, "to_bus": nxt,
                      "susceptance": float(weak * (1 + 0.2 * np.sin(k)))})
    return GridModel(
        generators=gens,
        buses=[f"B{k}" for k in range(1, 13)],
        lines=lines,
        gen_bus_map={f"G{k}": f"B{k}" for k in range(1, 7)},
        damping_ratio=gamma,
        ambient_scale=alpha,
        name="grid12",
    )


GRID12_SURROGATES = {f"G{k}": f"f:B{k}" for k in range(1, 7)}


def grid12_partial_channels() -> list[str]:
    """Terminal-bus frequencies plus every line flow (load buses unmeasured)."""
    lines = []
    for k in range(1, 7):
        lines += [f"p:B{k}-B{k + 6}", f"p:B{k + 6}-B{k % 6 + 1}"]
    return list(GRID12_SURROGATES.values()) + lines

REFERENCE_GRIDS = {"gen2": gen2, "ring8": ring8, "grid12": grid12}


def reference_grid(name: str, **kw) -> GridModel:
    try:
        return REFERENCE_GRIDS[name](**kw)
    except KeyError:
        raise KeyError(
            f"unknown reference grid {name!r}; choose from {', '.join(REFERENCE_GRIDS)}"
        ) from None
