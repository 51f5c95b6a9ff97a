import numpy as np
import pytest

from fourwire.model import (
    FOUR_WIRE,
    Bus,
    Conductor,
    ImpedanceMatrix,
    LineSegment,
    Load,
    Network,
    Source,
    balanced_phasors,
)

A, B, C, N = Conductor.A, Conductor.B, Conductor.C, Conductor.N


def cable(r=0.3, x=0.08, rm=0.05, xm=0.02, length=1.0):
    z = np.full((4, 4), complex(rm, xm))
    np.fill_diagonal(z, complex(r, x))
    return ImpedanceMatrix(FOUR_WIRE, z * length)


def radial_chain(n_buses=3, loads=None, grounded=("B1",), z=None, base=230.0):
    """B1 - B2 - ... chain; ``loads`` maps bus -> {phase: S}."""
    z = z if z is not None else cable()
    buses = [Bus(f"B{k}", FOUR_WIRE, base, f"B{k}" in grounded) for k in range(1, n_buses + 1)]
    lines = [LineSegment(f"L{k}", f"B{k}", f"B{k + 1}", z) for k in range(1, n_buses)]
    load_objs = []
    for bus, spec in (loads or {}).items():
        for p, s in spec.items():
            load_objs.append(Load(f"D{bus}{p.name}", bus, [p], [s]))
    src = Source("source", "B1", balanced_phasors(base))
    return Network(buses, lines, load_objs, [src], "chain")


@pytest.fixture
def two_bus():
    return radial_chain(2, {"B2": {A: 3000 + 500j, B: 1000 + 100j, C: 2000 + 0j}})
