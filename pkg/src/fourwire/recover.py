"""Neutral-to-ground voltage recovery after a phase-to-neutral solve.

The neutral row of the four-wire Ohm's law, with the neutral current written
as minus the sum of the phase currents, gives the neutral voltage rise along a
line:

    V_j,n = V_i,n - sum_p (z_np - z_nn) I_p

Starting from the grounded buses, the traversal walks the graph and applies
this rule once per newly reached bus. Lines that close a loop, or connect two
already-known buses, are evaluated afterwards; their largest disagreement is
reported as ``consistency_residual``.
"""
from __future__ import annotations

import heapq
import re
from dataclasses import dataclass

import numpy as np

from .errors import RecoveryError
from .model import Conductor, LineSegment, Network, connected_components


@dataclass
class RecoveryResult:
    neutral_voltages: dict[str, complex]
    visit_order: list[str]
    consistency_residual: float


def _natural_key(s: str):
    return [int(t) if t.isdigit() else t for t in re.split(r"(\d+)", s)]


def neutral_rise(line: LineSegment, i_phases) -> complex:
    """Drop of the neutral voltage from ``from_bus`` to ``to_bus``."""
    z = line.series_z
    if z.labels[-1] != Conductor.N:
        raise RecoveryError(f"line {line.id} has no neutral conductor")
    i_phases = np.asarray(i_phases, dtype=complex)
    phases = z.labels[:-1]
    if i_phases.shape != (len(phases),):
        raise RecoveryError(f"line {line.id}: expected {len(phases)} phase currents, got {i_phases.shape}")
    coupling = z.values[-1, :-1] - z.values[-1, -1]
    return complex(coupling @ i_phases)


def recover_neutral(net4: Network, phase_currents, ground_voltage=0.0) -> RecoveryResult:
    """Reconstruct neutral voltages of ``net4`` from per-line phase currents.

    Parameters
    ----------
    net4 : Network
        The original network with explicit neutral conductors.
    phase_currents : mapping
        ``line id -> phase current vector`` in the line's from->to direction,
        ordered like the line's phase conductors.
    ground_voltage : complex or mapping, optional
        Voltage assigned to grounded neutrals, either one value for all or
        ``bus id -> value``.

    Frontier lines are taken lowest line id first, so the result is
    deterministic. Raises :class:`RecoveryError` for disconnected networks,
    networks without grounding and missing currents.
    """
    bus_ids = [b.id for b in net4.buses]
    edges = [(ln.from_bus, ln.to_bus) for ln in net4.lines]
    if len(connected_components(bus_ids, edges)) > 1:
        raise RecoveryError("network graph is disconnected")
    grounded = [b.id for b in net4.buses if b.grounded]
    if not grounded:
        raise RecoveryError("no grounded bus to start from")
    missing = [ln.id for ln in net4.lines if ln.id not in phase_currents]
    if missing:
        raise RecoveryError(f"missing phase currents for lines {missing}")

    rise = {ln.id: neutral_rise(ln, phase_currents[ln.id]) for ln in net4.lines}
    incident: dict[str, list[LineSegment]] = {b: [] for b in bus_ids}
    for ln in net4.lines:
        incident[ln.from_bus].append(ln)
        incident[ln.to_bus].append(ln)

    def offset(bus_id):
        if isinstance(ground_voltage, dict):
            return complex(ground_voltage.get(bus_id, 0.0))
        return complex(ground_voltage)

    vn: dict[str, complex] = {b: offset(b) for b in grounded}
    heap: list = []

    def push_from(bus_id):
        for ln in incident[bus_id]:
            other = ln.to_bus if ln.from_bus == bus_id else ln.from_bus
            if other not in vn:
                heapq.heappush(heap, (_natural_key(ln.id), ln.id, bus_id))

    for b in sorted(grounded, key=_natural_key):
        push_from(b)

    lines_by_id = {ln.id: ln for ln in net4.lines}
    order: list[str] = []
    tree: set[str] = set()
    while heap:
        _, lid, known = heapq.heappop(heap)
        ln = lines_by_id[lid]
        other = ln.to_bus if ln.from_bus == known else ln.from_bus
        if other in vn:
            continue
        if known == ln.from_bus:
            vn[other] = vn[known] - rise[lid]
        else:
            vn[other] = vn[known] + rise[lid]
        order.append(lid)
        tree.add(lid)
        push_from(other)

    residual = 0.0
    for ln in net4.lines:
        if ln.id in tree:
            continue
        residual = max(residual, abs(vn[ln.from_bus] - rise[ln.id] - vn[ln.to_bus]))
    return RecoveryResult(neutral_voltages=vn, visit_order=order, consistency_residual=float(residual))


def phase_currents_from_solution(sol, net=None) -> dict[str, np.ndarray]:
    """Phase series currents (from->to) of every line in a solution."""
    return {lid: lc.phase_currents() for lid, lc in sol.currents.items()}


def recovery_error(rec: RecoveryResult, sol4) -> float:
    """Largest |recovered - solved| neutral voltage over all buses (volt)."""
    solved = {b for b, cond in sol4.conductors.items() if Conductor.N in cond}
    if set(rec.neutral_voltages) != solved:
        raise RecoveryError("recovered and solved bus sets differ")
    err = 0.0
    for b, v in rec.neutral_voltages.items():
        err = max(err, abs(v - sol4.voltage(b, Conductor.N)))
    return err
