"""Fixed-point current-injection power flow.

The nodal admittance matrix is built over every (bus, conductor) pair. Source
conductors and the neutral of every grounded bus are fixed and eliminated;
the remaining block is LU-factored once and reused every iteration:

    V_free <- Y_ff^-1 (I_load(V) - Y_fk V_fixed)

Works unchanged on four-wire networks (loads see V_p - V_n) and on
neutral-eliminated networks, whose bus voltages already are phase-to-neutral.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ModelError, SingularImpedanceError, VoltageCollapseError
from .model import Conductor, Network, phase_to_neutral, validate_network

log = logging.getLogger(__name__)

#: relative condition number above which a series impedance counts as singular
MAX_CONDITION = 1e12


@dataclass(frozen=True)
class SolveOptions:
    """Iteration controls.

    Convergence needs the largest voltage update to be at most
    ``tolerance * |source voltage|`` and the largest nodal current mismatch
    at most ``residual_tolerance`` ampere. The second test matters for
    heavily loaded feeders, where a small relative update still leaves a
    mismatch of roughly load current times ``tolerance``.
    """

    tolerance: float = 1e-10
    max_iterations: int = 100
    flat_start: bool = True
    residual_tolerance: float = 1e-9

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if not self.residual_tolerance > 0:
            raise ValueError("residual_tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")


@dataclass
class LineCurrents:
    """Currents of one line, conductor order as ``labels``; ``ij`` is from->to."""

    labels: tuple[Conductor, ...]
    series_ij: np.ndarray
    total_ij: np.ndarray
    series_ji: np.ndarray
    total_ji: np.ndarray

    def phase_currents(self) -> np.ndarray:
        idx = [k for k, c in enumerate(self.labels) if c != Conductor.N]
        return self.series_ij[idx]


@dataclass
class Solution:
    network: str
    conductors: dict[str, tuple[Conductor, ...]]
    voltages: dict[str, np.ndarray]
    currents: dict[str, LineCurrents]
    iterations: int
    converged: bool
    max_residual: float
    max_update: float = float("nan")
    grounding_currents: dict[str, complex] = field(default_factory=dict)
    elapsed_s: float = 0.0

    def voltage(self, bus_id, conductor) -> complex:
        return complex(self.voltages[bus_id][self.conductors[bus_id].index(Conductor.parse(conductor))])


# -- current algebra -----------------------------------------------------------


def ground_current(i_vec) -> complex:
    """Current leaving a line into the ground, -(I_a + I_b + I_c + I_n)."""
    return complex(-np.sum(np.asarray(i_vec, dtype=complex)))


def neutral_from_phases(i_abc) -> complex:
    return complex(-np.sum(np.asarray(i_abc, dtype=complex)))


def phase_to_neutral_voltage(v4) -> np.ndarray:
    v4 = np.asarray(v4, dtype=complex)
    if v4.shape != (4,):
        raise ValueError("expected a 4-vector ordered A, B, C, N")
    return v4[:3] - v4[3]


def load_current(v_pn, s_ref) -> np.ndarray:
    """Constant-power wye load current, conj(S / V_pn) per phase."""
    v_pn = np.asarray(v_pn, dtype=complex)
    s_ref = np.asarray(s_ref, dtype=complex)
    loaded = s_ref != 0
    if np.any(loaded & (v_pn == 0)):
        raise VoltageCollapseError("zero phase-to-neutral voltage on a loaded phase")
    out = np.zeros(np.broadcast(v_pn, s_ref).shape, dtype=complex)
    np.divide(s_ref, v_pn, out=out, where=loaded)
    return np.conj(out)


# -- assembly ------------------------------------------------------------------


@dataclass
class LinearSystem:
    """Nodal admittance system with boundary conditions split out.

    ``nodes[k]`` is the (bus, conductor) pair of unknown ``k``; ``fixed`` and
    ``free`` index into that list. ``y`` is the full matrix before elimination.
    """

    nodes: list[tuple[str, Conductor]]
    index: dict[tuple[str, Conductor], int]
    y: sp.csr_matrix
    fixed: np.ndarray
    free: np.ndarray
    v_fixed: np.ndarray
    y_ff: sp.csc_matrix
    y_fk: sp.csr_matrix
    line_admittances: dict[str, np.ndarray]

    @property
    def dimension(self) -> int:
        return len(self.free)


def series_admittance(line) -> np.ndarray:
    z = line.series_z.values
    cond = np.linalg.cond(z)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise SingularImpedanceError(line.id, cond)
    return np.linalg.inv(z)


def assemble_system(net: Network) -> LinearSystem:
    problems = validate_network(net)
    if problems:
        raise ModelError("invalid network: " + "; ".join(str(p) for p in problems))

    nodes = [(b.id, c) for b in net.buses for c in b.conductors]
    index = {n: k for k, n in enumerate(nodes)}
    rows, cols, vals = [], [], []
    line_y = {}

    def stamp(bus_r, bus_c, labels, block):
        ir = [index[(bus_r, c)] for c in labels]
        ic = [index[(bus_c, c)] for c in labels]
        rr, cc = np.meshgrid(ir, ic, indexing="ij")
        rows.append(rr.ravel())
        cols.append(cc.ravel())
        vals.append(block.ravel())

    for ln in net.lines:
        y = series_admittance(ln)
        line_y[ln.id] = y
        i, j, lab = ln.from_bus, ln.to_bus, ln.labels
        stamp(i, i, lab, y + ln.shunt_y_from.values)
        stamp(j, j, lab, y + ln.shunt_y_to.values)
        stamp(i, j, lab, -y)
        stamp(j, i, lab, -y)

    n = len(nodes)
    if rows:
        ymat = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n), dtype=complex
        ).tocsr()
    else:
        ymat = sp.csr_matrix((n, n), dtype=complex)

    fixed_v = {}
    src = net.source
    for c, v in src.v_ref.items():
        fixed_v[index[(src.bus, c)]] = v
    for b in net.buses:
        if b.grounded:
            fixed_v.setdefault(index[(b.id, Conductor.N)], 0j)

    fixed = np.array(sorted(fixed_v), dtype=int)
    free = np.array([k for k in range(n) if k not in fixed_v], dtype=int)
    v_fixed = np.array([fixed_v[k] for k in fixed], dtype=complex)
    return LinearSystem(
        nodes=nodes,
        index=index,
        y=ymat,
        fixed=fixed,
        free=free,
        v_fixed=v_fixed,
        y_ff=ymat[free][:, free].tocsc(),
        y_fk=ymat[free][:, fixed].tocsr(),
        line_admittances=line_y,
    )


class _LoadMap:
    """Vectorised load model: one entry per (load, phase)."""

    def __init__(self, net: Network, system: LinearSystem):
        phase_idx, neutral_idx, s = [], [], []
        for d in net.loads:
            bus = net.bus(d.bus)
            for p, sp_ in zip(d.phases, d.s_ref):
                phase_idx.append(system.index[(d.bus, p)])
                neutral_idx.append(system.index[(d.bus, Conductor.N)] if bus.has_neutral else -1)
                s.append(sp_)
        self.phase = np.array(phase_idx, dtype=int)
        self.neutral = np.array(neutral_idx, dtype=int)
        self.has_neutral = self.neutral >= 0
        self.s = np.array(s, dtype=complex)
        self.n = len(system.nodes)

    def v_pn(self, v):
        vn = np.where(self.has_neutral, v[np.where(self.has_neutral, self.neutral, 0)], 0)
        return v[self.phase] - vn

    def injections(self, v):
        """Node current injections; a load draws from its phase and returns on the neutral."""
        i_load = load_current(self.v_pn(v), self.s)
        inj = np.zeros(self.n, dtype=complex)
        np.add.at(inj, self.phase, -i_load)
        np.add.at(inj, self.neutral[self.has_neutral], i_load[self.has_neutral])
        return inj


def _initial_voltages(net: Network, system: LinearSystem, opts: SolveOptions, lu, loads) -> np.ndarray:
    v = np.zeros(len(system.nodes), dtype=complex)
    if opts.flat_start:
        angle = np.angle(net.source.v_ref.get(Conductor.A, 1.0))
        shift = {Conductor.A: 0.0, Conductor.B: -2 * np.pi / 3, Conductor.C: 2 * np.pi / 3}
        for k, (bus_id, c) in enumerate(system.nodes):
            if c in shift:
                v[k] = net.bus(bus_id).base_voltage * np.exp(1j * (angle + shift[c]))
    else:
        # no-load solution
        v[system.free] = lu.solve(-(system.y_fk @ system.v_fixed))
    v[system.fixed] = system.v_fixed
    return v


def solve_powerflow(net: Network, opts: SolveOptions | None = None) -> Solution:
    """Solve the power flow; divergence is reported through ``converged``."""
    opts = opts or SolveOptions()
    t0 = time.perf_counter()
    system = assemble_system(net)
    loads = _LoadMap(net, system)
    lu = spla.splu(system.y_ff) if system.dimension else None
    rhs_fixed = -(system.y_fk @ system.v_fixed)
    scale = net.source.magnitude or 1.0

    v = _initial_voltages(net, system, opts, lu, loads)
    converged = False
    update = float("inf")
    it = 0
    if lu is None:
        converged, update = True, 0.0
    inj = loads.injections(v) if lu is not None else None
    while lu is not None and it < opts.max_iterations:
        it += 1
        v_new = lu.solve(inj[system.free] + rhs_fixed)
        if not np.all(np.isfinite(v_new)):
            log.warning("%s: non-finite voltages at iteration %d", net.name, it)
            break
        update = float(np.max(np.abs(v_new - v[system.free]), initial=0.0))
        v[system.free] = v_new
        try:
            inj_next = loads.injections(v)
        except VoltageCollapseError:
            log.warning("%s: phase voltage collapsed at iteration %d", net.name, it)
            break
        # v solves Y v = inj exactly, so KCL mismatch at v is the change in injections
        mismatch = float(np.max(np.abs(inj_next[system.free] - inj[system.free]), initial=0.0))
        inj = inj_next
        if update <= opts.tolerance * scale and mismatch <= opts.residual_tolerance:
            converged = True
            break
    if not converged:
        log.info("%s: no convergence after %d iterations (last update %.3g V)", net.name, it, update)

    sol = _package(net, system, loads, v, it, converged, update)
    sol.elapsed_s = time.perf_counter() - t0
    return sol


def node_residuals(system: LinearSystem, loads: _LoadMap, v: np.ndarray) -> np.ndarray:
    """KCL mismatch per node: current leaving through lines minus load injection."""
    with np.errstate(all="ignore"):
        return system.y @ v - loads.injections(v)


def _package(net, system, loads, v, iterations, converged, update) -> Solution:
    conductors = {b.id: b.conductors for b in net.buses}
    voltages = {}
    for b in net.buses:
        voltages[b.id] = np.array([v[system.index[(b.id, c)]] for c in b.conductors])
    try:
        resid = node_residuals(system, loads, v)
        max_res = float(np.max(np.abs(resid[system.free]), initial=0.0))
    except VoltageCollapseError:
        resid, max_res = None, float("inf")
    grounding = {}
    if resid is not None:
        src_bus = net.source.bus
        for b in net.buses:
            if b.grounded and b.id != src_bus:
                # current pushed into the neutral node by the ground bond
                grounding[b.id] = complex(resid[system.index[(b.id, Conductor.N)]])
    sol = Solution(
        network=net.name,
        conductors=conductors,
        voltages=voltages,
        currents={},
        iterations=iterations,
        converged=converged,
        max_residual=max_res,
        max_update=update,
        grounding_currents=grounding,
    )
    sol.currents = branch_currents(net, sol, system.line_admittances)
    return sol


def branch_currents(net: Network, sol: Solution, admittances=None) -> dict[str, LineCurrents]:
    out = {}
    for ln in net.lines:
        y = admittances[ln.id] if admittances else series_admittance(ln)
        vi = _select(sol, ln.from_bus, ln.labels)
        vj = _select(sol, ln.to_bus, ln.labels)
        series = y @ (vi - vj)
        out[ln.id] = LineCurrents(
            labels=ln.labels,
            series_ij=series,
            total_ij=series + ln.shunt_y_from.values @ vi,
            series_ji=-series,
            total_ji=-series + ln.shunt_y_to.values @ vj,
        )
    return out


def _select(sol: Solution, bus_id: str, labels) -> np.ndarray:
    cond = sol.conductors[bus_id]
    return np.array([sol.voltages[bus_id][cond.index(c)] for c in labels])


# -- post-solve checks ---------------------------------------------------------


def check_neutral_limit(phase_currents: dict, i_max: float) -> dict[str, tuple[bool, float]]:
    """Neutral-current limit |I_a + I_b + I_c| <= i_max, with margin i_max - |sum|."""
    out = {}
    for key, i_abc in phase_currents.items():
        mag = abs(np.sum(np.asarray(i_abc, dtype=complex)))
        out[key] = (bool(mag <= i_max), float(i_max - mag))
    return out


def check_voltage_bounds(sol: Solution, net: Network, vmin_pu: float = 0.9, vmax_pu: float = 1.1):
    """Flag phase-to-neutral magnitudes outside [vmin_pu, vmax_pu]: 'low', 'high' or 'ok'."""
    flags = {}
    for b in net.buses:
        vpn = phase_to_neutral(b, sol.voltages[b.id])
        row = {}
        for p, val in vpn.items():
            m = abs(val) / b.base_voltage
            row[p] = "low" if m < vmin_pu else "high" if m > vmax_pu else "ok"
        flags[b.id] = row
    return flags


@dataclass
class BalanceReport:
    source_power: complex
    load_power: complex
    line_losses: complex
    max_kcl_residual: float
    max_ground_current_ungrounded: float
    ground_current_sum: complex

    @property
    def power_mismatch(self) -> float:
        """Relative power-balance error."""
        gap = self.source_power - self.load_power - self.line_losses
        return abs(gap) / max(abs(self.source_power), abs(self.load_power), 1e-300)


def conservation_report(net: Network, sol: Solution) -> BalanceReport:
    """Evaluate KCL, ground-current and power balance of a solution.

    Computed independently of the iteration: line currents from Ohm's law,
    load currents from the solved voltages.
    """
    kcl: dict[tuple[str, Conductor], complex] = {}
    for b in net.buses:
        for c in b.conductors:
            kcl[(b.id, c)] = 0j
    losses = 0j
    for ln in net.lines:
        lc = sol.currents[ln.id]
        vi = _select(sol, ln.from_bus, ln.labels)
        vj = _select(sol, ln.to_bus, ln.labels)
        losses += np.sum(vi * np.conj(lc.total_ij)) + np.sum(vj * np.conj(lc.total_ji))
        for k, c in enumerate(ln.labels):
            kcl[(ln.from_bus, c)] += lc.total_ij[k]
            kcl[(ln.to_bus, c)] += lc.total_ji[k]
    load_power = 0j
    for d in net.loads:
        bus = net.bus(d.bus)
        vpn = phase_to_neutral(bus, sol.voltages[d.bus])
        for p, s in zip(d.phases, d.s_ref):
            i = load_current(vpn[p], s)
            kcl[(d.bus, p)] += i
            if bus.has_neutral:
                kcl[(d.bus, Conductor.N)] -= i
            load_power += s

    src = net.source
    source_power = sum(src.v_ref[c] * np.conj(kcl[(src.bus, c)]) for c in src.v_ref)
    # source and ground bonds are the only places current may leave the conductors
    fixed = {(src.bus, c) for c in src.v_ref} | {(b.id, Conductor.N) for b in net.buses if b.grounded}
    free_res = [abs(v) for k, v in kcl.items() if k not in fixed]
    ground_by_bus: dict[str, complex] = {}
    for (bus_id, _c), v in kcl.items():
        ground_by_bus[bus_id] = ground_by_bus.get(bus_id, 0j) + v
    ungrounded = [abs(v) for bid, v in ground_by_bus.items() if bid != src.bus and not net.bus(bid).grounded]
    ground_sum = sum(v for k, v in kcl.items() if k in fixed)
    return BalanceReport(
        source_power=complex(source_power),
        load_power=complex(load_power),
        line_losses=complex(losses),
        max_kcl_residual=max(free_res, default=0.0),
        max_ground_current_ungrounded=max(ungrounded, default=0.0),
        ground_current_sum=complex(ground_sum),
    )


# -- JSON ----------------------------------------------------------------------


def _vec_json(v):
    return [{"re": float(x.real), "im": float(x.imag)} for x in np.asarray(v, dtype=complex)]


def _vec_from_json(items):
    return np.array([complex(x["re"], x["im"]) for x in items], dtype=complex)


def solution_to_dict(sol: Solution) -> dict:
    return {
        "network": sol.network,
        "converged": sol.converged,
        "iterations": sol.iterations,
        "max_residual": sol.max_residual,
        "max_update": sol.max_update,
        "buses": {
            bid: {"conductors": [c.name for c in sol.conductors[bid]], "voltage": _vec_json(v)}
            for bid, v in sol.voltages.items()
        },
        "lines": {
            lid: {
                "labels": [c.name for c in lc.labels],
                "series_ij": _vec_json(lc.series_ij),
                "total_ij": _vec_json(lc.total_ij),
                "series_ji": _vec_json(lc.series_ji),
                "total_ji": _vec_json(lc.total_ji),
            }
            for lid, lc in sol.currents.items()
        },
        "grounding_currents": {bid: {"re": i.real, "im": i.imag} for bid, i in sol.grounding_currents.items()},
    }


def solution_from_dict(obj: dict) -> Solution:
    conductors = {bid: tuple(Conductor.parse(c) for c in b["conductors"]) for bid, b in obj["buses"].items()}
    voltages = {bid: _vec_from_json(b["voltage"]) for bid, b in obj["buses"].items()}
    currents = {
        lid: LineCurrents(
            labels=tuple(Conductor.parse(c) for c in ln["labels"]),
            series_ij=_vec_from_json(ln["series_ij"]),
            total_ij=_vec_from_json(ln["total_ij"]),
            series_ji=_vec_from_json(ln["series_ji"]),
            total_ji=_vec_from_json(ln["total_ji"]),
        )
        for lid, ln in obj.get("lines", {}).items()
    }
    return Solution(
        network=obj.get("network", ""),
        conductors=conductors,
        voltages=voltages,
        currents=currents,
        iterations=int(obj["iterations"]),
        converged=bool(obj["converged"]),
        max_residual=float(obj.get("max_residual", float("nan"))),
        max_update=float(obj.get("max_update", float("nan"))),
        grounding_currents={k: complex(v["re"], v["im"]) for k, v in obj.get("grounding_currents", {}).items()},
    )


__all__ = [
    "BalanceReport",
    "LineCurrents",
    "LinearSystem",
    "Solution",
    "SolveOptions",
    "assemble_system",
    "branch_currents",
    "check_neutral_limit",
    "check_voltage_bounds",
    "conservation_report",
    "ground_current",
    "load_current",
    "neutral_from_phases",
    "phase_to_neutral_voltage",
    "solution_from_dict",
    "solution_to_dict",
    "solve_powerflow",
]
