"""Network data model for four-wire (and neutral-eliminated) distribution feeders.

All quantities are SI: ohm, siemens, volt, ampere, volt-ampere. Per-unit values
only appear in reporting helpers (:func:`voltage_magnitudes_pu`,
:class:`PerUnitBase`).

Conductor vectors and matrices are always laid out in the fixed order
A < B < C < N, restricted to the conductors actually present.
"""
from __future__ import annotations

import copy
import json
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ModelError


class Conductor(IntEnum):
    A = 0
    B = 1
    C = 2
    N = 3

    @classmethod
    def parse(cls, value) -> "Conductor":
        if isinstance(value, Conductor):
            return value
        try:
            return cls[str(value).strip().upper()]
        except KeyError:
            raise ModelError(f"unknown conductor label {value!r}") from None


PHASES = (Conductor.A, Conductor.B, Conductor.C)
FOUR_WIRE = PHASES + (Conductor.N,)


def sort_labels(labels: Iterable) -> tuple[Conductor, ...]:
    out = tuple(sorted({Conductor.parse(c) for c in labels}))
    return out


def _as_labels(labels) -> tuple[Conductor, ...]:
    parsed = tuple(Conductor.parse(c) for c in labels)
    if len(set(parsed)) != len(parsed):
        raise ModelError(f"duplicate conductor labels {parsed}")
    return parsed


class ConductorMatrix:
    """Dense complex matrix indexed by conductor labels.

    Labels are stored in canonical order; if they are given out of order the
    rows and columns are permuted accordingly, so ``entry(p, q)`` is stable
    regardless of how the matrix was specified.
    """

    __slots__ = ("labels", "values")

    def __init__(self, labels, values):
        labels = _as_labels(labels)
        if not 1 <= len(labels) <= 4:
            raise ModelError(f"matrix needs 1..4 conductors, got {len(labels)}")
        arr = np.array(values, dtype=complex)
        n = len(labels)
        if arr.shape != (n, n):
            raise ModelError(f"matrix shape {arr.shape} does not match {n} labels")
        if not np.all(np.isfinite(arr)):
            raise ModelError("matrix entries must be finite")
        order = np.argsort([int(c) for c in labels], kind="stable")
        arr = arr[np.ix_(order, order)]
        arr.setflags(write=False)
        object.__setattr__(self, "labels", tuple(labels[i] for i in order))
        object.__setattr__(self, "values", arr)

    def __setattr__(self, name, value):
        raise AttributeError(f"{type(self).__name__} is immutable")

    @classmethod
    def from_entries(cls, entries: Mapping[tuple, complex], labels=None):
        """Build from ``{(p, q): value}``; missing entries are zero."""
        if labels is None:
            labels = {Conductor.parse(p) for p, _ in entries} | {Conductor.parse(q) for _, q in entries}
        labels = sort_labels(labels)
        pos = {c: i for i, c in enumerate(labels)}
        arr = np.zeros((len(labels), len(labels)), dtype=complex)
        for (p, q), v in entries.items():
            arr[pos[Conductor.parse(p)], pos[Conductor.parse(q)]] = v
        return cls(labels, arr)

    @classmethod
    def zeros(cls, labels):
        labels = sort_labels(labels)
        return cls(labels, np.zeros((len(labels), len(labels)), dtype=complex))

    @property
    def size(self) -> int:
        return len(self.labels)

    def index(self, label) -> int:
        return self.labels.index(Conductor.parse(label))

    def entry(self, p, q) -> complex:
        return complex(self.values[self.index(p), self.index(q)])

    def has_neutral(self) -> bool:
        return Conductor.N in self.labels

    def is_zero(self) -> bool:
        return not np.any(self.values)

    def __eq__(self, other):
        if type(other) is not type(self):
            return NotImplemented
        return self.labels == other.labels and np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash((type(self).__name__, self.labels, self.values.tobytes()))

    def __repr__(self):
        names = "".join(c.name for c in self.labels)
        return f"{type(self).__name__}({names}, {self.values.tolist()!r})"

    def __deepcopy__(self, memo):
        return self

    def __copy__(self):
        return self


class ImpedanceMatrix(ConductorMatrix):
    """Series impedance matrix in ohm. Symmetry is not assumed."""

    __slots__ = ()


class AdmittanceMatrix(ConductorMatrix):
    """Shunt admittance matrix in siemens."""

    __slots__ = ()


@dataclass(frozen=True)
class Bus:
    id: str
    conductors: tuple[Conductor, ...]
    base_voltage: float
    grounded: bool = False

    def __post_init__(self):
        object.__setattr__(self, "conductors", sort_labels(self.conductors))
        object.__setattr__(self, "base_voltage", float(self.base_voltage))

    @property
    def has_neutral(self) -> bool:
        return Conductor.N in self.conductors

    @property
    def phases(self) -> tuple[Conductor, ...]:
        return tuple(c for c in self.conductors if c != Conductor.N)


@dataclass(frozen=True)
class LineSegment:
    id: str
    from_bus: str
    to_bus: str
    series_z: ImpedanceMatrix
    shunt_y_from: AdmittanceMatrix | None = None
    shunt_y_to: AdmittanceMatrix | None = None

    def __post_init__(self):
        labels = self.series_z.labels
        for name in ("shunt_y_from", "shunt_y_to"):
            y = getattr(self, name)
            if y is None:
                object.__setattr__(self, name, AdmittanceMatrix.zeros(labels))
            elif y.labels != labels:
                raise ModelError(f"line {self.id}: {name} labels {y.labels} differ from series_z {labels}")

    @property
    def labels(self) -> tuple[Conductor, ...]:
        return self.series_z.labels

    @property
    def phases(self) -> tuple[Conductor, ...]:
        return tuple(c for c in self.labels if c != Conductor.N)

    @property
    def has_shunt(self) -> bool:
        return not (self.shunt_y_from.is_zero() and self.shunt_y_to.is_zero())


@dataclass(frozen=True)
class Load:
    """Wye-connected constant-power load; ``s_ref[k]`` belongs to ``phases[k]``."""

    id: str
    bus: str
    phases: tuple[Conductor, ...]
    s_ref: tuple[complex, ...]

    def __post_init__(self):
        phases = _as_labels(self.phases)
        s_ref = tuple(complex(s) for s in self.s_ref)
        if not phases:
            raise ModelError(f"load {self.id}: no phases")
        if Conductor.N in phases:
            raise ModelError(f"load {self.id}: neutral is not a load phase")
        if len(s_ref) != len(phases):
            raise ModelError(f"load {self.id}: {len(phases)} phases but {len(s_ref)} power entries")
        order = sorted(range(len(phases)), key=lambda k: phases[k])
        object.__setattr__(self, "phases", tuple(phases[k] for k in order))
        object.__setattr__(self, "s_ref", tuple(s_ref[k] for k in order))

    def power(self, phase) -> complex:
        return self.s_ref[self.phases.index(Conductor.parse(phase))]


@dataclass(frozen=True)
class Source:
    """Ideal voltage source fixing phase-to-ground phasors at its bus."""

    id: str
    bus: str
    v_ref: Mapping[Conductor, complex]

    def __post_init__(self):
        v = {Conductor.parse(k): complex(val) for k, val in dict(self.v_ref).items()}
        object.__setattr__(self, "v_ref", dict(sorted(v.items())))

    @property
    def magnitude(self) -> float:
        return max(abs(v) for v in self.v_ref.values())


@dataclass(frozen=True)
class Network:
    buses: tuple[Bus, ...]
    lines: tuple[LineSegment, ...]
    loads: tuple[Load, ...] = ()
    sources: tuple[Source, ...] = ()
    name: str = "network"
    _bus_index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        for attr in ("buses", "lines", "loads", "sources"):
            object.__setattr__(self, attr, tuple(getattr(self, attr)))
        object.__setattr__(self, "_bus_index", {b.id: b for b in self.buses})

    def bus(self, bus_id: str) -> Bus:
        try:
            return self._bus_index[bus_id]
        except KeyError:
            raise ModelError(f"unknown bus {bus_id!r}") from None

    def line(self, line_id: str) -> LineSegment:
        for ln in self.lines:
            if ln.id == line_id:
                return ln
        raise ModelError(f"unknown line {line_id!r}")

    @property
    def source(self) -> Source:
        if len(self.sources) != 1:
            raise ModelError(f"expected exactly one source, found {len(self.sources)}")
        return self.sources[0]

    @property
    def is_four_wire(self) -> bool:
        return any(b.has_neutral for b in self.buses)

    def grounded_buses(self) -> list[str]:
        return [b.id for b in self.buses if b.grounded]

    def loads_at(self, bus_id: str) -> list[Load]:
        return [d for d in self.loads if d.bus == bus_id]

    def replace(self, **changes) -> "Network":
        fields = dict(buses=self.buses, lines=self.lines, loads=self.loads, sources=self.sources, name=self.name)
        fields.update(changes)
        return Network(**fields)


@dataclass(frozen=True)
class Violation:
    entity: str
    rule: str
    message: str

    def __str__(self):
        return f"{self.entity}: [{self.rule}] {self.message}"


def connected_components(bus_ids: Sequence[str], edges: Iterable[tuple[str, str]]) -> list[set[str]]:
    adj: dict[str, set[str]] = {b: set() for b in bus_ids}
    for u, v in edges:
        if u in adj and v in adj:
            adj[u].add(v)
            adj[v].add(u)
    seen: set[str] = set()
    comps = []
    for start in bus_ids:
        if start in seen:
            continue
        comp = {start}
        queue = deque([start])
        seen.add(start)
        while queue:
            u = queue.popleft()
            for w in adj[u]:
                if w not in seen:
                    seen.add(w)
                    comp.add(w)
                    queue.append(w)
        comps.append(comp)
    return comps


def validate_network(net: Network) -> list[Violation]:
    """Check structural invariants; returns an empty list for a valid network."""
    out: list[Violation] = []

    def bad(entity, rule, msg):
        out.append(Violation(entity, rule, msg))

    seen = set()
    for b in net.buses:
        ent = f"bus {b.id}"
        if b.id in seen:
            bad(ent, "unique-id", "duplicate bus id")
        seen.add(b.id)
        if not b.conductors:
            bad(ent, "conductors", "bus has no conductors")
        if not (b.base_voltage > 0 and np.isfinite(b.base_voltage)):
            bad(ent, "base-voltage", f"base voltage must be positive, got {b.base_voltage}")
        if b.grounded and not b.has_neutral:
            bad(ent, "grounding", "grounded bus has no neutral conductor")

    ids = {b.id for b in net.buses}
    seen = set()
    for ln in net.lines:
        ent = f"line {ln.id}"
        if ln.id in seen:
            bad(ent, "unique-id", "duplicate line id")
        seen.add(ln.id)
        for end in (ln.from_bus, ln.to_bus):
            if end not in ids:
                bad(ent, "dangling-reference", f"references unknown bus {end!r}")
        if ln.from_bus == ln.to_bus:
            bad(ent, "self-loop", "from_bus equals to_bus")
        for end in (ln.from_bus, ln.to_bus):
            if end in ids:
                missing = set(ln.labels) - set(net.bus(end).conductors)
                if missing:
                    names = ",".join(c.name for c in sorted(missing))
                    bad(ent, "conductors", f"conductors {names} absent at bus {end}")

    seen = set()
    for d in net.loads:
        ent = f"load {d.id}"
        if d.id in seen:
            bad(ent, "unique-id", "duplicate load id")
        seen.add(d.id)
        if d.bus not in ids:
            bad(ent, "dangling-reference", f"references unknown bus {d.bus!r}")
            continue
        missing = set(d.phases) - set(net.bus(d.bus).conductors)
        if missing:
            bad(ent, "conductors", f"phases {','.join(c.name for c in sorted(missing))} absent at bus {d.bus}")

    if len(net.sources) != 1:
        bad("network", "single-source", f"expected exactly one source, found {len(net.sources)}")
    for s in net.sources:
        ent = f"source {s.id}"
        if s.bus not in ids:
            bad(ent, "dangling-reference", f"references unknown bus {s.bus!r}")
            continue
        bus = net.bus(s.bus)
        if set(s.v_ref) != set(bus.conductors):
            bad(ent, "conductors", "v_ref must give one phasor per conductor of its bus")
        if bus.has_neutral:
            if not bus.grounded:
                bad(ent, "grounding", f"source bus {bus.id} neutral is not grounded")
            if s.v_ref.get(Conductor.N, 0) != 0:
                bad(ent, "grounding", "source neutral phasor must be 0 V")

    if net.is_four_wire and not any(b.grounded for b in net.buses):
        bad("network", "grounding", "four-wire network has no grounded bus")

    if net.buses:
        comps = connected_components([b.id for b in net.buses], [(ln.from_bus, ln.to_bus) for ln in net.lines])
        if len(comps) > 1:
            sizes = sorted(len(c) for c in comps)
            bad("network", "connectivity", f"{len(comps)} isolated subgraphs (sizes {sizes})")
    return out


def phase_to_neutral(bus: Bus, v: np.ndarray) -> dict[Conductor, complex]:
    """Per-phase V_pn from a bus voltage vector aligned with ``bus.conductors``.

    Buses without a neutral conductor are already referenced to the neutral
    (transformed networks), so their phase entries are returned as-is.
    """
    v = np.asarray(v)
    vn = v[bus.conductors.index(Conductor.N)] if bus.has_neutral else 0.0
    return {c: complex(v[k] - vn) for k, c in enumerate(bus.conductors) if c != Conductor.N}


def voltage_magnitudes_pu(sol, net: Network) -> dict[str, dict[Conductor, float]]:
    """|V_pn| / base_voltage for every phase of every bus."""
    out = {}
    for bus in net.buses:
        if bus.id not in sol.voltages:
            raise ModelError(f"solution has no voltage for bus {bus.id!r}")
        vpn = phase_to_neutral(bus, sol.voltages[bus.id])
        out[bus.id] = {p: abs(v) / bus.base_voltage for p, v in vpn.items()}
    return out


@dataclass(frozen=True)
class PerUnitBase:
    """Per-phase apparent-power base; voltage bases come from the buses."""

    s_base: float = 1000.0

    def __post_init__(self):
        if not self.s_base > 0:
            raise ModelError("s_base must be positive")

    def z_base(self, bus: Bus) -> float:
        return bus.base_voltage**2 / self.s_base

    def i_base(self, bus: Bus) -> float:
        return self.s_base / bus.base_voltage

    def voltage_to_pu(self, v, bus: Bus):
        return np.asarray(v) / bus.base_voltage

    def voltage_from_pu(self, v_pu, bus: Bus):
        return np.asarray(v_pu) * bus.base_voltage

    def power_to_pu(self, s):
        return np.asarray(s) / self.s_base

    def power_from_pu(self, s_pu):
        return np.asarray(s_pu) * self.s_base

    def impedance_to_pu(self, z, bus: Bus):
        return np.asarray(z) / self.z_base(bus)

    def impedance_from_pu(self, z_pu, bus: Bus):
        return np.asarray(z_pu) * self.z_base(bus)

    def current_to_pu(self, i, bus: Bus):
        return np.asarray(i) / self.i_base(bus)

    def current_from_pu(self, i_pu, bus: Bus):
        return np.asarray(i_pu) * self.i_base(bus)


def balanced_phasors(magnitude: float, angle_deg: float = 0.0, neutral: bool = True) -> dict[Conductor, complex]:
    rot = np.deg2rad(angle_deg)
    v = {
        Conductor.A: magnitude * np.exp(1j * rot),
        Conductor.B: magnitude * np.exp(1j * (rot - 2 * np.pi / 3)),
        Conductor.C: magnitude * np.exp(1j * (rot + 2 * np.pi / 3)),
    }
    if neutral:
        v[Conductor.N] = 0j
    return {k: complex(x) for k, x in v.items()}


# -- JSON ---------------------------------------------------------------------


def complex_to_json(z) -> dict:
    z = complex(z)
    return {"re": z.real, "im": z.imag}


def complex_from_json(obj) -> complex:
    if isinstance(obj, (int, float)):
        return complex(obj)
    return complex(float(obj["re"]), float(obj.get("im", 0.0)))


def matrix_to_json(m: ConductorMatrix) -> dict:
    return {
        "labels": [c.name for c in m.labels],
        "values": [[complex_to_json(x) for x in row] for row in m.values],
    }


def matrix_from_json(obj, cls=ImpedanceMatrix):
    values = [[complex_from_json(x) for x in row] for row in obj["values"]]
    return cls(obj["labels"], values)


def network_to_dict(net: Network) -> dict:
    return {
        "name": net.name,
        "buses": [
            {
                "id": b.id,
                "conductors": [c.name for c in b.conductors],
                "base_voltage": b.base_voltage,
                "grounded": b.grounded,
            }
            for b in net.buses
        ],
        "lines": [
            {
                "id": ln.id,
                "from_bus": ln.from_bus,
                "to_bus": ln.to_bus,
                "series_z": matrix_to_json(ln.series_z),
                "shunt_y_from": matrix_to_json(ln.shunt_y_from),
                "shunt_y_to": matrix_to_json(ln.shunt_y_to),
            }
            for ln in net.lines
        ],
        "loads": [
            {
                "id": d.id,
                "bus": d.bus,
                "phases": [c.name for c in d.phases],
                "s_ref": [complex_to_json(s) for s in d.s_ref],
            }
            for d in net.loads
        ],
        "sources": [
            {
                "id": s.id,
                "bus": s.bus,
                "v_ref": {c.name: complex_to_json(v) for c, v in s.v_ref.items()},
            }
            for s in net.sources
        ],
    }


def network_from_dict(obj: dict) -> Network:
    try:
        buses = [
            Bus(b["id"], [Conductor.parse(c) for c in b["conductors"]], b["base_voltage"], bool(b.get("grounded", False)))
            for b in obj["buses"]
        ]
        lines = []
        for ln in obj.get("lines", []):
            z = matrix_from_json(ln["series_z"], ImpedanceMatrix)
            yf = matrix_from_json(ln["shunt_y_from"], AdmittanceMatrix) if ln.get("shunt_y_from") else None
            yt = matrix_from_json(ln["shunt_y_to"], AdmittanceMatrix) if ln.get("shunt_y_to") else None
            lines.append(LineSegment(ln["id"], ln["from_bus"], ln["to_bus"], z, yf, yt))
        loads = [
            Load(d["id"], d["bus"], [Conductor.parse(c) for c in d["phases"]], [complex_from_json(s) for s in d["s_ref"]])
            for d in obj.get("loads", [])
        ]
        sources = [
            Source(s["id"], s["bus"], {Conductor.parse(k): complex_from_json(v) for k, v in s["v_ref"].items()})
            for s in obj.get("sources", [])
        ]
    except KeyError as exc:
        raise ModelError(f"network JSON is missing field {exc}") from None
    return Network(buses, lines, loads, sources, obj.get("name", "network"))


def network_to_json(net: Network, indent=1) -> str:
    return json.dumps(network_to_dict(net), indent=indent)


def network_from_json(text: str) -> Network:
    return network_from_dict(json.loads(text))


def networks_close(a: Network, b: Network, rtol: float = 1e-12) -> bool:
    """Structural equality with a relative tolerance on complex values."""
    return not network_differences(a, b, rtol)


def network_differences(a: Network, b: Network, rtol: float = 1e-12) -> list[str]:
    diffs = []

    def close(x, y):
        x, y = np.asarray(x, dtype=complex), np.asarray(y, dtype=complex)
        if x.shape != y.shape:
            return False
        scale = max(np.max(np.abs(x), initial=0.0), np.max(np.abs(y), initial=0.0))
        return bool(np.all(np.abs(x - y) <= rtol * scale))

    ba, bb = {x.id: x for x in a.buses}, {x.id: x for x in b.buses}
    if set(ba) != set(bb):
        diffs.append(f"bus ids differ: {sorted(set(ba) ^ set(bb))}")
    for k in set(ba) & set(bb):
        x, y = ba[k], bb[k]
        if x.conductors != y.conductors or x.grounded != y.grounded or not close(x.base_voltage, y.base_voltage):
            diffs.append(f"bus {k} differs: {x} vs {y}")

    la, lb = {x.id: x for x in a.lines}, {x.id: x for x in b.lines}
    if set(la) != set(lb):
        diffs.append(f"line ids differ: {sorted(set(la) ^ set(lb))}")
    for k in set(la) & set(lb):
        x, y = la[k], lb[k]
        if (x.from_bus, x.to_bus, x.labels) != (y.from_bus, y.to_bus, y.labels):
            diffs.append(f"line {k} topology differs")
            continue
        for attr in ("series_z", "shunt_y_from", "shunt_y_to"):
            if not close(getattr(x, attr).values, getattr(y, attr).values):
                diffs.append(f"line {k} {attr} differs")

    da, db = {x.id: x for x in a.loads}, {x.id: x for x in b.loads}
    if set(da) != set(db):
        diffs.append(f"load ids differ: {sorted(set(da) ^ set(db))}")
    for k in set(da) & set(db):
        x, y = da[k], db[k]
        if x.bus != y.bus or x.phases != y.phases or not close(x.s_ref, y.s_ref):
            diffs.append(f"load {k} differs: {x} vs {y}")

    sa, sb = {x.id: x for x in a.sources}, {x.id: x for x in b.sources}
    if set(sa) != set(sb):
        diffs.append(f"source ids differ: {sorted(set(sa) ^ set(sb))}")
    for k in set(sa) & set(sb):
        x, y = sa[k], sb[k]
        if x.bus != y.bus or set(x.v_ref) != set(y.v_ref):
            diffs.append(f"source {k} differs")
        elif not close([x.v_ref[c] for c in x.v_ref], [y.v_ref[c] for c in x.v_ref]):
            diffs.append(f"source {k} v_ref differs")
    return diffs


def clone(net: Network) -> Network:
    return copy.deepcopy(net)
