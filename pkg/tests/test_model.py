import copy
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fourwire.errors import ModelError
from fourwire.model import (
    FOUR_WIRE,
    PHASES,
    AdmittanceMatrix,
    Bus,
    Conductor,
    ImpedanceMatrix,
    LineSegment,
    Load,
    Network,
    PerUnitBase,
    Source,
    balanced_phasors,
    clone,
    network_from_json,
    network_to_json,
    networks_close,
    phase_to_neutral,
    validate_network,
    voltage_magnitudes_pu,
)
from fourwire.solver import solve_powerflow

from conftest import A, B, C, N, cable, radial_chain


def rules(net):
    return [v.rule for v in validate_network(net)]


def test_conductor_order_and_parse():
    assert sorted([N, C, A, B]) == [A, B, C, N]
    assert Conductor.parse("n") is N and Conductor.parse(C) is C
    for bad in ("x", 2):
        with pytest.raises(ValueError):
            Conductor.parse(bad)


def test_matrix_labels_are_canonicalised():
    m = ImpedanceMatrix([N, A], [[1, 2], [3, 4]])
    assert m.labels == (A, N)
    assert m.entry(A, A) == 4 and m.entry(A, N) == 3 and m.entry(N, A) == 2


@pytest.mark.parametrize(
    "labels, values",
    [
        ([], np.zeros((0, 0))),
        ([A, B], np.zeros((3, 3))),
        ([A, A], np.zeros((2, 2))),
        ([A], [[np.nan]]),
        ([A], [[np.inf]]),
        ([A, B, C, N, A], np.zeros((5, 5))),
    ],
)
def test_matrix_rejects_bad_input(labels, values):
    with pytest.raises(ModelError):
        ImpedanceMatrix(labels, values)


def test_matrix_accepts_asymmetric_and_is_immutable():
    m = ImpedanceMatrix(FOUR_WIRE, np.arange(16).reshape(4, 4))
    assert m.entry(A, B) != m.entry(B, A)
    with pytest.raises(ValueError):
        m.values[0, 0] = 5
    with pytest.raises(AttributeError):
        m.labels = (A,)
    assert copy.deepcopy(m) is m


def test_from_entries_and_zeros():
    m = ImpedanceMatrix.from_entries({(A, A): 1, (N, N): 2, (A, N): 0.5})
    assert m.labels == (A, N)
    assert m.values.tolist() == [[1, 0.5], [0, 2]]
    assert AdmittanceMatrix.zeros(PHASES).is_zero


def test_bus_invariants_reported_by_validation():
    net = radial_chain(2)
    zero_base = net.replace(buses=[net.buses[0], Bus("B2", FOUR_WIRE, 0.0)])
    assert rules(zero_base) == ["base-voltage"]
    no_n = net.replace(buses=[net.buses[0], Bus("B2", PHASES, 230.0, grounded=True)])
    assert "grounding" in rules(no_n)
    assert Bus("x", [N, A], 230.0).conductors == (A, N)


def test_line_defaults_and_label_checks():
    ln = LineSegment("l", "a", "b", cable())
    assert ln.shunt_y_from.is_zero and ln.shunt_y_to.labels == FOUR_WIRE
    assert not ln.has_shunt
    with pytest.raises(ModelError):
        LineSegment("l", "a", "b", cable(), AdmittanceMatrix.zeros(PHASES))


def test_load_invariants():
    with pytest.raises(ModelError):
        Load("d", "b", [N], [1])
    with pytest.raises(ModelError):
        Load("d", "b", [A, B], [1])
    d = Load("d", "b", [C, A], [3, 1])
    assert d.phases == (A, C) and d.power(C) == 3


def test_minimal_network_is_valid(two_bus):
    assert validate_network(two_bus) == []


def test_dangling_reference():
    net = radial_chain(2)
    ln = net.lines[0]
    bad = net.replace(lines=[LineSegment(ln.id, "B1", "nowhere", ln.series_z)])
    assert rules(bad).count("dangling-reference") == 1


def test_two_islands_give_one_connectivity_violation():
    net = radial_chain(2)
    extra_buses = [Bus("X1", FOUR_WIRE, 230.0, True), Bus("X2", FOUR_WIRE, 230.0)]
    extra_line = LineSegment("LX", "X1", "X2", cable())
    island = net.replace(buses=list(net.buses) + extra_buses, lines=list(net.lines) + [extra_line])
    assert rules(island) == ["connectivity"]


def test_other_violations():
    net = radial_chain(3)
    assert "grounding" in rules(net.replace(buses=[Bus(b.id, b.conductors, b.base_voltage) for b in net.buses]))
    assert "single-source" in rules(net.replace(sources=[]))
    two = list(net.sources) + [Source("s2", "B2", balanced_phasors(230.0))]
    assert "single-source" in rules(net.replace(sources=two))
    hot = Source("source", "B1", {**balanced_phasors(230.0), N: 1.0})
    assert "grounding" in rules(net.replace(sources=[hot]))
    ln = net.lines[0]
    assert "self-loop" in rules(net.replace(lines=[LineSegment("Lx", "B2", "B2", ln.series_z), *net.lines]))
    assert "unique-id" in rules(net.replace(lines=[*net.lines, net.lines[0]]))


def test_three_wire_network_needs_no_grounding():
    net = radial_chain(2)
    buses = [Bus(b.id, PHASES, b.base_voltage) for b in net.buses]
    lines = [LineSegment(ln.id, ln.from_bus, ln.to_bus, ImpedanceMatrix(PHASES, np.eye(3))) for ln in net.lines]
    src = Source("source", "B1", balanced_phasors(230.0, neutral=False))
    assert validate_network(Network(buses, lines, [], [src])) == []


def test_phase_to_neutral():
    bus4 = Bus("b", FOUR_WIRE, 230.0)
    v = phase_to_neutral(bus4, np.array([230, -115, -115, 5], dtype=complex))
    assert v == {A: 225, B: -120, C: -120}
    bus3 = Bus("b", PHASES, 230.0)
    assert phase_to_neutral(bus3, np.array([1, 2, 3]))[B] == 2


class _FakeSolution:
    def __init__(self, voltages):
        self.voltages = voltages


def test_voltage_magnitudes_pu():
    net = radial_chain(2)
    v1 = np.array([230, 0, 0, 0], dtype=complex)
    v2 = np.array([207 * np.exp(-1j * np.pi / 180), 0, 0, 0])
    pu = voltage_magnitudes_pu(_FakeSolution({"B1": v1, "B2": v2}), net)
    assert pu["B1"][A] == 1.0
    assert pu["B2"][A] == pytest.approx(0.9, abs=1e-15)
    with pytest.raises(ModelError):
        voltage_magnitudes_pu(_FakeSolution({"B1": v1}), net)


def test_voltage_magnitudes_against_loop(two_bus):
    sol = solve_powerflow(two_bus)
    pu = voltage_magnitudes_pu(sol, two_bus)
    for bus in two_bus.buses:
        v = sol.voltages[bus.id]
        for k, p in enumerate(PHASES):
            assert pu[bus.id][p] == abs(v[k] - v[3]) / 230.0


@settings(max_examples=50, deadline=None)
@given(st.floats(1.0, 1e5), st.floats(100.0, 1e5), st.complex_numbers(max_magnitude=1e3, allow_nan=False))
def test_per_unit_round_trip(s_base, v_base, z):
    pub = PerUnitBase(s_base)
    bus = Bus("b", FOUR_WIRE, v_base)
    assert pub.impedance_from_pu(pub.impedance_to_pu(z, bus), bus) == pytest.approx(z, rel=1e-12, abs=1e-300)
    assert pub.z_base(bus) * pub.i_base(bus) == pytest.approx(v_base, rel=1e-12)


def test_json_round_trip_is_exact(two_bus):
    text = network_to_json(two_bus)
    back = network_from_json(text)
    assert back == two_bus
    assert network_to_json(back) == text
    raw = json.loads(text)
    assert raw["lines"][0]["series_z"]["labels"] == ["A", "B", "C", "N"]


def test_json_missing_field():
    with pytest.raises(ModelError):
        network_from_json('{"lines": []}')


def test_networks_close_tolerance(two_bus):
    z = two_bus.lines[0].series_z.values
    nudged = two_bus.replace(lines=[LineSegment("L1", "B1", "B2", ImpedanceMatrix(FOUR_WIRE, z * (1 + 1e-14)))])
    assert networks_close(two_bus, nudged)
    moved = two_bus.replace(lines=[LineSegment("L1", "B1", "B2", ImpedanceMatrix(FOUR_WIRE, z * (1 + 1e-9)))])
    assert not networks_close(two_bus, moved)
    assert clone(two_bus) == two_bus
