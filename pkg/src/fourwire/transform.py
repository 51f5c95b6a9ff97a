"""Neutral-eliminating impedance transformations.

Four mappings from a conductor matrix with an explicit neutral to a
phase-only matrix:

=========  ==============================  =====================================
kind       mapping                          assumption
=========  ==============================  =====================================
``o``      identity                         none
``k``      Kron reduction                   neutral voltage is zero everywhere
``t``      phase-to-neutral, T z T^T        no current enters the ground
``u``      modified phase-to-neutral        as ``t``, and no mutual impedance
=========  ==============================  =====================================

The mappings work for any phase subset (A+N, A+B+N, A+B+C+N, ...), the neutral
always being the last conductor.
"""
from __future__ import annotations

import enum
import warnings

import numpy as np

from .errors import SingularNeutralError, TransformError
from .model import (
    AdmittanceMatrix,
    Bus,
    Conductor,
    ImpedanceMatrix,
    LineSegment,
    Network,
    Source,
)

#: |z_nn| below this (ohm) makes Kron reduction undefined.
KRON_MIN_ZNN = 1e-12


class TransformKind(enum.Enum):
    IDENTITY = "o"
    KRON = "k"
    PHASE_TO_NEUTRAL = "t"
    MODIFIED_PN = "u"

    @classmethod
    def parse(cls, value) -> "TransformKind":
        if isinstance(value, TransformKind):
            return value
        key = str(value).strip().lower()
        for kind in cls:
            if key in (kind.value, kind.name.lower()):
                return kind
        raise ValueError(f"unknown transform kind {value!r}")

    @property
    def eliminates_neutral(self) -> bool:
        return self is not TransformKind.IDENTITY


class DroppedShuntWarning(UserWarning):
    """A line shunt was discarded by the T or U transformation."""


def build_t_matrix(n_phases: int) -> np.ndarray:
    """The ``[I | -1]`` map from phase-to-ground to phase-to-neutral voltages.

    >>> build_t_matrix(1)
    array([[ 1., -1.]])
    """
    if not isinstance(n_phases, (int, np.integer)) or not 1 <= n_phases <= 3:
        raise ValueError(f"n_phases must be 1, 2 or 3, got {n_phases!r}")
    return np.hstack([np.eye(n_phases), -np.ones((n_phases, 1))])


def _split_neutral(z: ImpedanceMatrix | AdmittanceMatrix):
    if z.labels[-1] != Conductor.N or z.size < 2:
        names = "".join(c.name for c in z.labels)
        raise TransformError(f"matrix over {names} has no neutral conductor to eliminate")
    return z.labels[:-1], z.values


def transform_identity(z):
    return z


def transform_pn(z: ImpedanceMatrix) -> ImpedanceMatrix:
    """Phase-to-neutral transform ``T z T^T``.

    Entry (p, q) is ``z_pq - z_nq - z_pn + z_nn``.
    """
    phases, m = _split_neutral(z)
    zpp = m[:-1, :-1]
    zpn = m[:-1, -1:]
    znp = m[-1:, :-1]
    # grouping the cross terms keeps symmetric input bitwise symmetric
    out = zpp - (znp + zpn) + m[-1, -1]
    return ImpedanceMatrix(phases, out)


def transform_modified_pn(z: ImpedanceMatrix) -> ImpedanceMatrix:
    """Phase-to-neutral transform after discarding all mutual impedances."""
    phases, m = _split_neutral(z)
    znn = m[-1, -1]
    out = np.full((len(phases), len(phases)), znn, dtype=complex)
    out[np.diag_indices(len(phases))] += np.diag(m)[:-1]
    return ImpedanceMatrix(phases, out)


def transform_kron(z: ImpedanceMatrix) -> ImpedanceMatrix:
    phases, m = _split_neutral(z)
    znn = m[-1, -1]
    if abs(znn) <= KRON_MIN_ZNN:
        raise SingularNeutralError(f"neutral self-impedance {znn} too small for Kron reduction")
    out = m[:-1, :-1] - np.outer(m[:-1, -1], m[-1, :-1]) / znn
    return ImpedanceMatrix(phases, out)


def kron_shunt(y: AdmittanceMatrix) -> AdmittanceMatrix:
    """Phase block of a shunt matrix (neutral assumed at 0 V)."""
    phases, m = _split_neutral(y)
    return AdmittanceMatrix(phases, m[:-1, :-1])


_SERIES = {
    TransformKind.IDENTITY: transform_identity,
    TransformKind.KRON: transform_kron,
    TransformKind.PHASE_TO_NEUTRAL: transform_pn,
    TransformKind.MODIFIED_PN: transform_modified_pn,
}


def transform_impedance(z: ImpedanceMatrix, kind) -> ImpedanceMatrix:
    return _SERIES[TransformKind.parse(kind)](z)


def _strip_neutral(labels):
    return tuple(c for c in labels if c != Conductor.N)


def transform_network(net: Network, kind) -> Network:
    """Apply one mapping to every line and drop the neutral from every bus.

    Under ``t`` and ``u`` line shunts are discarded; a
    :class:`DroppedShuntWarning` is issued for every line that had one.
    Element ids are kept so results can be matched line-for-line with the
    original; only the network name gets a ``_<kind>`` suffix.
    """
    kind = TransformKind.parse(kind)
    if kind is TransformKind.IDENTITY:
        return net.replace()

    series = _SERIES[kind]
    lines = []
    for ln in net.lines:
        if ln.labels[-1] != Conductor.N:
            raise TransformError(f"line {ln.id} has no neutral conductor")
        z = series(ln.series_z)
        if kind is TransformKind.KRON:
            yf, yt = kron_shunt(ln.shunt_y_from), kron_shunt(ln.shunt_y_to)
        else:
            if ln.has_shunt:
                warnings.warn(
                    f"line {ln.id}: shunt admittance dropped by {kind.name.lower()} transform",
                    DroppedShuntWarning,
                    stacklevel=2,
                )
            yf = yt = None
        lines.append(LineSegment(ln.id, ln.from_bus, ln.to_bus, z, yf, yt))

    buses = [Bus(b.id, _strip_neutral(b.conductors), b.base_voltage, False) for b in net.buses]
    sources = [
        Source(s.id, s.bus, {c: v for c, v in s.v_ref.items() if c != Conductor.N}) for s in net.sources
    ]
    return Network(buses, lines, net.loads, sources, f"{net.name}_{kind.value}")
