"""Reader and writer for a subset of the OpenDSS circuit language.

Supported statements::

    New Circuit.<name>  bus1= basekv= pu= angle= phases=3
    New LineCode.<name> nphases= units= rmatrix= xmatrix= cmatrix= basefreq=
    New Line.<name>     bus1= bus2= phases= linecode= length= units=  (or explicit matrices)
    New Load.<name>     bus1= phases= conn=wye model=1 kV= kW= kvar= | pf= | kVA=
    New Reactor.<name>  phases=1 bus1=<bus>.4 bus2=<bus>.0 r=0 x=0   (neutral ground bond)
    Edit <Class>.<name> key=value ...
    Set  VoltageBases=[...] | DefaultBaseFrequency=...
    Clear, Solve, CalcVoltageBases                                   (accepted, no effect)

Comments start with ``!`` or ``//``; a line starting with ``~`` continues the
previous statement. Matrices may be full or lower-triangular (``|`` between
rows); triangular input is mirrored. Terminals ``.1 .2 .3 .4`` are conductors
A, B, C, N and ``.0`` is ground.

Loads on buses without a neutral are written against node 0. Such buses come
from neutral-eliminated networks, where the solved bus voltage is the
phase-to-neutral voltage, so "phase to node 0" there means phase to neutral.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, DssError, DssSyntaxError, UnsupportedElement
from .model import (
    AdmittanceMatrix,
    Bus,
    Conductor,
    ImpedanceMatrix,
    LineSegment,
    Load,
    Network,
    Source,
    balanced_phasors,
    validate_network,
)

SQRT3 = math.sqrt(3.0)
DEFAULT_FREQUENCY = 60.0
SUPPORTED_CLASSES = ("circuit", "vsource", "linecode", "line", "load", "reactor")
IGNORED_COMMANDS = ("clear", "solve", "calcvoltagebases", "calcv")

_UNIT_METERS = {
    "none": None,
    "mi": 1609.344,
    "kft": 304.8,
    "km": 1000.0,
    "m": 1.0,
    "ft": 0.3048,
    "in": 0.0254,
    "cm": 0.01,
    "mm": 0.001,
}

_TERMINAL = {1: Conductor.A, 2: Conductor.B, 3: Conductor.C, 4: Conductor.N}
_TERMINAL_OF = {c: k for k, c in _TERMINAL.items()}


@dataclass
class DssStatement:
    verb: str
    element_class: str = ""
    name: str = ""
    properties: list[tuple[str, str]] = field(default_factory=list)
    line: int = 0

    def get(self, key, default=None):
        key = key.lower()
        for k, v in reversed(self.properties):
            if k.lower() == key:
                return v
        return default

    def has(self, key) -> bool:
        return self.get(key) is not None

    def set(self, key, value):
        for n, (k, _) in enumerate(self.properties):
            if k.lower() == key.lower():
                self.properties[n] = (k, value)
                return
        self.properties.append((key, value))

    @property
    def qualified_name(self) -> str:
        return f"{self.element_class}.{self.name}"


# -- lexing -------------------------------------------------------------------

_CLOSE = {"[": "]", "(": ")", "{": "}", '"': '"', "'": "'"}


def _strip_comment(text: str) -> str:
    depth, quote = 0, None
    for k, ch in enumerate(text):
        if quote:
            if ch == quote:
                quote = None
            continue
        if ch in "\"'":
            quote = ch
        elif ch in "[({":
            depth += 1
        elif ch in "])}":
            depth -= 1
        elif depth == 0 and (ch == "!" or text.startswith("//", k)):
            return text[:k]
    return text


def _logical_lines(text: str):
    """Yield (line number, column offset list, text) with continuations merged."""
    current = None
    for lineno, raw in enumerate(text.replace("\r\n", "\n").replace("\r", "\n").split("\n"), start=1):
        body = _strip_comment(raw)
        stripped = body.lstrip()
        if not stripped.strip():
            continue
        col = len(body) - len(stripped) + 1
        if stripped.startswith("~") or re.match(r"(?i)more\s", stripped):
            if current is None:
                raise DssSyntaxError("continuation without a statement", lineno, col)
            cut = 1 if stripped.startswith("~") else 4
            current[2] += " " + stripped[cut:]
            continue
        if current is not None:
            yield tuple(current)
        current = [lineno, col, stripped.rstrip()]
    if current is not None:
        yield tuple(current)


def _tokens(text: str, lineno: int, col0: int):
    """Split a statement into (token, column) honouring bracketed values."""
    out = []
    k, n = 0, len(text)
    while k < n:
        if text[k].isspace() or text[k] == ",":
            k += 1
            continue
        start = k
        while k < n and not text[k].isspace():
            ch = text[k]
            if ch in _CLOSE:
                close = _CLOSE[ch]
                end = text.find(close, k + 1)
                if end < 0:
                    raise DssSyntaxError(f"unterminated {ch!r}", lineno, col0 + k)
                k = end + 1
            else:
                k += 1
            # allow "key = value"
            if k < n and text[k].isspace():
                rest = text[k:].lstrip()
                tok = text[start:k]
                if rest.startswith("=") or tok.endswith("="):
                    k = n - len(rest)
                    if rest.startswith("="):
                        k += 1
                        while k < n and text[k].isspace():
                            k += 1
        out.append((text[start:k], col0 + start))
    return out


def _unquote(v: str) -> str:
    if len(v) >= 2 and v[0] in _CLOSE and v[-1] == _CLOSE[v[0]]:
        return v[1:-1]
    return v


def parse_statements(text: str) -> list[DssStatement]:
    """Parse circuit text into statements, without interpreting them."""
    out = []
    for lineno, col, body in _logical_lines(text):
        toks = _tokens(body, lineno, col)
        verb, vcol = toks[0]
        vlow = verb.lower()
        if vlow in IGNORED_COMMANDS:
            out.append(DssStatement(vlow, line=lineno))
            continue
        if vlow not in ("new", "edit", "set"):
            raise DssSyntaxError(f"unknown command {verb!r}", lineno, vcol)
        stmt = DssStatement(vlow.capitalize(), line=lineno)
        rest = toks[1:]
        if vlow in ("new", "edit"):
            if not rest:
                raise DssSyntaxError(f"{verb} needs an element", lineno, vcol)
            target, tcol = rest[0]
            if target.lower().startswith("object="):
                target = target.split("=", 1)[1]
            if "." not in target:
                raise DssSyntaxError(f"expected <class>.<name>, got {target!r}", lineno, tcol)
            cls, name = target.split(".", 1)
            stmt.element_class, stmt.name = cls.lower(), name
            rest = rest[1:]
        for tok, tcol in rest:
            if "=" not in tok:
                raise DssSyntaxError(f"expected key=value, got {tok!r}", lineno, tcol)
            key, value = tok.split("=", 1)
            key, value = key.strip(), value.strip()
            if not key:
                raise DssSyntaxError("empty property name", lineno, tcol)
            stmt.properties.append((key, value))
        out.append(stmt)
    return out


def format_statement(stmt: DssStatement) -> str:
    if stmt.verb.lower() in IGNORED_COMMANDS:
        return stmt.verb
    head = stmt.verb
    if stmt.element_class:
        head += f" {stmt.element_class}.{stmt.name}"
    props = " ".join(f"{k}={v}" for k, v in stmt.properties)
    return f"{head} {props}".rstrip()


# -- value parsing -------------------------------------------------------------


def _float(stmt, key, default=None):
    raw = stmt.get(key)
    if raw is None:
        if default is None:
            raise DssError(f"{stmt.qualified_name}: missing {key}", stmt.line)
        return default
    try:
        return float(_unquote(raw))
    except ValueError:
        raise DssError(f"{stmt.qualified_name}: {key}={raw!r} is not a number", stmt.line) from None


def _numbers(raw: str, stmt, key) -> list[float]:
    body = _unquote(raw.strip())
    try:
        return [float(x) for x in re.split(r"[\s,]+", body.strip()) if x]
    except ValueError:
        raise DssError(f"{stmt.qualified_name}: malformed {key}", stmt.line) from None


def parse_matrix(raw: str, n: int, stmt=None, key="matrix") -> np.ndarray:
    """Full or lower-triangular matrix text into an n x n array."""
    body = _unquote(raw.strip())
    rows = [r for r in body.split("|")]
    where = stmt.line if stmt is not None else None
    label = f"{stmt.qualified_name}: " if stmt is not None else ""
    vals = [_numbers(r, stmt, key) if stmt else [float(x) for x in re.split(r"[\s,]+", r.strip()) if x] for r in rows]
    if len(rows) == 1:
        flat = vals[0]
        if len(flat) == n * n:
            return np.array(flat, dtype=float).reshape(n, n)
        if len(flat) == n * (n + 1) // 2:
            vals, k = [], 0
            for i in range(n):
                vals.append(flat[k : k + i + 1])
                k += i + 1
        else:
            raise DimensionMismatch(f"{label}{key} has {len(flat)} entries, expected {n * n} for {n} conductors", where)
    if len(vals) != n:
        raise DimensionMismatch(f"{label}{key} has {len(vals)} rows, expected {n}", where)
    out = np.zeros((n, n))
    if all(len(r) == n for r in vals):
        out[:] = vals
        return out
    if all(len(r) == i + 1 for i, r in enumerate(vals)):
        for i, r in enumerate(vals):
            out[i, : i + 1] = r
            out[: i + 1, i] = r
        return out
    raise DimensionMismatch(f"{label}{key} rows are neither full nor lower-triangular for {n} conductors", where)


def _split_bus(spec: str):
    """``bus.1.2.4`` -> ("bus", [1, 2, 4])."""
    parts = _unquote(spec).split(".")
    try:
        terms = [int(p) for p in parts[1:]]
    except ValueError:
        raise DssError(f"bad terminal list in {spec!r}") from None
    return parts[0], terms


def _units_factor(line_units, code_units):
    a, b = _UNIT_METERS.get(line_units), _UNIT_METERS.get(code_units)
    if a is None or b is None:
        return 1.0
    return a / b


# -- network building ----------------------------------------------------------


class _Builder:
    def __init__(self, statements):
        self.frequency = DEFAULT_FREQUENCY
        self.voltage_bases = []
        self.objects: dict[tuple[str, str], DssStatement] = {}
        self.order: list[tuple[str, str]] = []
        for st in statements:
            self._apply(st)

    def _apply(self, st):
        if st.verb.lower() in IGNORED_COMMANDS:
            return
        if st.verb == "Set":
            for k, v in st.properties:
                kl = k.lower()
                if kl == "voltagebases":
                    self.voltage_bases = _numbers(v, st, k)
                elif kl in ("defaultbasefrequency", "defaultbasefreq"):
                    self.frequency = float(_unquote(v))
            return
        cls = st.element_class
        if cls not in SUPPORTED_CLASSES:
            raise UnsupportedElement(f"{cls}.{st.name}", st.line)
        key = (cls, st.name.lower())
        if cls == "circuit":
            key = ("vsource", "source")
        if st.verb == "New":
            if key in self.objects:
                raise DssError(f"{st.qualified_name} defined twice", st.line)
            if cls == "vsource" and key != ("vsource", "source"):
                raise DssError(f"{st.qualified_name}: only the circuit source is supported", st.line)
            self.objects[key] = DssStatement(st.verb, cls, st.name, list(st.properties), st.line)
            self.order.append(key)
        else:
            if key not in self.objects:
                raise DssError(f"Edit of undefined element {st.qualified_name}", st.line)
            target = self.objects[key]
            for k, v in st.properties:
                target.set(k, v)

    def of(self, cls):
        return [self.objects[k] for k in self.order if k[0] == cls]


def _line_matrices(st: DssStatement, codes, frequency):
    code = None
    if st.has("linecode"):
        cname = _unquote(st.get("linecode")).lower()
        if cname not in codes:
            raise DssError(f"{st.qualified_name}: unknown linecode {cname!r}", st.line)
        code = codes[cname]
    src = code if code is not None and not st.has("rmatrix") else st
    n = int(_float(src, "nphases", None) if src.has("nphases") else _float(st, "phases", 3.0))
    if not src.has("rmatrix") or not src.has("xmatrix"):
        raise DssError(f"{src.qualified_name}: impedance must be given as rmatrix and xmatrix", src.line)
    r = parse_matrix(src.get("rmatrix"), n, src, "rmatrix")
    x = parse_matrix(src.get("xmatrix"), n, src, "xmatrix")
    c = parse_matrix(src.get("cmatrix"), n, src, "cmatrix") if src.has("cmatrix") else np.zeros((n, n))
    freq = _float(src, "basefreq", frequency)
    length = _float(st, "length", 1.0)
    if code is not None and src is code:
        line_units = _unquote(st.get("units", "none")).lower()
        code_units = _unquote(code.get("units", "none")).lower()
        length *= _units_factor(line_units, code_units)
    if st.has("phases") and int(_float(st, "phases")) != n:
        raise DimensionMismatch(f"{st.qualified_name}: phases={st.get('phases')} but matrices are {n}x{n}", st.line)
    z = (r + 1j * x) * length
    y = 1j * 2 * math.pi * freq * c * 1e-9 * length
    return n, z, y


def _terminals(st, key, n, allow_ground=False):
    bus, terms = _split_bus(st.get(key))
    if not terms:
        terms = list(range(1, n + 1))
    bad = [t for t in terms if t not in _TERMINAL and not (allow_ground and t == 0)]
    if bad:
        raise DssError(f"{st.qualified_name}: unsupported terminal(s) {bad} on {key}", st.line)
    return bus, terms


def _load_powers(st: DssStatement):
    if st.has("kw"):
        p = _float(st, "kw")
        if st.has("kvar"):
            q = _float(st, "kvar")
        elif st.has("pf"):
            pf = _float(st, "pf")
            q = math.copysign(abs(p) * math.tan(math.acos(min(abs(pf), 1.0))), pf)
        else:
            q = 0.0
    elif st.has("kva"):
        s = _float(st, "kva")
        pf = _float(st, "pf", 1.0)
        p = s * abs(pf)
        q = math.copysign(s * math.sqrt(max(0.0, 1 - pf * pf)), pf)
    else:
        raise DssError(f"{st.qualified_name}: needs kW (with kvar or pf) or kVA", st.line)
    return complex(p, q) * 1000.0


def parse_dss(text: str) -> Network:
    """Build a :class:`Network` from circuit text."""
    b = _Builder(parse_statements(text))
    circuits = b.of("vsource")
    if not circuits:
        raise DssError("missing New Circuit statement")
    circ = circuits[0]

    codes = {st.name.lower(): st for st in b.of("linecode")}
    for st in codes.values():
        if _unquote(st.get("kron", "n")).lower().startswith(("y", "t")):
            raise DssError(f"{st.qualified_name}: kron=yes is not supported", st.line)

    conductors: dict[str, set] = {}
    bus_order: list[str] = []

    def touch(bus, conds):
        if bus not in conductors:
            conductors[bus] = set()
            bus_order.append(bus)
        conductors[bus].update(conds)

    src_bus, src_terms = _terminals(circ, "bus1", 3) if circ.has("bus1") else ("sourcebus", [1, 2, 3])
    touch(src_bus, [])

    lines = []
    for st in b.of("line"):
        if _unquote(st.get("switch", "n")).lower().startswith(("y", "t")):
            raise UnsupportedElement(f"line.{st.name} (switch)", st.line)
        n, z, y = _line_matrices(st, codes, b.frequency)
        bus1, t1 = _terminals(st, "bus1", n)
        bus2, t2 = _terminals(st, "bus2", n)
        if len(t1) != n or t1 != t2:
            raise DimensionMismatch(f"{st.qualified_name}: terminals {t1} / {t2} do not match {n} conductors", st.line)
        labels = [_TERMINAL[t] for t in t1]
        touch(bus1, labels)
        touch(bus2, labels)
        yh = y / 2
        lines.append(
            LineSegment(
                st.name,
                bus1,
                bus2,
                ImpedanceMatrix(labels, z),
                AdmittanceMatrix(labels, yh) if np.any(yh) else None,
                AdmittanceMatrix(labels, yh) if np.any(yh) else None,
            )
        )

    grounded = set()
    for st in b.of("reactor"):
        bus1, t1 = _split_bus(st.get("bus1", ""))
        bus2, t2 = _split_bus(st.get("bus2", bus1 + ".0"))
        if t1 != [4] or t2 not in ([0], []) or bus2 != bus1:
            raise UnsupportedElement(f"reactor.{st.name} (only neutral-to-ground bonds are supported)", st.line)
        if _float(st, "r", 0.0) != 0 or _float(st, "x", 0.0) != 0 or st.has("z") or st.has("kvar"):
            raise DssError(f"{st.qualified_name}: grounding impedance must be zero (ideal grounding)", st.line)
        touch(bus1, [Conductor.N])
        grounded.add(bus1)

    raw_loads = []
    for st in b.of("load"):
        if _unquote(st.get("conn", "wye")).lower() not in ("wye", "y", "ln"):
            raise UnsupportedElement(f"load.{st.name} (delta connection)", st.line)
        if int(_float(st, "model", 1.0)) != 1:
            raise UnsupportedElement(f"load.{st.name} (model={st.get('model')}, only constant power)", st.line)
        nph = int(_float(st, "phases", 3.0))
        bus, terms = _terminals(st, "bus1", nph, allow_ground=True)
        phase_terms, ret = terms[:nph], terms[nph:]
        if len(phase_terms) != nph or any(t not in (1, 2, 3) for t in phase_terms) or len(ret) > 1:
            raise DssError(f"{st.qualified_name}: terminals {terms} do not match phases={nph}", st.line)
        phases = [_TERMINAL[t] for t in phase_terms]
        neutral = ret[0] if ret else 0
        if neutral not in (0, 4):
            raise DssError(f"{st.qualified_name}: load return must be node 4 or 0", st.line)
        touch(bus, phases + ([Conductor.N] if neutral == 4 else []))
        raw_loads.append((st, bus, phases, neutral, _load_powers(st) / nph))

    kv = _float(circ, "basekv", 115.0)
    base = kv * 1000.0 / SQRT3
    buses = [Bus(bid, sorted(conductors[bid]), base, bid in grounded) for bid in bus_order]
    bus_has_n = {bb.id: bb.has_neutral for bb in buses}

    loads = []
    for st, bus, phases, neutral, s in raw_loads:
        if neutral == 0 and bus_has_n[bus]:
            raise DssError(
                f"{st.qualified_name}: phase-to-ground load on a bus with a neutral conductor is not supported", st.line
            )
        loads.append(Load(st.name, bus, phases, [s] * len(phases)))

    if int(_float(circ, "phases", 3.0)) != 3:
        raise DssError(f"{circ.qualified_name}: only three-phase sources are supported", circ.line)
    pu = _float(circ, "pu", 1.0)
    angle = _float(circ, "angle", 0.0)
    src_b = next(bb for bb in buses if bb.id == src_bus)
    v = balanced_phasors(pu * base, angle, neutral=src_b.has_neutral)
    v = {c: val for c, val in v.items() if c in src_b.conductors}
    source = Source("source", src_bus, v)

    net = Network(buses, lines, loads, [source], circ.name)
    problems = validate_network(net)
    if problems:
        raise DssError("parsed network is invalid: " + "; ".join(map(str, problems)))
    return net


# -- writing -------------------------------------------------------------------


def _num(x: float) -> str:
    x = float(x)
    if x == 0:
        return "0"
    return repr(x)


def _matrix_text(m: np.ndarray) -> str:
    return "[" + " | ".join(" ".join(_num(v) for v in row) for row in m) + "]"


def _bus_ref(bus: str, labels) -> str:
    return bus + "".join(f".{_TERMINAL_OF[c]}" for c in labels)


def write_dss(net: Network, frequency: float = 50.0) -> str:
    """Serialise a network; full matrices, shortest round-trip float repr."""
    problems = validate_network(net)
    if problems:
        raise DssError("cannot write invalid network: " + "; ".join(map(str, problems)))
    bases = {b.base_voltage for b in net.buses}
    if len(bases) != 1:
        raise DssError("all buses must share one base voltage")
    base = bases.pop()
    src = net.source
    if set(src.v_ref) - {Conductor.N} != {Conductor.A, Conductor.B, Conductor.C}:
        raise DssError("source must be three-phase")
    va = src.v_ref[Conductor.A]
    pu, angle = abs(va) / base, math.degrees(math.atan2(va.imag, va.real))
    expect = balanced_phasors(abs(va), angle)
    if any(abs(src.v_ref[c] - expect[c]) > 1e-12 * abs(va) for c in src.v_ref):
        raise DssError("only balanced source phasors can be written")

    out = [f"! {net.name}", "Clear", f"Set DefaultBaseFrequency={_num(frequency)}"]
    src_bus = net.bus(src.bus)
    out.append(
        f"New Circuit.{net.name} bus1={_bus_ref(src.bus, src_bus.phases)} phases=3 "
        f"basekv={_num(base * SQRT3 / 1000.0)} pu={_num(pu)} angle={_num(angle)}"
    )
    for b in net.buses:
        if b.grounded:
            out.append(f"New Reactor.gnd_{b.id} phases=1 bus1={b.id}.4 bus2={b.id}.0 r=0 x=0")

    omega = 2 * math.pi * frequency
    for ln in net.lines:
        z = ln.series_z.values
        if not np.array_equal(ln.shunt_y_from.values, ln.shunt_y_to.values):
            raise DssError(f"line {ln.id}: unequal end shunts cannot be written")
        y = ln.shunt_y_from.values
        if np.any(y.real):
            raise DssError(f"line {ln.id}: shunt conductance cannot be written")
        n = ln.series_z.size
        code = (
            f"New LineCode.lc_{ln.id} nphases={n} units=none "
            f"rmatrix={_matrix_text(z.real)} xmatrix={_matrix_text(z.imag)}"
        )
        if np.any(y):
            code += f" cmatrix={_matrix_text(2 * y.imag / omega * 1e9)}"
        out.append(code)
        out.append(
            f"New Line.{ln.id} bus1={_bus_ref(ln.from_bus, ln.labels)} bus2={_bus_ref(ln.to_bus, ln.labels)} "
            f"phases={n} linecode=lc_{ln.id} length=1 units=none"
        )

    for d in net.loads:
        bus = net.bus(d.bus)
        ret = ".4" if bus.has_neutral else ".0"
        if len(set(d.s_ref)) == 1:
            groups = [(d.id, d.phases, d.s_ref[0])]
        else:
            groups = [(f"{d.id}_{p.name.lower()}", (p,), s) for p, s in zip(d.phases, d.s_ref)]
        for name, phases, s in groups:
            nph = len(phases)
            kv = base / 1000.0 if nph == 1 else base * SQRT3 / 1000.0
            total = s * nph / 1000.0
            out.append(
                f"New Load.{name} bus1={_bus_ref(d.bus, phases)}{ret} phases={nph} conn=wye model=1 "
                f"kV={_num(kv)} kW={_num(total.real)} kvar={_num(total.imag)}"
            )
    out.append(f"Set VoltageBases=[{_num(base * SQRT3 / 1000.0)}]")
    out.append("CalcVoltageBases")
    return "\n".join(out) + "\n"

