"""Random feeder generation and original-vs-transformed comparisons."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import GenerationError
from .model import (
    FOUR_WIRE,
    AdmittanceMatrix,
    Bus,
    ImpedanceMatrix,
    LineSegment,
    Load,
    Network,
    PHASES,
    Source,
    balanced_phasors,
    phase_to_neutral,
)
from .recover import phase_currents_from_solution, recover_neutral, recovery_error
from .solver import Solution, SolveOptions, solve_powerflow
from .transform import DroppedShuntWarning, TransformKind, transform_network

log = logging.getLogger(__name__)

HISTOGRAM_BINS = 50
RETRY_LOAD_FACTOR = 0.7
MAX_RETRIES = 5

CSV_COLUMNS = (
    "network",
    "kind",
    "max_dv_pu",
    "mean_dv_pu",
    "recovery_err_v",
    "iters_ref",
    "iters_cand",
    "time_ref_ms",
    "time_cand_ms",
)


@dataclass(frozen=True)
class GenSpec:
    """Recipe for a random four-wire feeder.

    ``n_buses`` is an inclusive (min, max) range. ``topology`` is ``radial`` or
    ``meshed`` (plus ``extra_edges`` chords); ``grounding`` is ``source_only``
    or ``multi`` (plus ``grounded_buses`` extra bonds). ``linecode`` selects
    per-line random impedances (``independent``) or one per-length matrix
    scaled by random lengths (``shared``).
    """

    seed: int = 0
    n_buses: tuple[int, int] = (5, 50)
    topology: str = "radial"
    extra_edges: int = 0
    grounding: str = "source_only"
    grounded_buses: int = 0
    unbalance: float = 0.5
    mutual_scale: float = 0.2
    shunt_scale: float = 0.0
    linecode: str = "independent"
    base_voltage: float = 230.0
    load_kw: float = 0.15

    def __post_init__(self):
        nb = self.n_buses
        if isinstance(nb, (int, np.integer)):
            nb = (int(nb), int(nb))
        nb = tuple(int(x) for x in nb)
        object.__setattr__(self, "n_buses", nb)
        if len(nb) != 2 or nb[0] < 2 or nb[1] < nb[0]:
            raise ValueError(f"bad bus range {nb}")
        if self.topology not in ("radial", "meshed"):
            raise ValueError(f"unknown topology {self.topology!r}")
        if self.grounding not in ("source_only", "multi"):
            raise ValueError(f"unknown grounding {self.grounding!r}")
        if self.linecode not in ("independent", "shared"):
            raise ValueError(f"unknown linecode mode {self.linecode!r}")
        if not 0.0 <= self.unbalance <= 1.0:
            raise ValueError("unbalance must lie in [0, 1]")
        if self.mutual_scale < 0 or self.shunt_scale < 0:
            raise ValueError("mutual_scale and shunt_scale must be non-negative")

    @property
    def single_grounded(self) -> bool:
        return self.grounding == "source_only"

    @classmethod
    def from_dict(cls, obj: dict) -> "GenSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown GenSpec fields {sorted(unknown)}")
        return cls(**obj)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["n_buses"] = list(self.n_buses)
        return d


def _random_impedance(rng, mutual_scale, scale=1.0) -> np.ndarray:
    r = np.exp(rng.uniform(np.log(0.05), np.log(1.0), 4)) * scale
    x = r * rng.uniform(0.3, 1.0, 4)
    # real part strictly diagonally dominant -> positive definite -> invertible
    c = min(mutual_scale, 0.9)
    rm = c * rng.uniform(0.0, 1.0, (4, 4)) * np.minimum.outer(r, r) / 3
    xm = mutual_scale * rng.uniform(0.5, 1.0, (4, 4)) * np.sqrt(np.outer(x, x))
    rm, xm = np.triu(rm, 1), np.triu(xm, 1)
    z = np.diag(r + 1j * x) + (rm + rm.T) + 1j * (xm + xm.T)
    return z


def _random_shunt(rng, shunt_scale) -> np.ndarray:
    b = np.diag(shunt_scale * rng.uniform(0.8, 1.2, 4))
    off = np.triu(-0.2 * shunt_scale * rng.uniform(0.0, 1.0, (4, 4)), 1)
    return 1j * (b + off + off.T) / 2


def _tree_edges(rng, n):
    return [(int(rng.integers(0, k)), k) for k in range(1, n)]


def _extra_edges(rng, n, existing, count):
    have = {frozenset(e) for e in existing}
    candidates = [(i, j) for i in range(n) for j in range(i + 1, n) if frozenset((i, j)) not in have]
    if not candidates:
        return []
    pick = rng.permutation(len(candidates))[:count]
    return [candidates[k] for k in sorted(pick)]


def _build(spec: GenSpec, load_factor: float) -> Network:
    rng = np.random.default_rng(spec.seed)
    lo, hi = spec.n_buses
    n = int(rng.integers(lo, hi + 1))
    edges = _tree_edges(rng, n)
    if spec.topology == "meshed":
        edges += _extra_edges(rng, n, edges, spec.extra_edges)

    grounded = {0}
    if spec.grounding == "multi":
        k = min(spec.grounded_buses, n - 1)
        grounded |= {int(b) + 1 for b in rng.permutation(n - 1)[:k]}

    bid = [f"B{k + 1}" for k in range(n)]
    buses = [Bus(bid[k], FOUR_WIRE, spec.base_voltage, k in grounded) for k in range(n)]

    z_shared = _random_impedance(rng, spec.mutual_scale) if spec.linecode == "shared" else None
    lines = []
    for e, (i, j) in enumerate(edges):
        if z_shared is not None:
            z = z_shared * rng.uniform(0.2, 1.0)
        else:
            z = _random_impedance(rng, spec.mutual_scale)
        yf = yt = None
        if spec.shunt_scale > 0:
            y = _random_shunt(rng, spec.shunt_scale)
            yf = yt = AdmittanceMatrix(FOUR_WIRE, y)
        lines.append(LineSegment(f"L{e + 1}", bid[i], bid[j], ImpedanceMatrix(FOUR_WIRE, z), yf, yt))

    loads = []
    p_nom = spec.load_kw * 1000.0 * load_factor
    for k in range(1, n):
        spread = spec.unbalance * rng.uniform(-1.0, 1.0, 3)
        pf = rng.uniform(0.9, 1.0, 3)
        for p, ph in enumerate(PHASES):
            pw = p_nom * (1.0 + spread[p])
            if pw <= 0:
                continue
            q = pw * math.tan(math.acos(pf[p]))
            loads.append(Load(f"D{k + 1}{ph.name.lower()}", bid[k], (ph,), (complex(pw, q),)))

    source = Source("source", bid[0], balanced_phasors(spec.base_voltage))
    return Network(buses, lines, loads, [source], f"gen-s{spec.seed}")


def generate(spec: GenSpec, opts: SolveOptions | None = None) -> tuple[Network, int, Solution]:
    """Generate a network that converges; returns (network, retries, 4-wire solution)."""
    opts = opts or SolveOptions()
    factor = 1.0
    for attempt in range(MAX_RETRIES + 1):
        net = _build(spec, factor)
        sol = solve_powerflow(net, opts)
        if sol.converged:
            return net, attempt, sol
        log.info("seed %d: divergence at load factor %.3f, retrying", spec.seed, factor)
        factor *= RETRY_LOAD_FACTOR
    raise GenerationError(f"seed {spec.seed}: no convergent loading after {MAX_RETRIES} retries")


def gen_random_network(spec: GenSpec) -> Network:
    return generate(spec)[0]


# -- comparison ----------------------------------------------------------------


@dataclass
class ComparisonReport:
    network: str
    kind: str
    converged: bool
    differences: dict[str, dict[str, float]] = field(default_factory=dict)
    max_dv_pu: float | None = None
    mean_dv_pu: float | None = None
    bin_edges: list[float] = field(default_factory=list)
    counts: list[int] = field(default_factory=list)
    recovery_err_v: float | None = None
    recovery_err_pu: float | None = None
    consistency_residual_v: float | None = None
    iters_ref: int = 0
    iters_cand: int = 0
    time_ref_ms: float = 0.0
    time_cand_ms: float = 0.0
    retries: int = 0

    def csv_row(self) -> list:
        return [getattr(self, c) for c in CSV_COLUMNS]


def histogram(values, bins=HISTOGRAM_BINS):
    """Fixed-width histogram over [0, max]."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return [], []
    top = float(values.max())
    if top <= 0:
        return [0.0, 0.0], [int(values.size)]
    counts, edges = np.histogram(values, bins=bins, range=(0.0, top))
    return edges.tolist(), counts.tolist()


def compare_solutions(net_ref: Network, sol_ref: Solution, net_cand: Network, sol_cand: Solution):
    """Per-bus, per-phase | |V_pn ref| - |V_pn cand| | in pu."""
    cand_buses = {b.id: b for b in net_cand.buses}
    out = {}
    for b in net_ref.buses:
        if b.id not in cand_buses:
            continue
        ref = phase_to_neutral(b, sol_ref.voltages[b.id])
        cand = phase_to_neutral(cand_buses[b.id], sol_cand.voltages[b.id])
        out[b.id] = {p.name: abs(abs(ref[p]) - abs(cand[p])) / b.base_voltage for p in ref if p in cand}
    return out


def compare_transform(net4: Network, kind, opts: SolveOptions | None = None, sol_ref: Solution | None = None):
    """Solve the original and the transformed network and compare |V_pn|."""
    opts = opts or SolveOptions()
    kind = TransformKind.parse(kind)
    if sol_ref is None:
        sol_ref = solve_powerflow(net4, opts)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DroppedShuntWarning)
        net_c = transform_network(net4, kind)
    sol_c = solve_powerflow(net_c, opts)
    rep = ComparisonReport(
        network=net4.name,
        kind=kind.value,
        converged=sol_ref.converged and sol_c.converged,
        iters_ref=sol_ref.iterations,
        iters_cand=sol_c.iterations,
        time_ref_ms=sol_ref.elapsed_s * 1e3,
        time_cand_ms=sol_c.elapsed_s * 1e3,
    )
    if not rep.converged:
        return rep
    rep.differences = compare_solutions(net4, sol_ref, net_c, sol_c)
    flat = [v for row in rep.differences.values() for v in row.values()]
    rep.max_dv_pu = float(max(flat, default=0.0))
    rep.mean_dv_pu = float(np.mean(flat)) if flat else 0.0
    rep.bin_edges, rep.counts = histogram(flat)
    if kind is TransformKind.PHASE_TO_NEUTRAL:
        rec = recover_neutral(net4, phase_currents_from_solution(sol_c))
        rep.recovery_err_v = recovery_error(rec, sol_ref)
        base = min(b.base_voltage for b in net4.buses)
        rep.recovery_err_pu = rep.recovery_err_v / base
        rep.consistency_residual_v = rec.consistency_residual
    return rep


# -- suites --------------------------------------------------------------------


@dataclass
class SuiteReport:
    rows: list[ComparisonReport]
    histograms: dict[str, dict[str, list]] = field(default_factory=dict)
    failures: list[dict] = field(default_factory=list)


def _run_one(args):
    index, spec, kinds, opts = args
    try:
        net, retries, sol = generate(spec, opts)
    except GenerationError as exc:
        return index, [], {"spec": index, "seed": spec.seed, "error": str(exc)}
    rows = []
    for kind in kinds:
        rep = compare_transform(net, kind, opts, sol_ref=sol)
        rep.retries = retries
        rows.append(rep)
    return index, rows, None


def run_suite(specs, kinds, opts: SolveOptions | None = None, jobs: int = 1) -> SuiteReport:
    """Compare every spec against every kind; rows ordered by (spec, kind)."""
    opts = opts or SolveOptions()
    kinds = [TransformKind.parse(k) for k in kinds]
    work = [(i, s, kinds, opts) for i, s in enumerate(specs)]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one, work))
    else:
        results = [_run_one(w) for w in work]
    results.sort(key=lambda r: r[0])
    rows = [row for _, rs, _ in results for row in rs]
    failures = [f for _, _, f in results if f]
    hists = {}
    for kind in kinds:
        vals = [v for r in rows if r.kind == kind.value for d in r.differences.values() for v in d.values()]
        edges, counts = histogram(vals)
        hists[kind.value] = {"bin_edges": edges, "counts": counts}
    return SuiteReport(rows, hists, failures)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def export_report(report, fmt: str = "csv") -> str:
    rows = report.rows if isinstance(report, SuiteReport) else list(report)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow([_fmt(v) for v in r.csv_row()])
        return buf.getvalue()
    if fmt == "json":
        out = {
            "columns": list(CSV_COLUMNS),
            "rows": [
                {
                    **{c: getattr(r, c) for c in CSV_COLUMNS},
                    "converged": r.converged,
                    "retries": r.retries,
                    "consistency_residual_v": r.consistency_residual_v,
                    "bin_edges": r.bin_edges,
                    "counts": r.counts,
                }
                for r in rows
            ],
        }
        if isinstance(report, SuiteReport):
            out["histograms"] = report.histograms
            out["failures"] = report.failures
        return json.dumps(out, indent=1)
    raise ValueError(f"unknown report format {fmt!r}")


_CSV_TYPES = {
    "network": str,
    "kind": str,
    "max_dv_pu": float,
    "mean_dv_pu": float,
    "recovery_err_v": float,
    "iters_ref": int,
    "iters_cand": int,
    "time_ref_ms": float,
    "time_cand_ms": float,
}


def parse_report_csv(text: str) -> list[dict]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
        raise ValueError(f"unexpected columns {reader.fieldnames}")
    out = []
    for rec in reader:
        out.append({k: (None if rec[k] == "" else _CSV_TYPES[k](rec[k])) for k in CSV_COLUMNS})
    return out
