"""Acceptance criteria 1-10.

Each criterion is a function returning ``(passed, detail)``; the pytest tests
assert on it and a summary line per criterion is printed at the end of the
module. Run ``python3 tests/test_acceptance.py`` for the summary alone.
"""
from __future__ import annotations

import functools
import time
import warnings
from pathlib import Path

import numpy as np
import pytest

from fourwire.dss import parse_dss, write_dss
from fourwire.harness import GenSpec, compare_transform, generate
from fourwire.model import (
    FOUR_WIRE,
    Bus,
    ImpedanceMatrix,
    LineSegment,
    Load,
    Network,
    Source,
    balanced_phasors,
    network_differences,
)
from fourwire.recover import phase_currents_from_solution, recover_neutral
from fourwire.solver import conservation_report, solve_powerflow
from fourwire.transform import (
    DroppedShuntWarning,
    build_t_matrix,
    transform_kron,
    transform_modified_pn,
    transform_network,
    transform_pn,
)

ROOT = Path(__file__).resolve().parents[1]
FIXTURES = ROOT / "tests" / "fixtures" / "dss"

RADIAL_SEEDS = range(60)
MESHED_SEEDS = range(50)

RESULTS: dict[int, tuple[bool, str]] = {}


def _rel(a, b):
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-300))


# -- 1 ---------------------------------------------------------------------------


def criterion_1():
    rng = np.random.default_rng(2024)
    t = build_t_matrix(3)
    start = time.perf_counter()
    worst_pn = worst_tzt = worst_kron = 0.0
    collapse_ok = True
    for k in range(1000):
        z = rng.normal(size=(4, 4)) + 1j * rng.normal(size=(4, 4))
        if k % 2:
            z = z + z.T
        m = ImpedanceMatrix(FOUR_WIRE, z)
        pn = transform_pn(m).values
        entrywise = np.array([[z[p, q] - z[3, q] - z[p, 3] + z[3, 3] for q in range(3)] for p in range(3)])
        worst_pn = max(worst_pn, _rel(pn, entrywise))
        worst_tzt = max(worst_tzt, _rel(pn, t @ z @ t.T))
        block = z[:3, :3] - z[:3, 3:] @ np.linalg.inv(z[3:, 3:]) @ z[3:, :3]
        worst_kron = max(worst_kron, _rel(transform_kron(m).values, block))
        d = ImpedanceMatrix(FOUR_WIRE, np.diag(np.diag(z)))
        collapse_ok &= np.array_equal(transform_pn(d).values, transform_modified_pn(d).values)
    elapsed = time.perf_counter() - start
    ok = max(worst_pn, worst_tzt, worst_kron) <= 1e-14 and collapse_ok and elapsed < 5
    return ok, (f"pn vs entrywise {worst_pn:.1e}, vs T z T' {worst_tzt:.1e}, kron vs block {worst_kron:.1e}, "
                f"mutual-free U==T {collapse_ok}, {elapsed:.2f} s")


# -- shared population for 2-5 and 8 ---------------------------------------------


def _population_specs():
    specs = [("radial", GenSpec(seed=s)) for s in RADIAL_SEEDS]
    specs += [("meshed", GenSpec(seed=s, topology="meshed", extra_edges=1 + s % 3)) for s in MESHED_SEEDS]
    return specs


@functools.lru_cache(maxsize=None)
def population():
    start = time.perf_counter()
    cases = []
    for family, spec in _population_specs():
        net, _, sol4 = generate(spec)
        reps = {k: compare_transform(net, k, sol_ref=sol4) for k in "tku"}
        cases.append({"family": family, "net": net, "sol4": sol4, **reps})
    return cases, time.perf_counter() - start


def _by_family(cases, pred):
    out = {}
    for c in cases:
        hits, total = out.get(c["family"], (0, 0))
        out[c["family"]] = (hits + bool(pred(c)), total + 1)
    return ", ".join(f"{fam} {h}/{n}" for fam, (h, n) in out.items())


def criterion_2():
    cases, elapsed = population()
    conv = all(c["t"].converged for c in cases)
    worst = {fam: max(c["t"].max_dv_pu for c in cases if c["family"] == fam) for fam in ("radial", "meshed")}
    ok = conv and len(cases) >= 100 and max(worst.values()) <= 1e-8 and elapsed < 120
    within = _by_family(cases, lambda c: c["t"].max_dv_pu <= 1e-8)
    return ok, (f"{len(cases)} networks in {elapsed:.1f} s; worst T |dV| radial {worst['radial']:.1e} pu, "
                f"meshed {worst['meshed']:.1e} pu; within 1e-8: {within}")


def criterion_3():
    cases, _ = population()
    err_pu = {fam: max(c["t"].recovery_err_pu for c in cases if c["family"] == fam) for fam in ("radial", "meshed")}
    resid = max(c["t"].consistency_residual_v for c in cases if c["family"] == "meshed")
    ok = max(err_pu.values()) <= 1e-8 and resid <= 1e-9
    return ok, (f"worst recovery error radial {err_pu['radial']:.1e} pu, meshed {err_pu['meshed']:.1e} pu; "
                f"worst meshed consistency residual {resid:.2e} V")


def criterion_4():
    cases, _ = population()
    kron_hits = [c for c in cases if c["k"].max_dv_pu > 1e-7]
    t_below = [c for c in kron_hits if c["t"].max_dv_pu < c["k"].max_dv_pu]
    enough = len(kron_hits) * 100 >= len(cases)
    ok = enough and len(t_below) == len(kron_hits)
    return ok, (f"K > 1e-7 pu on {len(kron_hits)}/{len(cases)}; T < K on {len(t_below)}/{len(kron_hits)} "
                f"({_by_family(kron_hits, lambda c: c['t'].max_dv_pu < c['k'].max_dv_pu)})")


def _has_mutual(net):
    for ln in net.lines:
        z = ln.series_z.values
        if np.any(np.abs(z - np.diag(np.diag(z))) > 1e-12):
            return True
    return False


def criterion_5():
    cases, _ = population()
    geq = [c for c in cases if c["u"].max_dv_pu >= c["t"].max_dv_pu]
    need_strict = [c for c in cases if _has_mutual(c["net"])]
    strict = [c for c in need_strict if c["u"].max_dv_pu > c["t"].max_dv_pu]
    ok = len(geq) == len(cases) and len(strict) == len(need_strict)
    return ok, (f"U >= T on {len(geq)}/{len(cases)} ({_by_family(cases, lambda c: c['u'].max_dv_pu >= c['t'].max_dv_pu)}); "
                f"U > T on {len(strict)}/{len(need_strict)} cases with mutuals")


# -- 6 ---------------------------------------------------------------------------


def both_ends_grounded():
    z = np.full((4, 4), 0.05 + 0.02j)
    np.fill_diagonal(z, 0.3 + 0.08j)
    zm = ImpedanceMatrix(FOUR_WIRE, z)
    buses = [Bus("B1", FOUR_WIRE, 230.0, True), Bus("B2", FOUR_WIRE, 230.0), Bus("B3", FOUR_WIRE, 230.0, True)]
    lines = [LineSegment("L1", "B1", "B2", zm), LineSegment("L2", "B2", "B3", zm)]
    loads = [Load("D2", "B2", FOUR_WIRE[:3], [6000 + 1000j, 1000 + 200j, 2500 + 300j])]
    return Network(buses, lines, loads, [Source("source", "B1", balanced_phasors(230.0))], "both-ends")


def criterion_6():
    net = both_ends_grounded()
    rep = compare_transform(net, "t")
    sol3 = solve_powerflow(transform_network(net, "t"))
    rec = recover_neutral(net, phase_currents_from_solution(sol3))
    ok = rep.converged and rep.max_dv_pu > 1e-8 and rec.consistency_residual > 0
    return ok, f"T |dV| {rep.max_dv_pu:.2e} pu, consistency residual {rec.consistency_residual:.2e} V"


# -- 7 ---------------------------------------------------------------------------


def criterion_7():
    net = parse_dss((FIXTURES / "mv_overhead.dss").read_text())
    shunt = max(float(np.abs(ln.shunt_y_from.values).max()) for ln in net.lines)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DroppedShuntWarning)
        rep = compare_transform(net, "t")
    ok = rep.converged and 0 < rep.max_dv_pu < 1e-3 and 1e-7 <= shunt <= 1e-5
    return ok, f"largest shunt entry {shunt:.1e} S, T |dV| {rep.max_dv_pu:.2e} pu"


# -- 8 ---------------------------------------------------------------------------


def _conservation_cases():
    cases, _ = population()
    for c in cases:
        yield c["net"], c["sol4"]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DroppedShuntWarning)
            for k in "tku":
                net3 = transform_network(c["net"], k)
                yield net3, solve_powerflow(net3)
    for seed in range(20):
        spec = GenSpec(seed=seed, n_buses=(5, 30), grounding="multi", grounded_buses=3, shunt_scale=1e-5)
        net, _, sol = generate(spec)
        yield net, sol
    for path in sorted(FIXTURES.glob("*.dss")):
        net = parse_dss(path.read_text())
        yield net, solve_powerflow(net)


def criterion_8():
    n = skipped = 0
    kcl = power = ground = 0.0
    for net, sol in _conservation_cases():
        if not sol.converged:
            skipped += 1
            continue
        rep = conservation_report(net, sol)
        n += 1
        kcl = max(kcl, rep.max_kcl_residual)
        power = max(power, rep.power_mismatch)
        ground = max(ground, rep.max_ground_current_ungrounded)
    ok = kcl <= 1e-8 and power <= 1e-8 and ground <= 1e-8
    return ok, (f"{n} converged solves ({skipped} diverged, excluded): KCL {kcl:.1e} A, "
                f"power {power:.1e} rel, ungrounded ground current {ground:.1e} A")


# -- 9 ---------------------------------------------------------------------------


def criterion_9():
    files = sorted(FIXTURES.glob("*.dss"))
    bad = []
    for path in files:
        first = parse_dss(path.read_text())
        if network_differences(first, parse_dss(write_dss(first)), rtol=1e-12):
            bad.append(path.name)
    ok = len(files) >= 10 and not bad
    return ok, f"{len(files) - len(bad)}/{len(files)} fixtures round-trip" + (f"; failing {bad}" if bad else "")


# -- 10 --------------------------------------------------------------------------


def criterion_10():
    readme = (ROOT / "README.md").read_text() if (ROOT / "README.md").exists() else ""
    section = readme.split("## Out of scope", 1)[1] if "## Out of scope" in readme else ""
    needed = ("optimal power flow", "speedup", "optimality gap", "ENWL")
    missing = [w for w in needed if w.lower() not in section.lower()]
    return not missing, "README states the out-of-scope results" if not missing else f"README lacks {missing}"


CRITERIA = {k: globals()[f"criterion_{k}"] for k in range(1, 11)}


def _summary_lines():
    return [f"criterion {k:2d} {'PASS' if ok else 'FAIL'}: {detail}" for k, (ok, detail) in sorted(RESULTS.items())]


@pytest.fixture(scope="module", autouse=True)
def _print_summary(request):
    yield
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")
    lines = _summary_lines()
    if reporter is not None:
        reporter.write_line("")
        for line in lines:
            reporter.write_line(line)
    else:
        print("\n".join(lines))


@pytest.mark.parametrize("number", sorted(CRITERIA))
def test_criterion(number):
    ok, detail = CRITERIA[number]()
    RESULTS[number] = (ok, detail)
    assert ok, detail


if __name__ == "__main__":
    for k, fn in CRITERIA.items():
        RESULTS[k] = fn()
        print(_summary_lines()[-1], flush=True)
