"""Command line front end: ``fourwire <subcommand> ...``.

Exit codes: 0 success (a diverged solve is still a success, flagged in the
output), 1 domain or I/O error, 2 usage error. Requested data goes to stdout
or ``--out``; diagnostics go to stderr. ``FOURWIRE_LOG`` (error, warn, info,
debug) sets the log level.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
import warnings
from pathlib import Path

from . import __version__
from .dss import parse_dss, write_dss
from .errors import FourWireError
from .harness import GenSpec, compare_transform, export_report, generate, run_suite
from .model import network_from_json, network_to_json, validate_network
from .recover import recover_neutral, recovery_error
from .solver import SolveOptions, solution_from_dict, solution_to_dict, solve_powerflow
from .transform import TransformKind, transform_network

log = logging.getLogger("fourwire")

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "warning": logging.WARNING,
              "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


# -- file helpers ----------------------------------------------------------------


def atomic_write(path, text: str) -> None:
    """Write via a temp file in the target directory, then rename over."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _emit(text: str, out) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        atomic_write(out, text)


def _is_dss(path, fmt=None) -> bool:
    if fmt:
        return fmt == "dss"
    return Path(path).suffix.lower() == ".dss"


def _load_network(path, fmt=None):
    text = Path(path).read_text(encoding="utf-8")
    return parse_dss(text) if _is_dss(path, fmt) else network_from_json(text)


def _dump_network(net, path) -> str:
    return write_dss(net) if path is not None and _is_dss(path) else network_to_json(net)


def _json(obj) -> str:
    return json.dumps(obj, indent=1) + "\n"


def _check_paths(args) -> None:
    for attr in ("input", "net", "net4", "solution3", "solution4", "config"):
        p = getattr(args, attr, None)
        if p is not None and not Path(p).is_file():
            raise UsageError(f"no such file: {p}")
    out = getattr(args, "out", None)
    if out is not None and not Path(out).resolve().parent.is_dir():
        raise UsageError(f"output directory does not exist: {Path(out).parent}")


def _solve_options(args) -> SolveOptions:
    try:
        return SolveOptions(tolerance=args.tol, max_iterations=args.max_iter, residual_tolerance=args.residual_tol)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# -- subcommands -----------------------------------------------------------------


def cmd_transform(args) -> int:
    net = _load_network(args.input)
    out = transform_network(net, args.kind)
    _emit(_dump_network(out, args.out), args.out)
    return 0


def cmd_solve(args) -> int:
    net = _load_network(args.input, args.format)
    sol = solve_powerflow(net, _solve_options(args))
    if not sol.converged:
        log.warning("solve did not converge after %d iterations", sol.iterations)
    _emit(_json(solution_to_dict(sol)), args.out)
    return 0


def cmd_compare(args) -> int:
    net = _load_network(args.net)
    opts = _solve_options(args)
    rows = [compare_transform(net, k, opts) for k in args.kind]
    if args.format == "csv":
        _emit(export_report(rows, "csv"), args.out)
    else:
        _emit(export_report(rows, "json") + "\n", args.out)
    return 0


def cmd_recover(args) -> int:
    net4 = _load_network(args.net4)
    sol3 = solution_from_dict(json.loads(Path(args.solution3).read_text(encoding="utf-8")))
    currents = {lid: lc.phase_currents() for lid, lc in sol3.currents.items()}
    rec = recover_neutral(net4, currents)
    out = {
        "neutral_voltages": {b: {"re": v.real, "im": v.imag} for b, v in rec.neutral_voltages.items()},
        "visit_order": rec.visit_order,
        "consistency_residual": rec.consistency_residual,
    }
    if args.solution4:
        sol4 = solution_from_dict(json.loads(Path(args.solution4).read_text(encoding="utf-8")))
        out["recovery_error"] = recovery_error(rec, sol4)
    _emit(_json(out), args.out)
    return 0


def _bus_range(text: str):
    if ":" in text:
        lo, hi = text.split(":", 1)
        return (int(lo), int(hi))
    return int(text)


def cmd_gen(args) -> int:
    try:
        spec = GenSpec(
            seed=args.seed,
            n_buses=args.buses,
            topology=args.topology,
            extra_edges=args.extra_edges,
            grounding=args.grounding,
            grounded_buses=args.grounded_buses,
            unbalance=args.unbalance,
            mutual_scale=args.mutual,
            shunt_scale=args.shunt,
            linecode=args.linecode,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    net, retries, _ = generate(spec)
    if retries:
        log.info("load scaled down %d time(s) to converge", retries)
    _emit(_dump_network(net, args.out), args.out)
    return 0


def _suite_specs(cfg: dict):
    if "specs" in cfg:
        return [GenSpec.from_dict(s) for s in cfg["specs"]]
    base = {k: v for k, v in cfg.items() if k not in ("kinds", "seeds", "count", "solve")}
    if "seeds" in cfg:
        seeds = list(cfg["seeds"])
    else:
        start = int(base.pop("seed", 0))
        seeds = list(range(start, start + int(cfg.get("count", 1))))
    base.pop("seed", None)
    return [GenSpec.from_dict({**base, "seed": s}) for s in seeds]


def cmd_suite(args) -> int:
    cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
    if not isinstance(cfg, dict):
        raise FourWireError("suite config must be a JSON object")
    try:
        specs = _suite_specs(cfg)
        kinds = [TransformKind.parse(k) for k in cfg.get("kinds", ["t", "k", "u"])]
        solve_cfg = cfg.get("solve", {})
        opts = SolveOptions(
            tolerance=float(solve_cfg.get("tolerance", args.tol)),
            max_iterations=int(solve_cfg.get("max_iterations", args.max_iter)),
            residual_tolerance=float(solve_cfg.get("residual_tolerance", args.residual_tol)),
        )
    except (TypeError, ValueError) as exc:
        raise FourWireError(f"bad suite config: {exc}") from None
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = run_suite(specs, kinds, opts, jobs=args.jobs)
    atomic_write(out_dir / "report.csv", export_report(report, "csv"))
    atomic_write(out_dir / "report.json", export_report(report, "json") + "\n")
    atomic_write(out_dir / "histograms.json", _json(report.histograms))
    for f in report.failures:
        log.warning("spec %s (seed %s) failed: %s", f["spec"], f["seed"], f["error"])
    sys.stdout.write(f"{len(report.rows)} rows, {len(report.failures)} failed specs -> {out_dir}\n")
    return 0


def cmd_check(args) -> int:
    net = _load_network(args.input)
    problems = validate_network(net)
    for p in problems:
        sys.stdout.write(f"{p}\n")
    if problems:
        raise FourWireError(f"{len(problems)} validation problem(s)")
    sys.stdout.write(f"ok: {len(net.buses)} buses, {len(net.lines)} lines, {len(net.loads)} loads\n")
    return 0


# -- parser ----------------------------------------------------------------------


def _add_solve_flags(p):
    p.add_argument("--tol", type=float, default=SolveOptions().tolerance, help="convergence tolerance (relative)")
    p.add_argument("--max-iter", type=int, default=SolveOptions().max_iterations, help="iteration cap")
    p.add_argument("--residual-tol", type=float, default=SolveOptions().residual_tolerance,
                   help="largest nodal current mismatch accepted (ampere)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fourwire", description="Four-wire network transforms, power flow and neutral recovery.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--json-errors", action="store_true", help="report errors as JSON on stderr")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", metavar="<command>", parser_class=_Parser)
    sub.required = True
    kinds = [k.value for k in TransformKind]

    p = sub.add_parser("transform", help="eliminate the neutral from every line")
    p.add_argument("--kind", required=True, choices=kinds)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("solve", help="run the power flow")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--format", choices=["json", "dss"], help="input format (default: by extension)")
    _add_solve_flags(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("compare", help="solve original and transformed networks and compare |V_pn|")
    p.add_argument("--net", required=True)
    p.add_argument("--kind", required=True, nargs="+", choices=kinds)
    p.add_argument("--format", choices=["json", "csv"], default="json")
    _add_solve_flags(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("recover", help="recover neutral voltages from a 3-wire solution")
    p.add_argument("--net4", required=True, help="original four-wire network")
    p.add_argument("--solution3", required=True, help="solution JSON of the transformed network")
    p.add_argument("--solution4", help="optional four-wire solution to report the recovery error against")
    p.add_argument("--out")
    p.set_defaults(func=cmd_recover)

    p = sub.add_parser("gen", help="generate a random four-wire feeder")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--buses", type=_bus_range, default=(5, 50), help="N or MIN:MAX")
    p.add_argument("--topology", choices=["radial", "meshed"], default="radial")
    p.add_argument("--extra-edges", type=int, default=0)
    p.add_argument("--grounding", choices=["source_only", "multi"], default="source_only")
    p.add_argument("--grounded-buses", type=int, default=0)
    p.add_argument("--unbalance", type=float, default=0.5)
    p.add_argument("--mutual", type=float, default=0.2)
    p.add_argument("--shunt", type=float, default=0.0)
    p.add_argument("--linecode", choices=["independent", "shared"], default="independent")
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("suite", help="run a batch comparison from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--jobs", type=int, default=1)
    _add_solve_flags(p)
    p.set_defaults(func=cmd_suite)

    p = sub.add_parser("check", help="validate a network file")
    p.add_argument("--in", dest="input", required=True)
    p.set_defaults(func=cmd_check)
    return parser


def _configure_logging(verbose: int) -> None:
    level = LOG_LEVELS.get(os.environ.get("FOURWIRE_LOG", "warn").strip().lower(), logging.WARNING)
    level = max(logging.DEBUG, level - 10 * verbose)
    root = logging.getLogger("fourwire")
    root.setLevel(level)
    if not root.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        root.addHandler(handler)
    warnings.showwarning = lambda message, category, *_a, **_k: log.warning("%s: %s", category.__name__, message)


def _report(exc: Exception, code: int, as_json: bool) -> int:
    if as_json:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}) + "\n")
    else:
        sys.stderr.write(f"error: {exc}\n" if code == 1 else str(exc))
    return code


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    as_json = "--json-errors" in argv
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _configure_logging(args.verbose)
        _check_paths(args)
        if getattr(args, "jobs", 1) < 1:
            raise UsageError("--jobs must be at least 1")
        return args.func(args)
    except UsageError as exc:
        return _report(exc, 2, as_json)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (FourWireError, ValueError, OSError, KeyError, json.JSONDecodeError) as exc:
        return _report(exc, 1, as_json)


if __name__ == "__main__":
    sys.exit(main())
