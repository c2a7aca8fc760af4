"""``nadmm`` command line: validate, solve and analyze problem files.

Problem files are UTF-8 JSON.  The flat form is::

    {"variables": [...], "y_variables": [...], "objective": <expr>,
     "constraints": [<expr>, ...], "A": [[...]], "B": [[...]], "b": [...]}

Expressions are either JSON trees or infix strings.  Block problems carry
``"blocks"`` instead; each block with its own ``"B"`` is a per-block coupled
block, otherwise the file is a shared-budget problem with top-level ``"b"``
(``"form"`` may be given explicitly as ``"block"`` or ``"shared"``).  Optional
keys: ``"inequalities"`` (h(x) <= 0 expressions), ``"slack_names"``,
``"x0"`` (initial guess in declaration order, before slacks) and ``"name"``.

Exit codes: 0 success (Solved), 1 usage / IO / validation error,
2 iteration limit, 3 solver failure, 4 no reference point found.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .admm import AdmmConfig, AdmmError, run
from .analysis import (HypothesisError, check_kkt, convergence_rate, critical_rho,
                       lyapunov, nearest_reference, problem_critical_rho, reference_solution,
                       regularity, verify_decrease_bound)
from .expr import ExprSyntaxError, parse_expr
from .model import (BlockProblem, BlockSpec, InequalitySpec, Problem, SharedBlockSpec,
                    SharedBudgetProblem, ValidationError, add_slacks, canonicalize_block,
                    canonicalize_shared, validate)

__all__ = ["main", "load_problem", "ProblemFileError", "write_trace", "read_trace",
           "solve_report_dict", "SCHEMA_VERSION", "EXIT_OK", "EXIT_USAGE", "EXIT_ITER_LIMIT",
           "EXIT_FAILURE", "EXIT_NO_REFERENCE"]

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
EXIT_OK = 0
EXIT_USAGE = 1
EXIT_ITER_LIMIT = 2
EXIT_FAILURE = 3
EXIT_NO_REFERENCE = 4


class ProblemFileError(ValueError):
    """A problem file could not be read; ``where`` locates the offending field."""

    def __init__(self, message, where=""):
        self.where = where
        super().__init__(f"{where}: {message}" if where else message)


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Problem files

def _field(obj, key, where, default=KeyError):
    if key in obj:
        return obj[key]
    if default is KeyError:
        raise ProblemFileError(f"missing required field {key!r}", where)
    return default


def _expr(src, where):
    try:
        return parse_expr(src)
    except (ExprSyntaxError, ValueError, TypeError) as exc:
        raise ProblemFileError(str(exc), where) from exc


def _names(obj, key, where, default=KeyError):
    names = _field(obj, key, where, default)
    if names is default:
        return tuple(names)
    if not isinstance(names, list) or not all(isinstance(v, str) for v in names):
        raise ProblemFileError("expected a list of names", f"{where}.{key}".lstrip("."))
    return tuple(names)


def _array(obj, key, where, ndim, default=KeyError):
    raw = _field(obj, key, where, default)
    path = f"{where}.{key}".lstrip(".")
    try:
        arr = np.array(raw, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ProblemFileError(f"not a numeric array: {exc}", path) from exc
    if ndim == 2 and arr.ndim == 1 and arr.size == 0:
        arr = arr.reshape(0, 0)
    if arr.ndim != ndim:
        raise ProblemFileError(f"expected a {ndim}-D array, got shape {arr.shape}", path)
    return arr


def _exprs(obj, key, where):
    items = _field(obj, key, where, [])
    if not isinstance(items, list):
        raise ProblemFileError("expected a list of expressions", f"{where}.{key}".lstrip("."))
    return tuple(_expr(e, f"{where}.{key}[{i}]".lstrip(".")) for i, e in enumerate(items))


def problem_from_dict(data):
    """Build and validate a canonical :class:`Problem` from parsed JSON."""
    if not isinstance(data, dict):
        raise ProblemFileError("top level must be a JSON object")
    name = str(data.get("name", ""))
    blocks = data.get("blocks")
    try:
        if blocks is not None:
            if not isinstance(blocks, list) or not blocks:
                raise ProblemFileError("expected a non-empty list of blocks", "blocks")
            form = data.get("form") or ("block" if all("B" in b for b in blocks) else "shared")
            if form == "block":
                specs = tuple(BlockSpec(
                    variables=_names(blk, "variables", f"blocks[{i}]"),
                    objective=_expr(_field(blk, "objective", f"blocks[{i}]"),
                                    f"blocks[{i}].objective"),
                    constraints=_exprs(blk, "constraints", f"blocks[{i}]"),
                    A=_array(blk, "A", f"blocks[{i}]", 2),
                    B=_array(blk, "B", f"blocks[{i}]", 2),
                    b=_array(blk, "b", f"blocks[{i}]", 1),
                    name=str(blk.get("name", ""))) for i, blk in enumerate(blocks))
                prob = canonicalize_block(BlockProblem(
                    blocks=specs, y_variables=_names(data, "y_variables", "", ()), name=name))
            elif form == "shared":
                specs = tuple(SharedBlockSpec(
                    variables=_names(blk, "variables", f"blocks[{i}]"),
                    objective=_expr(_field(blk, "objective", f"blocks[{i}]"),
                                    f"blocks[{i}].objective"),
                    constraints=_exprs(blk, "constraints", f"blocks[{i}]"),
                    A=_array(blk, "A", f"blocks[{i}]", 2),
                    name=str(blk.get("name", ""))) for i, blk in enumerate(blocks))
                prob = canonicalize_shared(SharedBudgetProblem(
                    blocks=specs, b=_array(data, "b", "", 1), name=name))
            else:
                raise ProblemFileError(f"unknown form {form!r}", "form")
        else:
            prob = Problem(
                variables=_names(data, "variables", ""),
                y_variables=_names(data, "y_variables", ""),
                objective=_expr(_field(data, "objective", ""), "objective"),
                constraints=_exprs(data, "constraints", ""),
                A=_array(data, "A", "", 2),
                B=_array(data, "B", "", 2),
                b=_array(data, "b", "", 1),
                name=name)
    except ProblemFileError:
        raise
    except ValueError as exc:
        raise ProblemFileError(str(exc), "blocks" if blocks is not None else "") from exc

    if "x0" in data:
        x0 = _array(data, "x0", "", 1)
        if x0.shape != (prob.n,):
            raise ProblemFileError(f"expected {prob.n} entries, got {x0.shape[0]}", "x0")
        prob = replace(prob, x0=x0)
    if data.get("inequalities"):
        ineq = InequalitySpec(expressions=_exprs(data, "inequalities", ""),
                              slack_names=_names(data, "slack_names", "", ()))
        try:
            prob = add_slacks(prob, ineq)
        except ValueError as exc:
            raise ProblemFileError(str(exc), "inequalities") from exc
    report = validate(prob)
    if not report.ok:
        raise ValidationError(report)
    return prob


def load_problem(path):
    """Read, canonicalize and validate a problem file.

    Raises
    ------
    ProblemFileError
        On IO, JSON or schema errors (message names the line or field).
    ValidationError
        When the canonical problem fails validation (e.g. B rank deficient).
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ProblemFileError(f"cannot read {path}: {exc.strerror or exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ProblemFileError(f"invalid JSON at line {exc.lineno}, column {exc.colno}: "
                               f"{exc.msg}") from exc
    return problem_from_dict(data)


# ---------------------------------------------------------------------------
# Traces and reports

def _fmt(v):
    v = float(v)
    return repr(v) if math.isfinite(v) else ("nan" if math.isnan(v) else repr(v))


def trace_header(prob):
    return (["k", "norm_q", "norm_r"]
            + [f"x.{v}" for v in prob.variables]
            + [f"y.{v}" for v in prob.y_variables]
            + [f"lambda.{i + 1}" for i in range(prob.q)]
            + [f"mu.{j + 1}" for j in range(prob.p)]
            + ["V", "wall_ms"])


def write_trace(path_or_file, prob, trace, V=None, timing=False):
    """Write one CSV row per iterate k >= 1.

    ``V`` (one value per iterate) fills the V column when a reference is
    known.  ``wall_ms`` is left empty unless ``timing`` is set, so traces of
    identical runs are byte-identical.
    """
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(trace_header(prob))
    for i, it in enumerate(trace.iterates):
        row = [str(it.k), _fmt(it.norm_q), _fmt(it.norm_r)]
        row += [_fmt(v) for v in np.concatenate([it.x, it.y, it.lam, it.mu])]
        row.append(_fmt(V[i]) if V is not None else "")
        row.append(_fmt(1e3 * trace.wall_times[i]) if timing else "")
        w.writerow(row)
    text = buf.getvalue()
    if hasattr(path_or_file, "write"):
        path_or_file.write(text)
    else:
        Path(path_or_file).write_text(text, encoding="utf-8")


@dataclass
class TraceRow:
    k: int
    norm_q: float
    norm_r: float
    x: np.ndarray
    y: np.ndarray
    lam: np.ndarray
    mu: np.ndarray


@dataclass
class TraceFile:
    rows: list = field(default_factory=list)

    @property
    def iterates(self):
        return self.rows


def read_trace(path, prob):
    """Parse a trace CSV written by :func:`write_trace` for ``prob``."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ProblemFileError("trace file is empty", str(path)) from None
        expected = trace_header(prob)
        if header != expected:
            raise ProblemFileError("trace columns do not match the problem", str(path))
        n, m, q, p = prob.n, prob.m, prob.q, prob.p
        out = TraceFile()
        for line_no, row in enumerate(reader, start=2):
            try:
                vals = np.array([float(v) for v in row[1:3 + n + m + q + p]])
                k = int(row[0])
            except (ValueError, IndexError) as exc:
                raise ProblemFileError(f"bad row: {exc}", f"{path}:{line_no}") from exc
            o = 2
            out.rows.append(TraceRow(
                k=k, norm_q=vals[0], norm_r=vals[1],
                x=vals[o:o + n], y=vals[o + n:o + n + m],
                lam=vals[o + n + m:o + n + m + q], mu=vals[o + n + m + q:]))
    return out


def _floats(a):
    return [float(v) for v in np.asarray(a, dtype=float).reshape(-1)]


def solve_report_dict(prob, report=None, seed=None, error=None, config=None):
    """JSON-ready solve report."""
    out = {"schema_version": SCHEMA_VERSION, "command": "solve", "version": __version__,
           "problem": prob.name, "variables": list(prob.variables),
           "y_variables": list(prob.y_variables), "seed": seed}
    if report is not None:
        f = report.final
        out.update({
            "status": report.status, "iterations": report.iterations, "rho": report.rho,
            "eta_p": report.eta_p, "eta_d": report.eta_d, "inner_tol": report.inner_tol,
            "lambda0_projection_distance": report.lambda0_projection_distance,
            "saddle_iterations": list(report.saddle_iterations),
            "final": {"x": _floats(f.x), "y": _floats(f.y), "mu": _floats(f.mu),
                      "lambda": _floats(f.lam), "norm_q": float(f.norm_q),
                      "norm_r": float(f.norm_r)},
        })
    else:
        out.update({"status": "Failed", "rho": config.rho if config else None})
    if error is not None:
        out["error"] = error
    return out


def _write_json(path, data):
    text = json.dumps(data, indent=2, allow_nan=True) + "\n"
    if path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def _read_json(path, what):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ProblemFileError(f"cannot read {what} {path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise ProblemFileError(f"invalid JSON at line {exc.lineno}, column {exc.colno}: "
                               f"{exc.msg}", str(path)) from exc


# ---------------------------------------------------------------------------
# Commands

def _resolve_seed(args):
    env = os.environ.get("NADMM_SEED")
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"NADMM_SEED must be an integer, got {env!r}") from None
    return args.seed


def _vector_arg(text, size, rng, label):
    """Parse ``"1,2,3"``, a JSON list, or ``random`` (standard normal, seeded)."""
    if text is None:
        return None
    text = text.strip()
    if text == "random":
        return rng.standard_normal(size)
    try:
        vals = json.loads(text) if text.startswith("[") else [float(v) for v in text.split(",")]
        vec = np.array(vals, dtype=float).reshape(-1)
    except (ValueError, TypeError, json.JSONDecodeError):
        raise UsageError(f"{label}: expected comma-separated numbers, got {text!r}") from None
    if vec.shape != (size,):
        raise UsageError(f"{label}: expected {size} values, got {vec.shape[0]}")
    return vec


def cmd_validate(args):
    try:
        prob = load_problem(args.problem)
    except ValidationError as exc:
        _write_json("-", {"schema_version": SCHEMA_VERSION, "command": "validate",
                          **exc.report.to_dict()})
        return EXIT_USAGE
    rep = validate(prob)
    _write_json("-", {"schema_version": SCHEMA_VERSION, "command": "validate",
                      "problem": prob.name, "n": prob.n, "m": prob.m, "p": prob.p,
                      "q": prob.q, **rep.to_dict()})
    return EXIT_OK


def cmd_solve(args):
    if not args.rho > 0 or not math.isfinite(args.rho):
        raise UsageError(f"--rho must be positive, got {args.rho}")
    if not (args.eta_p > 0 and args.eta_d > 0):
        raise UsageError("--eta-p and --eta-d must be positive")
    if args.max_iter < 1:
        raise UsageError("--max-iter must be at least 1")
    prob = load_problem(args.problem)
    seed = _resolve_seed(args)
    rng = np.random.default_rng(seed)
    config = AdmmConfig(
        rho=args.rho, eta_p=args.eta_p, eta_d=args.eta_d, max_iter=args.max_iter,
        y0=_vector_arg(args.y0, prob.m, rng, "--y0"),
        lambda0=_vector_arg(args.lambda0, prob.q, rng, "--lambda0"),
        x0=_vector_arg(args.x0, prob.n, rng, "--x0"),
        warm_start=args.warm_start, parallel_blocks=args.parallel_blocks)
    try:
        report, trace = run(prob, config)
    except AdmmError as exc:
        print(f"nadmm: solver failure: {exc}", file=sys.stderr)
        if args.trace and exc.trace is not None:
            write_trace(args.trace, prob, exc.trace, timing=args.timing)
        if args.report:
            _write_json(args.report, solve_report_dict(prob, None, seed, str(exc), config))
        return EXIT_FAILURE
    if args.trace:
        write_trace(args.trace, prob, trace, timing=args.timing)
    data = solve_report_dict(prob, report, seed)
    if args.report:
        _write_json(args.report, data)
    f = report.final
    print(f"{report.status}: {report.iterations} iterations, ||q|| = {f.norm_q:.3e}, "
          f"||r|| = {f.norm_r:.3e}", file=sys.stderr)
    return EXIT_OK if report.solved else EXIT_ITER_LIMIT


def _point_arg(path, prob):
    data = _read_json(path, "point")
    try:
        x = np.array(data["x"], dtype=float)
        y = np.array(data["y"], dtype=float)
        mu = np.array(data.get("mu", []), dtype=float)
        lam = np.array(data.get("lambda", data.get("lam")), dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise ProblemFileError(f"point needs numeric x, y, mu, lambda: {exc}", str(path)) from exc
    for label, v, size in (("x", x, prob.n), ("y", y, prob.m), ("mu", mu, prob.p),
                           ("lambda", lam, prob.q)):
        if v.shape != (size,):
            raise ProblemFileError(f"{label} needs {size} entries", str(path))
    return x, y, mu, lam


def _critical_rho_file(path):
    data = _read_json(path, "matrix file")
    try:
        H = np.atleast_2d(np.array(data["H"], dtype=float))
        d = H.shape[0]
        C = np.array(data.get("C", []), dtype=float).reshape(-1, d)
        D = np.array(data["D"], dtype=float).reshape(-1, d)
    except (KeyError, TypeError, ValueError) as exc:
        raise ProblemFileError(f"expected numeric H, C, D: {exc}", str(path)) from exc
    return H, C, D


def _inf_safe(v):
    return None if v is None else (float(v) if math.isfinite(v) else str(v))


def _regularity_dict(reg):
    d = reg.to_dict()
    return {k: (_inf_safe(v) if isinstance(v, float) else v) for k, v in d.items()}


def cmd_analyze(args):
    out = {"schema_version": SCHEMA_VERSION, "command": "analyze", "version": __version__}
    code = EXIT_OK
    did = False
    if args.critical_rho:
        H, C, D = _critical_rho_file(args.critical_rho)
        try:
            out["critical_rho"] = _inf_safe(critical_rho(H, C, D))
        except HypothesisError as exc:
            print(f"nadmm: {exc}", file=sys.stderr)
            out["critical_rho_error"] = {"message": str(exc),
                                         "direction": _floats(exc.direction),
                                         "curvature": exc.curvature}
            code = EXIT_FAILURE
        did = True
    if args.problem is None:
        if not did:
            raise UsageError("analyze needs --problem (or --critical-rho FILE)")
        _write_json(args.report or "-", out)
        return code
    if args.rho is not None and not args.rho > 0:
        raise UsageError(f"--rho must be positive, got {args.rho}")

    prob = load_problem(args.problem)
    out["problem"] = prob.name
    seed = _resolve_seed(args)

    if args.point:
        did = True
        x, y, mu, lam = _point_arg(args.point, prob)
        out["point"] = {"kkt": check_kkt(prob, x, y, mu, lam).to_dict(),
                        "regularity": _regularity_dict(regularity(prob, x, mu, args.rho))}

    refs = None
    if args.trace or args.multistart:
        did = True
        refs = reference_solution(prob, args.multistart or 20, seed)
        out["references"] = [_ref_dict(prob, r, args.rho) for r in refs]
        if not refs:
            print("nadmm: multistart found no reference KKT point", file=sys.stderr)
            _write_json(args.report or "-", out)
            return EXIT_NO_REFERENCE

    if args.trace:
        if args.rho is None:
            raise UsageError("--trace needs --rho (the penalty the trace was run with)")
        trace = read_trace(args.trace, prob)
        if not trace.rows:
            raise UsageError(f"trace {args.trace} has no iterations")
        last = trace.rows[-1]
        ref, dist = nearest_reference(refs, last.y, last.lam, prob.B, args.rho)
        series = verify_decrease_bound(trace, ref.y, ref.lam, prob.B, args.rho)
        rate = convergence_rate(trace, ref.y, ref.lam, prob.B, args.rho)
        out["trace"] = {
            "iterations": len(trace.rows),
            "reference_index": refs.index(ref),
            "final_distance": dist,
            "final_kkt": check_kkt(prob, last.x, last.y, last.mu, last.lam).to_dict(),
            "lyapunov": series.to_dict(),
            "violations_after_entry": (series.violations(series.entry_index)
                                       if series.entry_index is not None else None),
            "rate": rate.to_dict(),
        }
        if args.annotated_trace:
            V = [lyapunov(r.y, r.lam, ref.y, ref.lam, prob.B, args.rho) for r in trace.rows]
            _write_annotated(args.annotated_trace, prob, trace, V)

    if not did:
        raise UsageError("analyze needs --trace, --point, --multistart or --critical-rho")
    _write_json(args.report or "-", out)
    return code


def _ref_dict(prob, ref, rho):
    d = ref.to_dict()
    try:
        d["critical_rho"] = _inf_safe(problem_critical_rho(prob, ref.x, ref.mu))
    except HypothesisError:
        d["critical_rho"] = None
    if rho is not None:
        d["regularity"] = _regularity_dict(regularity(prob, ref.x, ref.mu, rho))
    return d


def _write_annotated(path, prob, trace, V):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(trace_header(prob))
    for row, v in zip(trace.rows, V):
        vals = np.concatenate([row.x, row.y, row.lam, row.mu])
        w.writerow([str(row.k), _fmt(row.norm_q), _fmt(row.norm_r)]
                   + [_fmt(u) for u in vals] + [_fmt(v), ""])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


# ---------------------------------------------------------------------------
# Entry point

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    parser = _Parser(prog="nadmm", description="ADMM for nonconvex, equality-constrained, "
                     "linearly coupled problems.")
    parser.add_argument("--version", action="version", version=f"nadmm {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("validate", help="check a problem file")
    p.add_argument("--problem", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("solve", help="run ADMM on a problem file")
    p.add_argument("--problem", required=True)
    p.add_argument("--rho", type=float, required=True)
    p.add_argument("--eta-p", type=float, default=1e-8)
    p.add_argument("--eta-d", type=float, default=1e-8)
    p.add_argument("--max-iter", type=int, default=1000)
    p.add_argument("--y0", help="comma-separated values, JSON list, or 'random'")
    p.add_argument("--lambda0", help="comma-separated values, JSON list, or 'random'")
    p.add_argument("--x0", help="first subproblem seed; defaults to the file's x0 or zeros")
    p.add_argument("--warm-start", choices=("previous", "fixed"), default="previous")
    p.add_argument("--seed", type=int, default=0, help="seed for 'random' vectors "
                   "(NADMM_SEED overrides)")
    p.add_argument("--trace", help="CSV trace output path")
    p.add_argument("--report", help="JSON report output path ('-' for stdout)")
    p.add_argument("--parallel-blocks", action="store_true")
    p.add_argument("--timing", action="store_true",
                   help="record wall_ms in the trace (makes traces run-dependent)")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("analyze", help="diagnostics for a trace, a point or matrices")
    p.add_argument("--problem")
    p.add_argument("--trace", help="trace CSV from 'nadmm solve'")
    p.add_argument("--point", help="JSON file with x, y, mu, lambda")
    p.add_argument("--multistart", type=int, default=None, metavar="N",
                   help="number of multistart reference solves (default 20 with --trace)")
    p.add_argument("--critical-rho", metavar="FILE",
                   help="JSON file with H, C, D; prints the critical penalty")
    p.add_argument("--rho", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", help="JSON output path (default stdout)")
    p.add_argument("--annotated-trace", help="rewrite the trace with V filled in")
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"nadmm: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"nadmm: usage error: {exc}", file=sys.stderr)
    except ValidationError as exc:
        print(f"nadmm: invalid problem: {exc}", file=sys.stderr)
    except (ProblemFileError, OSError) as exc:
        print(f"nadmm: {exc}", file=sys.stderr)
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
