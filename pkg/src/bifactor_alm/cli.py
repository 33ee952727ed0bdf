"""Command-line front end.

Subcommands ``fit``, ``select-g``, ``simulate`` and ``check-id``. JSON field
names follow ``schema.json`` shipped next to this module. Item indices in
every file the tool reads or writes are 1-based; group labels are 1-based
with ``0`` for an item on no group factor and ``-1`` for an item on several.

Exit codes: 0 success, 2 bad input, 3 no start converged.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
import time
from dataclasses import asdict
from importlib import metadata
from pathlib import Path

import numpy as np

from .alm import THREADS_ENV, AllStartsFailed, AlmConfig, multi_start_fit
from .diagnostics import StructureMismatch, check_conditions
from .model import HierarchyTree, ModelError, SampleCov, bifactor_constraint_pairs, hierarchy_constraint_pairs
from .selection import select_g
from .simlab import METRIC_KEYS, StudySpec, run_study

EXIT_INPUT = 2
EXIT_NO_FIT = 3


class IngestError(ValueError):
    """Base class for input problems; ``details`` end up in the error JSON."""

    def __init__(self, message: str, **details):
        super().__init__(message)
        self.details = details


class NonNumericCell(IngestError):
    pass


class AsymmetricMatrix(IngestError):
    pass


class NotPositiveDefinite(IngestError):
    pass


class MissingN(IngestError):
    pass


class InvalidSpec(IngestError):
    pass


# ---------------------------------------------------------------------------
# ingestion


def _is_number(text: str) -> bool:
    try:
        value = float(text)
    except ValueError:
        return False
    return math.isfinite(value)


def read_numeric_csv(path) -> np.ndarray:
    """Numeric table from a CSV file; a first row with no numeric cell is a header.

    Raises :class:`NonNumericCell` with 1-based ``row``/``col`` (file line and
    column) for empty, non-numeric or non-finite cells and for ragged rows.
    """
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh)]
    start = 0
    if rows and not any(_is_number(c.strip()) for c in rows[0]):
        start = 1
    data = []
    width = None
    for r, row in enumerate(rows[start:], start=start + 1):
        if not row or all(not c.strip() for c in row):
            continue
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise NonNumericCell(f"line {r} has {len(row)} cells, expected {width}", row=r, col=min(len(row), width) + 1)
        vals = []
        for c, cell in enumerate(row, start=1):
            text = cell.strip()
            if not _is_number(text):
                raise NonNumericCell(f"line {r}, column {c}: {cell!r} is not a finite number", row=r, col=c)
            vals.append(float(text))
        data.append(vals)
    if not data:
        raise NonNumericCell(f"{path} holds no numeric rows", row=start + 1, col=1)
    return np.array(data, dtype=float)


def ingest(path, kind: str, N_override: int | None = None) -> SampleCov:
    """Read raw data (``kind="raw"``) or a covariance matrix (``kind="cov"``).

    Raw data are centred by the column means and reduced to the sample
    covariance with divisor ``N`` (the number of rows unless overridden).
    A covariance file needs ``N_override``.
    """
    table = read_numeric_csv(path)
    if kind == "raw":
        N = table.shape[0] if N_override is None else int(N_override)
        X = table - table.mean(axis=0)
        S = X.T @ X / table.shape[0]
    elif kind == "cov":
        if N_override is None:
            raise MissingN("a covariance input needs the sample size (--n)")
        N = int(N_override)
        S = table
        if S.shape[0] != S.shape[1]:
            raise AsymmetricMatrix(f"covariance matrix is {S.shape[0]} x {S.shape[1]}, not square")
        scale = max(1.0, float(np.max(np.abs(S))))
        if np.max(np.abs(S - S.T)) > 1e-8 * scale:
            i, j = np.unravel_index(np.argmax(np.abs(S - S.T)), S.shape)
            raise AsymmetricMatrix(f"entries ({i + 1},{j + 1}) and ({j + 1},{i + 1}) differ", row=int(i) + 1, col=int(j) + 1)
    else:
        raise InvalidSpec(f"unknown input kind {kind!r}; expected raw or cov")
    if N < 2:
        raise MissingN(f"sample size must be at least 2, got {N}")
    S = 0.5 * (S + S.T)
    eig_min = float(np.linalg.eigvalsh(S)[0]) if S.size else 0.0
    if not eig_min > 0:
        raise NotPositiveDefinite(f"covariance matrix is not positive definite (smallest eigenvalue {eig_min:.3g})")
    try:
        return SampleCov(S, N)
    except ModelError as exc:
        raise NotPositiveDefinite(str(exc)) from None


def read_hierarchy(path) -> HierarchyTree:
    """Tree from ``child parent`` lines (1-based, root given as ``1 0``)."""
    edges = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 2 or not all(p.lstrip("-").isdigit() for p in parts):
            raise NonNumericCell(f"line {lineno}: expected 'child parent'", row=lineno, col=1)
        edges.append((int(parts[0]), int(parts[1])))
    try:
        return HierarchyTree.from_edges(edges)
    except (ModelError, ValueError) as exc:
        raise InvalidSpec(f"invalid hierarchy: {exc}") from None


def read_structure(path, J: int) -> np.ndarray:
    """Per-item group labels from ``item,group`` rows (1-based items)."""
    table = read_numeric_csv(path)
    if table.shape[1] != 2:
        raise InvalidSpec("structure file needs two columns: item,group")
    labels = np.zeros(J, dtype=int)
    seen = set()
    for item, group in table:
        if item != int(item) or group != int(group):
            raise InvalidSpec("item and group must be integers")
        i = int(item)
        if not 1 <= i <= J:
            raise StructureMismatch(f"item {i} outside 1..{J}")
        if i in seen:
            raise StructureMismatch(f"item {i} listed twice")
        seen.add(i)
        labels[i - 1] = int(group)
    return labels


# ---------------------------------------------------------------------------
# serialisation


def _clean(value):
    if isinstance(value, dict):
        return {k: _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, np.ndarray):
        return _clean(value.tolist())
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def matrix_json(M) -> dict:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    return {"rows": int(M.shape[0]), "cols": int(M.shape[1]), "data": M.ravel().tolist()}


def matrix_from_json(obj) -> np.ndarray:
    return np.array(obj["data"], dtype=float).reshape(obj["rows"], obj["cols"])


def tool_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        from . import __version__

        return __version__


def _config_from_args(args) -> AlmConfig:
    return AlmConfig(
        n_starts=args.starts,
        seed=args.seed,
        delta1=args.delta1,
        delta2=args.delta2,
        T_max=args.tmax,
        n_jobs=args.jobs,
    )


def _manifest(args, config: AlmConfig | None, inputs, timings: dict | None) -> dict:
    flags = {k: v for k, v in vars(args).items() if k != "handler"}
    out = {
        "subcommand": args.command,
        "inputs": [str(p) for p in inputs],
        "flags": flags,
        "config": asdict(config) if config is not None else None,
        "seed": getattr(args, "seed", None),
        "output": getattr(args, "out", None),
        "tool_version": tool_version(),
        "threads_env": THREADS_ENV,
    }
    if timings is not None:
        out["timings"] = timings
    return out


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _dump(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=False, allow_nan=False) + "\n"


def fit_json(fit, config: AlmConfig, manifest: dict) -> dict:
    structure = fit.structure if fit.structure is not None else None
    return {
        "lambda": matrix_json(fit.params.Lambda),
        "phi": matrix_json(fit.phi),
        "psi": fit.params.psi.tolist(),
        "structure": structure.tolist() if structure is not None else None,
        "membership": matrix_json(fit.membership.astype(float)),
        "loss": fit.loss,
        "bic": fit.bic,
        "converged": bool(fit.converged),
        "iterations": int(fit.outer_iters),
        "restarts": int(fit.restarts_used),
        "max_second_largest": fit.max_second_largest,
        "delta2": config.delta2,
        "manifest": manifest,
    }


# ---------------------------------------------------------------------------
# subcommands


def cmd_fit(args) -> int:
    t0 = time.perf_counter()
    data = ingest(args.input, args.kind, args.n)
    t_ingest = time.perf_counter() - t0
    config = _config_from_args(args)
    if args.hierarchy:
        tree = read_hierarchy(args.hierarchy)
        constraints = hierarchy_constraint_pairs(tree)
        inputs = [args.input, args.hierarchy]
    else:
        if args.groups is None or args.groups < 1:
            raise InvalidSpec("give --groups G (at least 1) or --hierarchy FILE")
        constraints = bifactor_constraint_pairs(args.groups)
        inputs = [args.input]
    if constraints.n_factors >= data.J:
        raise InvalidSpec(f"{constraints.n_factors} factors need more than {data.J} items")
    fit = multi_start_fit(data, constraints, config)
    timings = {"ingest_s": t_ingest, "total_s": time.perf_counter() - t0}
    _emit(_dump(fit_json(fit, config, _manifest(args, config, inputs, timings))), args.out)
    return 0


def cmd_select_g(args) -> int:
    t0 = time.perf_counter()
    data = ingest(args.input, args.kind, args.n)
    if args.gmin < 1 or args.gmax < args.gmin:
        raise InvalidSpec("need 1 <= gmin <= gmax")
    if args.gmax + 1 >= data.J:
        raise InvalidSpec(f"gmax={args.gmax} needs more than {args.gmax + 1} items")
    config = _config_from_args(args)
    sweep = select_g(data, range(args.gmin, args.gmax + 1), config)
    chosen_fit = sweep.fits[sweep.candidates.index(sweep.chosen)]
    timings = {"total_s": time.perf_counter() - t0}
    out = {
        "candidates": sweep.candidates,
        "losses": sweep.losses,
        "bics": sweep.bics,
        "failed": sweep.failed,
        "chosen": sweep.chosen,
        "fit": fit_json(chosen_fit, config, {}),
        "manifest": _manifest(args, config, [args.input], timings),
    }
    del out["fit"]["manifest"]
    _emit(_dump(out), args.out)
    return 0


CSV_COLUMNS = ("rep", "failed", *METRIC_KEYS, "error")


def report_csv(report) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in report.rows:
        writer.writerow(["" if row.get(k) is None else _csv_value(row.get(k)) for k in CSV_COLUMNS])
    agg = report.aggregates()
    writer.writerow(["mean", agg["n_failed"], *["" if agg[k] is None else repr(agg[k]) for k in METRIC_KEYS], ""])
    return buf.getvalue()


def _csv_value(v):
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, float):
        return repr(v)
    return v


def cmd_simulate(args) -> int:
    try:
        spec = StudySpec(
            kind=args.study,
            J=args.j,
            N=args.n,
            G=args.g if args.g is not None else 0,
            candidates=tuple(args.candidates) if args.candidates else None,
            disjoint=args.disjoint,
        )
    except ValueError as exc:
        raise InvalidSpec(str(exc)) from None
    if args.reps < 0:
        raise InvalidSpec("--reps must be non-negative")
    config = _config_from_args(args)
    report = run_study(spec, args.reps, args.seed, config, n_jobs=args.jobs)
    if args.out_format == "csv":
        text = report_csv(report)
    else:
        # no wall-clock timings: identical arguments give identical bytes
        text = _dump({**report.to_dict(), "manifest": _manifest(args, config, [], None)})
    _emit(text, args.out)
    return 0


def cmd_check_id(args) -> int:
    Lambda = read_numeric_csv(args.lambda_path)
    if Lambda.shape[1] < 2:
        raise InvalidSpec("loading matrix needs a general column and at least one group column")
    structure = read_structure(args.structure, Lambda.shape[0])
    phi = read_numeric_csv(args.phi) if args.phi else None
    report = check_conditions(
        Lambda, structure, phi=phi, zero_tol=args.zero_tol, rank_tol=args.rank_tol, ar_tries=args.ar_tries
    )
    out = report.to_dict()
    out["Q_sets"] = [[i + 1 for i in q] for q in out["Q_sets"]]
    inputs = [args.lambda_path, args.structure] + ([args.phi] if args.phi else [])
    out["manifest"] = _manifest(args, None, inputs, None)
    _emit(_dump(out), args.out)
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_fit_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--input", required=True, help="CSV file of raw data or a covariance matrix")
    p.add_argument("--kind", choices=("raw", "cov"), default="raw")
    p.add_argument("--n", type=int, default=None, help="sample size (required for --kind cov)")
    _add_alm_flags(p)


def _add_alm_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--starts", type=int, default=50, help="random starting points (default 50)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--delta1", type=float, default=1e-2, help="parameter-change tolerance (1e-4 for tighter fits)")
    p.add_argument("--delta2", type=float, default=1e-2, help="loading threshold for structure and stopping")
    p.add_argument("--tmax", type=int, default=1000, help="maximum outer iterations")
    p.add_argument("--jobs", type=int, default=None, help=f"worker processes (default: ${THREADS_ENV} or all cores)")
    p.add_argument("--out", default=None, help="output file (default stdout)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bifactor-alm", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {tool_version()}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit an exact bi-factor or hierarchical model")
    _add_fit_flags(p)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--groups", type=int, help="number of group factors G")
    group.add_argument("--hierarchy", help="file of 'child parent' lines, root as '1 0'")
    p.set_defaults(handler=cmd_fit)

    p = sub.add_parser("select-g", help="choose the number of group factors by BIC")
    _add_fit_flags(p)
    p.add_argument("--gmin", type=int, required=True)
    p.add_argument("--gmax", type=int, required=True)
    p.set_defaults(handler=cmd_select_g)

    p = sub.add_parser("simulate", help="run a simulation study")
    p.add_argument("--study", required=True, help="study1, study2 or hier")
    p.add_argument("--j", type=int, required=True)
    p.add_argument("--g", type=int, default=None)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--reps", type=int, required=True)
    p.add_argument("--candidates", type=int, nargs="+", default=None, help="study2 candidate G values (default G-1 G G+1)")
    p.add_argument("--disjoint", action="store_true", help="hier: blocks do not share boundary items")
    p.add_argument("--out-format", choices=("csv", "json"), default="json")
    _add_alm_flags(p)
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("check-id", help="check identifiability conditions of a loading pattern")
    p.add_argument("--lambda", dest="lambda_path", required=True, help="CSV loading matrix, general column first")
    p.add_argument("--structure", required=True, help="CSV of item,group rows")
    p.add_argument("--phi", default=None, help="optional CSV factor correlation matrix")
    p.add_argument("--zero-tol", type=float, default=1e-6)
    p.add_argument("--rank-tol", type=float, default=1e-8)
    p.add_argument("--ar-tries", type=int, default=200, help="random restarts in the row-deletion search")
    p.add_argument("--out", default=None)
    p.set_defaults(handler=cmd_check_id)
    return parser


def _error(kind: str, message: str, **details) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": message, **_clean(details)}) + "\n")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except IngestError as exc:
        _error(type(exc).__name__, str(exc), **exc.details)
        return EXIT_INPUT
    except (StructureMismatch, ModelError, OSError) as exc:
        _error(type(exc).__name__, str(exc))
        return EXIT_INPUT
    except AllStartsFailed as exc:
        _error("AllStartsFailed", str(exc))
        return EXIT_NO_FIT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
