"""Command line: ``dipreg register``, ``dipreg bench`` and ``dipreg synth``.

Exit codes: 0 success, 1 usage or configuration error, 2 I/O error,
3 numerical abort.  Failures print one ``dipreg: error=<kind> reason=<json>``
line on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, method_of, read_config
from .engine import ImagePair, NumericalError
from .fileio import (FormatError, load_image, save_csv, save_detj, save_field, save_image,
                     save_json)
from .metrics import METRIC_FIELDS, aggregate, evaluate_pair, ssim, table_view
from .runner import (BASELINE_LABEL, MethodSpec, discover_suite, run_method, run_suite,
                     spec_from_manifest, synth_suite)
from .warp import jacobian_det

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3

logger = logging.getLogger("dipreg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _fail(kind: str, message: str, code: int) -> int:
    print(f"dipreg: error={kind} reason={json.dumps(message)}", file=sys.stderr)
    return code


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dipreg", description="Deep-image-prior deformable registration.")
    parser.add_argument("--version", action="version", version=f"dipreg {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    reg = sub.add_parser("register", help="register one image pair")
    reg.add_argument("--input", required=True, help="moving image (PGM or PNG)")
    reg.add_argument("--target", required=True, help="fixed image (PGM or PNG)")
    reg.add_argument("--method", choices=("dip", "baseline"), default=None)
    reg.add_argument("--config", help="flat key = value configuration file")
    reg.add_argument("--out-dir", required=True)
    reg.add_argument("--seed", type=int, default=None)

    bench = sub.add_parser("bench", help="run a suite of pairs under several methods")
    bench.add_argument("--suite", required=True,
                       help="directory of <name>_input/<name>_target pairs or a synth manifest")
    bench.add_argument("--methods", default="dip,baseline",
                       help="comma list of dip, baseline, baseline@<lambda>")
    bench.add_argument("--config", help="flat key = value configuration file")
    bench.add_argument("--out", required=True, help="aggregate report JSON path")
    bench.add_argument("--rows", help="per-pair CSV path (default: next to --out)")
    bench.add_argument("--seed", type=int, default=None)
    bench.add_argument("--jobs", type=int, default=1, help="pairs to run concurrently")

    syn = sub.add_parser("synth", help="write a synthetic suite directory")
    syn.add_argument("--manifest", help="synth manifest (pairs, size, max_displacement, ...)")
    syn.add_argument("--pairs", type=int)
    syn.add_argument("--size", type=int)
    syn.add_argument("--max-displacement", type=float)
    syn.add_argument("--seed", type=int)
    syn.add_argument("--out-dir", required=True)
    return parser


def _load_values(path) -> dict[str, str]:
    return read_config(path) if path else {}


def cmd_register(args) -> int:
    values = _load_values(args.config)
    method = MethodSpec.parse(args.method or method_of(values))
    pair = ImagePair(load_image(args.input), load_image(args.target))
    result = run_method(pair, method, values, args.seed)
    metrics = evaluate_pair(pair, result)
    metrics = dataclasses.replace(metrics, pair=Path(args.input).stem)

    out = Path(args.out_dir)
    det = jacobian_det(result.phi)
    save_image(out / "warped.pgm", result.warped)
    save_field(out / "field.dipf", result.u)
    save_detj(out / "detj.pgm", det)
    seed = args.seed if args.seed is not None else int(values.get("seed", 0))
    save_json(out / "metrics.json", {
        **metrics.to_dict(),
        "unregistered_ssim": ssim(pair.fixed[:1], pair.moving[:1]),
        "iterations_run": result.iterations_run,
        "seed": seed,
        **({"label": BASELINE_LABEL} if method.name == "baseline" else {}),
    })
    save_csv(out / "loss.csv", ["iteration", "loss"], result.loss_curve)
    save_json(out / "run.json", {"elapsed_seconds": result.elapsed, "method": method.label})
    logger.info("ssim %.4f mean detJ %.4f", metrics.ssim, metrics.mean_detJ)
    return EXIT_OK


ROW_HEADER = ["pair", "method", "status", *METRIC_FIELDS, "unregistered_ssim", "error"]


def _row_cells(row) -> list:
    m = row.metrics
    cells = [row.pair, row.method, row.status]
    cells += [getattr(m, f) if m else "" for f in METRIC_FIELDS]
    cells += [row.unregistered_ssim if row.unregistered_ssim is not None else "", row.error]
    return cells


def build_report(rows, methods) -> dict:
    ok = [r.metrics for r in rows if r.status == "ok"]
    report = {
        "methods": [m.label for m in methods],
        "pairs": len({r.pair for r in rows}),
        "rows": len(rows),
        "failures": [{"pair": r.pair, "method": r.method, "error": r.error}
                     for r in rows if r.status != "ok"],
    }
    if ok:
        agg = aggregate(ok)
        report["aggregate"] = agg
        report["table"] = table_view(agg)
    unreg = [r.unregistered_ssim for r in rows if r.unregistered_ssim is not None]
    if unreg:
        report["unregistered_ssim_mean"] = float(np.mean(unreg))
    if any(m.name == "baseline" for m in methods):
        report["baseline_label"] = BASELINE_LABEL
    return report


def cmd_bench(args) -> int:
    values = _load_values(args.config)
    methods = [MethodSpec.parse(tok) for tok in args.methods.split(",") if tok.strip()]
    if not methods:
        raise UsageError("--methods is empty")
    items = discover_suite(args.suite)
    rows = run_suite(items, methods, values, args.seed, args.jobs)
    out = Path(args.out)
    rows_path = Path(args.rows) if args.rows else out.with_suffix(".csv")
    save_csv(rows_path, ROW_HEADER, [_row_cells(r) for r in rows])
    save_json(out, build_report(rows, methods))
    if all(r.status != "ok" for r in rows):
        return _fail("numeric", "every pair failed", EXIT_NUMERIC)
    return EXIT_OK


def cmd_synth(args) -> int:
    values = read_config(args.manifest) if args.manifest else {}
    for key, val in (("pairs", args.pairs), ("size", args.size),
                     ("max_displacement", args.max_displacement), ("seed", args.seed)):
        if val is not None:
            values[key] = str(val)
    n, spec = spec_from_manifest(values)
    out = Path(args.out_dir)
    for item in synth_suite(n, spec):
        pair, gt = item.load()
        save_image(out / f"{item.name}_input.pgm", pair.moving)
        save_image(out / f"{item.name}_target.pgm", pair.fixed)
        save_field(out / f"{item.name}_gt.dipf", gt)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_help(sys.stderr)
        return _fail("usage", str(exc), EXIT_USAGE)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handlers = {"register": cmd_register, "bench": cmd_bench, "synth": cmd_synth}
    if args.command is None:
        parser.print_help(sys.stderr)
        return _fail("usage", "a command is required", EXIT_USAGE)
    try:
        return handlers[args.command](args)
    except (UsageError, ConfigError) as exc:
        return _fail("usage", str(exc), EXIT_USAGE)
    except NumericalError as exc:
        return _fail("numeric", str(exc), EXIT_NUMERIC)
    except (OSError, FormatError) as exc:
        return _fail("io", str(exc), EXIT_IO)
    except ValueError as exc:
        return _fail("usage", str(exc), EXIT_USAGE)


if __name__ == "__main__":
    sys.exit(main())
