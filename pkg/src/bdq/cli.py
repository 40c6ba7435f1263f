"""``bdq`` command line: generate, quantize, transform, compare, calibrate, validate.

Exit status is 0 on success, 2 when a validation check fails and 1 for usage
or input errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from bdq import calibration as cal
from bdq import harness, io
from bdq.errors import BDQError, DivergenceError
from bdq.flatness import optimize_flatness
from bdq.numerics import OutlierProfile, make_rng, sample_matrix
from bdq.quantizer import GRANULARITIES, MODES, QuantSpec, quant_error, quantize, save_quantized
from bdq.transforms import TransformPair, save_pair

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _emit(args, payload: dict, csv_text: str | None = None) -> None:
    """Write ``payload`` to ``--out`` (or stdout) in the requested format."""
    if args.format == "csv":
        if csv_text is None:
            raise UsageError("this command has no CSV form; use --format json")
        text = csv_text
    else:
        text = io.dumps_json(payload)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def _write_matrix(path: str, W) -> None:
    if path.endswith(".csv"):
        io.write_csv_matrix(path, W)
    else:
        io.write_matrix(path, W)


def _spec(args) -> QuantSpec:
    return QuantSpec(args.bits, args.mode, args.granularity, getattr(args, "clip", None))


def cmd_gen(args) -> int:
    if not args.out:
        raise UsageError("gen needs --out")
    profile = OutlierProfile(args.sigma, args.k, args.outlier_frac, args.seed)
    _write_matrix(args.out, sample_matrix(profile, args.rows, args.cols))
    return EXIT_OK


def cmd_quantize(args) -> int:
    W = io.load_any(args.matrix)
    q = quantize(W, _spec(args))
    if args.save:
        save_quantized(args.save, q)
    payload = {"header": q.header(), "error": quant_error(W, q).to_dict()}
    _emit(args, payload)
    return EXIT_OK


def cmd_flatness(args) -> int:
    W = io.load_any(args.matrix)
    state, t = optimize_flatness(W, tol=args.tol, max_iters=args.max_iters, restarts=args.restarts, seed=args.seed)
    payload = state.to_dict()
    payload["d1"] = [float(v) for v in t.d1]
    payload["d2"] = [float(v) for v in t.d2]
    _emit(args, payload)
    return EXIT_OK


def cmd_transform(args) -> int:
    """Build one pipeline's transform for a matrix and write the transformed weight."""
    W = io.load_any(args.matrix)
    cfg = harness.CompareConfig(bits=args.bits, seed=args.seed)
    x_cal = make_rng(args.seed).standard_normal((cfg.batch, W.shape[0]))
    app = harness.build_pipeline(args.pipeline, W, cfg, x_cal=x_cal)
    V = app.to_weight(W)
    if args.save:
        _write_matrix(args.save, V)
    _emit(args, {"pipeline": args.pipeline, "shape": list(V.shape), "details": app.details, "max_abs": float(np.max(np.abs(V)))})
    return EXIT_OK


def _pipelines(text: str) -> list[str]:
    names = [p.strip() for p in text.split(",") if p.strip()]
    bad = [p for p in names if p not in harness.PIPELINES]
    if bad or not names:
        raise UsageError(f"unknown pipeline(s) {bad}; choose from {', '.join(harness.PIPELINES)}")
    return names


def cmd_compare(args) -> int:
    cfg = harness.CompareConfig(
        bits=args.bits,
        act_bits=args.act_bits,
        mode=args.mode,
        granularity=args.granularity,
        batch=args.batch,
        seed=args.seed,
        timing=args.timing,
    )
    pipelines = _pipelines(args.pipelines)
    if args.matrix:
        report = harness.compare(io.load_any(args.matrix), pipelines, cfg)
    else:
        if not args.sweep:
            raise UsageError("compare needs a matrix path or --sweep N")
        report = harness.sweep(
            args.rows,
            args.cols,
            range(args.seed, args.seed + args.sweep),
            sigma=args.sigma,
            k=args.k,
            outlier_frac=args.outlier_frac,
            pipelines=pipelines,
            cfg=cfg,
        )
    if args.out and args.format == "json":
        # JSON is canonical; a CSV mirror is written next to it.
        io.write_json(args.out, report.to_dict())
        Path(args.out).with_suffix(".csv").write_text(report.to_csv())
    else:
        _emit(args, report.to_dict(), report.to_csv())
    return EXIT_OK


def cmd_calibrate(args) -> int:
    if not args.out:
        raise UsageError("calibrate needs --out (base path for the trace and pair files)")
    dims = tuple(int(d) for d in args.dims.split(","))
    cfg = cal.CalibrationConfig(
        learning_rate=args.lr,
        epochs=args.epochs,
        delta=args.delta,
        batch_size=args.batch_size,
        seed=args.seed,
        loss=args.loss,
        calib_set_size=args.calib_size,
        learn_rotation=args.learn_rotation,
        ema=args.ema,
    )
    spec = QuantSpec(args.bits, args.mode, "per_tensor")
    net = cal.toy_network(dims, seed=args.seed, n_outliers=args.n_outliers, outlier_scale=args.outlier_scale)
    rng = make_rng(10_000 + args.seed)
    X = rng.standard_normal((cfg.calib_set_size, dims[0]))
    Xh = rng.standard_normal((cfg.heldout_size, dims[0]))
    pairs = [
        TransformPair.rotation(*L.W.shape, seed=args.seed * 10 + i) if args.rotation else TransformPair.identity(*L.W.shape)
        for i, L in enumerate(net.layers)
    ]
    try:
        res = cal.calibrate(net.with_pairs(pairs), X, spec, cfg, heldout_inputs=Xh)
    except DivergenceError as exc:
        cal.CalibrationResult(pairs, exc.trace).write_trace_csv(args.out + "_trace.csv")
        raise
    base = Path(args.out)
    res.write_trace_csv(str(base) + "_trace.csv")
    for i, P in enumerate(res.pairs):
        save_pair(f"{base}_pair{i}", P)
    summary = {
        "config": cfg.to_dict(),
        "dims": list(dims),
        "heldout_mse_identity": cal.output_mse(net, Xh, spec),
        "heldout_mse_start": cal.output_mse(net, Xh, spec, pairs=pairs),
        "heldout_mse_calibrated": cal.output_mse(net, Xh, spec, pairs=res.pairs),
        "final_train_loss": res.trace[-1].train_loss if res.trace else None,
        "final_heldout_loss": res.trace[-1].heldout_loss if res.trace else None,
    }
    io.write_json(str(base) + "_summary.json", summary)
    return EXIT_OK


def cmd_validate(args) -> int:
    report = harness.run_validation(args.suite, seed=args.seed)
    _emit(args, report.to_dict())
    return EXIT_OK if report.passed else EXIT_VALIDATION


def cmd_report(args) -> int:
    """Re-emit a saved comparison report as JSON, CSV or a fixed-width table."""
    d = json.loads(Path(args.report).read_text())
    runs = d["runs"] if "runs" in d else [d]
    rows = [(r["seed"], p) for r in runs for p in r["pipelines"]]
    if args.format == "csv":
        lines = [",".join(("seed",) + harness.REPORT_COLUMNS)]
        for seed, p in rows:
            cells = ["" if p[c] is None else (p[c] if isinstance(p[c], str) else repr(p[c])) for c in harness.REPORT_COLUMNS]
            lines.append(",".join([str(seed)] + cells))
        text = "\n".join(lines) + "\n"
    elif not args.table:
        text = io.dumps_json(d)
    else:
        head = f"{'seed':>5} {'pipeline':<8} {'F_before':>10} {'F_after':>10} {'weight_mse':>12} {'output_mse':>12} {'occupancy':>10}"
        lines = [head]
        for seed, p in rows:
            lines.append(
                f"{seed:>5} {p['pipeline']:<8} {p['flatness_before']:>10.4f} {p['flatness_after']:>10.4f} "
                f"{p['weight_mse']:>12.5g} {p['output_mse']:>12.5g} {p['bin_occupancy_uniformity']:>10.4f}"
            )
        text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _add_quant_args(p, bits=4, mode="paper_max_abs"):
    p.add_argument("--bits", type=int, default=bits)
    p.add_argument("--mode", choices=MODES, default=mode)
    p.add_argument("--granularity", choices=GRANULARITIES, default="per_tensor")


def build_parser() -> argparse.ArgumentParser:
    def globals_parser(defaults: bool) -> argparse.ArgumentParser:
        # Global flags are accepted before or after the subcommand; the
        # subcommand copy suppresses defaults so it cannot undo the earlier value.
        g = argparse.ArgumentParser(add_help=False)
        d = (lambda v: v) if defaults else (lambda v: argparse.SUPPRESS)
        g.add_argument("--seed", type=int, default=d(0))
        g.add_argument("--out", default=d(None), help="output path (stdout when omitted)")
        g.add_argument("--format", choices=("json", "csv"), default=d("json"))
        return g

    parser = _Parser(prog="bdq", description=__doc__.splitlines()[0], parents=[globals_parser(True)])
    common = globals_parser(False)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", parents=[common], help="sample a Gaussian matrix with planted outliers")
    p.add_argument("rows", type=int)
    p.add_argument("cols", type=int)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--k", type=float, default=1.0)
    p.add_argument("--outlier-frac", type=float, default=0.0)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("quantize", parents=[common], help="quantize a matrix and report the residual")
    p.add_argument("matrix")
    _add_quant_args(p)
    p.add_argument("--clip", type=float, default=None)
    p.add_argument("--save", default=None, help="base path for the .json header and .bdqi codes")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("flatness", parents=[common], help="minimize Flatness over diagonal scalings")
    p.add_argument("matrix")
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--max-iters", type=int, default=10_000)
    p.add_argument("--restarts", type=int, default=16)
    p.set_defaults(func=cmd_flatness)

    p = sub.add_parser("transform", parents=[common], help="apply one pipeline's transform to a matrix")
    p.add_argument("matrix")
    p.add_argument("--pipeline", choices=harness.PIPELINES, default="bdq")
    p.add_argument("--bits", type=int, default=4)
    p.add_argument("--save", default=None, help="write the transformed weight here (.csv or BDQ1)")
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("compare", parents=[common], help="compare pipelines on one matrix or a seed sweep")
    p.add_argument("matrix", nargs="?")
    p.add_argument("--pipelines", default=",".join(harness.PIPELINES))
    _add_quant_args(p, mode="symmetric_signed")
    p.add_argument("--act-bits", type=int, default=4)
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--timing", action="store_true", help="record wall time (makes reports run-dependent)")
    p.add_argument("--sweep", type=int, default=0, help="number of seeds to sample when no matrix is given")
    p.add_argument("--rows", type=int, default=64)
    p.add_argument("--cols", type=int, default=64)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--k", type=float, default=20.0)
    p.add_argument("--outlier-frac", type=float, default=0.005)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("calibrate", parents=[common], help="calibrate transform pairs of a toy network")
    p.add_argument("--dims", default="16,16,8")
    p.add_argument("--n-outliers", type=int, default=2)
    p.add_argument("--outlier-scale", type=float, default=20.0)
    p.add_argument("--bits", type=int, default=4)
    p.add_argument("--mode", choices=MODES, default="symmetric_signed")
    p.add_argument("--lr", type=float, default=5e-3)
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--delta", type=float, default=0.5)
    p.add_argument("--loss", choices=cal.LOSSES, default="ce")
    p.add_argument("--calib-size", type=int, default=128)
    p.add_argument("--batch-size", type=int, default=0)
    p.add_argument("--ema", type=float, default=0.0)
    p.add_argument("--learn-rotation", action="store_true")
    p.add_argument("--no-rotation", dest="rotation", action="store_false", help="start from identity pairs")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("validate", parents=[common], help="run oracle and invariant checks")
    p.add_argument("--suite", choices=harness.SUITES, default="all")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("report", parents=[common], help="render a saved comparison report")
    p.add_argument("report")
    p.add_argument("--table", action="store_true", help="fixed-width summary instead of JSON")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, BDQError, ValueError, OSError) as exc:
        print(f"bdq {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
